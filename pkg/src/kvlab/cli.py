"""Command-line entry point: ``kvlab --config run.json --out DIR [--seed N] [--threshold X]``."""

from __future__ import annotations

import argparse
import json
import sys

from .report import ConfigError, RunConfig, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvlab", description="Run one KV-cache experiment described by a JSON config.")
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--out", help="output directory (overrides out_dir in the config)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--threshold", type=float, help="manual variance threshold for agnostic keys")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if isinstance(raw, dict):
            if args.out is not None:
                raw["out_dir"] = args.out
            if args.seed is not None:
                raw["seed"] = args.seed
            if args.threshold is not None:
                raw["threshold"] = args.threshold
        cfg = RunConfig.from_dict(raw)
    except OSError as exc:
        return _fail("config_unreadable", str(exc), 2)
    except json.JSONDecodeError as exc:
        return _fail("config_not_json", str(exc), 2)
    except (ConfigError, TypeError) as exc:
        return _fail("invalid_config", str(exc), 2)
    try:
        manifest = run(cfg)
    except ConfigError as exc:
        return _fail("invalid_config", str(exc), 2)
    except Exception as exc:  # noqa: BLE001  reported as JSON, never a traceback
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps({"out_dir": cfg.out_dir, "artifacts": len(manifest["artifacts"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
