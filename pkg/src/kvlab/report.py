"""Run configuration, experiment runners, paired-task accounting and the run manifest."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .interventions import (NOISE_STUDY_THRESHOLD, knockout_study, spec_targets, study_inputs,
                            write_report_csv, write_report_json)
from .key_analysis import (ClassificationUnavailable, classify_keys, export_key_pca, variance_map,
                           write_pca_csv, write_variance_csv)
from .model import ModelConfig, ModelWeights, MultimodalInput, PlantSpec, build_model, forward, load_weights
from .plants import Readout, build_lab_model
from .prefix_lab import PREFIX_KINDS, PREFIX_TASKS, kv_delta, prefix_table, resolve_condition, write_prefix_csv
from .probes import TASK_METRIC, layer_head_sweep, pooled_similarity_choice, write_probe_csv
from .synthdata import COLORS, SHAPES, ObjectSpec, SceneSpec, SyntheticScene, gen_episode, gen_scene, tokenize

EXPERIMENTS = ("sweep", "variance", "knockout", "prefix", "paired", "pca-export")
MODEL_SOURCES = ("random", "lab")
PAIRED_CSV_COLUMNS = ("item", "answer", "model_choice", "value_choice", "model_correct", "value_correct")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# paired accounting


@dataclass(frozen=True)
class PairedAccount:
    both_correct: int
    value_only: int
    model_only: int
    both_wrong: int

    @property
    def n(self) -> int:
        return self.both_correct + self.value_only + self.model_only + self.both_wrong

    @property
    def union_accuracy(self) -> float:
        return (self.both_correct + self.value_only + self.model_only) / self.n

    def to_dict(self) -> dict:
        return {"both_correct": self.both_correct, "value_only": self.value_only, "model_only": self.model_only,
                "both_wrong": self.both_wrong, "n": self.n, "union_accuracy": self.union_accuracy}


def paired_account(model_correct: Sequence, value_correct: Sequence) -> PairedAccount:
    m = np.asarray(model_correct, dtype=bool).reshape(-1)
    v = np.asarray(value_correct, dtype=bool).reshape(-1)
    if m.shape != v.shape:
        raise ValueError(f"length mismatch: {m.size} model answers vs {v.size} value answers")
    if m.size == 0:
        raise ValueError("need at least one item")
    return PairedAccount(both_correct=int((m & v).sum()), value_only=int((~m & v).sum()),
                         model_only=int((m & ~v).sum()), both_wrong=int((~m & ~v).sum()))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    experiment: str
    seed: int = 0
    out_dir: str = "out"
    model: dict = field(default_factory=dict)  # {"source", "config", "plant"}
    weights_path: str | None = None
    task: str | None = None
    n_episodes: int = 4
    sizes: dict = field(default_factory=dict)
    n_scenes: int = 16
    n_items: int = 200
    n_options: int = 2
    layer: int | None = None
    kv_head: int | None = None
    layer_groups: list = field(default_factory=lambda: ["late"])
    threshold: float | None = None
    reselect: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment'")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        for name in ("seed", "n_episodes", "n_scenes", "n_items", "n_options"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer")
        for name in ("n_episodes", "n_items"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.n_scenes < 2:
            raise ConfigError("n_scenes must be at least 2")
        if self.n_options < 2:
            raise ConfigError("n_options must be at least 2")
        for name in ("layer", "kv_head"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 0):
                raise ConfigError(f"{name} must be a nonnegative integer")
        if self.threshold is not None and not (isinstance(self.threshold, (int, float)) and np.isfinite(self.threshold)):
            raise ConfigError("threshold must be a finite number")
        if not isinstance(self.model, dict):
            raise ConfigError("model must be an object")
        unknown = sorted(set(self.model) - {"source", "config", "plant"})
        if unknown:
            raise ConfigError(f"unknown model keys: {unknown}")
        if self.model.get("source", self.default_source()) not in MODEL_SOURCES:
            raise ConfigError(f"model.source must be one of {MODEL_SOURCES}")
        if self.weights_path is not None and not Path(self.weights_path).is_file():
            raise ConfigError(f"weights_path does not exist: {self.weights_path}")
        if self.task is not None and self.task not in TASK_METRIC:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.experiment == "prefix" and self.task is not None and self.task not in PREFIX_TASKS:
            raise ConfigError(f"prefix experiment supports {PREFIX_TASKS}")
        bad = [g for g in self.layer_groups if g not in ("early", "middle", "late")]
        if bad or not self.layer_groups:
            raise ConfigError(f"layer_groups must be a nonempty subset of early/middle/late, got {self.layer_groups}")

    def default_source(self) -> str:
        return "lab" if self.experiment in ("knockout", "prefix") else "random"

    def sha256(self) -> str:
        """Hash of everything that affects artifacts (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def child_seeds(seed: int, label: str, n: int) -> list[int]:
    """Per-item seeds derived from the experiment seed and a stream label."""
    rng = np.random.default_rng([seed, zlib.crc32(label.encode())])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def load_model(cfg: RunConfig):
    """(weights, readout or None). The lab model brings its own readout."""
    if cfg.weights_path is not None:
        return load_weights(cfg.weights_path), None
    m = cfg.model
    conf = dict(m.get("config", {}))
    conf.setdefault("seed", cfg.seed)
    try:
        config = ModelConfig.from_dict(conf)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    if m.get("source", cfg.default_source()) == "lab":
        lab = build_lab_model(config.seed, config)
        return lab.weights, lab.readout
    plant = PlantSpec.from_dict(m["plant"]) if m.get("plant") else None
    return build_model(config, plant), None


def _cell(cfg: RunConfig, weights: ModelWeights) -> tuple[int, int]:
    layer = cfg.layer if cfg.layer is not None else 0
    head = cfg.kv_head if cfg.kv_head is not None else 0
    c = weights.config
    if layer >= c.n_layers or head >= c.n_kv_heads:
        raise ConfigError(f"cell ({layer}, {head}) outside the model")
    return layer, head


def _scenes(cfg: RunConfig, label: str, n: int) -> list[SyntheticScene]:
    spec = SceneSpec(height=int(cfg.sizes.get("height", 8)), width=int(cfg.sizes.get("width", 8)),
                     patch_dim=int(cfg.sizes.get("patch_dim", 48)))
    return [gen_scene(s, dataclasses.replace(spec, n_objects=1 + s % 2)) for s in child_seeds(cfg.seed, label, n)]


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# experiments; each returns the list of files it wrote


def run_sweep(cfg: RunConfig, out: Path) -> list[Path]:
    weights, _ = load_model(cfg)
    task = cfg.task or "fg_seg"
    if task == "existence_qa":
        raise ConfigError("existence_qa has no value probe; use the knockout experiment")
    episodes = [gen_episode(task, s, cfg.sizes) for s in child_seeds(cfg.seed, f"episodes/{task}", cfg.n_episodes)]
    res = layer_head_sweep(weights, episodes, task)
    grid = out / "sweep.csv"
    write_probe_csv(res.results(), grid)
    summary = out / "sweep_summary.json"
    _write_json({"task": task, "metric": TASK_METRIC[task], "per_layer_max": [float(v) for v in res.per_layer_max],
                 "global_max": {"layer": res.global_max.layer, "kv_head": res.global_max.kv_head,
                                "value": res.global_max.value}}, summary)
    return [grid, summary]


def run_variance(cfg: RunConfig, out: Path) -> list[Path]:
    weights, _ = load_model(cfg)
    vmap = variance_map(weights, _scenes(cfg, "variance", cfg.n_scenes))
    try:
        cls = classify_keys(vmap, cfg.threshold)
        info = {"threshold": cls.threshold, "agnostic": [list(h) for h in cls.heads("agnostic")],
                "layer_groups": cls.layer_groups}
    except ClassificationUnavailable as exc:
        cls, info = None, {"threshold": None, "unavailable": str(exc)}
    path = out / "variance.csv"
    write_variance_csv(vmap, path, cls)
    summary = out / "variance_summary.json"
    _write_json({"n_scenes": vmap.n_scenes, **info}, summary)
    return [path, summary]


def run_knockout(cfg: RunConfig, out: Path) -> list[Path]:
    weights, readout = load_model(cfg)
    if readout is None:
        readout = Readout.seeded(weights.config.d_model, cfg.seed)
        threshold = cfg.threshold
    else:
        threshold = NOISE_STUDY_THRESHOLD if cfg.threshold is None else cfg.threshold
    scenes, items = study_inputs(cfg.seed, cfg.n_scenes, cfg.n_items)
    cls = classify_keys(variance_map(weights, scenes), threshold)
    runs = knockout_study(weights, readout, cls, items, cfg.seed, cfg.layer_groups)
    rows = [r.row() for r in runs]
    paths = [out / "knockout.json", out / "knockout.csv", out / "knockout_targets.json"]
    write_report_json(rows, paths[0])
    write_report_csv(rows, paths[1])
    _write_json({"threshold": cls.threshold,
                 "runs": [{"condition": r.condition, "layer_group": r.layer_group, "targets": spec_targets(r.spec)}
                          for r in runs]}, paths[2])
    return paths


def run_prefix(cfg: RunConfig, out: Path) -> list[Path]:
    weights, _ = load_model(cfg)
    task = cfg.task or "ref_seg"
    sizes = {"n_distractors": 2, **cfg.sizes}
    episodes = [gen_episode(task, s, sizes) for s in child_seeds(cfg.seed, f"prefix/{task}", cfg.n_episodes)]
    cell = None if cfg.layer is None and cfg.kv_head is None else _cell(cfg, weights)
    rows = prefix_table(weights, episodes, cell, cfg.reselect)
    table = out / "prefix.csv"
    write_prefix_csv(rows, table)
    delta = out / "prefix_delta.csv"
    with open(delta, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("condition", "layer", "kv_head", "delta"))
        ep = episodes[0]
        i = len(ep.scenes) - 1
        for kind in PREFIX_KINDS:
            d = kv_delta(weights, ep.scenes[i], resolve_condition(kind, ep, i))
            for layer in range(d.shape[0]):
                for head in range(d.shape[1]):
                    w.writerow([kind, layer, head, repr(float(d[layer, head]))])
    return [table, delta]


def caption_logprob(weights: ModelWeights, scene: SyntheticScene, text: Sequence[int]) -> float:
    """Log-probability of ``text`` following the image, under the model's own unembedding."""
    res = forward(weights, MultimodalInput((), scene.patches, text))
    b = scene.n_patches
    logits = res.logits[b - 1:b - 1 + len(text)]
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return float(logp[np.arange(len(text)), list(text)].sum())


def paired_items(seed: int, n_items: int, n_options: int) -> list[tuple[SyntheticScene, list[SyntheticScene], int, tuple[int, ...]]]:
    """(query, options, answer, description): the answer option shares the query's object class."""
    items = []
    for s in child_seeds(seed, "paired", n_items):
        rng = np.random.default_rng(s)
        shape, color = SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(3))]
        others = [(sh, c) for sh in SHAPES for c in COLORS if sh != shape]
        query = gen_scene(int(rng.integers(2**31 - 1)), SceneSpec(n_objects=1, objects=(ObjectSpec(shape, color),)))
        answer = int(rng.integers(n_options))
        options = []
        for k in range(n_options):
            sh, c = (shape, color) if k == answer else others[int(rng.integers(len(others)))]
            options.append(gen_scene(int(rng.integers(2**31 - 1)), SceneSpec(n_objects=1, objects=(ObjectSpec(sh, c),))))
        items.append((query, options, answer, tokenize(f"a {color} {shape}")))
    return items


def run_paired(cfg: RunConfig, out: Path) -> list[Path]:
    weights, _ = load_model(cfg)
    layer, head = _cell(cfg, weights)
    rows, model_ok, value_ok = [], [], []
    for i, (query, options, answer, text) in enumerate(paired_items(cfg.seed, cfg.n_items, cfg.n_options)):
        scores = [caption_logprob(weights, o, text) for o in options]
        model_choice = int(np.argmax(scores))
        value_choice = pooled_similarity_choice(weights, query, options, layer, head).chosen
        model_ok.append(model_choice == answer)
        value_ok.append(value_choice == answer)
        rows.append([i, answer, model_choice, value_choice, int(model_ok[-1]), int(value_ok[-1])])
    table = out / "paired.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIRED_CSV_COLUMNS)
        w.writerows(rows)
    summary = out / "paired.json"
    _write_json({"layer": layer, "kv_head": head, **paired_account(model_ok, value_ok).to_dict()}, summary)
    return [table, summary]


def run_pca_export(cfg: RunConfig, out: Path) -> list[Path]:
    weights, _ = load_model(cfg)
    layer, head = _cell(cfg, weights)
    scenes = _scenes(cfg, "pca", cfg.n_scenes)
    path = out / "pca.csv"
    write_pca_csv(export_key_pca(weights, scenes, layer, head), scenes, path)
    return [path]


RUNNERS = {"sweep": run_sweep, "variance": run_variance, "knockout": run_knockout, "prefix": run_prefix,
           "paired": run_paired, "pca-export": run_pca_export}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def run(cfg: RunConfig) -> dict:
    """Run one experiment, write its artifacts and ``manifest.json``; returns the manifest."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = RUNNERS[cfg.experiment](cfg, out)
    manifest = {
        "config_sha256": cfg.sha256(),
        "artifacts": [{"path": os.path.relpath(p, out), "sha256": file_sha256(p)} for p in paths],
        "seed": cfg.seed,
        "version": __version__,
    }
    _write_json(manifest, out / "manifest.json")
    return manifest


def verify_manifest(out_dir) -> bool:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return all(file_sha256(out / a["path"]) == a["sha256"] for a in manifest["artifacts"])
