"""Toy multimodal decoder with grouped-query attention and an explicit KV cache.

The sequence layout is ``[prefix text][image patches][query text]``. A single
full-sequence pass produces logits, the per-layer cache of post-RoPE keys and
values, and optionally a trace of the attention internals.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import masked_softmax, rms_norm

WEIGHTS_FORMAT_VERSION = 1

_ARRAY_FIELDS = (
    "wq", "wk", "bk", "wv", "wo",
    "w_in", "w_out", "attn_gain", "mlp_gain",
    "final_gain", "patch_proj", "tok_emb", "unembed",
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 64
    n_q_heads: int = 8
    n_kv_heads: int = 4
    d_head: int = 8
    vocab_size: int = 256
    patch_dim: int = 48
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_q_heads, self.n_kv_heads, self.d_head, self.vocab_size, self.patch_dim) < 1:
            raise ModelError("all model dimensions must be positive")
        if self.n_q_heads % self.n_kv_heads:
            raise ModelError("n_q_heads must be a multiple of n_kv_heads")
        if self.d_model != self.n_q_heads * self.d_head:
            raise ModelError("d_model must equal n_q_heads * d_head")
        if self.d_head % 2:
            raise ModelError("d_head must be even for rotary pairs")

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PlantSpec:
    """Heads whose image keys are made input-independent by construction.

    For every planted ``(layer, kv_head)`` the key projection columns are
    scaled by ``input_gain`` and the key bias is set to ``bias_scale`` times a
    seeded unit vector.
    """

    heads: tuple[tuple[int, int], ...] = ()
    input_gain: float = 0.0
    bias_scale: float = 5.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        return cls(
            heads=tuple((int(l), int(h)) for l, h in d.get("heads", ())),
            input_gain=float(d.get("input_gain", 0.0)),
            bias_scale=float(d.get("bias_scale", 5.0)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {"heads": [list(h) for h in self.heads], "input_gain": self.input_gain,
                "bias_scale": self.bias_scale, "seed": self.seed}


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    wq: np.ndarray          # L x d_model x (Hq*dh)
    wk: np.ndarray          # L x d_model x (Hkv*dh)
    bk: np.ndarray          # L x (Hkv*dh)
    wv: np.ndarray          # L x d_model x (Hkv*dh)
    wo: np.ndarray          # L x (Hq*dh) x d_model
    w_in: np.ndarray        # L x d_model x d_mlp
    w_out: np.ndarray       # L x d_mlp x d_model
    attn_gain: np.ndarray   # L x d_model
    mlp_gain: np.ndarray    # L x d_model
    final_gain: np.ndarray  # d_model
    patch_proj: np.ndarray  # patch_dim x d_model
    tok_emb: np.ndarray     # vocab x d_model
    unembed: np.ndarray     # d_model x vocab

    def __post_init__(self):
        for name in _ARRAY_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"weight {name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        c = self.config
        kv = c.n_kv_heads * c.d_head
        expected = {
            "wq": (c.n_layers, c.d_model, c.n_q_heads * c.d_head),
            "wk": (c.n_layers, c.d_model, kv),
            "bk": (c.n_layers, kv),
            "wv": (c.n_layers, c.d_model, kv),
            "wo": (c.n_layers, c.n_q_heads * c.d_head, c.d_model),
            "w_in": (c.n_layers, c.d_model, c.d_mlp),
            "w_out": (c.n_layers, c.d_mlp, c.d_model),
            "attn_gain": (c.n_layers, c.d_model),
            "mlp_gain": (c.n_layers, c.d_model),
            "final_gain": (c.d_model,),
            "patch_proj": (c.patch_dim, c.d_model),
            "tok_emb": (c.vocab_size, c.d_model),
            "unembed": (c.d_model, c.vocab_size),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ModelError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_FIELDS}

    def edited(self, **arrays) -> "ModelWeights":
        """Copy with some arrays replaced."""
        return dataclasses.replace(self, **arrays)

    def mutable_arrays(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.arrays().items()}

    def head_cols(self, head: int) -> slice:
        dh = self.config.d_head
        return slice(head * dh, (head + 1) * dh)


def build_model(config: ModelConfig, plant: PlantSpec | None = None) -> ModelWeights:
    """Seeded Gaussian init (std 0.02); planted heads get input-free keys."""
    c = config
    rng = np.random.default_rng(c.seed)
    std = 0.02
    kv = c.n_kv_heads * c.d_head
    qd = c.n_q_heads * c.d_head
    arrays = {
        "wq": rng.normal(0, std, (c.n_layers, c.d_model, qd)),
        "wk": rng.normal(0, std, (c.n_layers, c.d_model, kv)),
        "bk": np.zeros((c.n_layers, kv)),
        "wv": rng.normal(0, std, (c.n_layers, c.d_model, kv)),
        "wo": rng.normal(0, std, (c.n_layers, qd, c.d_model)),
        "w_in": rng.normal(0, std, (c.n_layers, c.d_model, c.d_mlp)),
        "w_out": rng.normal(0, std, (c.n_layers, c.d_mlp, c.d_model)),
        "attn_gain": np.ones((c.n_layers, c.d_model)),
        "mlp_gain": np.ones((c.n_layers, c.d_model)),
        "final_gain": np.ones(c.d_model),
        "patch_proj": rng.normal(0, std, (c.patch_dim, c.d_model)),
        "tok_emb": rng.normal(0, std, (c.vocab_size, c.d_model)),
        "unembed": rng.normal(0, std, (c.d_model, c.vocab_size)),
    }
    if plant is not None and plant.heads:
        prng = np.random.default_rng([c.seed, plant.seed, 0x4B4559])
        for layer, head in plant.heads:
            if not (0 <= layer < c.n_layers and 0 <= head < c.n_kv_heads):
                raise ModelError(f"planted head ({layer}, {head}) out of range")
        for layer, head in sorted(set(plant.heads)):
            cols = slice(head * c.d_head, (head + 1) * c.d_head)
            arrays["wk"][layer, :, cols] *= plant.input_gain
            u = prng.normal(size=c.d_head)
            arrays["bk"][layer, cols] = plant.bias_scale * u / np.linalg.norm(u)
    return ModelWeights(config=c, **arrays)


# ---------------------------------------------------------------------------
# serialization


def save_weights(weights: ModelWeights, path) -> None:
    """Write an ``.npz`` with a JSON config header; round trip is bit exact."""
    header = json.dumps({"format_version": WEIGHTS_FORMAT_VERSION, "config": weights.config.to_dict()}, sort_keys=True)
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(header), **weights.arrays())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path) -> ModelWeights:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
            raise ModelError(f"unsupported weights format {header.get('format_version')!r}")
        arrays = {name: z[name] for name in _ARRAY_FIELDS}
    return ModelWeights(config=ModelConfig.from_dict(header["config"]), **arrays)


# ---------------------------------------------------------------------------
# rotary encoding


def rope_angles(positions, d_head: int, base: float) -> np.ndarray:
    inv = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]


def rope_rotate(x: np.ndarray, positions, base: float) -> np.ndarray:
    """Rotate interleaved pairs of the last axis; ``x`` is ``(..., T, d)``."""
    d = x.shape[-1]
    ang = rope_angles(positions, d, base)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(x, position: int, base: float = 10000.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ModelError("rotary encoding needs an even dimension")
    return rope_rotate(x[None, :], [position], base)[0]


# ---------------------------------------------------------------------------
# forward pass


@dataclass(frozen=True)
class MultimodalInput:
    prefix_text: tuple[int, ...]
    image_patches: np.ndarray
    query_text: tuple[int, ...] = ()

    def __init__(self, prefix_text: Sequence[int] = (), image_patches=None, query_text: Sequence[int] = ()):
        patches = np.asarray(image_patches, dtype=np.float64)
        if patches.ndim != 2 or patches.shape[0] < 1:
            raise ModelError("image_patches must be a non-empty N x patch_dim array")
        object.__setattr__(self, "prefix_text", tuple(int(t) for t in prefix_text))
        object.__setattr__(self, "image_patches", patches)
        object.__setattr__(self, "query_text", tuple(int(t) for t in query_text))

    @property
    def spans(self) -> dict[str, tuple[int, int]]:
        a = len(self.prefix_text)
        b = a + self.image_patches.shape[0]
        c = b + len(self.query_text)
        return {"prefix": (0, a), "image": (a, b), "query": (b, c)}


@dataclass(frozen=True)
class KnockoutSpec:
    """Block query-text queries from reading image keys in the target KV heads.

    Every query head that shares a targeted KV head is affected.
    """

    targets: frozenset = frozenset()
    blocked_key_span: str = "image"
    blocked_query_span: str = "query"

    def __init__(self, targets: Iterable[tuple[int, int]] = (), blocked_key_span: str = "image", blocked_query_span: str = "query"):
        object.__setattr__(self, "targets", frozenset((int(l), int(h)) for l, h in targets))
        object.__setattr__(self, "blocked_key_span", blocked_key_span)
        object.__setattr__(self, "blocked_query_span", blocked_query_span)

    def validate(self, config: ModelConfig) -> None:
        for layer, head in self.targets:
            if not (0 <= layer < config.n_layers and 0 <= head < config.n_kv_heads):
                raise ModelError(f"knockout target ({layer}, {head}) out of range")

    def heads_in_layer(self, layer: int) -> list[int]:
        return sorted(h for l, h in self.targets if l == layer)


@dataclass(frozen=True)
class KVCacheSnapshot:
    """Post-RoPE keys and values, indexed ``[layer, kv_head, position, :]``."""

    keys: np.ndarray
    values: np.ndarray
    spans: dict

    @property
    def image_span(self) -> tuple[int, int]:
        return self.spans["image"]


@dataclass
class LayerTrace:
    layer_input: np.ndarray      # T x d_model residual entering the layer
    queries: np.ndarray          # Hq x T x dh, post-RoPE
    keys_pre_rope: np.ndarray    # Hkv x T x dh
    attn: np.ndarray             # Hq x T x T
    head_outputs: np.ndarray     # Hq x T x dh, before W_O


@dataclass
class ForwardResult:
    logits: np.ndarray
    hidden: np.ndarray
    cache: KVCacheSnapshot
    trace: list[LayerTrace] | None = None

    @property
    def attn_record(self):
        if self.trace is None:
            return None
        return np.stack([t.attn for t in self.trace])


def silu(x):
    return x / (1.0 + np.exp(-x))


def embed(weights: ModelWeights, inp: MultimodalInput) -> np.ndarray:
    c = weights.config
    if inp.image_patches.shape[1] != c.patch_dim:
        raise ModelError(f"patch_dim mismatch: got {inp.image_patches.shape[1]}, model expects {c.patch_dim}")
    parts = [_embed_tokens(weights, inp.prefix_text), inp.image_patches @ weights.patch_proj,
             _embed_tokens(weights, inp.query_text)]
    return np.concatenate(parts, axis=0)


def _embed_tokens(weights: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= weights.config.vocab_size):
        raise ModelError("token id out of vocabulary")
    return weights.tok_emb[toks].reshape(len(toks), weights.config.d_model)


def _knockout_allowed(weights: ModelWeights, causal: np.ndarray, spans: dict, knockout: KnockoutSpec | None, layer: int) -> np.ndarray:
    c = weights.config
    allowed = np.broadcast_to(causal, (c.n_kv_heads, c.group_size) + causal.shape)
    if knockout is None:
        return allowed
    heads = knockout.heads_in_layer(layer)
    if not heads:
        return allowed
    allowed = allowed.copy()
    q0, q1 = spans[knockout.blocked_query_span]
    k0, k1 = spans[knockout.blocked_key_span]
    for h in heads:
        allowed[h, :, q0:q1, k0:k1] = False
    return allowed


def _row_blocks(T: int, spans: dict) -> list[tuple[int, int]]:
    """Row blocks [0, end of image) and [end of image, T).

    Each block is computed from arrays that only reach back to position 0, so
    the prefix and image rows are bitwise independent of how much query text
    follows (floating-point reductions depend on array length).
    """
    cut = spans["image"][1]
    return [(a, b) for a, b in ((0, cut), (cut, T)) if b > a]


def run_layers(weights: ModelWeights, x: np.ndarray, spans: dict, knockout: KnockoutSpec | None = None, record: bool = False):
    """Run the decoder stack on embedded inputs ``x`` (T x d_model)."""
    c = weights.config
    T = x.shape[0]
    dh, hq, hkv, g = c.d_head, c.n_q_heads, c.n_kv_heads, c.group_size
    causal = np.tril(np.ones((T, T), dtype=bool))
    blocks = _row_blocks(T, spans)
    keys = np.empty((c.n_layers, hkv, T, dh))
    values = np.empty((c.n_layers, hkv, T, dh))
    trace = [] if record else None
    scale = 1.0 / math.sqrt(dh)
    for layer in range(c.n_layers):
        allowed = _knockout_allowed(weights, causal, spans, knockout, layer)
        x_in = x
        new_x = np.empty_like(x)
        q_all = np.empty((hq, T, dh))
        k_pre_all = np.empty((hkv, T, dh))
        probs_all = np.zeros((hkv, g, T, T))
        out_all = np.empty((hq, T, dh))
        for r0, r1 in blocks:
            n = r1 - r0
            pos = np.arange(r0, r1)
            h = rms_norm(x[r0:r1], weights.attn_gain[layer])
            q = (h @ weights.wq[layer]).reshape(n, hq, dh).transpose(1, 0, 2)
            k_pre = (h @ weights.wk[layer] + weights.bk[layer]).reshape(n, hkv, dh).transpose(1, 0, 2)
            v = (h @ weights.wv[layer]).reshape(n, hkv, dh).transpose(1, 0, 2)
            q = rope_rotate(q, pos, c.rope_base)
            keys[layer, :, r0:r1] = rope_rotate(k_pre, pos, c.rope_base)
            values[layer, :, r0:r1] = v
            k = keys[layer, :, :r1]
            qg = q.reshape(hkv, g, n, dh)
            scores = np.einsum("hgtd,hsd->hgts", qg, k) * scale
            probs = masked_softmax(scores, allowed[:, :, r0:r1, :r1])
            out = np.einsum("hgts,hsd->hgtd", probs, values[layer, :, :r1]).reshape(hq, n, dh)
            xb = x[r0:r1] + out.transpose(1, 0, 2).reshape(n, hq * dh) @ weights.wo[layer]
            m = rms_norm(xb, weights.mlp_gain[layer])
            new_x[r0:r1] = xb + silu(m @ weights.w_in[layer]) @ weights.w_out[layer]
            if record:
                q_all[:, r0:r1] = q
                k_pre_all[:, r0:r1] = k_pre
                probs_all[:, :, r0:r1, :r1] = probs
                out_all[:, r0:r1] = out
        x = new_x
        if record:
            trace.append(LayerTrace(layer_input=x_in, queries=q_all, keys_pre_rope=k_pre_all,
                                    attn=probs_all.reshape(hq, T, T), head_outputs=out_all))
    keys.setflags(write=False)
    values.setflags(write=False)
    return x, KVCacheSnapshot(keys=keys, values=values, spans=spans), trace


def forward(weights: ModelWeights, inp: MultimodalInput, knockout: KnockoutSpec | None = None, record: bool = False) -> ForwardResult:
    if knockout is not None:
        knockout.validate(weights.config)
    x = embed(weights, inp)
    hidden, cache, trace = run_layers(weights, x, inp.spans, knockout, record)
    logits = rms_norm(hidden, weights.final_gain) @ weights.unembed
    return ForwardResult(logits=logits, hidden=hidden, cache=cache, trace=trace)


def forward_text(weights: ModelWeights, tokens: Sequence[int], record: bool = False) -> ForwardResult:
    """Text-only pass; there is no image span (it is empty)."""
    if len(tokens) == 0:
        raise ModelError("text-only forward needs at least one token")
    x = _embed_tokens(weights, tokens)
    n = len(tokens)
    spans = {"prefix": (0, n), "image": (n, n), "query": (n, n)}
    hidden, cache, trace = run_layers(weights, x, spans, None, record)
    logits = rms_norm(hidden, weights.final_gain) @ weights.unembed
    return ForwardResult(logits=logits, hidden=hidden, cache=cache, trace=trace)


def image_kv(cache: KVCacheSnapshot, layer: int, kv_head: int) -> tuple[np.ndarray, np.ndarray]:
    """Keys and values of the image span at one (layer, kv_head), rows by image position."""
    L, H = cache.keys.shape[:2]
    if not (0 <= layer < L and 0 <= kv_head < H):
        raise ModelError(f"(layer={layer}, kv_head={kv_head}) out of range")
    a, b = cache.image_span
    return cache.keys[layer, kv_head, a:b], cache.values[layer, kv_head, a:b]


def image_values(cache: KVCacheSnapshot) -> np.ndarray:
    """All image values as ``L x Hkv x N x dh``."""
    a, b = cache.image_span
    return cache.values[:, :, a:b]


def image_keys(cache: KVCacheSnapshot) -> np.ndarray:
    a, b = cache.image_span
    return cache.keys[:, :, a:b]
