"""Hand-wired decoder whose mechanisms are known exactly.

The residual stream is split into named coordinate blocks:

    0-22   image texture codes (colour fill, shape, part, background)
    23     shape-word marker         24     question-mark marker
    25-27  shape-word identity       28     colour-word marker
    29-30  colour-word chroma        31     highlight flag
    32-34  question shape slot       35-39  other text tokens
    40-63  readout block

Wired heads (everything else keeps random Q/K/V so its keys vary with the
image, but its output projection is zeroed):

    layer 0, kv 0   copy the question's shape word onto the "?" token
    layer 0, kv 1   image patches attend to colour words of matching hue in a
                    text prefix and pick up the highlight flag
    layer 0, kv 2   aligned value head: values carry shape and background codes
    layer 0, kv 3   generic value head: seeded projection of all codes
    layer 1, kv 0   value head reading the highlight flag
    late layers, kv 1..3 of ``detect_layer``
                    "?" looks for image patches of the asked shape and writes
                    an existence signal into the readout block
    noise heads     input-agnostic keys (bias only); values are a seeded
                    projection of object content written into the readout
                    block, i.e. artifacts unrelated to the question

Only the slowest rotary pair (dims 6, 7 of each head) carries wired
query/key content, so attention is almost independent of token distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelWeights, PlantSpec, build_model
from .synthdata import (BG_CODE, COLOR_RGB, COLORS, N_CODES, PART_CODE0, SHAPE_CODE0, SHAPES,
                        code_decoder, token_id, vocabulary)

SHAPE_WORD = 23
QMARK = 24
SHAPE_ID0 = 25
COLOR_WORD = 28
CHROMA = (29, 30)
HIGHLIGHT = 31
SHAPE_SLOT0 = 32
MISC_TEXT = slice(35, 40)
READOUT = slice(40, 64)
SLOW = (6, 7)  # slowest rotary pair inside a head

_CHROMA_BASIS = np.array([[2.0, -1.0, -1.0], [0.0, 1.0, -1.0]]) / np.array([[np.sqrt(6.0)], [np.sqrt(2.0)]])


@dataclass(frozen=True)
class Readout:
    """Fixed linear map from the final residual to (yes, no) logits."""

    matrix: np.ndarray  # 2 x d_model

    @classmethod
    def seeded(cls, d_model: int, seed: int, support: slice | None = None) -> "Readout":
        rng = np.random.default_rng([seed, 0x5245])
        m = np.zeros((2, d_model))
        cols = support or slice(0, d_model)
        n = len(range(d_model)[cols])
        m[:, cols] = rng.normal(size=(2, n))
        return cls(m)

    @property
    def direction(self) -> np.ndarray:
        """Residual direction that raises yes-minus-no by exactly one unit."""
        r = self.matrix[0] - self.matrix[1]
        return r / (r @ r)

    def logits(self, hidden_row: np.ndarray) -> np.ndarray:
        return self.matrix @ hidden_row


@dataclass
class LabModel:
    weights: ModelWeights
    readout: Readout
    noise_heads: tuple[tuple[int, int], ...]
    detect_heads: tuple[tuple[int, int], ...]
    aligned_cell: tuple[int, int] = (0, 2)
    generic_cell: tuple[int, int] = (0, 3)
    highlight_cell: tuple[int, int] = (1, 0)
    gains: dict = field(default_factory=dict)


def chroma_of_rgb(rgb) -> np.ndarray:
    return _CHROMA_BASIS @ np.asarray(rgb, dtype=np.float64)


def _unit(v):
    return v / np.linalg.norm(v)


def _hue_dirs() -> np.ndarray:
    return np.stack([_unit(chroma_of_rgb(COLOR_RGB[c])) for c in COLORS])


def _shape_dirs() -> np.ndarray:
    ang = 2 * np.pi * np.arange(len(SHAPES)) / len(SHAPES)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def build_lab_model(seed: int = 0, config: ModelConfig | None = None, detect_layer: int | None = None,
                    noise_layers: tuple[int, ...] | None = None, noise_scale: float = 0.3,
                    detect_gain: float = 4.0, signal_gain: float = 1.0, transfer_gain: float = 1.0,
                    highlight_gain: float = 1.2) -> LabModel:
    cfg = config or ModelConfig(seed=seed)
    if cfg.d_model != 64 or cfg.d_head != 8 or cfg.n_kv_heads < 4 or cfg.patch_dim < N_CODES:
        raise ValueError("the lab model is wired for d_model=64, d_head=8, >=4 kv heads, patch_dim>=48")
    L = cfg.n_layers
    detect_layer = L - 1 if detect_layer is None else detect_layer
    noise_layers = (L - 2, L - 1) if noise_layers is None else noise_layers
    noise_heads = tuple((l, 0) for l in noise_layers)
    base = build_model(cfg, PlantSpec(heads=noise_heads, seed=seed))
    a = base.mutable_arrays()
    rng = np.random.default_rng([cfg.seed, seed, 0x4C4142])
    dh, g = cfg.d_head, cfg.group_size
    hq = lambda h: range(h * g, (h + 1) * g)  # noqa: E731  query heads of kv head h
    qcols = lambda q: slice(q * dh, (q + 1) * dh)  # noqa: E731
    kcols = lambda h: slice(h * dh, (h + 1) * dh)  # noqa: E731

    a["wo"][:] = 0.0
    a["w_out"][:] = 0.0
    # wired heads keep random key dims 0-5 so their image keys still vary
    for layer in range(L):
        for h in range(cfg.n_kv_heads):
            if (layer, h) not in noise_heads:
                a["wk"][layer, :, h * dh + SLOW[0]:h * dh + SLOW[1] + 1] = 0.0

    # image embedding: patch vector -> texture codes in coordinates 0-22
    dec = code_decoder(cfg.patch_dim)[:, :N_CODES]
    a["patch_proj"][:] = 0.0
    a["patch_proj"][:, :N_CODES] = dec

    # token embeddings
    emb = np.zeros((cfg.vocab_size, cfg.d_model))
    emb[:, MISC_TEXT] = rng.normal(size=(cfg.vocab_size, MISC_TEXT.stop - MISC_TEXT.start))
    for s, shape in enumerate(SHAPES):
        t = token_id(shape)
        emb[t] = 0.0
        emb[t, SHAPE_WORD] = 1.0
        emb[t, SHAPE_ID0 + s] = 1.0
        emb[t, SHAPE_CODE0 + s] = 0.15
        emb[t, HIGHLIGHT] = 0.3
    hues = _hue_dirs()
    for c, color in enumerate(COLORS):
        t = token_id(color)
        emb[t] = 0.0
        emb[t, COLOR_WORD] = 1.0
        emb[t, list(CHROMA)] = hues[c]
    readout = Readout.seeded(cfg.d_model, seed, READOUT)
    r_hat = readout.direction
    qm = token_id("?")
    emb[qm] = 0.0
    emb[qm, QMARK] = 1.0
    # half of the full detection signal, so "present" and "absent" straddle zero
    full_signal = signal_gain * _object_value_norm()
    emb[qm] += -0.5 * full_signal * r_hat
    a["tok_emb"] = emb

    def wire_qk(layer, h, q_rows, q_dirs, k_rows, k_dirs, gain, q_heads=None):
        for q in (q_heads if q_heads is not None else hq(h)):
            blk = np.zeros((cfg.d_model, dh))
            for row, d in zip(q_rows, q_dirs):
                blk[row, list(SLOW)] = gain * d
            a["wq"][layer, :, qcols(q)] = blk
        kb = a["wk"][layer, :, kcols(h)]
        for row, d in zip(k_rows, k_dirs):
            kb[row, list(SLOW)] = gain * d
        a["wk"][layer, :, kcols(h)] = kb

    # layer 0 kv 0: "?" copies the shape word
    first_q = hq(0)[0]
    wire_qk(0, 0, [QMARK], [np.array([1.0, 0.0])], [SHAPE_WORD], [np.array([1.0, 0.0])], transfer_gain, q_heads=[first_q])
    for q in list(hq(0))[1:]:
        a["wq"][0, :, qcols(q)] = 0.0
    vb = np.zeros((cfg.d_model, dh))
    for s in range(len(SHAPES)):
        vb[SHAPE_ID0 + s, s] = 1.0
    a["wv"][0, :, kcols(0)] = vb
    ob = np.zeros((dh, cfg.d_model))
    for s in range(len(SHAPES)):
        ob[s, SHAPE_SLOT0 + s] = 1.0
    a["wo"][0, qcols(first_q), :] = ob

    # layer 0 kv 1: hue-matched highlight from colour words in a prefix
    hl_q = hq(1)[0]
    qb = np.zeros((cfg.d_model, dh))
    qb[0:3, SLOW[0]] = highlight_gain * _CHROMA_BASIS[0]
    qb[0:3, SLOW[1]] = highlight_gain * _CHROMA_BASIS[1]
    a["wq"][0, :, qcols(hl_q)] = qb
    for q in list(hq(1))[1:]:
        a["wq"][0, :, qcols(q)] = 0.0
    kb = a["wk"][0, :, kcols(1)]
    kb[CHROMA[0], SLOW[0]] = highlight_gain
    kb[CHROMA[1], SLOW[1]] = highlight_gain
    a["wk"][0, :, kcols(1)] = kb
    vb = np.zeros((cfg.d_model, dh))
    vb[COLOR_WORD, 0] = 1.0
    a["wv"][0, :, kcols(1)] = vb
    ob = np.zeros((dh, cfg.d_model))
    ob[0, HIGHLIGHT] = 1.0
    a["wo"][0, qcols(hl_q), :] = ob

    # layer 0 kv 2: values aligned with shape words and the background code
    vb = np.zeros((cfg.d_model, dh))
    for s in range(len(SHAPES)):
        vb[SHAPE_CODE0 + s, s] = 1.0
    vb[BG_CODE, 3] = 1.0
    a["wv"][0, :, kcols(2)] = vb

    # layer 0 kv 3: generic seeded projection of every code
    vb = np.zeros((cfg.d_model, dh))
    vb[:N_CODES] = rng.normal(size=(N_CODES, dh))
    a["wv"][0, :, kcols(3)] = vb

    # layer 1 kv 0: read the highlight flag
    vb = np.zeros((cfg.d_model, dh))
    vb[HIGHLIGHT, 0] = 1.0
    a["wv"][1, :, kcols(0)] = vb

    # existence detection: "?" (shape slot) matches patch shape codes
    dirs = _shape_dirs()
    detect_heads = tuple((detect_layer, h) for h in range(1, cfg.n_kv_heads))
    n_detect_q = g * len(detect_heads)
    for _, h in detect_heads:
        qb = np.zeros((cfg.d_model, dh))
        for s in range(len(SHAPES)):
            qb[SHAPE_SLOT0 + s, list(SLOW)] = detect_gain * dirs[s]
        kb = a["wk"][detect_layer, :, kcols(h)]
        for s in range(len(SHAPES)):
            kb[SHAPE_CODE0 + s, list(SLOW)] = detect_gain * dirs[s]
        a["wk"][detect_layer, :, kcols(h)] = kb
        vb = np.zeros((cfg.d_model, dh))
        vb[PART_CODE0:PART_CODE0 + 16, 0] = 1.0
        a["wv"][detect_layer, :, kcols(h)] = vb
        for q in hq(h):
            a["wq"][detect_layer, :, qcols(q)] = qb
            ob = np.zeros((dh, cfg.d_model))
            ob[0] = signal_gain * r_hat / n_detect_q
            a["wo"][detect_layer, qcols(q), :] = ob

    # artifact heads: input-agnostic keys, values = object content, written into the readout block
    bg_dir = _unit(_background_residual())
    for layer, h in noise_heads:
        vb = np.zeros((cfg.d_model, dh))
        rows = [r for r in range(N_CODES) if not SHAPE_CODE0 <= r < SHAPE_CODE0 + len(SHAPES)]
        vb[rows] = rng.normal(size=(len(rows), dh))
        vb -= np.outer(bg_dir, bg_dir @ vb)  # background patches contribute nothing
        a["wv"][layer, :, kcols(h)] = vb
        for q in hq(h):
            ob = np.zeros((dh, cfg.d_model))
            ob[:, READOUT] = noise_scale * rng.normal(size=(dh, READOUT.stop - READOUT.start)) / np.sqrt(dh)
            a["wo"][layer, qcols(q), :] = ob

    weights = ModelWeights(config=cfg, **a)
    gains = dict(noise_scale=noise_scale, detect_gain=detect_gain, signal_gain=signal_gain,
                 transfer_gain=transfer_gain, highlight_gain=highlight_gain)
    return LabModel(weights=weights, readout=readout, noise_heads=noise_heads, detect_heads=detect_heads, gains=gains)


def _background_residual() -> np.ndarray:
    from .synthdata import render_code
    v = np.zeros(64)
    v[:N_CODES] = render_code("background")[:N_CODES]
    return v


def _object_value_norm() -> float:
    """Detection value of a fully attended object patch (its normalised part code)."""
    from .synthdata import render_code
    v = np.zeros(64)
    v[:N_CODES] = render_code("object", COLORS[0], SHAPES[0], (0, 0))[:N_CODES]
    rms = np.sqrt(np.mean(v * v) + 1e-6)
    return float(v[PART_CODE0] / rms)
