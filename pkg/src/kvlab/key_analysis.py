"""Variance of image keys across scenes, agnostic/dependent labelling and PCA export.

The per-head statistic is the trace variance of the key at a fixed image
position across scenes, averaged over positions. Keys are cached after RoPE,
but RoPE is a fixed rotation per position, so the statistic is the same as it
would be on pre-RoPE keys.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelWeights, MultimodalInput, forward, image_keys
from .numerics import pca_fit, pca_project
from .synthdata import SyntheticScene

N_BINS = 64
VARIANCE_CSV_COLUMNS = ("layer", "kv_head", "variance", "label")
PCA_CSV_COLUMNS = ("scene_id", "position", "row", "col", "c1", "c2", "c3")
LAYER_GROUPS = ("early", "middle", "late")


class ClassificationUnavailable(RuntimeError):
    """No bimodal split in the variances and no manual threshold given."""


@dataclass
class VarianceMap:
    variance: np.ndarray  # n_layers x n_kv_heads
    n_scenes: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.variance.shape


@dataclass
class BimodalSplit:
    threshold: float
    modes: tuple[float, float]


@dataclass
class KeyClassification:
    threshold: float
    agnostic: np.ndarray  # bool, n_layers x n_kv_heads
    layer_groups: dict[str, list[int]] = field(default_factory=dict)

    def label(self, layer: int, head: int) -> str:
        return "agnostic" if self.agnostic[layer, head] else "dependent"

    def heads(self, label: str, layers: Sequence[int] | None = None) -> list[tuple[int, int]]:
        want = label == "agnostic"
        L, H = self.agnostic.shape
        layers = range(L) if layers is None else layers
        return [(l, h) for l in layers for h in range(H) if bool(self.agnostic[l, h]) == want]


def scene_keys(weights: ModelWeights, scenes: Sequence[SyntheticScene], prefix: Sequence[int] = ()) -> np.ndarray:
    """Image keys for every scene: ``S x L x Hkv x N x dh``."""
    if not scenes:
        raise ValueError("need at least one scene")
    dims = {(s.height, s.width) for s in scenes}
    if len(dims) != 1:
        raise ValueError(f"scenes have mismatched grids: {sorted(dims)}")
    return np.stack([image_keys(forward(weights, MultimodalInput(prefix, s.patches)).cache) for s in scenes])


def variance_from_keys(keys: np.ndarray) -> np.ndarray:
    """Two-pass trace variance over scenes (axis 0), averaged over positions."""
    mean = keys.mean(axis=0)
    sq = ((keys - mean) ** 2).sum(axis=-1)  # S x L x H x N
    return sq.mean(axis=0).mean(axis=-1)


def variance_map(weights: ModelWeights, scenes: Sequence[SyntheticScene]) -> VarianceMap:
    if len(scenes) < 2:
        raise ValueError("variance needs at least two scenes")
    return VarianceMap(variance=variance_from_keys(scene_keys(weights, scenes)), n_scenes=len(scenes))


def smoothed_histogram(values) -> tuple[np.ndarray, np.ndarray]:
    """64-bin histogram over the data range, smoothed with a Gaussian of width range/16."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = float(v.min()), float(v.max())
    edges = np.linspace(lo, hi, N_BINS + 1)
    counts, _ = np.histogram(v, bins=edges)
    centres = (edges[:-1] + edges[1:]) / 2.0
    bw = (hi - lo) / 16.0
    kern = np.exp(-0.5 * ((centres[:, None] - centres[None, :]) / bw) ** 2)
    return centres, kern @ counts


def bimodal_threshold(values) -> BimodalSplit | None:
    """Valley between the two highest peaks of the smoothed histogram, or None."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 4:
        raise ValueError("bimodal_threshold needs at least four values")
    if not v.max() > v.min():
        return None
    centres, dens = smoothed_histogram(v)
    n = len(dens)
    peaks = []
    for i in range(n):
        left = dens[i - 1] if i > 0 else -np.inf
        right = dens[i + 1] if i < n - 1 else -np.inf
        if dens[i] > left and dens[i] >= right:
            peaks.append(i)
    if len(peaks) < 2:
        return None
    top = sorted(sorted(peaks, key=lambda i: -dens[i])[:2])
    a, b = top
    if b - a < 2:
        return None
    valley = a + 1 + int(np.argmin(dens[a + 1:b]))
    return BimodalSplit(threshold=float(centres[valley]), modes=(float(centres[a]), float(centres[b])))


def layer_groups(n_layers: int) -> dict[str, list[int]]:
    """Split layers into thirds; any remainder goes to the middle group."""
    third = n_layers // 3
    return {
        "early": list(range(0, third)),
        "middle": list(range(third, n_layers - third)),
        "late": list(range(n_layers - third, n_layers)),
    }


def classify_keys(vmap: VarianceMap, threshold: float | None = None) -> KeyClassification:
    if threshold is None:
        split = bimodal_threshold(vmap.variance.reshape(-1))
        if split is None:
            raise ClassificationUnavailable("variances are not bimodal; pass a manual threshold")
        threshold = split.threshold
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return KeyClassification(threshold=float(threshold), agnostic=vmap.variance < threshold,
                             layer_groups=layer_groups(vmap.variance.shape[0]))


def write_variance_csv(vmap: VarianceMap, path, classification: KeyClassification | None = None) -> None:
    L, H = vmap.variance.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VARIANCE_CSV_COLUMNS)
        for l in range(L):
            for h in range(H):
                label = classification.label(l, h) if classification is not None else ""
                w.writerow([l, h, repr(float(vmap.variance[l, h])), label])


def export_key_pca(weights: ModelWeights, scenes: Sequence[SyntheticScene], layer: int, kv_head: int, k: int = 3) -> list[np.ndarray]:
    """PCA of the pooled image keys at one head; per-scene coordinates min-max scaled to [0, 1]."""
    keys = scene_keys(weights, scenes)[:, layer, kv_head]  # S x N x dh
    S, N, d = keys.shape
    pooled = keys.reshape(S * N, d)
    model = pca_fit(pooled, k)
    coords = pca_project(model, pooled)
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo
    scaled = np.where(span > 0, (coords - lo) / np.where(span > 0, span, 1.0), 0.0)
    return [scaled[i * N:(i + 1) * N] for i in range(S)]


def write_pca_csv(per_scene: Sequence[np.ndarray], scenes: Sequence[SyntheticScene], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PCA_CSV_COLUMNS)
        for sid, (coords, scene) in enumerate(zip(per_scene, scenes)):
            for p, row in enumerate(coords):
                r, c = divmod(p, scene.width)
                vals = [repr(float(x)) for x in row[:3]] + [""] * (3 - min(3, len(row)))
                w.writerow([sid, p, r, c, *vals])
