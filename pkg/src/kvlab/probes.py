"""Probes that read task information straight out of cached image values.

Each probe has an array-level core (``*_from_values``) that works on value
matrices and masks, and a model-level wrapper that runs the forward passes
and slices the cache at one ``(layer, kv_head)``. Values are probed exactly as
stored in the cache, i.e. before the attention output projection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .model import ModelWeights, MultimodalInput, forward, forward_text, image_values
from .numerics import cosine_matrix, kmeans, logistic_fit
from .synthdata import EpisodeSpec, SyntheticScene

TASK_METRIC = {
    "fg_seg": "mIoU",
    "co_seg": "J_m",
    "sem_seg": "mIoU",
    "ref_seg": "mIoU",
    "sem_corr": "PCK",
    "temp_corr": "JandF",
    "existence_qa": "accuracy",
}
PROBE_CSV_COLUMNS = ("task", "layer", "kv_head", "metric", "value", "n_episodes")
PCK_ALPHA = 0.1


@dataclass
class ProbeResult:
    task: str
    layer: int
    kv_head: int
    metric: str
    value: float
    n_episodes: int = 1
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")
        if TASK_METRIC.get(self.task) != self.metric:
            raise ValueError(f"metric {self.metric!r} does not belong to task {self.task!r}")

    def csv_row(self) -> list:
        return [self.task, self.layer, self.kv_head, self.metric, repr(float(self.value)), self.n_episodes]


@dataclass
class SimilarityReadout:
    query: np.ndarray
    options: np.ndarray
    similarities: np.ndarray
    chosen: int


# ---------------------------------------------------------------------------
# array-level cores


def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train, *others)]


def fg_seg_from_values(support_values: Sequence[np.ndarray], support_masks: Sequence[np.ndarray],
                       query_values: Sequence[np.ndarray], query_masks: Sequence[np.ndarray]) -> tuple[float, dict]:
    """Linear probe trained on support patches; mean foreground IoU on the queries."""
    x = np.concatenate([np.asarray(v, dtype=np.float64) for v in support_values])
    y = np.concatenate([np.asarray(m, dtype=bool).reshape(-1) for m in support_masks]).astype(np.float64)
    flags = {}
    if y.min() == y.max():
        flags["degenerate_support"] = True
    xq = [np.asarray(v, dtype=np.float64) for v in query_values]
    xs, *xq = _standardize(x, *xq)
    clf = logistic_fit(xs, y)
    scores = []
    for v, m in zip(xq, query_masks):
        pred = clf.predict_proba(v) >= 0.5
        scores.append(metrics.iou(pred, np.asarray(m, dtype=bool).reshape(-1)))
    return float(np.mean(scores)), flags


def co_seg_from_values(values: Sequence[np.ndarray], masks: Sequence[np.ndarray], seed: int) -> tuple[float, dict]:
    """2-means over all scenes' patches; the better cluster-to-foreground assignment wins."""
    x = np.concatenate([np.asarray(v, dtype=np.float64) for v in values])
    res = kmeans(x, 2, seed)
    sizes = [len(v) for v in values]
    split = np.split(res.labels, np.cumsum(sizes)[:-1])
    gts = [np.asarray(m, dtype=bool).reshape(-1) for m in masks]
    per = []
    for fg in (0, 1):
        per.append(float(np.mean([metrics.iou(lab == fg, g) for lab, g in zip(split, gts)])))
    best = int(np.argmax(per))
    return per[best], {"foreground_cluster": best, "inertia": res.inertia}


def text_seg_from_values(values: np.ndarray, text_vector: np.ndarray, target_mask) -> tuple[float, dict]:
    """Dot-product scores against the text vector, split by Otsu."""
    scores = np.asarray(values, dtype=np.float64) @ np.asarray(text_vector, dtype=np.float64)
    thr = metrics.otsu_threshold(scores)
    pred = scores > thr
    flags = {"threshold": thr}
    if not np.isfinite(thr):
        flags["degenerate_scores"] = True
    return metrics.iou(pred, np.asarray(target_mask, dtype=bool).reshape(-1)), flags


def nearest_patch(src_vector: np.ndarray, tgt_values: np.ndarray) -> int:
    sims = cosine_matrix(np.asarray(src_vector)[None, :], tgt_values)[0]
    return int(np.argmax(sims))  # first maximum = lowest position index


def sem_corr_from_values(src_values: np.ndarray, tgt_values: np.ndarray,
                         keypoint_pairs: Sequence[tuple[tuple[int, int], tuple[int, int]]],
                         height: int, width: int, alpha: float = PCK_ALPHA) -> tuple[float, dict]:
    preds, trues = [], []
    for (sr, sc), true in keypoint_pairs:
        j = nearest_patch(src_values[sr * width + sc], tgt_values)
        preds.append(divmod(j, width))
        trues.append(true)
    return metrics.pck(preds, trues, height, width, alpha), {"predictions": preds}


def propagate_labels(frame_values: Sequence[np.ndarray], first_mask) -> list[np.ndarray]:
    """Carry frame-0 labels forward through nearest-neighbour (cosine) matches."""
    labels = [np.asarray(first_mask, dtype=bool).reshape(-1)]
    for prev, cur in zip(frame_values[:-1], frame_values[1:]):
        nn = np.argmax(cosine_matrix(cur, prev), axis=1)
        labels.append(labels[-1][nn])
    return labels


def temp_corr_from_values(frame_values: Sequence[np.ndarray], first_mask, final_mask,
                          height: int, width: int) -> tuple[float, dict]:
    labels = propagate_labels(frame_values, first_mask)
    pred = labels[-1].reshape(height, width)
    gt = np.asarray(final_mask, dtype=bool).reshape(height, width)
    j = metrics.iou(pred, gt)
    f = metrics.boundary_f(pred, gt)
    return (j + f) / 2.0, {"J": j, "F": f}


def pooled_similarity_from_values(query_values: np.ndarray, option_values: Sequence[np.ndarray]) -> SimilarityReadout:
    if len(option_values) < 2:
        raise ValueError("need at least two options")
    q = np.asarray(query_values, dtype=np.float64).mean(axis=0)
    opts = np.stack([np.asarray(v, dtype=np.float64).mean(axis=0) for v in option_values])
    qn = np.linalg.norm(q)
    sims = np.empty(len(opts))
    for i, o in enumerate(opts):
        on = np.linalg.norm(o)
        sims[i] = -1.0 if qn == 0 or on == 0 else float(q @ o / (qn * on))
    return SimilarityReadout(query=q, options=opts, similarities=sims, chosen=int(np.argmax(sims)))


# ---------------------------------------------------------------------------
# model-level extraction


def scene_values(weights: ModelWeights, scene: SyntheticScene, prefix: Sequence[int] = ()) -> np.ndarray:
    """Image values of one scene for every (layer, kv_head): ``L x Hkv x N x dh``."""
    res = forward(weights, MultimodalInput(prefix, scene.patches))
    return image_values(res.cache)


def text_values(weights: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    """Value of the final text token at every (layer, kv_head), from a text-only pass."""
    res = forward_text(weights, tokens)
    return res.cache.values[:, :, len(tokens) - 1]


class EpisodeValues:
    """Lazily computed value stacks for every scene and text of an episode."""

    def __init__(self, weights: ModelWeights, episode: EpisodeSpec, prefix: Sequence[int] | Callable = ()):
        self.weights = weights
        self.episode = episode
        self.prefix = prefix
        self._scene: dict[int, np.ndarray] = {}
        self._text: dict[int, np.ndarray] = {}

    def _prefix_for(self, i: int) -> Sequence[int]:
        if callable(self.prefix):
            return self.prefix(self.episode.scenes[i])
        return self.prefix

    def scene(self, i: int) -> np.ndarray:
        if i not in self._scene:
            self._scene[i] = scene_values(self.weights, self.episode.scenes[i], self._prefix_for(i))
        return self._scene[i]

    def text(self, i: int) -> np.ndarray:
        if i not in self._text:
            self._text[i] = text_values(self.weights, self.episode.texts[i])
        return self._text[i]


def evaluate_cell(ev: EpisodeValues, layer: int, kv_head: int) -> tuple[float, dict]:
    ep = ev.episode
    ns = len(ep.support)
    at = lambda i: ev.scene(i)[layer, kv_head]  # noqa: E731
    if ep.task == "fg_seg":
        return fg_seg_from_values([at(i) for i in range(ns)], ep.support_targets,
                                  [at(ns + i) for i in range(len(ep.query))], ep.targets)
    if ep.task == "co_seg":
        return co_seg_from_values([at(ns + i) for i in range(len(ep.query))], ep.targets, ep.seed)
    if ep.task in ("sem_seg", "ref_seg"):
        scores, flags = [], {}
        for i in range(len(ep.query)):
            v, f = text_seg_from_values(at(ns + i), ev.text(i)[layer, kv_head], ep.targets[i])
            scores.append(v)
            flags.update(f)
        return float(np.mean(scores)), flags
    if ep.task == "sem_corr":
        q = ep.query[0]
        return sem_corr_from_values(at(0), at(1), ep.keypoint_pairs, q.height, q.width)
    if ep.task == "temp_corr":
        q = ep.query[0]
        frames = [at(ns + i) for i in range(len(ep.query))]
        return temp_corr_from_values(frames, ep.targets[0], ep.targets[-1], q.height, q.width)
    raise ValueError(f"task {ep.task!r} has no value probe")


def probe_episode(weights: ModelWeights, episode: EpisodeSpec, layer: int, kv_head: int,
                  prefix: Sequence[int] | Callable = ()) -> ProbeResult:
    value, flags = evaluate_cell(EpisodeValues(weights, episode, prefix), layer, kv_head)
    return ProbeResult(episode.task, layer, kv_head, TASK_METRIC[episode.task], value, 1, flags)


def _require(episode: EpisodeSpec, *tasks: str) -> None:
    if episode.task not in tasks:
        raise ValueError(f"expected a {'/'.join(tasks)} episode, got {episode.task!r}")


def probe_fg_seg(weights, episode, layer, kv_head, prefix=()) -> ProbeResult:
    _require(episode, "fg_seg")
    return probe_episode(weights, episode, layer, kv_head, prefix)


def probe_co_seg(weights, episode, layer, kv_head, prefix=()) -> ProbeResult:
    _require(episode, "co_seg")
    return probe_episode(weights, episode, layer, kv_head, prefix)


def probe_text_seg(weights: ModelWeights, scene: SyntheticScene, text: Sequence[int], target_mask,
                   layer: int, kv_head: int, prefix: Sequence[int] = (), task: str = "sem_seg") -> ProbeResult:
    """Segment the patches whose values best match the final token of ``text``.

    The text vector comes from a text-only pass, so it never depends on the image.
    """
    if len(text) == 0:
        raise ValueError("text must be nonempty")
    img = scene_values(weights, scene, prefix)[layer, kv_head]
    t = text_values(weights, text)[layer, kv_head]
    value, flags = text_seg_from_values(img, t, target_mask)
    return ProbeResult(task, layer, kv_head, "mIoU", value, 1, flags)


def probe_sem_corr(weights: ModelWeights, scene_pair: tuple[SyntheticScene, SyntheticScene],
                   keypoint_pairs, layer: int, kv_head: int, prefix: Sequence[int] = ()) -> ProbeResult:
    src, tgt = scene_pair
    vs = scene_values(weights, src, prefix)[layer, kv_head]
    vt = scene_values(weights, tgt, prefix)[layer, kv_head]
    value, flags = sem_corr_from_values(vs, vt, keypoint_pairs, tgt.height, tgt.width)
    return ProbeResult("sem_corr", layer, kv_head, "PCK", value, 1, flags)


def probe_temp_corr(weights: ModelWeights, frames: Sequence[SyntheticScene], first_mask, final_mask,
                    layer: int, kv_head: int) -> ProbeResult:
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    vals = [scene_values(weights, f)[layer, kv_head] for f in frames]
    value, flags = temp_corr_from_values(vals, first_mask, final_mask, frames[0].height, frames[0].width)
    return ProbeResult("temp_corr", layer, kv_head, "JandF", value, 1, flags)


def pooled_similarity_choice(weights: ModelWeights, query_scene: SyntheticScene, option_scenes: Sequence[SyntheticScene],
                             layer: int, kv_head: int) -> SimilarityReadout:
    q = scene_values(weights, query_scene)[layer, kv_head]
    opts = [scene_values(weights, s)[layer, kv_head] for s in option_scenes]
    return pooled_similarity_from_values(q, opts)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    task: str
    grid: list[list[ProbeResult]]  # [layer][kv_head]
    per_layer_max: np.ndarray
    global_max: ProbeResult

    def results(self) -> list[ProbeResult]:
        return [r for row in self.grid for r in row]


def layer_head_sweep(weights: ModelWeights, episodes: Sequence[EpisodeSpec], task: str | None = None,
                     prefix: Sequence[int] | Callable = ()) -> SweepResult:
    """Probe every (layer, kv_head) cell; cells hold the mean metric over episodes."""
    if not episodes:
        raise ValueError("episodes must be nonempty")
    task = task or episodes[0].task
    for ep in episodes:
        _require(ep, task)
    c = weights.config
    evs = [EpisodeValues(weights, ep, prefix) for ep in episodes]
    grid = []
    for layer in range(c.n_layers):
        row = []
        for head in range(c.n_kv_heads):
            vals = [evaluate_cell(ev, layer, head)[0] for ev in evs]
            row.append(ProbeResult(task, layer, head, TASK_METRIC[task], float(np.mean(vals)), len(evs)))
        grid.append(row)
    per_layer = np.array([max(r.value for r in row) for row in grid])
    best = max((r for row in grid for r in row), key=lambda r: (r.value, -r.layer, -r.kv_head))
    return SweepResult(task=task, grid=grid, per_layer_max=per_layer, global_max=best)


def write_probe_csv(results: Sequence[ProbeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROBE_CSV_COLUMNS)
        for r in results:
            w.writerow(r.csv_row())
