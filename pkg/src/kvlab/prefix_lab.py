"""Text placed before the image: effect on image values and on probe metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelWeights, MultimodalInput, forward, image_values
from .probes import TASK_METRIC, EpisodeValues, ProbeResult, evaluate_cell, layer_head_sweep
from .synthdata import COLORS, DOMAIN_PREFIX, RANDOM_PREFIX_TEXT, SHAPES, EpisodeSpec, SyntheticScene, tokenize

PREFIX_KINDS = ("none", "informative", "random", "incorrect")
PREFIX_TASKS = ("ref_seg", "sem_corr", "sem_seg")
PREFIX_CSV_COLUMNS = ("task", "condition", "layer", "kv_head", "metric", "value")


@dataclass(frozen=True)
class PrefixCondition:
    kind: str
    text: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in PREFIX_KINDS:
            raise ValueError(f"unknown prefix kind {self.kind!r}")
        if self.kind == "none" and self.text:
            raise ValueError("the none condition carries no text")
        if self.kind == "random" and tuple(self.text) != random_prefix():
            raise ValueError("the random condition uses the fixed control sentence")
        if self.kind in ("informative", "incorrect") and not self.text:
            raise ValueError(f"{self.kind} prefix needs text")

    @classmethod
    def none(cls) -> "PrefixCondition":
        return cls("none")

    @classmethod
    def random(cls) -> "PrefixCondition":
        return cls("random", random_prefix())


def random_prefix() -> tuple[int, ...]:
    return tokenize(RANDOM_PREFIX_TEXT)


def _other(options: Sequence[str], current: str) -> str:
    return options[(options.index(current) + 1) % len(options)]


def _target_object(episode: EpisodeSpec, index: int, scene: SyntheticScene):
    target = episode.targets[index]
    for o in scene.objects:
        if np.array_equal(o.mask, target):
            return o
    return scene.primary_object()


def resolve_condition(kind: str, episode: EpisodeSpec, index: int) -> PrefixCondition:
    """Prefix for scene ``index`` of ``episode`` (support scenes first, then queries).

    ref_seg and sem_corr describe the target object ("a {color} {shape}");
    the incorrect prefix names the next colour (ref_seg) or the next shape
    and colour (sem_corr). sem_seg uses the domain sentence; incorrect names
    the other domain.
    """
    if kind == "none":
        return PrefixCondition.none()
    if kind == "random":
        return PrefixCondition.random()
    if episode.task not in PREFIX_TASKS:
        raise ValueError(f"prefixing is defined for {PREFIX_TASKS}, got {episode.task!r}")
    scene = episode.scenes[index]
    if episode.task == "sem_seg":
        domain = scene.domain if kind == "informative" else _other(("day", "night"), scene.domain)
        return PrefixCondition(kind, tokenize(DOMAIN_PREFIX[domain]))
    if episode.task == "ref_seg":
        obj = _target_object(episode, index - len(episode.support), scene)
        color = obj.color if kind == "informative" else _other(COLORS, obj.color)
        return PrefixCondition(kind, tokenize(f"a {color} {obj.shape}"))
    obj = scene.objects[0]
    if kind == "informative":
        return PrefixCondition(kind, tokenize(f"a {obj.color} {obj.shape}"))
    return PrefixCondition(kind, tokenize(f"a {_other(COLORS, obj.color)} {_other(SHAPES, obj.shape)}"))


def kv_delta(weights: ModelWeights, scene: SyntheticScene, condition: PrefixCondition, placement: str = "prefix") -> np.ndarray:
    """Mean L2 distance per (layer, kv_head) between image values with and without the text.

    ``placement="suffix"`` puts the text after the image instead.
    """
    if placement not in ("prefix", "suffix"):
        raise ValueError("placement must be 'prefix' or 'suffix'")
    base = image_values(forward(weights, MultimodalInput((), scene.patches)).cache)
    if placement == "prefix":
        inp = MultimodalInput(condition.text, scene.patches)
    else:
        inp = MultimodalInput((), scene.patches, condition.text)
    other = image_values(forward(weights, inp).cache)
    return np.linalg.norm(other - base, axis=-1).mean(axis=-1)


def _prefix_fn(episode: EpisodeSpec, condition: PrefixCondition | str):
    if isinstance(condition, PrefixCondition):
        return condition.text
    index = {id(s): i for i, s in enumerate(episode.scenes)}
    return lambda scene: resolve_condition(condition, episode, index[id(scene)]).text


def prefixed_probe(weights: ModelWeights, episode: EpisodeSpec, condition: PrefixCondition | str,
                   layer: int, kv_head: int) -> ProbeResult:
    """Run the task's probe with a prefix before every image.

    A string condition is resolved per scene with :func:`resolve_condition`.
    """
    if episode.task not in PREFIX_TASKS:
        raise ValueError(f"prefixing is defined for {PREFIX_TASKS}, got {episode.task!r}")
    value, flags = evaluate_cell(EpisodeValues(weights, episode, _prefix_fn(episode, condition)), layer, kv_head)
    kind = condition.kind if isinstance(condition, PrefixCondition) else condition
    return ProbeResult(episode.task, layer, kv_head, TASK_METRIC[episode.task], value, 1, {**flags, "condition": kind})


@dataclass(frozen=True)
class PrefixRow:
    task: str
    condition: str
    layer: int
    kv_head: int
    metric: str
    value: float

    def csv_row(self) -> list:
        return [self.task, self.condition, self.layer, self.kv_head, self.metric, repr(float(self.value))]


def prefix_table(weights: ModelWeights, episodes: Sequence[EpisodeSpec], cell: tuple[int, int] | None = None,
                 reselect: bool = False) -> list[PrefixRow]:
    """One row per condition, in the order none, informative, random, incorrect.

    The probed cell is ``cell`` or, if omitted, the best cell of the unprefixed
    sweep. ``reselect`` picks the best cell separately for each condition.
    """
    if not episodes:
        raise ValueError("episodes must be nonempty")
    task = episodes[0].task
    if cell is None:
        best = layer_head_sweep(weights, episodes, task).global_max
        cell = (best.layer, best.kv_head)
    rows = []
    for kind in PREFIX_KINDS:
        if reselect:
            best = layer_head_sweep(weights, episodes, task,
                                    prefix=_ConditionPrefix(episodes, kind)).global_max
            layer, head, value = best.layer, best.kv_head, best.value
        else:
            layer, head = cell
            value = float(np.mean([prefixed_probe(weights, ep, kind, layer, head).value for ep in episodes]))
        rows.append(PrefixRow(task, kind, layer, head, TASK_METRIC[task], value))
    return rows


class _ConditionPrefix:
    """Scene -> prefix tokens across several episodes, for sweeps."""

    def __init__(self, episodes: Sequence[EpisodeSpec], kind: str):
        self._map = {}
        for ep in episodes:
            for i, s in enumerate(ep.scenes):
                self._map[id(s)] = resolve_condition(kind, ep, i).text

    def __call__(self, scene: SyntheticScene) -> tuple[int, ...]:
        return self._map[id(scene)]


def write_prefix_csv(rows: Sequence[PrefixRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREFIX_CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())
