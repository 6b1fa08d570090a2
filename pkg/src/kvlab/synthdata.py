"""Deterministic patch-grid scenes and task episodes.

Every patch is a 4x4x3 pixel block. Backgrounds are a flat grey fill with a
faint background texture; objects are a flat colour fill plus a shape texture
and a part texture keyed by the patch's position inside the object's bounding
box. The block is then mapped to a ``patch_dim`` vector by a fixed seeded
linear projection. Textures are mutually orthogonal and orthogonal to the
per-channel constant fills, so colour, shape and part are all linearly
recoverable from a patch vector.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

PATCH_PX = 4
CHANNELS = 3
RAW_DIM = PATCH_PX * PATCH_PX * CHANNELS
MAX_PART = 4  # part textures cover bounding boxes up to 4x4 patches
NIGHT_GAIN = 0.3

TEXTURE_SEED = 20240611
PROJECTION_SEED = 7

SHAPES = ("square", "disc", "bar")
COLORS = ("red", "green", "blue")
COLOR_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.1, 0.1, 0.9),
}
BACKGROUND_RGB = (0.5, 0.5, 0.5)
SHAPE_AMP = 1.0
PART_AMP = 1.0
BG_AMP = 0.5

TASKS = ("fg_seg", "co_seg", "sem_seg", "ref_seg", "sem_corr", "temp_corr", "existence_qa")

# Fixed control sentence used as the "random" prefix.
RANDOM_PREFIX_TEXT = ("A rustic wooden table filled with freshly baked croissants, dripping honey, "
                      "and a steaming pot of Earl Grey tea beside a bowl of ripe figs.")
DOMAIN_PREFIX = {
    "day": "the image is taken at daytime and it is from city street view",
    "night": "the image is taken at nighttime and it is from highway",
}


class SceneGenerationError(RuntimeError):
    pass


class EpisodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer


@lru_cache(maxsize=None)
def vocabulary() -> tuple[str, ...]:
    data = json.loads(resources.files("kvlab").joinpath("vocab.json").read_text())
    return tuple(data["tokens"])


@lru_cache(maxsize=None)
def _token_index() -> dict[str, int]:
    return {w: i for i, w in enumerate(vocabulary())}


def token_id(word: str) -> int:
    return _token_index()[word]


def tokenize(text: str) -> tuple[int, ...]:
    idx = _token_index()
    unk = idx["<unk>"]
    return tuple(idx.get(w, unk) for w in re.findall(r"[a-z]+|[^\sa-z]", text.lower()))


def detokenize(tokens: Sequence[int]) -> str:
    vocab = vocabulary()
    return " ".join(vocab[t] for t in tokens)


# ---------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=None)
def texture_basis() -> np.ndarray:
    """Orthonormal 48x48 pixel basis.

    Columns 0-2 are the per-channel constant fills, 3-5 the shape textures,
    6-21 the part textures and 22 the background texture.
    """
    const = np.zeros((RAW_DIM, CHANNELS))
    for ch in range(CHANNELS):
        const[ch::CHANNELS, ch] = 1.0 / PATCH_PX
    rng = np.random.default_rng(TEXTURE_SEED)
    rest = rng.normal(size=(RAW_DIM, RAW_DIM - CHANNELS))
    q, r = np.linalg.qr(np.concatenate([const, rest], axis=1))
    q = q * np.sign(np.diag(r))[None, :]
    return q


COLOR_CODES = slice(0, 3)
SHAPE_CODE0 = 3
PART_CODE0 = 6
BG_CODE = 6 + MAX_PART * MAX_PART
N_CODES = BG_CODE + 1


@lru_cache(maxsize=None)
def pixel_projection(patch_dim: int) -> np.ndarray:
    rng = np.random.default_rng([PROJECTION_SEED, patch_dim])
    return rng.normal(size=(RAW_DIM, patch_dim)) / np.sqrt(RAW_DIM)


def code_decoder(patch_dim: int) -> np.ndarray:
    """Linear map from patch vectors back to texture-basis coordinates.

    Exact when ``patch_dim >= 48``.
    """
    return np.linalg.pinv(pixel_projection(patch_dim)) @ texture_basis()


def render_code(kind: str, color: str | None = None, shape: str | None = None, part: tuple[int, int] | None = None) -> np.ndarray:
    """Texture-basis coordinates of one patch before the domain gain."""
    code = np.zeros(RAW_DIM)
    if kind == "background":
        code[COLOR_CODES] = PATCH_PX * np.asarray(BACKGROUND_RGB)
        code[BG_CODE] = BG_AMP
    else:
        code[COLOR_CODES] = PATCH_PX * np.asarray(COLOR_RGB[color])
        code[SHAPE_CODE0 + SHAPES.index(shape)] = SHAPE_AMP
        code[PART_CODE0 + part[0] * MAX_PART + part[1]] = PART_AMP
    return code


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: int | None = None
    vertical: bool | None = None  # bars only
    position: tuple[int, int] | None = None  # top-left patch of the bounding box


@dataclass
class SceneObject:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]  # row, col, height, width in patches
    mask: np.ndarray
    keypoints: list[tuple[int, int]]
    primary: bool = False

    @property
    def class_name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass
class SyntheticScene:
    height: int
    width: int
    patch_dim: int
    domain: str
    objects: list[SceneObject]
    patches: np.ndarray  # (H*W) x patch_dim, row-major
    codes: np.ndarray    # (H*W) x 48 texture-basis coordinates, after the domain gain
    caption: tuple[int, ...]
    referring_expressions: list[tuple[tuple[int, ...], int]]
    seed: int | None = None

    @property
    def n_patches(self) -> int:
        return self.height * self.width

    def background_mask(self) -> np.ndarray:
        m = np.ones((self.height, self.width), dtype=bool)
        for o in self.objects:
            m &= ~o.mask
        return m

    def class_mask(self, shape: str | None = None, color: str | None = None) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        for o in self.objects:
            if (shape is None or o.shape == shape) and (color is None or o.color == color):
                m |= o.mask
        return m

    def primary_object(self) -> SceneObject | None:
        for o in self.objects:
            if o.primary:
                return o
        return None

    def has_shape(self, shape: str) -> bool:
        return any(o.shape == shape for o in self.objects)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 8
    width: int = 8
    n_objects: int = 2
    domain: str = "day"
    patch_dim: int = 48
    objects: tuple[ObjectSpec, ...] = ()  # forced objects; the first is primary
    avoid: np.ndarray | None = field(default=None, compare=False)  # H x W cells random objects must not use


def shape_footprint(shape: str, size: int, vertical: bool = False) -> np.ndarray:
    """Boolean footprint inside the bounding box, in patch units."""
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        c = (size - 1) / 2.0
        rr, cc = np.mgrid[0:size, 0:size]
        return np.hypot(rr - c, cc - c) <= size / 2.0 - 0.25
    if shape == "bar":
        return np.ones((size, 1) if vertical else (1, size), dtype=bool)
    raise SceneGenerationError(f"unknown shape {shape!r}")


_SIZES = {"square": (2, 3), "disc": (3, 4), "bar": (3, 4)}


def object_keypoints(mask: np.ndarray) -> list[tuple[int, int]]:
    """Extremal and central mask patches, deduplicated in a fixed order."""
    cells = np.argwhere(mask)
    if len(cells) == 0:
        return []
    r0, c0 = cells.min(axis=0)
    r1, c1 = cells.max(axis=0)
    centre = ((r0 + r1) / 2.0, (c0 + c1) / 2.0)
    first = tuple(cells[0])
    last = tuple(cells[-1])
    left = tuple(min(cells.tolist(), key=lambda p: (p[1], p[0])))
    right = tuple(max(cells.tolist(), key=lambda p: (p[1], p[0])))
    mid = tuple(min(cells.tolist(), key=lambda p: ((p[0] - centre[0]) ** 2 + (p[1] - centre[1]) ** 2, p[0], p[1])))
    out: list[tuple[int, int]] = []
    for p in (first, last, left, right, mid):
        p = (int(p[0]), int(p[1]))
        if p not in out:
            out.append(p)
    return out


def _resolve(spec: ObjectSpec, rng: np.random.Generator) -> tuple[str, str, np.ndarray]:
    if spec.shape not in SHAPES:
        raise SceneGenerationError(f"unknown shape {spec.shape!r}")
    if spec.color not in COLORS:
        raise SceneGenerationError(f"unknown color {spec.color!r}")
    size = spec.size if spec.size is not None else int(rng.choice(_SIZES[spec.shape]))
    vertical = spec.vertical if spec.vertical is not None else bool(rng.integers(2))
    return spec.shape, spec.color, shape_footprint(spec.shape, size, vertical)


def _place(fp: np.ndarray, occupied: np.ndarray, rng: np.random.Generator, position, tries: int = 200):
    H, W = occupied.shape
    h, w = fp.shape
    if h > H or w > W:
        raise SceneGenerationError("object does not fit in the grid")
    if position is not None:
        r, c = position
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise SceneGenerationError(f"object at {position} leaves the grid")
        if (occupied[r:r + h, c:c + w] & fp).any():
            raise SceneGenerationError(f"object at {position} overlaps another object")
        return r, c
    for _ in range(tries):
        r = int(rng.integers(0, H - h + 1))
        c = int(rng.integers(0, W - w + 1))
        if not (occupied[r:r + h, c:c + w] & fp).any():
            return r, c
    raise SceneGenerationError("could not place object without overlap")


def _relation(a: SceneObject, b: SceneObject) -> str:
    ra, ca = np.argwhere(a.mask).mean(axis=0)
    rb, cb = np.argwhere(b.mask).mean(axis=0)
    dr, dc = rb - ra, cb - ca
    if abs(dc) >= abs(dr):
        return "left of" if dc > 0 else "right of"
    return "above" if dr > 0 else "below"


def caption_text(objects: Sequence[SceneObject]) -> str:
    if not objects:
        return "a blank image"
    first = objects[0]
    if len(objects) == 1:
        return f"a {first.color} {first.shape}"
    second = objects[1]
    return f"a {first.color} {first.shape} {_relation(first, second)} a {second.color} {second.shape}"


def render_patches(height: int, width: int, objects: Sequence[SceneObject], domain: str, patch_dim: int) -> tuple[np.ndarray, np.ndarray]:
    if domain not in ("day", "night"):
        raise SceneGenerationError(f"unknown domain {domain!r}")
    bg = render_code("background")
    codes = np.tile(bg, (height * width, 1))
    for o in objects:
        r0, c0, _, _ = o.bbox
        for r, c in np.argwhere(o.mask):
            codes[r * width + c] = render_code("object", o.color, o.shape, (int(r - r0), int(c - c0)))
    if domain == "night":
        codes = codes * NIGHT_GAIN
    pixels = codes @ texture_basis().T
    return pixels @ pixel_projection(patch_dim), codes


def gen_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Render a scene; a pure function of ``(seed, spec)``."""
    rng = np.random.default_rng(seed)
    H, W = spec.height, spec.width
    occupied = np.zeros((H, W), dtype=bool) if spec.avoid is None else np.array(spec.avoid, dtype=bool)
    reserved = occupied.copy()
    forced = list(spec.objects)
    n_random = max(0, spec.n_objects - len(forced))
    used = {(o.shape, o.color) for o in forced}
    specs: list[ObjectSpec] = list(forced)
    for _ in range(n_random):
        free = [(s, c) for s in SHAPES for c in COLORS if (s, c) not in used]
        # distractors avoid the shape of the primary object so class masks stay clean
        if forced:
            free = [(s, c) for s, c in free if s != forced[0].shape] or free
        s, c = free[int(rng.integers(len(free)))]
        used.add((s, c))
        specs.append(ObjectSpec(s, c))
    objects: list[SceneObject] = []
    occupied = np.zeros((H, W), dtype=bool)
    for i, ospec in enumerate(specs):
        shape, color, fp = _resolve(ospec, rng)
        block = occupied | (reserved if ospec.position is None else False)
        r, c = _place(fp, block, rng, ospec.position)
        mask = np.zeros((H, W), dtype=bool)
        mask[r:r + fp.shape[0], c:c + fp.shape[1]] = fp
        occupied |= mask
        objects.append(SceneObject(shape=shape, color=color, bbox=(r, c, fp.shape[0], fp.shape[1]), mask=mask,
                                   keypoints=object_keypoints(mask), primary=(i == 0)))
    patches, codes = render_patches(H, W, objects, spec.domain, spec.patch_dim)
    refs = [(tokenize(f"the {o.color} {o.shape}"), i) for i, o in enumerate(objects)]
    return SyntheticScene(height=H, width=W, patch_dim=spec.patch_dim, domain=spec.domain, objects=objects,
                          patches=patches, codes=codes, caption=tokenize(caption_text(objects)),
                          referring_expressions=refs, seed=seed)


# ---------------------------------------------------------------------------
# JSON export


def mask_to_rle(mask: np.ndarray) -> str:
    """Row-major run lengths, alternating background/foreground, starting with background."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs = []
    cur, n = False, 0
    for v in flat:
        if v == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = v, 1
    runs.append(n)
    return " ".join(str(r) for r in runs)


def rle_to_mask(rle: str, height: int, width: int) -> np.ndarray:
    flat = np.zeros(height * width, dtype=bool)
    pos, val = 0, False
    for tok in rle.split():
        n = int(tok)
        flat[pos:pos + n] = val
        pos += n
        val = not val
    if pos != height * width:
        raise ValueError("run lengths do not cover the grid")
    return flat.reshape(height, width)


def scene_to_json(scene: SyntheticScene) -> dict:
    return {
        "height": scene.height,
        "width": scene.width,
        "patch_dim": scene.patch_dim,
        "domain": scene.domain,
        "seed": scene.seed,
        "caption": detokenize(scene.caption),
        "objects": [
            {"shape": o.shape, "color": o.color, "bbox": list(o.bbox), "primary": o.primary,
             "mask": mask_to_rle(o.mask), "keypoints": [list(p) for p in o.keypoints]}
            for o in scene.objects
        ],
        "referring_expressions": [{"text": detokenize(t), "target": i} for t, i in scene.referring_expressions],
    }


def scene_from_json(d: dict) -> SyntheticScene:
    H, W = d["height"], d["width"]
    objects = [SceneObject(shape=o["shape"], color=o["color"], bbox=tuple(o["bbox"]), mask=rle_to_mask(o["mask"], H, W),
                           keypoints=[tuple(p) for p in o["keypoints"]], primary=o["primary"]) for o in d["objects"]]
    patches, codes = render_patches(H, W, objects, d["domain"], d["patch_dim"])
    refs = [(tokenize(r["text"]), r["target"]) for r in d["referring_expressions"]]
    return SyntheticScene(height=H, width=W, patch_dim=d["patch_dim"], domain=d["domain"], objects=objects,
                          patches=patches, codes=codes, caption=tokenize(d["caption"]), referring_expressions=refs,
                          seed=d.get("seed"))


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeSpec:
    task: str
    seed: int
    support: list[SyntheticScene]
    query: list[SyntheticScene]
    support_targets: list[np.ndarray] = field(default_factory=list)
    targets: list[np.ndarray] = field(default_factory=list)
    texts: list[tuple[int, ...]] = field(default_factory=list)
    keypoint_pairs: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    questions: list[tuple[tuple[int, ...], bool]] = field(default_factory=list)
    class_shape: str | None = None
    class_color: str | None = None

    @property
    def scenes(self) -> list[SyntheticScene]:
        return self.support + self.query


def question_tokens(shape: str) -> tuple[int, ...]:
    return tokenize(f"is there a {shape} ?")


def _child_seeds(rng: np.random.Generator, n: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def gen_episode(task: str, seed: int, sizes: dict | None = None) -> EpisodeSpec:
    """Build an episode for one probing task; a pure function of its arguments.

    ``sizes`` keys: ``height``, ``width``, ``patch_dim``, ``n_support``,
    ``n_query``, ``n_scenes``, ``n_frames``, ``n_distractors``, ``n_items``,
    ``domain``.
    """
    if task not in TASKS:
        raise EpisodeError(f"unknown task {task!r}")
    sizes = dict(sizes or {})
    H = int(sizes.get("height", 8))
    W = int(sizes.get("width", 8))
    pd = int(sizes.get("patch_dim", 48))
    n_dis = int(sizes.get("n_distractors", 1))
    domain = sizes.get("domain", "day")
    rng = np.random.default_rng(seed)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = COLORS[int(rng.integers(len(COLORS)))]

    def scene(s, objects=(), n_objects=None, dom=None, avoid=None):
        dom = dom or (domain if domain != "mixed" else ("day", "night")[int(np.random.default_rng(s).integers(2))])
        n = len(objects) + n_dis if n_objects is None else n_objects
        return gen_scene(s, SceneSpec(H, W, n, dom, pd, tuple(objects), avoid))

    primary = ObjectSpec(shape, color)
    ep = EpisodeSpec(task=task, seed=seed, support=[], query=[], class_shape=shape, class_color=color)

    if task == "fg_seg":
        n_sup = int(sizes.get("n_support", 5))
        n_q = int(sizes.get("n_query", 1))
        if n_sup != 5 or n_q < 1:
            raise EpisodeError("fg_seg needs 5 support scenes and at least one query")
        seeds = _child_seeds(rng, n_sup + n_q)
        ep.support = [scene(s, [primary]) for s in seeds[:n_sup]]
        ep.query = [scene(s, [primary]) for s in seeds[n_sup:]]
        ep.support_targets = [sc.primary_object().mask.copy() for sc in ep.support]
        ep.targets = [sc.primary_object().mask.copy() for sc in ep.query]
    elif task == "co_seg":
        n = int(sizes.get("n_scenes", 3))
        if n < 2:
            raise EpisodeError("co_seg needs at least two scenes")
        ep.query = [scene(s, [primary]) for s in _child_seeds(rng, n)]
        ep.targets = [sc.primary_object().mask.copy() for sc in ep.query]
    elif task == "sem_seg":
        n_q = int(sizes.get("n_query", 1))
        if n_q < 1:
            raise EpisodeError("sem_seg needs at least one query")
        ep.class_color = None
        for s in _child_seeds(rng, n_q):
            sc = scene(s, [ObjectSpec(shape, COLORS[int(np.random.default_rng(s).integers(len(COLORS)))])])
            ep.query.append(sc)
            ep.targets.append(sc.class_mask(shape=shape))
            ep.texts.append(tokenize(shape))
    elif task == "ref_seg":
        n_q = int(sizes.get("n_query", 1))
        if n_q < 1 or n_dis < 1:
            raise EpisodeError("ref_seg needs at least one query and one distractor")
        for s in _child_seeds(rng, n_q):
            sc = scene(s, [primary])
            pick = int(np.random.default_rng(s + 1).integers(len(sc.objects)))
            text, idx = sc.referring_expressions[pick]
            ep.query.append(sc)
            ep.targets.append(sc.objects[idx].mask.copy())
            ep.texts.append(text)
    elif task == "sem_corr":
        size = int(rng.choice(_SIZES[shape]))
        vertical = bool(rng.integers(2))
        obj = ObjectSpec(shape, color, size=size, vertical=vertical)
        s_src, s_tgt = _child_seeds(rng, 2)
        src = scene(s_src, [obj])
        tgt = scene(s_tgt, [obj])
        ep.support = [src]
        ep.query = [tgt]
        ep.keypoint_pairs = list(zip(src.objects[0].keypoints, tgt.objects[0].keypoints))
        ep.targets = [tgt.objects[0].mask.copy()]
    elif task == "temp_corr":
        T = int(sizes.get("n_frames", 4))
        if T < 2:
            raise EpisodeError("temp_corr needs at least two frames")
        size = int(rng.choice(_SIZES[shape]))
        vertical = bool(rng.integers(2))
        fp = shape_footprint(shape, size, vertical)
        h, w = fp.shape
        r, c = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
        path = [(r, c)]
        for _ in range(T - 1):
            moves = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                     if 0 <= r + dr <= H - h and 0 <= c + dc <= W - w]
            dr, dc = moves[int(rng.integers(len(moves)))]
            r, c = r + dr, c + dc
            path.append((r, c))
        swept = np.zeros((H, W), dtype=bool)
        for r, c in path:
            swept[r:r + h, c:c + w] |= fp
        base_seed = int(rng.integers(0, 2**31 - 1))
        dom = domain if domain != "mixed" else "day"
        distract = []
        for k in range(n_dis, 0, -1):
            try:
                distract = gen_scene(base_seed, SceneSpec(H, W, k, dom, pd, (), swept)).objects
                break
            except SceneGenerationError:
                continue
        distract_specs = [ObjectSpec(o.shape, o.color, position=o.bbox[:2],
                                     size=max(o.bbox[2], o.bbox[3]) if o.shape != "bar" else max(o.bbox[2], o.bbox[3]),
                                     vertical=o.bbox[2] > o.bbox[3]) for o in distract if o.shape != shape or o.color != color]
        for t, pos in enumerate(path):
            mover = ObjectSpec(shape, color, size=size, vertical=vertical, position=pos)
            fr = gen_scene(base_seed + t, SceneSpec(H, W, 1 + len(distract_specs), dom, pd, (mover, *distract_specs)))
            ep.query.append(fr)
            ep.targets.append(fr.objects[0].mask.copy())
    elif task == "existence_qa":
        n = int(sizes.get("n_items", 8))
        if n < 1:
            raise EpisodeError("existence_qa needs at least one item")
        for s in _child_seeds(rng, n):
            r2 = np.random.default_rng(s)
            sc = gen_scene(s, SceneSpec(H, W, int(r2.integers(1, 3)), domain if domain != "mixed" else "day", pd))
            present = sorted({o.shape for o in sc.objects})
            absent = [x for x in SHAPES if x not in present]
            if absent and r2.integers(2):
                q = absent[int(r2.integers(len(absent)))]
            else:
                q = present[int(r2.integers(len(present)))]
            ep.query.append(sc)
            ep.questions.append((question_tokens(q), sc.has_shape(q)))
    return ep
