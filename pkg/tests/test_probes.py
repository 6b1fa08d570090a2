import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvlab.metrics import iou
from kvlab.model import ModelConfig, ModelWeights, MultimodalInput, build_model, forward
from kvlab.probes import (ProbeResult, co_seg_from_values, fg_seg_from_values, layer_head_sweep, nearest_patch,
                          pooled_similarity_from_values, probe_episode, probe_fg_seg, probe_sem_corr,
                          probe_temp_corr, probe_text_seg, sem_corr_from_values, temp_corr_from_values,
                          text_seg_from_values, text_values, write_probe_csv)
from kvlab.synthdata import N_CODES, SHAPE_CODE0, SHAPES, code_decoder, gen_episode, gen_scene, token_id, tokenize

from oracles import best_cosegmentation


def blobs(rng, mask, d=4, sep=6.0):
    m = np.asarray(mask, bool).reshape(-1)
    v = rng.normal(scale=0.3, size=(m.size, d))
    v[m, 0] += sep
    return v


def rand_mask(rng, n=16, p=0.4):
    m = rng.random(n) < p
    m[0], m[-1] = True, False
    return m


# ProbeResult

def test_probe_result_validation():
    with pytest.raises(ValueError):
        ProbeResult("fg_seg", 0, 0, "mIoU", 1.5)
    with pytest.raises(ValueError):
        ProbeResult("fg_seg", 0, 0, "PCK", 0.5)


# fg_seg

def test_fg_seg_separable_is_perfect():
    rng = np.random.default_rng(0)
    masks = [rand_mask(rng) for _ in range(6)]
    vals = [blobs(rng, m) for m in masks]
    score, flags = fg_seg_from_values(vals[:5], masks[:5], vals[5:], masks[5:])
    assert score == 1.0 and not flags


def test_fg_seg_all_background_prediction_scores_zero():
    rng = np.random.default_rng(1)
    masks = [np.zeros(16, bool) for _ in range(5)]
    vals = [rng.normal(size=(16, 3)) for _ in range(6)]
    score, flags = fg_seg_from_values(vals[:5], masks, vals[5:], [rand_mask(rng)])
    assert score == 0.0 and flags["degenerate_support"]


# co_seg

def test_co_seg_planted_clusters():
    rng = np.random.default_rng(2)
    masks = [rand_mask(rng) for _ in range(3)]
    assert co_seg_from_values([blobs(rng, m) for m in masks], masks, seed=0)[0] == 1.0


def test_co_seg_constant_values():
    masks = [np.array([1, 1, 0, 0], bool), np.array([1, 0, 0, 0], bool)]
    vals = [np.ones((4, 2)), np.ones((4, 2))]
    score, _ = co_seg_from_values(vals, masks, seed=0)
    # every point lands in one cluster: the better assignment is "everything foreground"
    assert score == pytest.approx(np.mean([iou(np.ones(4), m) for m in masks]))


def test_co_seg_matches_exhaustive_partitions():
    vals = [np.array([[0.0], [0.2], [3.0], [3.1]]),
            np.array([[0.1], [2.9], [3.2], [0.3]]),
            np.array([[3.3], [0.05], [0.15], [2.8]])]
    masks = [np.array([0, 0, 1, 1], bool), np.array([0, 1, 1, 0], bool), np.array([1, 0, 0, 1], bool)]
    cost, parts, sizes = best_cosegmentation(vals, masks)
    expected = max(max(np.mean([iou(part == fg, m) for part, m in zip(np.split(lab, np.cumsum(sizes)[:-1]), masks)])
                       for fg in (0, 1)) for lab in parts)
    assert expected == 1.0  # frozen from the exhaustive oracle
    score, flags = co_seg_from_values(vals, masks, seed=5)
    assert flags["inertia"] == pytest.approx(cost, rel=1e-12)
    assert score == pytest.approx(expected)


# text_seg

def test_text_seg_plus_minus_construction():
    rng = np.random.default_rng(3)
    t = rng.normal(size=5)
    mask = rand_mask(rng)
    vals = np.where(mask[:, None], t, -t)
    assert text_seg_from_values(vals, t, mask)[0] == 1.0


def test_text_seg_equal_scores_all_foreground():
    mask = np.array([1, 0, 0, 0], bool)
    score, flags = text_seg_from_values(np.ones((4, 2)), np.zeros(2), mask)
    assert flags["degenerate_scores"] and score == pytest.approx(0.25)


# sem_corr

def test_sem_corr_identity_copy():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(64, 6))
    pairs = [((r, c), (r, c)) for r, c in [(0, 0), (3, 5), (7, 7)]]
    assert sem_corr_from_values(v, v.copy(), pairs, 8, 8)[0] == 1.0


def test_sem_corr_scalar_cosine_oracle():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(64, 4))
    tgt = rng.normal(size=(64, 4))
    q = src[2 * 8 + 3]
    cos = [float(q @ t / (np.linalg.norm(q) * np.linalg.norm(t))) for t in tgt]
    best = max(range(64), key=lambda j: (cos[j], -j))
    assert nearest_patch(q, tgt) == best
    truth = divmod(best, 8)
    assert sem_corr_from_values(src, tgt, [((2, 3), truth)], 8, 8)[0] == 1.0
    off = (truth[0], (truth[1] + 1) % 8)
    assert sem_corr_from_values(src, tgt, [((2, 3), off)], 8, 8)[0] == 0.0


def test_nearest_patch_tie_goes_to_lowest_index():
    tgt = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0]])
    assert nearest_patch(np.array([1.0, 0.0]), tgt) == 1


def test_sem_corr_threshold_is_inclusive():
    # 10x10 grid: threshold 1.0 patch; the prediction is exactly one patch off
    v = np.eye(100)
    assert sem_corr_from_values(v, v, [((0, 0), (0, 1))], 10, 10)[0] == 1.0


# temp_corr

def test_temp_corr_static_frames():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(64, 5))
    m = np.zeros((8, 8), bool)
    m[2:4, 2:5] = True
    score, parts = temp_corr_from_values([v, v, v], m, m, 8, 8)
    assert score == 1.0 and parts == {"J": 1.0, "F": 1.0}


def test_temp_corr_empty_prediction():
    v = np.random.default_rng(7).normal(size=(64, 3))
    gt = np.zeros((8, 8), bool)
    gt[1:3, 1:3] = True
    score, parts = temp_corr_from_values([v, v], np.zeros((8, 8), bool), gt, 8, 8)
    assert score == 0.0 and parts["J"] == 0.0 and parts["F"] == 0.0


def test_temp_corr_follows_shift():
    # frame 1 is frame 0 shifted one column right; values are unique per content
    rng = np.random.default_rng(8)
    base = rng.normal(size=(8, 9, 4))
    base[:, 8] = base[:, 0]  # the revealed column repeats known background content
    f0 = base[:, :8].reshape(64, 4)
    f1 = base[:, 1:9].reshape(64, 4)
    m0 = np.zeros((8, 8), bool)
    m0[3:5, 2:5] = True
    m1 = np.zeros((8, 8), bool)
    m1[3:5, 1:4] = True
    assert temp_corr_from_values([f0, f1], m0, m1, 8, 8)[0] == 1.0


# pooled similarity

def test_pooled_similarity_cases():
    q = np.array([[1.0, 2.0], [3.0, 0.0]])
    r = pooled_similarity_from_values(q, [np.array([[0.0, 1.0]]), q.copy()])
    assert r.chosen == 1 and r.similarities[1] == pytest.approx(1.0)
    assert pooled_similarity_from_values(q, [q.copy(), -q]).chosen == 0
    opts = [np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]), np.array([[0.0, 1.0]])]
    pooled = np.array([2.0, 1.0])
    hand = [2 / np.sqrt(5), 3 / (np.sqrt(5) * np.sqrt(2)), 1 / np.sqrt(5)]
    r = pooled_similarity_from_values(q, opts)
    assert np.allclose(r.similarities, hand, atol=1e-15) and r.chosen == 1
    assert np.allclose(r.query, pooled)
    z = pooled_similarity_from_values(q, [np.zeros((1, 2)), np.array([[-1.0, 0.0]])])
    assert z.similarities[0] == -1.0 and z.chosen == 1
    with pytest.raises(ValueError):
        pooled_similarity_from_values(q, [q])


# permutation bookkeeping

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_shuffling_patches_leaves_metrics_unchanged(seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(64)
    masks = [rand_mask(rng, 64) for _ in range(6)]
    vals = [blobs(rng, m, d=5) for m in masks]
    P = lambda a: a[perm]  # noqa: E731
    assert fg_seg_from_values(vals[:5], masks[:5], vals[5:], masks[5:])[0] == \
        fg_seg_from_values([P(v) for v in vals[:5]], [P(m) for m in masks[:5]], [P(vals[5])], [P(masks[5])])[0]
    assert co_seg_from_values(vals[:3], masks[:3], 1)[0] == \
        co_seg_from_values([P(v) for v in vals[:3]], [P(m) for m in masks[:3]], 1)[0]
    t = rng.normal(size=5)
    assert text_seg_from_values(vals[0], t, masks[0])[0] == text_seg_from_values(P(vals[0]), t, P(masks[0]))[0]
    src, tgt = rng.normal(size=(2, 64, 5))
    pairs = [((1, 2), (1, 2)), ((5, 5), (4, 6))]
    # sem_corr: shuffle only the target, then map predictions back through the permutation
    j_plain = [nearest_patch(src[r * 8 + c], tgt) for (r, c), _ in pairs]
    j_perm = [perm[nearest_patch(src[r * 8 + c], tgt[perm])] for (r, c), _ in pairs]
    assert j_plain == j_perm
    f0, f1 = rng.normal(size=(2, 64, 5))
    m0 = masks[0].reshape(8, 8)
    lab_plain = temp_corr_from_values([f0, f1], m0, m0, 8, 8)[0]
    inv = np.argsort(perm)
    # shuffling frame 1 changes which rows are where, not which labels they receive
    from kvlab.probes import propagate_labels
    shuffled = propagate_labels([f0, f1[perm]], m0)[-1]
    assert np.array_equal(shuffled[inv], propagate_labels([f0, f1], m0)[-1])
    assert 0.0 <= lab_plain <= 1.0


# model-level

def test_text_vector_independent_of_images(random_model):
    text = tokenize("red")
    before = text_values(random_model, text)
    for s in (0, 1):
        forward(random_model, MultimodalInput((), gen_scene(s).patches))
    assert before.tobytes() == text_values(random_model, text).tobytes()
    res = forward(random_model, MultimodalInput(text, gen_scene(2).patches))
    assert np.max(np.abs(res.cache.values[:, :, len(text) - 1] - before)) <= 1e-12


def test_probes_on_lab_cells(lab):
    w = lab.weights
    ep = gen_episode("fg_seg", 1)
    assert probe_fg_seg(w, ep, 0, 2).value == 1.0
    sem = gen_episode("sem_seg", 2)
    r = probe_text_seg(w, sem.query[0], sem.texts[0], sem.targets[0], 0, 2)
    assert r.value == 1.0 and r.metric == "mIoU"
    sc = gen_episode("sem_corr", 3)
    assert probe_sem_corr(w, (sc.support[0], sc.query[0]), sc.keypoint_pairs, 0, 3).value == 1.0
    tc = gen_episode("temp_corr", 4)
    assert probe_temp_corr(w, tc.query, tc.targets[0], tc.targets[-1], 0, 3).value == 1.0
    with pytest.raises(ValueError):
        probe_fg_seg(w, sem, 0, 2)


def test_probe_determinism(random_model):
    ep = gen_episode("co_seg", 11)
    a = probe_episode(random_model, ep, 3, 1)
    b = probe_episode(random_model, ep, 3, 1)
    assert a.value == b.value


# sweeps

def two_by_two_model():
    cfg = ModelConfig(n_layers=2, d_model=32, n_q_heads=4, n_kv_heads=2, d_head=8, seed=0)
    a = build_model(cfg).mutable_arrays()
    a["wo"][:] = 0.0
    a["w_out"][:] = 0.0
    a["patch_proj"][:] = 0.0
    a["patch_proj"][:, :N_CODES] = code_decoder(48)[:, :N_CODES]
    a["tok_emb"][:] = 0.0
    for s, shape in enumerate(SHAPES):
        a["tok_emb"][token_id(shape), SHAPE_CODE0 + s] = 1.0
    a["wv"][:] = 0.0
    for s in range(3):
        a["wv"][0, SHAPE_CODE0 + s, 8 + s] = 1.0  # layer 0, kv 1: shape codes
        a["wv"][1, s, 8 + s] = 1.0  # layer 1, kv 1: colour codes
    return ModelWeights(config=cfg, **a)


def test_sweep_two_by_two_hand_grid(tmp_path):
    w = two_by_two_model()
    eps = [gen_episode("sem_seg", s) for s in (1, 2, 3)]
    res = layer_head_sweep(w, eps)
    # zero values or a zero text vector: equal scores, all-foreground prediction
    area = np.mean([ep.targets[0].sum() / 64 for ep in eps])
    hand = np.array([[area, 1.0], [area, area]])
    got = np.array([[c.value for c in row] for row in res.grid])
    assert np.allclose(got, hand, atol=1e-12)
    assert np.allclose(res.per_layer_max, hand.max(axis=1), atol=1e-12)
    assert (res.global_max.layer, res.global_max.kv_head, res.global_max.value) == (0, 1, 1.0)
    path = tmp_path / "grid.csv"
    write_probe_csv(res.results(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "task,layer,kv_head,metric,value,n_episodes" and len(lines) == 5


def test_sweep_single_cell_equals_probe():
    cfg = ModelConfig(n_layers=1, d_model=8, n_q_heads=1, n_kv_heads=1, d_head=8, seed=2)
    w = build_model(cfg)
    ep = gen_episode("sem_corr", 6)
    res = layer_head_sweep(w, [ep])
    assert len(res.grid) == 1 and len(res.grid[0]) == 1
    assert res.grid[0][0].value == probe_episode(w, ep, 0, 0).value == res.global_max.value


def test_sweep_global_max_consistent(random_model):
    eps = [gen_episode("temp_corr", s) for s in (0, 1)]
    res = layer_head_sweep(random_model, eps)
    vals = [c.value for row in res.grid for c in row]
    assert res.global_max.value == max(vals)
    assert np.array_equal(res.per_layer_max, np.array([max(c.value for c in row) for row in res.grid]))
    with pytest.raises(ValueError):
        layer_head_sweep(random_model, [])
    with pytest.raises(ValueError):
        layer_head_sweep(random_model, [eps[0], gen_episode("fg_seg", 0)])
