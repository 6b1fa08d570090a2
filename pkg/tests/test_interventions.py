import csv
import json

import numpy as np
import pytest

from kvlab.interventions import (CONDITIONS, REPORT_COLUMNS, ExistenceQA, answer, build_knockout, existence_items,
                                 planted_noise_study, run_existence_eval, score_answers, study_inputs,
                                 write_report_csv, write_report_json)
from kvlab.key_analysis import KeyClassification, layer_groups
from kvlab.model import KnockoutSpec
from kvlab.plants import Readout
from kvlab.synthdata import gen_scene, tokenize

from conftest import PLANTED


def planted_classification(n_layers=12, n_heads=4, agnostic=PLANTED):
    mask = np.zeros((n_layers, n_heads), bool)
    for l, h in agnostic:
        mask[l, h] = True
    return KeyClassification(threshold=1.0, agnostic=mask, layer_groups=layer_groups(n_layers))


@pytest.fixture(scope="module")
def study(lab):
    return planted_noise_study(0, n_items=30, n_scenes=6, lab=lab)


# target selection

@pytest.mark.parametrize("group", ["early", "middle", "late"])
def test_agnostic_targets_are_planted_heads_in_group(group):
    cls = planted_classification()
    spec = build_knockout(cls, group, "agnostic", 0)
    layers = set(cls.layer_groups[group])
    assert spec.targets == {t for t in PLANTED if t[0] in layers}
    assert build_knockout(cls, group, "none", 0).targets == frozenset()


@pytest.mark.parametrize("seed", range(5))
def test_controls_match_count_per_layer(seed):
    cls = planted_classification(agnostic=PLANTED + ((9, 2),))
    agn = build_knockout(cls, "late", "agnostic", seed).targets
    per_layer = lambda ts: sorted(l for l, _ in ts)  # noqa: E731
    for cond in ("dependent", "random"):
        spec = build_knockout(cls, "late", cond, seed)
        assert per_layer(spec.targets) == per_layer(agn)
    assert not build_knockout(cls, "late", "dependent", seed).targets & agn
    assert build_knockout(cls, "late", "random", seed) == build_knockout(cls, "late", "random", seed)


def test_controls_fail_when_pool_too_small():
    cls = planted_classification()  # layers 0, 1: every head agnostic
    with pytest.raises(ValueError):
        build_knockout(cls, "early", "dependent", 0)
    assert len(build_knockout(cls, "early", "random", 0).targets) == 8
    with pytest.raises(ValueError):
        build_knockout(cls, "late", "nope", 0)
    with pytest.raises(ValueError):
        build_knockout(cls, "tail", "none", 0)


# answers and scoring

def test_readout_hand_confusion():
    r = Readout(np.array([[1.0, 0.0], [0.0, 1.0]]))
    rows = [[2, 1], [3, 0], [0, 1], [1, 0.5], [0, 2], [-1, 0]]
    gold = [True, True, True, False, False, False]
    preds = [answer(r, np.array(x, float))[0] for x in rows]
    assert preds == [True, True, False, True, False, False]
    # tp=2 fn=1 fp=1 tn=2
    f1, acc = score_answers(preds, gold)
    assert f1 == pytest.approx(2 / 3) and acc == pytest.approx(4 / 6)
    assert answer(r, np.array([1.0, 1.0])) == (False, 0.0)  # a tie answers "no"


def test_all_no_gold_and_answers():
    f1, acc = score_answers([False] * 4, [False] * 4)
    assert acc == 1.0 and f1 == 0.0


def test_existence_item_validation():
    sc = gen_scene(3)
    present = sc.objects[0].shape
    with pytest.raises(ValueError):
        ExistenceQA(sc, tokenize(f"is there a {present} ?"), False)
    with pytest.raises(ValueError):
        ExistenceQA(sc, tokenize("is there a red ?"), True)
    assert ExistenceQA(sc, tokenize(f"is there a {present} ?"), True).shape == present


def test_empty_spec_equals_no_spec(lab):
    items = existence_items(1, 4)
    a = run_existence_eval(lab.weights, items, None, lab.readout)
    b = run_existence_eval(lab.weights, items, KnockoutSpec(), lab.readout)
    assert [r.margin for r in a.records] == [r.margin for r in b.records]
    with pytest.raises(ValueError):
        run_existence_eval(lab.weights, [], None, lab.readout)


def test_study_inputs_deterministic():
    a_sc, a_it = study_inputs(4, 3, 5)
    b_sc, b_it = study_inputs(4, 3, 5)
    assert all(x.patches.tobytes() == y.patches.tobytes() for x, y in zip(a_sc, b_sc))
    assert [i.question for i in a_it] == [i.question for i in b_it]
    assert [i.gold for i in a_it] == [i.gold for i in b_it]


# the study

def test_study_structure(study):
    assert [r.condition for r in study.runs] == list(CONDITIONS)
    assert study.classification.heads("agnostic") == list(study.noise_heads)
    agn = study.by_condition()["agnostic"].spec.targets
    for cond in ("dependent", "random"):
        assert len(study.by_condition()[cond].spec.targets) == len(agn)
    assert all(r.n_items == 30 for r in study.runs)


def test_study_ordering(study):
    f1 = {k: v.f1 for k, v in study.by_condition().items()}
    assert f1["agnostic"] >= f1["none"] >= f1["dependent"]


def test_study_deterministic(study, lab):
    again = planted_noise_study(0, n_items=30, n_scenes=6, lab=lab)
    assert study.rows() == again.rows()


def test_report_writers(tmp_path, study):
    write_report_json(study.rows(), tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert [list(r) for r in back] == [list(REPORT_COLUMNS)] * 4
    write_report_csv(study.rows(), tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == REPORT_COLUMNS and [r[0] for r in rows[1:]] == list(CONDITIONS)
    assert float(rows[2][2]) == study.runs[1].f1
