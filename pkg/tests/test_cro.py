"""Robust classifier training: group minimax and the adversarial outer loop."""

import csv
import io
import itertools

import numpy as np
import pytest

from transbound import (
    CroConfig,
    InputError,
    JointTable,
    OptimizerConfig,
    SelectionDiagram,
    TabularClassifier,
    cro_loop,
    fixture,
    group_dro,
    risk,
)
from transbound.scm import zero_one_loss

FAST = CroConfig(
    delta=0.01,
    exact_adversary=True,
    seed=0,
    optimizer=OptimizerConfig(restarts=4, max_iters=80, seed=0),
)


def _joint(scope, supports, probs):
    return JointTable(scope, supports, np.asarray(probs, dtype=float))


def _enumerate_minimax(joints, scope, label):
    """Exhaustive minimax over deterministic tables; exact for tiny scopes."""
    supports = joints[0].supports
    cells = list(itertools.product(*(supports[v] for v in scope)))
    best = np.inf
    for labels in itertools.product(supports[label], repeat=len(cells)):
        h = TabularClassifier(scope, label, supports, dict(zip(cells, labels)))
        best = min(best, max(risk(p, h) for p in joints))
    return best


def test_single_dataset_reduces_to_the_bayes_classifier():
    supports = {"X": (0, 1), "Y": (0, 1)}
    p = _joint(("X", "Y"), supports, [[0.1, 0.3], [0.45, 0.15]])
    h = group_dro([p], ("X",), "Y")
    assert h.table == {(0,): 1, (1,): 0}
    assert risk(p, h) == pytest.approx(0.25)


def test_unstable_feature_is_ignored_under_group_shift():
    # shape S predicts the label at 0.75 in both groups; color C tracks the
    # label at 0.9 in one group and 0.1 in the other
    supports = {"S": (0, 1), "C": (0, 1), "Y": (0, 1)}
    joints = []
    for q in (0.9, 0.1):
        probs = np.zeros((2, 2, 2))
        for s, c, y in itertools.product((0, 1), repeat=3):
            p_y = 0.75 if y == s else 0.25
            p_c = q if c == y else 1.0 - q
            probs[s, c, y] = 0.5 * p_y * p_c
        joints.append(_joint(("S", "C", "Y"), supports, probs))
    h = group_dro(joints, ("S", "C"), "Y")
    assert h.table == {(s, c): s for s in (0, 1) for c in (0, 1)}
    for p in joints:
        assert risk(p, h) == pytest.approx(0.25)


def test_opposed_deterministic_pair_has_game_value_one_half():
    supports = {"X": (0, 1), "Y": (0, 1)}
    y_eq_x = _joint(("X", "Y"), supports, [[0.5, 0.0], [0.0, 0.5]])
    y_ne_x = _joint(("X", "Y"), supports, [[0.0, 0.5], [0.5, 0.0]])
    h = group_dro([y_eq_x, y_ne_x], ("X",), "Y")
    worst = max(risk(y_eq_x, h), risk(y_ne_x, h))
    assert worst == pytest.approx(0.5, abs=0.01)
    assert worst <= _enumerate_minimax([y_eq_x, y_ne_x], ("X",), "Y") + 1e-9


def test_group_minimax_improves_on_the_pooled_fit_on_random_instances():
    rng = np.random.default_rng(17)
    supports = {"X": (0, 1), "Y": (0, 1)}
    for _ in range(10):
        joints = [
            _joint(("X", "Y"), supports, rng.dirichlet(np.ones(4)).reshape(2, 2))
            for _ in range(3)
        ]
        h = group_dro(joints, ("X",), "Y", iters=300)
        worst = max(risk(p, h) for p in joints)
        # never worse than fitting the uniform pool, never better than every
        # group's own bayes risk
        pooled = group_dro(joints, ("X",), "Y", iters=1)
        assert worst <= max(risk(p, pooled) for p in joints) + 1e-9
        bayes = [risk(p, group_dro([p], ("X",), "Y", iters=1)) for p in joints]
        assert worst >= max(bayes) - 1e-9


def test_adversarial_loop_recovers_the_robust_rule_on_the_bow():
    bundle = fixture("bow")
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    out = cro_loop(bundle.sel, sources, ("X",), "Y", cfg=FAST)
    assert out.status == "equilibrium"
    assert len(out.rounds) <= 20
    # minimax worst case is 0.9575, attained only by negation and constant 1
    assert out.classifier.table in (
        {(0,): 1, (1,): 0},
        {(0,): 1, (1,): 1},
    )
    assert out.rounds[-1][0] == pytest.approx(0.9575, abs=0.01)
    assert out.rounds[-1][2] <= FAST.delta


def test_first_round_always_collects_an_adversary():
    bundle = fixture("bow")
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    out = cro_loop(bundle.sel, sources, ("X",), "Y", cfg=FAST)
    assert out.rounds[0][1] == -np.inf
    assert out.rounds[0][2] == np.inf
    assert len(out.adversary_datasets) >= 1
    gaps = [g for _, _, g in out.rounds]
    assert min(gaps) == gaps[-1]


def test_transportable_setting_converges_to_the_point_risk():
    bundle = fixture("bow")
    sel0 = SelectionDiagram.from_target_deltas(
        bundle.sel.base, {"1": set(), "2": set()}
    )
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    out = cro_loop(sel0, sources, ("X",), "Y", cfg=FAST)
    assert out.status == "equilibrium"
    # bounds are a point here, so the final worst case is the plain risk
    assert out.rounds[-1][0] == pytest.approx(
        risk(sources["1"], out.classifier), abs=1e-6
    )


def test_sampled_adversary_reaches_equilibrium_too():
    bundle = fixture("bow")
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    cfg = CroConfig(delta=0.03, adversary_samples=4000, seed=1,
                    optimizer=FAST.optimizer)
    out = cro_loop(bundle.sel, sources, ("X",), "Y", cfg=cfg)
    assert out.status == "equilibrium"
    assert out.rounds[-1][0] <= 0.9575 + 0.02


def test_result_csv_formats():
    bundle = fixture("bow")
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    out = cro_loop(bundle.sel, sources, ("X",), "Y", cfg=FAST)
    rows = list(csv.reader(io.StringIO(out.classifier_csv())))
    assert rows[0] == ["X", "Y"]
    assert {(int(r[0]),): int(r[1]) for r in rows[1:]} == out.classifier.table
    rounds = list(csv.reader(io.StringIO(out.rounds_csv())))
    assert rounds[0] == ["round", "worst_case_risk", "max_empirical_risk", "gap"]
    assert len(rounds) == len(out.rounds) + 1
    assert float(rounds[1][1]) == pytest.approx(out.rounds[0][0])


def test_config_and_input_validation():
    with pytest.raises(InputError):
        CroConfig(delta=0.0)
    with pytest.raises(InputError):
        CroConfig(max_rounds=0)
    with pytest.raises(InputError):
        CroConfig(adversary_samples=-1)
    bundle = fixture("bow")
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    with pytest.raises(InputError):
        cro_loop(bundle.sel, sources, ("Y",), "Y")
    with pytest.raises(InputError):
        group_dro([], ("X",), "Y")
