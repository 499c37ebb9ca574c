"""End-to-end checks of the headline numbers, one criterion per test.

Each test prints a single pass/fail line with the measured values before
asserting, so a full run yields a ten-line scoreboard.
"""

import time

import numpy as np
import pytest

from transbound import (
    BoundTask,
    CroConfig,
    JointTable,
    OptimizerConfig,
    brute_force_bound,
    builtin_classifier,
    conditional_mean,
    cro_loop,
    expectation,
    fixture,
    from_scm,
    group_dro,
    risk,
    run_chain,
    solve_bounds,
    squared_error,
)
from transbound.bounds import _CompiledTask, _free_dimension
from transbound.scm import zero_one_loss

from test_bounds import _random_consistent_target


def _criterion(num, checks):
    ok = all(flag for _, flag in checks)
    detail = "; ".join(f"{d} [{'ok' if f else 'FAIL'}]" for d, f in checks)
    print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _task(name, clf, direction="max"):
    bundle = fixture(name)
    h = builtin_classifier(bundle, clf)
    psi = h.loss_table(zero_one_loss(bundle.supports[bundle.label]))
    sources = {d: bundle.scms[d].entailed_distribution()
               for d in bundle.sel.sources}
    return BoundTask(bundle.sel, sources, psi, direction)


def test_criterion_01_ten_covariate_risk_table():
    printed = {
        "h1": (0.01, 0.04, 0.49),
        "h2": (0.20, 0.20, 0.20),
        "h3": (0.03, 0.05, 0.04),
    }
    bundle = fixture("anti_causal")
    start = time.perf_counter()
    checks = []
    for name, wants in printed.items():
        h = builtin_classifier(bundle, name)
        for dom, want in zip(("1", "2", "*"), wants):
            got = risk(bundle.scms[dom].entailed_distribution(), h)
            checks.append((f"{name}@{dom} {got:.4f} vs {want}",
                           abs(got - want) <= 0.005))
    elapsed = time.perf_counter() - start
    checks.append((f"runtime {elapsed:.1f}s < 5s", elapsed < 5.0))
    _criterion(1, checks)


def test_criterion_02_bow_source_risks():
    bundle = fixture("bow")
    h = builtin_classifier(bundle, "notx")
    r1 = risk(bundle.scms["1"].entailed_distribution(), h)
    r2 = risk(bundle.scms["2"].entailed_distribution(), h)
    _criterion(2, [
        (f"source 1 {r1:.4f} vs 0.11", abs(r1 - 0.11) <= 0.01),
        (f"source 2 {r2:.4f} vs 0.06", abs(r2 - 0.06) <= 0.01),
    ])


def test_criterion_03_worst_case_bound_values():
    targets = [
        ("bow", "notx", 0.18, 0.02),
        ("anti_causal", "h1", 0.90, 0.03),
        ("anti_causal", "h3", 0.05, 0.02),
    ]
    checks = []
    for name, clf, want, tol in targets:
        start = time.perf_counter()
        res = solve_bounds(_task(name, clf), OptimizerConfig(restarts=10, seed=0))
        elapsed = time.perf_counter() - start
        checks.append((f"{name}/{clf} sup {res.upper:.4f} vs {want}",
                       abs(res.upper - want) <= tol))
        checks.append((f"{name}/{clf} runtime {elapsed:.0f}s < 60s", elapsed < 60.0))
    _criterion(3, checks)


def test_criterion_04_oracle_equivalence_on_small_tasks():
    candidates = [("bow", "notx"), ("covariate_shift", "bayes"),
                  ("simplify", "bayes")]
    checks = []
    for name, clf in candidates:
        task = _task(name, clf, "both")
        dim = _free_dimension(_CompiledTask(task, OptimizerConfig(), True))
        if dim > 12:
            continue
        res = solve_bounds(task)
        orc = brute_force_bound(task)
        checks.append((
            f"{name} dim {dim} gap "
            f"{max(abs(res.upper - orc.upper), abs(res.lower - orc.lower)):.4f}",
            abs(res.upper - orc.upper) <= 0.02
            and abs(res.lower - orc.lower) <= 0.02,
        ))
    assert checks, "no task fell under the free-parameter cap"
    _criterion(4, checks)


def test_criterion_05_soundness_of_the_bounds():
    cases = [("bow", "notx"), ("covariate_shift", "bayes"),
             ("simplify", "bayes"), ("alzheimer", "h3")]
    checks = []
    rng = np.random.default_rng(1234)
    for name, clf in cases:
        bundle = fixture(name)
        task = _task(name, clf, "both")
        res = solve_bounds(task, OptimizerConfig(restarts=8, seed=0))
        models = {d: from_scm(bundle.scms[d]) for d in bundle.sel.sources}
        inside = 0
        for _ in range(100):
            target = _random_consistent_target(bundle, models, rng)
            val = expectation(target.entailed_distribution(), task.psi)
            inside += int(res.lower - 1e-3 <= val <= res.upper + 1e-3)
        checks.append((f"{name} {inside}/100 inside", inside == 100))
    _criterion(5, checks)


def test_criterion_06_posterior_credible_bounds():
    bundle = fixture("bow")
    h = builtin_classifier(bundle, "notx")
    psi = h.loss_table(zero_one_loss((0, 1)))
    truth = risk(bundle.scms["*"].entailed_distribution(), h)
    data = {d: bundle.scms[d].sample(10000, seed=1, domain=d) for d in ("1", "2")}
    big = run_chain(bundle.sel, data, psi, iters=600, burn_in=200, chains=4, seed=0)
    covered = 0
    for s in range(50):
        data = {d: bundle.scms[d].sample(1000, seed=100 + s, domain=d)
                for d in ("1", "2")}
        out = run_chain(bundle.sel, data, psi, iters=600, burn_in=200,
                        chains=4, seed=s)
        covered += int(out.q_hat_min <= truth <= out.q_hat_max)
    _criterion(6, [
        (f"q_hat_max {big.q_hat_max:.4f} vs 0.18",
         abs(big.q_hat_max - 0.18) <= 0.03),
        (f"coverage {covered}/50", covered >= 48),
    ])


def test_criterion_07_adversarial_training_equilibria():
    bow_cfg = CroConfig(delta=0.02, exact_adversary=True, seed=0,
                        optimizer=OptimizerConfig(restarts=4, seed=0))
    bundle = fixture("bow")
    sources = {d: bundle.scms[d].entailed_distribution() for d in ("1", "2")}
    bow = cro_loop(bundle.sel, sources, ("X",), "Y", cfg=bow_cfg)
    ac_cfg = CroConfig(delta=0.02, exact_adversary=True, seed=0,
                       optimizer=OptimizerConfig(restarts=2, seed=0))
    ac = fixture("anti_causal")
    ac_sources = {d: ac.scms[d].entailed_distribution() for d in ("1", "2")}
    zrun = cro_loop(ac.sel, ac_sources, ("Z",), "Y", cfg=ac_cfg)
    _criterion(7, [
        (f"bow equilibrium in {len(bow.rounds)} rounds",
         bow.status == "equilibrium" and len(bow.rounds) <= 20),
        (f"bow rule {bow.classifier.table}",
         bow.classifier.table == {(0,): 1, (1,): 0}),
        (f"bow worst case {bow.rounds[-1][0]:.4f} vs 0.18",
         abs(bow.rounds[-1][0] - 0.18) <= 0.02),
        (f"z equilibrium in {len(zrun.rounds)} rounds",
         zrun.status == "equilibrium" and len(zrun.rounds) <= 20),
        (f"z rule {zrun.classifier.table}",
         zrun.classifier.table == {(0,): 0, (1,): 1}),
        (f"z worst case {zrun.rounds[-1][0]:.4f} vs 0.05",
         abs(zrun.rounds[-1][0] - 0.05) <= 0.02),
    ])


def test_criterion_08_shortcut_matches_full_parameterization():
    checks = []
    for name, clf in (("bow", "notx"), ("simplify", "bayes")):
        task = _task(name, clf, "both")
        fast = solve_bounds(task, OptimizerConfig(restarts=6, seed=0))
        full = solve_bounds(
            task, OptimizerConfig(restarts=6, seed=0, shortcut=False)
        )
        gap = max(abs(fast.upper - full.upper), abs(fast.lower - full.lower))
        checks.append((f"{name} gap {gap:.4f}", gap <= 0.02))
    _criterion(8, checks)


def test_criterion_09_appendix_fixtures():
    checks = []
    lung = fixture("lung_cancer")
    sources = {d: lung.scms[d].entailed_distribution()
               for d in lung.sel.sources}
    for scope in ((), ("W1", "W2", "S", "T")):
        mean = conditional_mean(sources["1"], scope, "C")
        psi = squared_error(mean, lung.supports, "C")
        res = solve_bounds(
            BoundTask(lung.sel, sources, psi, "max"),
            OptimizerConfig(restarts=4, seed=0),
        )
        tag = "mean" if not scope else "conditional"
        checks.append((f"lung {tag} sup {res.upper:.4f} in [0.3, 0.5]",
                       0.3 <= res.upper <= 0.5))
    alz = {}
    for clf in ("h1", "h2", "h3"):
        res = solve_bounds(_task("alzheimer", clf),
                           OptimizerConfig(restarts=6, seed=0))
        alz[clf] = res.upper
    sep = min(alz["h1"], alz["h2"]) - alz["h3"]
    checks.append((
        f"alzheimer h3 {alz['h3']:.3f} below h1 {alz['h1']:.3f} "
        f"and h2 {alz['h2']:.3f} by {sep:.3f}",
        sep >= 0.1,
    ))
    _criterion(9, checks)


def test_criterion_10_tabular_group_shift_analog():
    # image-scale experiments are out of scope; the tabular analog must show
    # the same qualitative effect: the robust fit drops the unstable feature
    import itertools

    supports = {"S": (0, 1), "C": (0, 1), "Y": (0, 1)}
    joints = []
    for q in (0.9, 0.1):
        probs = np.zeros((2, 2, 2))
        for s, c, y in itertools.product((0, 1), repeat=3):
            p_y = 0.75 if y == s else 0.25
            p_c = q if c == y else 1.0 - q
            probs[s, c, y] = 0.5 * p_y * p_c
        joints.append(JointTable(("S", "C", "Y"), supports, probs))
    robust = group_dro(joints, ("S", "C"), "Y")
    naive = group_dro(joints[:1], ("S", "C"), "Y")
    worst_robust = max(risk(p, robust) for p in joints)
    worst_naive = max(risk(p, naive) for p in joints)
    _criterion(10, [
        (f"robust rule ignores the color feature {robust.table}",
         robust.table == {(s, c): s for s in (0, 1) for c in (0, 1)}),
        (f"robust worst risk {worst_robust:.3f} vs naive {worst_naive:.3f}",
         worst_robust == pytest.approx(0.25) and worst_naive > worst_robust),
    ])
