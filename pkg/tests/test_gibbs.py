"""Gibbs sampler: conditional steps, tie enforcement, posterior quantiles."""

import numpy as np
import pytest

from transbound import (
    CausalDiagram,
    GibbsSampler,
    InputError,
    SelectionDiagram,
    builtin_classifier,
    fixture,
    risk,
    run_chain,
)
from transbound.scm import Dataset, FunctionalTable, zero_one_loss

BOW = ("X", "Y")


def _bow_sampler(n=0, seed=1):
    bundle = fixture("bow")
    h = builtin_classifier(bundle, "notx")
    psi = h.loss_table(zero_one_loss((0, 1)))
    data = {}
    if n:
        data = {d: bundle.scms[d].sample(n, seed=seed, domain=d) for d in ("1", "2")}
    return GibbsSampler(bundle.sel, data, psi, supports=bundle.supports), bundle, psi


# ---------------------------------------------------------------------------
# geometry and the individual conditional steps


def test_canonical_mechanisms_make_exactly_the_right_indices_compatible():
    sampler, _, _ = _bow_sampler()
    geom = sampler.blocks[0]
    state = sampler.init_state(np.random.default_rng(0))
    tables = {v: state.xi[(BOW, v, geom.group_of(v, "1"))] for v in BOW}
    comp = geom.compat(tables)
    # cell (x=1, y=0): the x-index must be the constant 1, the y-index must
    # map x=1 to 0, i.e. the constant 0 or the negation
    cell = int(np.ravel_multi_index((1, 0), (2, 2)))
    assert np.flatnonzero(comp[cell]).tolist() == [4, 7]
    assert comp.sum(axis=1).min() > 0  # every cell reachable from the start


def test_latent_assignments_follow_the_compatibility_weighted_table():
    sampler, _, _ = _bow_sampler()
    geom = sampler.blocks[0]
    rng = np.random.default_rng(7)
    state = sampler.init_state(rng)
    for g in geom.theta_groups:
        state.theta[(BOW, g)] = np.full(geom.size, 1.0 / geom.size)
    cell = int(np.ravel_multi_index((1, 0), (2, 2)))
    sampler.counts["1"] = np.zeros(sampler.n_cells, dtype=np.int64)
    sampler.counts["1"][cell] = 4000
    sampler.step_u(state, rng)
    lat = state.latent[(BOW, "1")]
    assert lat.sum() == pytest.approx(4000 + sampler.counts["2"].sum())
    # uniform theta over two compatible indices: an even split
    assert lat[cell, 4] / 4000 == pytest.approx(0.5, abs=0.02)
    assert lat[cell, 4] + lat[cell, 7] == 4000


def test_unwitnessed_mechanism_entries_are_redrawn_uniformly():
    sampler, _, _ = _bow_sampler()
    geom = sampler.blocks[0]
    rng = np.random.default_rng(3)
    state = sampler.init_state(rng)
    sampler.step_u(state, rng)  # no data, so nothing is witnessed
    g2 = geom.group_of("Y", "2")
    hits = 0
    n = 5000
    for _ in range(n):
        sampler.step_xi(state, rng)
        hits += int(state.xi[(BOW, "Y", g2)][0, 0] == 1)
    assert hits / n == pytest.approx(0.5, abs=0.02)


def test_witnessed_mechanism_entries_are_kept():
    sampler, _, _ = _bow_sampler(n=400)
    rng = np.random.default_rng(5)
    state = sampler.init_state(rng)
    geom = sampler.blocks[0]
    sampler.step_u(state, rng)
    before = {
        (v, g): state.xi[(BOW, v, g)].copy()
        for v in BOW
        for g in geom.var_groups[v]
    }
    meta = geom.var["Y"]
    witnessed = {}
    for v in BOW:
        m = geom.var[v]
        for g in geom.var_groups[v]:
            w = np.zeros((m["n_ctx"], m["m"]))
            for d in sorted(g - {"*"}):
                lat = state.latent.get((BOW, d))
                if lat is not None:
                    np.add.at(w, m["ctx"], lat @ m["onehot_u"])
            witnessed[(v, g)] = w > 0
    sampler.step_xi(state, rng)
    for key, mask in witnessed.items():
        v, g = key
        after = state.xi[(BOW, v, g)]
        assert np.array_equal(after[mask], before[key][mask])
    assert meta["m"] == 4


def test_block_table_posterior_is_dirichlet_with_the_assignment_counts():
    sampler, _, _ = _bow_sampler()
    geom = sampler.blocks[0]
    rng = np.random.default_rng(11)
    state = sampler.init_state(rng)
    beta = np.zeros(geom.size)
    beta[0] = 100.0
    lat = np.zeros((sampler.n_cells, geom.size))
    lat[0] = beta
    state.latent[(BOW, "1")] = lat
    draws = []
    for _ in range(3000):
        sampler.step_theta(state, rng)
        draws.append(state.theta[(BOW, frozenset({"1"}))][0])
    want = 101.0 / (geom.size + 100.0)
    assert np.mean(draws) == pytest.approx(want, abs=0.01)


def test_block_counts_are_pooled_over_domains_sharing_the_law():
    diagram = CausalDiagram(("X", "Y"), [("X", "Y")])
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"X"}, "2": {"X"}})
    supports = {"X": (0, 1), "Y": (0, 1)}
    psi = FunctionalTable(("Y",), {"Y": (0, 1)}, np.array([0.0, 1.0]))
    sampler = GibbsSampler(sel, {}, psi, supports=supports)
    geom = next(g for g in sampler.blocks if g.block == ("Y",))
    assert geom.theta_groups == [frozenset({"1", "2", "*"})]
    rng = np.random.default_rng(2)
    state = sampler.init_state(rng)
    lat1 = np.zeros((sampler.n_cells, geom.size))
    lat1[0, 0] = 50.0
    lat2 = np.zeros((sampler.n_cells, geom.size))
    lat2[0, 1] = 50.0
    state.latent[(("Y",), "1")] = lat1
    state.latent[(("Y",), "2")] = lat2
    draws = []
    for _ in range(2000):
        sampler.step_theta(state, rng)
        draws.append(state.theta[(("Y",), geom.theta_groups[0])])
    mean = np.mean(draws, axis=0)
    assert mean == pytest.approx(np.array([51, 51, 1, 1]) / 104.0, abs=0.02)


def test_target_block_table_satisfies_both_axis_ties_exactly():
    sampler, _, _ = _bow_sampler(n=300)
    rng = np.random.default_rng(13)
    state = sampler.init_state(rng)
    for _ in range(3):
        sampler.sweep(state, rng)
    th_t = state.theta[(BOW, frozenset({"*"}))].reshape(2, 4)
    th_1 = state.theta[(BOW, frozenset({"1"}))].reshape(2, 4)
    th_2 = state.theta[(BOW, frozenset({"2"}))].reshape(2, 4)
    # x-mechanism shared with source 2, y-mechanism shared with source 1
    assert th_t.sum(axis=1) == pytest.approx(th_2.sum(axis=1), abs=1e-9)
    assert th_t.sum(axis=0) == pytest.approx(th_1.sum(axis=0), abs=1e-9)


def test_fully_shared_block_reuses_the_source_table():
    bundle = fixture("bow")
    sel0 = SelectionDiagram.from_target_deltas(
        bundle.sel.base, {"1": set(), "2": set()}
    )
    h = builtin_classifier(bundle, "notx")
    psi = h.loss_table(zero_one_loss((0, 1)))
    sampler = GibbsSampler(sel0, {}, psi, supports=bundle.supports)
    geom = sampler.blocks[0]
    assert geom.theta_groups == [frozenset({"1", "2", "*"})]
    rng = np.random.default_rng(1)
    state = sampler.init_state(rng)
    sampler.sweep(state, rng)
    assert (BOW, frozenset({"*"})) not in state.theta


# ---------------------------------------------------------------------------
# full chains


def test_chain_is_deterministic_given_seed():
    sampler_args = _bow_sampler(n=200)
    bundle, psi = sampler_args[1], sampler_args[2]
    data = {d: bundle.scms[d].sample(200, seed=1, domain=d) for d in ("1", "2")}
    a = run_chain(bundle.sel, data, psi, iters=60, burn_in=20, chains=2, seed=5)
    b = run_chain(bundle.sel, data, psi, iters=60, burn_in=20, chains=2, seed=5)
    c = run_chain(bundle.sel, data, psi, iters=60, burn_in=20, chains=2, seed=6)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert a.q_hat_min <= a.q_hat_max


def test_extreme_alpha_takes_the_sample_range():
    _, bundle, psi = _bow_sampler()
    data = {d: bundle.scms[d].sample(100, seed=2, domain=d) for d in ("1", "2")}
    out = run_chain(bundle.sel, data, psi, iters=80, burn_in=30, chains=2, seed=0)
    assert out.alpha == 1.0
    assert out.q_hat_max == pytest.approx(out.samples.max())
    assert out.q_hat_min == pytest.approx(out.samples.min())
    assert out.diagnostics["chains"] == 2
    assert 0.0 <= out.diagnostics["rescale_acceptance"] <= 1.0


def test_prior_only_run_spans_the_unit_interval():
    _, bundle, psi = _bow_sampler()
    out = run_chain(bundle.sel, {}, psi, iters=400, burn_in=100, chains=2,
                    seed=0, supports=bundle.supports)
    assert out.samples.min() < 0.05
    assert out.samples.max() > 0.95


def test_posterior_interval_covers_the_true_target_risk():
    _, bundle, psi = _bow_sampler()
    data = {d: bundle.scms[d].sample(800, seed=4, domain=d) for d in ("1", "2")}
    truth = risk(bundle.scms["*"].entailed_distribution(),
                 builtin_classifier(bundle, "notx"))
    out = run_chain(bundle.sel, data, psi, iters=400, burn_in=100, chains=2, seed=0)
    assert out.q_hat_min - 0.02 <= truth <= out.q_hat_max + 0.02


def test_point_identified_posterior_tightens_with_more_data():
    bundle = fixture("covariate_shift")
    h = builtin_classifier(bundle, "bayes")
    psi = h.loss_table(zero_one_loss(bundle.supports[bundle.label]))
    widths = {}
    for n in (100, 10000):
        data = {"1": bundle.scms["1"].sample(n, seed=8, domain="1")}
        out = run_chain(bundle.sel, data, psi, iters=300, burn_in=100,
                        chains=2, seed=0, alpha=0.9)
        widths[n] = out.q_hat_max - out.q_hat_min
        assert out.q_hat_min - 0.05 <= 0.1 <= out.q_hat_max + 0.05
    assert widths[10000] <= widths[100] + 0.01


def test_report_lists_scalars_then_one_sample_column():
    _, bundle, psi = _bow_sampler()
    out = run_chain(bundle.sel, {}, psi, iters=40, burn_in=10, chains=1,
                    seed=0, supports=bundle.supports)
    lines = out.report().strip().split("\n")
    header = [ln for ln in lines if ln.startswith("# ")]
    assert any(ln.startswith("# alpha = ") for ln in header)
    assert any(ln.startswith("# q_hat_max = ") for ln in header)
    assert lines[len(header)] == "sample"
    assert len(lines) - len(header) - 1 == out.samples.size


def test_argument_validation():
    _, bundle, psi = _bow_sampler()
    with pytest.raises(InputError):
        run_chain(bundle.sel, {}, psi, iters=10, burn_in=10,
                  supports=bundle.supports)
    with pytest.raises(InputError):
        run_chain(bundle.sel, {}, psi, iters=20, burn_in=5, alpha=0.3,
                  supports=bundle.supports)
    with pytest.raises(InputError):
        run_chain(bundle.sel, {}, psi, iters=20, burn_in=5, chains=0,
                  supports=bundle.supports)
    with pytest.raises(InputError):
        run_chain(bundle.sel, {}, psi, iters=20, burn_in=5)  # no supports
    ds = bundle.scms["1"].sample(10, seed=0, domain="*")
    with pytest.raises(InputError):
        GibbsSampler(bundle.sel, {"*": ds}, psi, supports=bundle.supports)
