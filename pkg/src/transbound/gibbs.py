"""Posterior credible bounds on target functionals via Gibbs sampling.

Parameters follow the response-function geometry of module canonical: every
c-component block carries one discrete exogenous index per member variable, a
probability table theta over the joint index, and per-variable mechanism
tables xi mapping (parent context, own index) to an output value.  Domains
whose discrepancy sets miss a variable share that variable's mechanism table;
domains agreeing on a whole block share its theta, with Dirichlet counts
pooled over their data.  One sweep resamples, in order, the per-row latent
assignments, the mechanism tables, the block tables, and finally the
target-side parameters under the cross-domain marginal ties; the target
functional evaluated after each sweep forms the posterior sample set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import _expand, _tie_groups
from .canonical import response_card, response_support
from .errors import InfeasibleError, InputError
from .graphs import TARGET, SelectionDiagram, c_components
from .scm import FunctionalTable, JointTable

TIE_TOL = 1e-12


@dataclass
class GibbsState:
    """Mutable chain state; latent holds per-cell assignment counts."""

    theta: dict  # (block, domain group) -> probability vector over the joint index
    xi: dict  # (block, variable, tie group) -> int table (parent context, own index)
    latent: dict  # (block, source domain) -> count matrix (observed cell, joint index)


@dataclass(frozen=True)
class PosteriorSummary:
    """Pooled posterior samples of the target functional with quantile bounds."""

    samples: np.ndarray = field(compare=False)
    q_hat_max: float
    q_hat_min: float
    alpha: float
    diagnostics: dict

    def report(self) -> str:
        """Header of scalars followed by one CSV column of sampled values."""
        lines = [
            f"# alpha = {self.alpha!r}",
            f"# q_hat_min = {self.q_hat_min!r}",
            f"# q_hat_max = {self.q_hat_max!r}",
        ]
        for key in sorted(self.diagnostics):
            lines.append(f"# {key} = {self.diagnostics[key]!r}")
        lines.append("sample")
        lines.extend(repr(float(v)) for v in self.samples)
        return "\n".join(lines) + "\n"


class _BlockGeom:
    """Index arithmetic of one c-component block over the full joint grid."""

    def __init__(self, diagram, supports, block, nodes, shape):
        self.block = block
        self.cards = tuple(response_card(v, supports, diagram.parents(v)) for v in block)
        self.size = int(np.prod(self.cards))
        self.n_cells = int(np.prod(shape))
        grids = np.indices(shape).reshape(len(shape), -1)
        u_idx = np.indices(self.cards).reshape(len(self.cards), -1)
        self.var = {}
        for ax, v in enumerate(block):
            parents = diagram.parents(v)
            ctx = np.zeros(grids.shape[1], dtype=np.int64)
            for p in parents:
                ctx = ctx * len(supports[p]) + grids[nodes.index(p)]
            n_ctx = int(np.prod([len(supports[p]) for p in parents])) if parents else 1
            m = self.cards[ax]
            onehot_u = np.zeros((self.size, m))
            onehot_u[np.arange(self.size), u_idx[ax]] = 1.0
            self.var[v] = {
                "ctx": ctx,
                "vals": grids[nodes.index(v)],
                "n_ctx": n_ctx,
                "n_val": len(supports[v]),
                "m": m,
                "u_comp": u_idx[ax],
                "onehot_u": onehot_u,
                # canonical evaluation table, (parent context, own index) -> value
                "eval": np.asarray(
                    response_support(v, supports, parents), dtype=np.int64
                ).T.copy(),
            }
        self.var_groups: dict = {}
        self.theta_groups: list = []

    def compat(self, xi_tables: dict) -> np.ndarray:
        """Indicator (cell, joint index) that the mechanisms produce the cell."""
        out = np.ones((self.n_cells, self.size))
        for v in self.block:
            meta = self.var[v]
            produced = xi_tables[v][meta["ctx"]]  # (cells, m_v)
            ok = (produced == meta["vals"][:, None]).astype(float)
            out *= ok[:, meta["u_comp"]]
        return out

    def group_of(self, v: str, d: str) -> frozenset:
        for g in self.var_groups[v]:
            if d in g:
                return g
        raise InputError(f"domain {d!r} missing from tie groups")

    def theta_group_of(self, d: str) -> frozenset:
        for g in self.theta_groups:
            if d in g:
                return g
        raise InputError(f"domain {d!r} missing from block groups")


def _block_partition(sel, block, domains) -> list[frozenset]:
    """Domains forced to share the block's entire exogenous law."""
    members = set(block)
    parent = {d: d for d in domains}

    def find(d):
        while parent[d] != d:
            parent[d] = parent[parent[d]]
            d = parent[d]
        return d

    for i in domains:
        for j in domains:
            if i < j and not (members & sel.delta(i, j)):
                parent[find(i)] = find(j)
    groups: dict = {}
    for d in domains:
        groups.setdefault(find(d), set()).add(d)
    return [frozenset(g) for g in groups.values()]


class GibbsSampler:
    """Shared geometry, data counts, and the conditional sampling steps."""

    def __init__(self, sel: SelectionDiagram, datasets, psi: FunctionalTable,
                 supports: dict | None = None):
        diagram = sel.base
        self.sel = sel
        self.nodes = diagram.nodes
        datasets = dict(datasets)
        for d in datasets:
            if d not in sel.domains or d == TARGET:
                raise InputError(f"data supplied for non-source domain {d!r}")
        if supports is None:
            if not datasets:
                raise InputError("supports are required when no data is given")
            supports = datasets[sorted(datasets)[0]].supports
        self.supports = {v: tuple(supports[v]) for v in self.nodes}
        self.shape = tuple(len(self.supports[v]) for v in self.nodes)
        self.n_cells = int(np.prod(self.shape))
        self.sources = tuple(sorted(sel.sources))
        self.domains = self.sources + (TARGET,)
        self.counts = {}
        for d in self.sources:
            ds = datasets.get(d)
            if ds is None:
                self.counts[d] = np.zeros(self.n_cells, dtype=np.int64)
                continue
            try:
                cols = [ds.scope.index(v) for v in self.nodes]
            except ValueError as exc:
                raise InputError(f"dataset for {d!r} does not cover every node") from exc
            flat = np.ravel_multi_index(
                tuple(ds.rows[:, c] for c in cols), self.shape
            )
            self.counts[d] = np.bincount(flat, minlength=self.n_cells).astype(np.int64)
        unknown = set(psi.scope) - set(self.nodes)
        if unknown:
            raise InputError(f"psi scope outside diagram: {sorted(unknown)}")
        for v in psi.scope:
            if tuple(psi.supports[v]) != self.supports[v]:
                raise InputError(f"psi support mismatch for {v!r}")
        self.psi_flat = _expand(psi.values, psi.scope, self.nodes, self.shape).reshape(-1)
        self.blocks = []
        for comp in c_components(diagram):
            blk = tuple(v for v in self.nodes if v in comp)
            geom = _BlockGeom(diagram, self.supports, blk, self.nodes, self.shape)
            geom.var_groups = {v: _tie_groups(sel, v, self.domains) for v in blk}
            geom.theta_groups = _block_partition(sel, blk, self.domains)
            self.blocks.append(geom)

    # ---- state ------------------------------------------------------------

    def init_state(self, rng) -> GibbsState:
        """Prior theta draws; mechanisms start at the canonical evaluation
        tables, which make every observable cell reachable."""
        theta, xi = {}, {}
        for geom in self.blocks:
            for g in sorted(geom.theta_groups, key=sorted):
                theta[(geom.block, g)] = rng.dirichlet(np.ones(geom.size))
            for v in geom.block:
                for g in sorted(geom.var_groups[v], key=sorted):
                    xi[(geom.block, v, g)] = geom.var[v]["eval"].copy()
        return GibbsState(theta, xi, {})

    # ---- sweep steps ------------------------------------------------------

    def step_u(self, state: GibbsState, rng) -> None:
        """Resample latent assignment counts per observed cell and block.

        Given a cell, the blocks' indices are independent, so each block draws
        a multinomial over its joint index weighted by compatibility times
        theta.  A cell left impossible by the current mechanisms has the
        offending entries re-pointed at a random index first; after a sweep
        from the canonical start this repair never fires, because witnessed
        entries are kept by step_xi.
        """
        for geom in self.blocks:
            cache: dict = {}
            for d in self.sources:
                cnt = self.counts[d]
                if not cnt.any():
                    state.latent[(geom.block, d)] = np.zeros((self.n_cells, geom.size))
                    continue
                th = state.theta[(geom.block, geom.theta_group_of(d))]
                prof = tuple(geom.group_of(v, d) for v in geom.block)

                def tables():
                    return {
                        v: state.xi[(geom.block, v, geom.group_of(v, d))]
                        for v in geom.block
                    }

                if prof not in cache:
                    cache[prof] = geom.compat(tables())
                comp = cache[prof]
                w = comp * th[None, :]
                totals = w.sum(axis=1)
                for guard in range(100):
                    bad = np.flatnonzero((cnt > 0) & (totals <= 0.0))
                    if not bad.size:
                        break
                    for cell in bad:
                        u = int(rng.integers(geom.size))
                        for v in geom.block:
                            meta = geom.var[v]
                            tab = state.xi[(geom.block, v, geom.group_of(v, d))]
                            tab[meta["ctx"][cell], meta["u_comp"][u]] = meta["vals"][cell]
                    cache.clear()
                    cache[prof] = comp = geom.compat(tables())
                    w = comp * th[None, :]
                    totals = w.sum(axis=1)
                else:
                    raise InfeasibleError(
                        "mechanism repair failed to make the data reachable"
                    )
                out = np.zeros((self.n_cells, geom.size))
                for cell in np.flatnonzero(cnt):
                    out[cell] = rng.multinomial(int(cnt[cell]), w[cell] / totals[cell])
                state.latent[(geom.block, d)] = out

    def step_xi(self, state: GibbsState, rng) -> None:
        """Keep mechanism entries witnessed by any current assignment (they
        already carry the witnessed value) and redraw the rest uniformly."""
        for geom in self.blocks:
            for v in geom.block:
                meta = geom.var[v]
                for g in sorted(geom.var_groups[v], key=sorted):
                    witness = np.zeros((meta["n_ctx"], meta["m"]))
                    for d in sorted(g - {TARGET}):
                        lat = state.latent.get((geom.block, d))
                        if lat is not None:
                            np.add.at(witness, meta["ctx"], lat @ meta["onehot_u"])
                    tab = state.xi[(geom.block, v, g)]
                    fresh = rng.integers(meta["n_val"], size=tab.shape)
                    state.xi[(geom.block, v, g)] = np.where(witness > 0, tab, fresh)

    def step_theta(self, state: GibbsState, rng) -> None:
        """Dirichlet(1 + counts) per block, counts pooled over the domains
        sharing the block's law.  Target-only tables wait for enforce_target."""
        for geom in self.blocks:
            for g in sorted(geom.theta_groups, key=sorted):
                srcs = sorted(g - {TARGET})
                if not srcs:
                    continue
                beta = np.zeros(geom.size)
                for d in srcs:
                    lat = state.latent.get((geom.block, d))
                    if lat is not None:
                        beta += lat.sum(axis=0)
                state.theta[(geom.block, g)] = rng.dirichlet(1.0 + beta)

    def enforce_target(self, state: GibbsState, rng, max_retries: int = 20) -> bool:
        """Redraw target-side parameters subject to the marginal ties.

        Mechanisms tied to a source are shared outright, so only the block
        table needs work: a prior draw rescaled, slice by slice, until each
        tied axis marginal equals the source chain's current marginal.  With
        several tied axes on one block the rescaling runs as iterative
        proportional fitting to within 1e-12.  Returns whether the first draw
        rescaled successfully.
        """
        clean = True
        for geom in self.blocks:
            for v in geom.block:
                g = geom.group_of(v, TARGET)
                if g == frozenset({TARGET}):
                    meta = geom.var[v]
                    state.xi[(geom.block, v, g)] = rng.integers(
                        meta["n_val"], size=(meta["n_ctx"], meta["m"])
                    )
            tg = geom.theta_group_of(TARGET)
            if tg - {TARGET}:
                continue  # whole block shared with a source; theta already tied
            ties = []
            for ax, v in enumerate(geom.block):
                srcs = sorted(geom.group_of(v, TARGET) - {TARGET})
                if not srcs:
                    continue
                sg = geom.theta_group_of(srcs[0])
                ref = state.theta[(geom.block, sg)].reshape(geom.cards)
                axes = tuple(i for i in range(len(geom.cards)) if i != ax)
                ties.append((ax, ref.sum(axis=axes) if axes else ref.copy()))
            for attempt in range(max_retries):
                th = rng.dirichlet(np.ones(geom.size)).reshape(geom.cards)
                if _proportional_fit(th, ties):
                    break
                clean = False
            else:
                raise InfeasibleError(
                    "target block could not be rescaled to its marginal ties"
                )
            state.theta[(geom.block, tg)] = th.reshape(-1)
        return clean

    # ---- evaluation -------------------------------------------------------

    def target_joint(self, state: GibbsState) -> JointTable:
        joint = np.ones(self.n_cells)
        for geom in self.blocks:
            xi_t = {
                v: state.xi[(geom.block, v, geom.group_of(v, TARGET))]
                for v in geom.block
            }
            th = state.theta[(geom.block, geom.theta_group_of(TARGET))]
            joint = joint * (geom.compat(xi_t) @ th)
        joint = joint / joint.sum()
        return JointTable(self.nodes, self.supports, joint.reshape(self.shape))

    def target_functional(self, state: GibbsState) -> float:
        joint = np.ones(self.n_cells)
        for geom in self.blocks:
            xi_t = {
                v: state.xi[(geom.block, v, geom.group_of(v, TARGET))]
                for v in geom.block
            }
            th = state.theta[(geom.block, geom.theta_group_of(TARGET))]
            joint = joint * (geom.compat(xi_t) @ th)
        total = joint.sum()
        if total > 0:
            joint = joint / total
        return float(self.psi_flat @ joint)

    def sweep(self, state: GibbsState, rng) -> tuple[float, bool]:
        self.step_u(state, rng)
        self.step_xi(state, rng)
        self.step_theta(state, rng)
        clean = self.enforce_target(state, rng)
        return self.target_functional(state), clean


def _proportional_fit(th: np.ndarray, ties, tol: float = TIE_TOL,
                      max_iters: int = 500) -> bool:
    """Rescale slices of th in place until tied axis marginals match."""
    if not ties:
        return True
    for _ in range(max_iters):
        worst = 0.0
        for ax, ref in ties:
            axes = tuple(i for i in range(th.ndim) if i != ax)
            cur = th.sum(axis=axes) if axes else th.copy()
            if np.any((cur <= 0.0) & (ref > tol)):
                return False
            worst = max(worst, float(np.abs(cur - ref).max()))
            scale = np.where(cur > 0.0, ref / np.where(cur > 0.0, cur, 1.0), 1.0)
            th *= scale.reshape([-1 if i == ax else 1 for i in range(th.ndim)])
        if worst <= tol:
            return True
    return False


def _effective_samples(vals: np.ndarray) -> float:
    """First-order autocorrelation proxy for the effective sample count."""
    n = vals.size
    var = float(np.var(vals))
    if n < 3 or var <= 0.0:
        return float(n)
    centered = vals - vals.mean()
    rho = float((centered[:-1] * centered[1:]).mean() / var)
    rho = min(max(rho, -0.999), 0.999)
    return float(min(n, max(1.0, n * (1.0 - rho) / (1.0 + rho))))


def run_chain(sel: SelectionDiagram, datasets, psi: FunctionalTable,
              iters: int = 10000, burn_in: int = 2000, alpha: float = 1.0,
              seed: int = 0, chains: int = 4,
              supports: dict | None = None) -> PosteriorSummary:
    """Run independent chains, pool post-burn-in samples, take quantile bounds.

    q_hat_max is the empirical alpha-quantile of the pooled target-functional
    samples (the sample maximum at alpha = 1), q_hat_min the (1 - alpha)
    quantile.  Deterministic given seed.
    """
    if iters <= burn_in:
        raise InputError("iters must exceed burn_in")
    if not 0.5 <= alpha <= 1.0:
        raise InputError("alpha must lie in [0.5, 1]")
    if chains < 1:
        raise InputError("at least one chain is required")
    sampler = GibbsSampler(sel, datasets, psi, supports=supports)
    all_samples = []
    ess_total = 0.0
    clean_sweeps = 0
    total_sweeps = 0
    for seq in np.random.SeedSequence(seed).spawn(chains):
        rng = np.random.default_rng(seq)
        state = sampler.init_state(rng)
        vals = np.empty(iters)
        for it in range(iters):
            vals[it], clean = sampler.sweep(state, rng)
            clean_sweeps += int(clean)
            total_sweeps += 1
        kept = vals[burn_in:]
        all_samples.append(kept)
        ess_total += _effective_samples(kept)
    samples = np.concatenate(all_samples)
    diagnostics = {
        "burn_in": burn_in,
        "chains": chains,
        "effective_samples": round(ess_total, 3),
        "iters": iters,
        "rescale_acceptance": clean_sweeps / total_sweeps,
        "seed": seed,
    }
    return PosteriorSummary(
        samples=samples,
        q_hat_max=float(np.quantile(samples, alpha)),
        q_hat_min=float(np.quantile(samples, 1.0 - alpha)),
        alpha=alpha,
        diagnostics=diagnostics,
    )
