"""Tight bounds on target-domain functionals over constrained response models.

The program: maximize (or minimize) E_target[ψ] over per-domain response
models that (a) reproduce each source's observed joint and (b) share response
marginals for every variable outside the relevant discrepancy sets.  The
ancestral-set decomposition replaces blocks untouched by any discrepancy with
c-factors fitted from a source, leaving only the genuinely free blocks to the
optimizer.  A constructive sampling oracle lower-bounds the maximum for
cross-checking.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from .canonical import (
    CanonicalModel,
    block_emission,
    response_card,
)
from .errors import BudgetError, InfeasibleError, InputError
from .graphs import TARGET, CausalDiagram, SelectionDiagram, ancestral_set, c_components
from .scm import Dataset, FunctionalTable, JointTable

LOG_EPS = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    """Tunables of solve_bounds; all paths are deterministic given seed."""

    restarts: int = 10
    max_iters: int = 200
    lambda_schedule: tuple = (10.0, 100.0, 1000.0, 10000.0)
    tol: float = 1e-4
    seed: int = 0
    block_budget: int = 4096
    latent_k: int = 16
    shortcut: bool = True
    smoothing: float = 0.5
    jobs: int = 1


@dataclass(frozen=True)
class BoundTask:
    """Inputs of one bound computation."""

    sel: SelectionDiagram
    sources: dict  # domain -> JointTable | Dataset
    psi: FunctionalTable
    direction: str = "both"

    def __post_init__(self):
        if self.direction not in ("max", "min", "both"):
            raise InputError(f"bad direction {self.direction!r}")
        for dom in self.sources:
            if dom not in self.sel.domains or dom == TARGET:
                raise InputError(f"data supplied for non-source domain {dom!r}")
        unknown = set(self.psi.scope) - set(self.sel.base.nodes)
        if unknown:
            raise InputError(f"psi scope outside diagram: {sorted(unknown)}")


@dataclass(frozen=True)
class BlockPlan:
    block: tuple[str, ...]
    status: str  # "transportable" | "free"
    source: str | None
    ext_parents: tuple[str, ...]


@dataclass(frozen=True)
class DecompositionPlan:
    ancestral: tuple[str, ...]
    blocks: tuple[BlockPlan, ...]


@dataclass(frozen=True)
class FittedCFactor:
    """Interventional factor of a block, dense over the ancestral scope."""

    block: tuple[str, ...]
    domain: str
    scope: tuple[str, ...]
    table: np.ndarray = field(compare=False)


@dataclass
class BoundResult:
    lower: float | None
    upper: float | None
    witness_models: dict
    witness_joint: JointTable | None
    trace: list
    status: str
    plan: DecompositionPlan | None = None

    def value(self, direction: str) -> float:
        v = self.upper if direction == "max" else self.lower
        if v is None:
            raise InputError(f"no {direction} value computed")
        return v


def decompose_query(sel: SelectionDiagram, w, available=None) -> DecompositionPlan:
    """Ancestral set, its c-component blocks, and per-block transport status.

    Each block is marked transportable with the first source whose discrepancy
    set misses the block, else free.  ``available`` restricts the candidate
    sources (defaults to all).
    """
    diagram = sel.base
    a_set = ancestral_set(diagram, tuple(w))
    a_nodes = tuple(v for v in diagram.nodes if v in a_set)
    sources = tuple(d for d in sel.sources if available is None or d in available)
    plans = []
    for block in c_components(diagram, a_nodes):
        blk = tuple(v for v in diagram.nodes if v in block)
        ext = set()
        for v in blk:
            ext |= set(diagram.parents(v))
        ext -= set(blk)
        ext_parents = tuple(v for v in diagram.nodes if v in ext)
        chosen = None
        for d in sources:
            if not (block & sel.delta(TARGET, d)):
                chosen = d
                break
        if chosen is None:
            plans.append(BlockPlan(blk, "free", None, ext_parents))
        else:
            plans.append(BlockPlan(blk, "transportable", chosen, ext_parents))
    return DecompositionPlan(a_nodes, tuple(plans))


def _source_joint(source, scope, supports, smoothing: float) -> JointTable:
    if isinstance(source, Dataset):
        joint = source.empirical_joint(smoothing=smoothing)
    elif isinstance(source, JointTable):
        joint = source
    else:
        raise InputError(f"unsupported source input {type(source).__name__}")
    return joint.marginal(scope)


def _expand(arr: np.ndarray, vars_: tuple, a_nodes: tuple, shape: tuple) -> np.ndarray:
    """Broadcast an array over vars_ (in that order) to the full ancestral shape."""
    perm_shape = [1] * len(a_nodes)
    src_axes = []
    for v in vars_:
        i = a_nodes.index(v)
        perm_shape[i] = shape[i]
        src_axes.append(i)
    order = np.argsort(src_axes)
    arr = np.transpose(arr, tuple(order))
    return np.broadcast_to(arr.reshape(perm_shape), shape).copy()


def fit_c_factor(source, diagram: CausalDiagram, a_nodes, block, domain: str,
                 smoothing: float = 0.5) -> FittedCFactor:
    """Tian c-factor of a block from one domain's joint over the ancestral set.

    Product over block members of P(v | predecessors within the ancestral set),
    predecessors taken in the diagram's topological order.
    """
    a_nodes = tuple(a_nodes)
    supports = (source.supports if hasattr(source, "supports") else {})
    joint = _source_joint(source, a_nodes, supports, smoothing)
    shape = tuple(len(joint.supports[v]) for v in a_nodes)
    topo = [v for v in diagram.topological_order() if v in a_nodes]
    table = np.ones(shape)
    for v in block:
        pre = tuple(topo[: topo.index(v)])
        cond = joint.conditional((v,), pre)
        table *= _expand(cond, pre + (v,), a_nodes, shape)
    return FittedCFactor(tuple(block), domain, a_nodes, table)


def _tie_groups(sel: SelectionDiagram, node: str, domains) -> list[frozenset]:
    """Partition domains into classes forced to share the node's response law."""
    domains = list(domains)
    parent = {d: d for d in domains}

    def find(d):
        while parent[d] != d:
            parent[d] = parent[parent[d]]
            d = parent[d]
        return d

    for i, j in itertools.combinations(domains, 2):
        if node not in sel.delta(i, j):
            parent[find(i)] = find(j)
    groups: dict[str, set] = {}
    for d in domains:
        groups.setdefault(find(d), set()).add(d)
    return [frozenset(g) for g in groups.values()]


class _FreeBlock:
    """Shared geometry of one free block across all domains."""

    def __init__(self, sel, supports, plan: BlockPlan, a_nodes, shape, cfg, domains):
        self.sel = sel
        self.block = plan.block
        self.a_nodes = a_nodes
        self.domains = tuple(domains)
        diagram = sel.base
        self.cards = tuple(response_card(v, supports, diagram.parents(v)) for v in self.block)
        self.size = int(np.prod(self.cards))
        self.mode = "canonical" if self.size <= cfg.block_budget else "latent"
        self.groups = {
            v: _tie_groups(sel, v, self.domains) for v in self.block
        }
        if self.mode == "canonical":
            emit = block_emission(diagram, supports, self.block, a_nodes)
            self.emit = emit.reshape(int(np.prod(shape)), self.size)
            # Exact logits sharing when the whole block law is forced equal.
            if len(self.block) == 1:
                self.share = {d: self._group_of(self.block[0], d) for d in self.domains}
            else:
                self.share = {d: frozenset({d}) for d in self.domains}
            self.ties = [
                (i, j, v)
                for v in self.block
                for g in self.groups[v]
                for i, j in itertools.combinations(sorted(g), 2)
                if self.share.get(i) != self.share.get(j)
            ]
        else:
            self.k = cfg.latent_k
            self.var_meta = {}
            grids = np.indices(shape).reshape(len(shape), -1)
            for v in self.block:
                parents = diagram.parents(v)
                ctx = np.zeros(grids.shape[1], dtype=np.int64)
                for p in parents:
                    ctx = ctx * len(supports[p]) + grids[a_nodes.index(p)]
                n_ctx = int(np.prod([len(supports[p]) for p in parents])) if parents else 1
                n_val = len(supports[v])
                vals = grids[a_nodes.index(v)].copy()
                # reduceat metadata: cells sorted by (ctx, value) group for
                # fast scatter-add of expected counts
                group = ctx * n_val + vals
                order = np.argsort(group, kind="stable")
                sorted_group = group[order]
                starts = np.flatnonzero(
                    np.r_[True, np.diff(sorted_group) > 0]
                )
                uniq = sorted_group[starts]
                self.var_meta[v] = {
                    "ctx": ctx,
                    "vals": vals,
                    "n_ctx": n_ctx,
                    "n_val": n_val,
                    "order": order,
                    "starts": starts,
                    "uniq_ctx": uniq // n_val,
                    "uniq_val": uniq % n_val,
                }

    def _group_of(self, v, d) -> frozenset:
        for g in self.groups[v]:
            if d in g:
                return g
        raise InputError(f"domain {d!r} missing from tie groups")

    # ---- parameter bookkeeping -------------------------------------------

    def param_keys(self):
        keys = []
        if self.mode == "canonical":
            seen = set()
            for d in self.domains:
                sig = ("table", self.block, self.share[d])
                if sig not in seen:
                    seen.add(sig)
                    keys.append((sig, (self.size,)))
        else:
            keys.append((("pi", self.block), (self.k,)))
            for v in self.block:
                meta = self.var_meta[v]
                for g in self.groups[v]:
                    keys.append(
                        (("cpt", self.block, v, g), (meta["n_ctx"], self.k, meta["n_val"]))
                    )
        return keys

    def table_key(self, d):
        return ("table", self.block, self.share[d])

    def cpt_key(self, v, d):
        return ("cpt", self.block, v, self._group_of(v, d))

    # ---- factors ----------------------------------------------------------

    def probs(self, params, d) -> np.ndarray:
        return _softmax(params[self.table_key(d)])

    def factor(self, params, d, n_cells, cache=None) -> np.ndarray:
        """Conditional block factor per ancestral cell, flat over cells."""
        if self.mode == "canonical":
            return self.emit @ self.probs(params, d)
        pi = _softmax(params[("pi", self.block)])
        prod = np.ones((n_cells, self.k))
        for v in self.block:
            prod *= self._m_matrix(params, v, d, cache)
        return prod @ pi

    def _m_matrix(self, params, v, d, cache=None) -> np.ndarray:
        key = self.cpt_key(v, d)
        mkey = (id(self), "m", key)
        if cache is not None and mkey in cache:
            return cache[mkey]
        meta = self.var_meta[v]
        t = _softmax(params[key], axis=-1)  # (ctx, k, val)
        out = t[meta["ctx"], :, meta["vals"]]  # (cells, k)
        if cache is not None:
            cache[mkey] = out
        return out

    def accumulate_grad(self, params, grads, d, weight_flat) -> None:
        """Add d(weight · factor_d)/dparams for a linear weighting of the factor."""
        if self.mode == "canonical":
            key = self.table_key(d)
            grads[key] += self.emit.T @ weight_flat
            return
        pi = _softmax(params[("pi", self.block)])
        ms = {v: self._m_matrix(params, v, d) for v in self.block}
        prod = np.ones((weight_flat.size, self.k))
        for v in self.block:
            prod *= ms[v]
        grads[("pi", self.block)] += weight_flat @ prod
        for v in self.block:
            other = np.ones_like(prod)
            for v2 in self.block:
                if v2 != v:
                    other *= ms[v2]
            contrib = weight_flat[:, None] * other * pi[None, :]  # (cells, k)
            meta = self.var_meta[v]
            key = self.cpt_key(v, d)
            np.add.at(
                grads[key],
                (meta["ctx"][:, None], np.arange(self.k)[None, :], meta["vals"][:, None]),
                contrib,
            )

    def tie_residual(self, params) -> float:
        if self.mode != "canonical":
            return 0.0
        worst = 0.0
        for i, j, v in self.ties:
            mi = self._marginal(self.probs(params, i), v)
            mj = self._marginal(self.probs(params, j), v)
            worst = max(worst, float(np.abs(mi - mj).max()))
        return worst

    def _marginal(self, p: np.ndarray, v: str) -> np.ndarray:
        axis = self.block.index(v)
        table = p.reshape(self.cards)
        axes = tuple(i for i in range(len(self.cards)) if i != axis)
        return table.sum(axis=axes) if axes else table

    def em_accumulate(self, params, acc, d, resp_weight, cache=None) -> None:
        """Add expected response counts for domain d's data into ``acc``.

        ``resp_weight`` is w(cell) / factor_d(cell), so multiplying by the
        joint emission of one response value gives its posterior count.
        """
        if self.mode == "canonical":
            key = self.table_key(d)
            if key in acc:
                acc[key] += self.probs(params, d) * (self.emit.T @ resp_weight)
            return
        pi = _softmax(params[("pi", self.block)])
        prod = np.ones((resp_weight.size, self.k))
        for v in self.block:
            prod *= self._m_matrix(params, v, d, cache)
        gamma = resp_weight[:, None] * prod * pi[None, :]  # (cells, k)
        pkey = ("pi", self.block)
        if pkey in acc:
            acc[pkey] += gamma.sum(axis=0)
        for v in self.block:
            key = self.cpt_key(v, d)
            if key not in acc:
                continue
            meta = self.var_meta[v]
            agg = np.add.reduceat(gamma[meta["order"]], meta["starts"], axis=0)
            acc[key][meta["uniq_ctx"], :, meta["uniq_val"]] += agg

    def tie_penalty(self, params) -> float:
        if self.mode != "canonical" or not self.ties:
            return 0.0
        total = 0.0
        for i, j, v in self.ties:
            diff = self._marginal(self.probs(params, i), v) - self._marginal(self.probs(params, j), v)
            total += float((diff**2).sum())
        return total

    def tie_penalty_and_grad(self, params, grads, lam: float) -> float:
        if self.mode != "canonical" or not self.ties:
            return 0.0
        total = 0.0
        for i, j, v in self.ties:
            pi_, pj_ = self.probs(params, i), self.probs(params, j)
            diff = self._marginal(pi_, v) - self._marginal(pj_, v)
            total += float((diff**2).sum())
            axis = self.block.index(v)
            expand = np.broadcast_to(
                diff.reshape([-1 if k == axis else 1 for k in range(len(self.cards))]),
                self.cards,
            ).reshape(-1)
            grads[self.table_key(i)] += -2.0 * lam * expand
            grads[self.table_key(j)] += 2.0 * lam * expand
        return total


def _softmax(logits: np.ndarray, axis=None) -> np.ndarray:
    if axis is None:
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class _CompiledTask:
    """Everything both solvers need, computed once."""

    def __init__(self, task: BoundTask, cfg: OptimizerConfig, shortcut: bool):
        self.task, self.cfg = task, cfg
        sel = task.sel
        plan = decompose_query(sel, task.psi.scope, available=task.sources)
        if not shortcut:
            plan = DecompositionPlan(
                plan.ancestral,
                tuple(replace(bp, status="free", source=None) for bp in plan.blocks),
            )
        self.plan = plan
        self.a_nodes = plan.ancestral
        joints = {}
        for d, src in task.sources.items():
            joints[d] = _source_joint(src, self.a_nodes, {}, cfg.smoothing)
        if not joints:
            raise InputError("at least one source is required")
        self.joints = joints
        first = next(iter(joints.values()))
        self.supports = dict(first.supports)
        self.shape = tuple(len(self.supports[v]) for v in self.a_nodes)
        self.n_cells = int(np.prod(self.shape))
        self.domains = tuple(sorted(joints)) + (TARGET,)
        # ψ over the ancestral shape
        psi = task.psi
        for v in psi.scope:
            if tuple(psi.supports[v]) != tuple(self.supports[v]):
                raise InputError(f"psi support mismatch for {v!r}")
        self.psi_flat = _expand(psi.values, psi.scope, self.a_nodes, self.shape).reshape(-1)
        # fitted c-factors for every (domain, block)
        self.fitted = {}
        for bp in plan.blocks:
            for d in joints:
                self.fitted[(d, bp.block)] = fit_c_factor(
                    joints[d], sel.base, self.a_nodes, bp.block, d, cfg.smoothing
                )
        # fixed part of the target factorization
        fixed = np.ones(self.shape)
        for bp in plan.blocks:
            if bp.status == "transportable":
                fixed *= self.fitted[(bp.source, bp.block)].table
        self.fixed_flat = fixed.reshape(-1)
        self.free = [
            _FreeBlock(sel, self.supports, bp, self.a_nodes, self.shape, cfg, self.domains)
            for bp in plan.blocks
            if bp.status == "free"
        ]
        # fixed factors entering each source's own likelihood
        self.source_fixed = {}
        for d in joints:
            fx = np.ones(self.shape)
            for bp in plan.blocks:
                if bp.status == "transportable":
                    fx *= self.fitted[(d, bp.block)].table
            self.source_fixed[d] = fx.reshape(-1)
        self.data_flat = {d: joints[d].probs.reshape(-1) for d in joints}

    # ---- shared evaluation helpers ---------------------------------------

    def free_factors(self, params, d) -> list:
        return [fb.factor(params, d, self.n_cells) for fb in self.free]

    def target_value(self, params) -> float:
        prod = self.fixed_flat.copy()
        for f in self.free_factors(params, TARGET):
            prod = prod * f
        return float(self.psi_flat @ prod)

    def model_joint(self, params, d) -> np.ndarray:
        base = self.source_fixed[d] if d != TARGET else self.fixed_flat
        prod = base.copy()
        for f in self.free_factors(params, d):
            prod = prod * f
        return prod

    def data_residual(self, params) -> float:
        worst = 0.0
        for d in self.joints:
            tv = 0.5 * float(np.abs(self.model_joint(params, d) - self.data_flat[d]).sum())
            worst = max(worst, tv)
        return worst

    def residual(self, params) -> float:
        tie = max((fb.tie_residual(params) for fb in self.free), default=0.0)
        return max(tie, self.data_residual(params)) if self.free else self.data_residual(params)

    def target_joint(self, params) -> JointTable:
        probs = self.model_joint(params, TARGET).reshape(self.shape)
        probs = np.clip(probs, 0.0, None)
        probs = probs / probs.sum()
        return JointTable(self.a_nodes, {v: self.supports[v] for v in self.a_nodes}, probs)


def _init_params(compiled: _CompiledTask, rng) -> dict:
    params = {}
    for fb in compiled.free:
        for key, shp in fb.param_keys():
            params[key] = rng.normal(scale=0.5, size=shp)
    return params


def _score_and_grad(compiled: _CompiledTask, params: dict, lam: float, want_grad=True):
    """Objective + Λ·(log-likelihood terms) − Λ·(tie penalties), with gradient."""
    grads = {k: np.zeros_like(v) for k, v in params.items()} if want_grad else None
    score = 0.0
    factors = {d: compiled.free_factors(params, d) for d in compiled.domains}
    # objective
    prod_t = compiled.fixed_flat.copy()
    for f in factors[TARGET]:
        prod_t = prod_t * f
    score += float(compiled.psi_flat @ prod_t)
    if want_grad:
        for i, fb in enumerate(compiled.free):
            weight = compiled.psi_flat * compiled.fixed_flat
            for j, f in enumerate(factors[TARGET]):
                if j != i:
                    weight = weight * f
            fb.accumulate_grad(params, grads, TARGET, weight)
    # data likelihood per source
    for d in compiled.joints:
        model = compiled.source_fixed[d].copy()
        for f in factors[d]:
            model = model * f
        w = compiled.data_flat[d]
        ll = float(w @ np.log(model + LOG_EPS))
        ref = float(w @ np.log(compiled.data_flat[d] + LOG_EPS))
        score += lam * (ll - ref)
        if want_grad:
            for i, fb in enumerate(compiled.free):
                weight = lam * w / (model + LOG_EPS) * compiled.source_fixed[d]
                for j, f in enumerate(factors[d]):
                    if j != i:
                        weight = weight * f
                fb.accumulate_grad(params, grads, d, weight)
    # tie penalties
    for fb in compiled.free:
        if want_grad:
            score -= lam * fb.tie_penalty_and_grad(params, grads, lam)
        else:
            score -= lam * fb.tie_penalty(params)
    if not want_grad:
        return score, None
    # chain rule through the softmax
    for key in params:
        if key[0] == "pi" or key[0] == "table":
            p = _softmax(params[key])
            g = grads[key]
            grads[key] = p * (g - float(p @ g))
        else:
            p = _softmax(params[key], axis=-1)
            g = grads[key]
            grads[key] = p * (g - (p * g).sum(axis=-1, keepdims=True))
    return score, grads


def _ascend(compiled: _CompiledTask, params: dict, lam: float, max_iters: int, trace, tag):
    score, grads = _score_and_grad(compiled, params, lam)
    step = 1.0
    for it in range(max_iters):
        gnorm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        if gnorm < 1e-9:
            break
        improved = False
        step = min(step * 4.0, 1e3)
        for _ in range(25):
            trial = {k: v + step * grads[k] / gnorm for k, v in params.items()}
            trial_score, _ = _score_and_grad(compiled, trial, lam, want_grad=False)
            if trial_score > score + 1e-4 * step * gnorm:
                params = trial
                score, grads = _score_and_grad(compiled, trial, lam)
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        if it % 25 == 0:
            trace.append((f"{tag}:{it}", score, compiled.residual(params)))
    return params, score


def _source_fit_keys(compiled: _CompiledTask) -> set:
    """Parameter keys whose values are pinned down by some source's data."""
    keys = set()
    for fb in compiled.free:
        if fb.mode == "canonical":
            for d in compiled.joints:
                keys.add(fb.table_key(d))
        else:
            keys.add(("pi", fb.block))
            for v in fb.block:
                for d in compiled.joints:
                    keys.add(fb.cpt_key(v, d))
    return keys


def _accumulate_leave_one_out(compiled, params, acc, d, base, factors, cache=None) -> None:
    """Accumulate every block's expected counts with prefix/suffix products."""
    prefixes = []
    pre = None
    for f in factors:
        prefixes.append(pre)
        pre = f if pre is None else pre * f
    suffix = None
    for i in range(len(factors) - 1, -1, -1):
        others = base
        if prefixes[i] is not None:
            others = others * prefixes[i]
        if suffix is not None:
            others = others * suffix
        compiled.free[i].em_accumulate(params, acc, d, others, cache)
        suffix = factors[i] if suffix is None else suffix * factors[i]


def _em_fit(compiled: _CompiledTask, params: dict, max_iters: int, tol: float,
            obj_weight: float = 0.0) -> dict:
    """Expectation-maximization on the pooled source log-likelihood.

    Given an observed cell, the blocks' response values are conditionally
    independent, so the E-step factorizes per block and the M-step is count
    normalization pooled across the domains sharing each table or CPT.

    With ``obj_weight`` > 0 the criterion gains an ω·log(objective) term: the
    objective is linear in the target joint, so it acts as one pseudo
    observation emitted by the target model, and the same E/M steps apply.
    Annealing ω to zero steers the fit toward data-equivalent solutions with
    a large objective value.  At ω = 0 target-only parameters are untouched.
    """
    params = dict(params)
    fit_keys = _source_fit_keys(compiled)
    if obj_weight > 0.0:
        fit_keys = set(params)
    # log of a shifted objective stays monotone in the objective
    psi_pos = compiled.psi_flat - compiled.psi_flat.min() + 1e-9

    def score(p):
        total = 0.0
        cache: dict = {}
        for d in compiled.joints:
            model = compiled.source_fixed[d].copy()
            for fb in compiled.free:
                model = model * fb.factor(p, d, compiled.n_cells, cache)
            total += float(compiled.data_flat[d] @ np.log(model + LOG_EPS))
        if obj_weight > 0.0:
            model_t = compiled.fixed_flat.copy()
            for fb in compiled.free:
                model_t = model_t * fb.factor(p, TARGET, compiled.n_cells, cache)
            total += obj_weight * math.log(float(psi_pos @ model_t) + LOG_EPS)
        return total

    prev_ll = -np.inf
    for it in range(max_iters):
        acc = {k: np.full_like(params[k], 1e-9) for k in fit_keys}
        cache: dict = {}
        ll = 0.0
        for d in compiled.joints:
            w = compiled.data_flat[d]
            factors = [fb.factor(params, d, compiled.n_cells, cache)
                       for fb in compiled.free]
            model = compiled.source_fixed[d].copy()
            for f in factors:
                model = model * f
            ll += float(w @ np.log(model + LOG_EPS))
            base = w * compiled.source_fixed[d] / (model + LOG_EPS)
            _accumulate_leave_one_out(compiled, params, acc, d, base, factors, cache)
        if obj_weight > 0.0:
            factors_t = [fb.factor(params, TARGET, compiled.n_cells, cache)
                         for fb in compiled.free]
            model_t = compiled.fixed_flat.copy()
            for f in factors_t:
                model_t = model_t * f
            obj = float(psi_pos @ model_t)
            ll += obj_weight * math.log(obj + LOG_EPS)
            base = (obj_weight / (obj + LOG_EPS)) * psi_pos * compiled.fixed_flat
            _accumulate_leave_one_out(compiled, params, acc, TARGET, base, factors_t, cache)
        new = dict(params)
        for key, counts in acc.items():
            if key[0] == "cpt":
                probs = counts / counts.sum(axis=-1, keepdims=True)
            else:
                probs = counts / counts.sum()
            new[key] = np.log(np.clip(probs, 1e-15, None))
        # Step doubling: extrapolate along the logit-space EM direction, which
        # cuts the slow geometric tail near a likelihood ridge.
        cand = dict(new)
        for key in fit_keys:
            cand[key] = new[key] + 3.0 * (new[key] - params[key])
        params = cand if score(cand) > ll else new
        # TV error scales like sqrt(KL), so run until the likelihood gain is
        # far below the square of the residual tolerance.
        if ll - prev_ll < tol * tol * 0.01:
            break
        if (obj_weight == 0.0 and it % 10 == 9
                and compiled.data_residual(params) <= 0.9 * tol):
            break
        prev_ll = ll
    return params


def _polish_target(compiled: _CompiledTask, params: dict) -> dict:
    """Exact maximization of the target-only parameters, holding sources fixed.

    Canonical blocks: a linear program over the target block table with its
    marginal ties as equalities.  Latent blocks: coordinate one-hot ascent on
    CPTs that no source shares.
    """
    params = dict(params)
    for _ in range(3):
        for i, fb in enumerate(compiled.free):
            weight = compiled.psi_flat * compiled.fixed_flat
            for j, f in enumerate(compiled.free_factors(params, TARGET)):
                if j != i:
                    weight = weight * f
            if fb.mode == "canonical":
                if fb.share[TARGET] != frozenset({TARGET}):
                    continue  # table exactly shared with a source; not target-only
                c = fb.emit.T @ weight
                a_eq = [np.ones(fb.size)]
                b_eq = [1.0]
                for v in fb.block:
                    group = fb._group_of(v, TARGET)
                    srcs = sorted(group - {TARGET})
                    if not srcs:
                        continue
                    ref = fb._marginal(fb.probs(params, srcs[0]), v)
                    axis = fb.block.index(v)
                    for val in range(fb.cards[axis]):
                        row = np.zeros(fb.cards)
                        sl = [slice(None)] * len(fb.cards)
                        sl[axis] = val
                        row[tuple(sl)] = 1.0
                        a_eq.append(row.reshape(-1))
                        b_eq.append(float(ref[val]))
                res = linprog(
                    -c, A_eq=np.asarray(a_eq), b_eq=np.asarray(b_eq),
                    bounds=[(0, 1)] * fb.size, method="highs",
                )
                if res.status == 0:
                    p = np.clip(res.x, 1e-12, None)
                    params[fb.table_key(TARGET)] = np.log(p / p.sum())
            else:
                pi = _softmax(params[("pi", fb.block)])
                ms = {v: fb._m_matrix(params, v, TARGET) for v in fb.block}
                for v in fb.block:
                    if fb._group_of(v, TARGET) != frozenset({TARGET}):
                        continue  # CPT shared with a source; constrained by data
                    other = np.ones((compiled.n_cells, fb.k))
                    for v2 in fb.block:
                        if v2 != v:
                            other *= ms[v2]
                    meta = fb.var_meta[v]
                    gain = np.zeros((meta["n_ctx"], fb.k, meta["n_val"]))
                    contrib = weight[:, None] * other * pi[None, :]
                    np.add.at(
                        gain,
                        (meta["ctx"][:, None], np.arange(fb.k)[None, :],
                         meta["vals"][:, None]),
                        contrib,
                    )
                    best = gain.argmax(axis=-1)
                    logits = np.full(gain.shape, -30.0)
                    np.put_along_axis(logits, best[..., None], 0.0, axis=-1)
                    params[fb.cpt_key(v, TARGET)] = logits
                    ms[v] = fb._m_matrix(params, v, TARGET)
    return params


def _marginal_mask(cards, axis, val) -> np.ndarray:
    mask = np.zeros(cards)
    sl = [slice(None)] * len(cards)
    sl[axis] = val
    mask[tuple(sl)] = 1.0
    return mask.reshape(-1)


def _solve_lp_single_block(compiled: _CompiledTask):
    """Exact linear program when exactly one canonical free block exists.

    The (flipped) objective is always maximized; the caller encodes direction
    by negating ψ.
    """
    fb = compiled.free[0]
    keys = sorted({fb.table_key(d) for d in compiled.domains}, key=str)
    offsets = {k: i * fb.size for i, k in enumerate(keys)}
    n = fb.size * len(keys)
    c = np.zeros(n)
    kt = fb.table_key(TARGET)
    c[offsets[kt]: offsets[kt] + fb.size] = fb.emit.T @ (
        compiled.psi_flat * compiled.fixed_flat
    )
    a_eq, b_eq = [], []
    for k in keys:
        row = np.zeros(n)
        row[offsets[k]: offsets[k] + fb.size] = 1.0
        a_eq.append(row)
        b_eq.append(1.0)
    for d in compiled.joints:
        kd = fb.table_key(d)
        scaled = compiled.source_fixed[d][:, None] * fb.emit  # (cells, size)
        for cell in range(compiled.n_cells):
            row = np.zeros(n)
            row[offsets[kd]: offsets[kd] + fb.size] = scaled[cell]
            a_eq.append(row)
            b_eq.append(float(compiled.data_flat[d][cell]))
    for i, j, v in fb.ties:
        ki, kj = fb.table_key(i), fb.table_key(j)
        axis = fb.block.index(v)
        for val in range(fb.cards[axis]):
            mask = _marginal_mask(fb.cards, axis, val)
            row = np.zeros(n)
            row[offsets[ki]: offsets[ki] + fb.size] += mask
            row[offsets[kj]: offsets[kj] + fb.size] -= mask
            a_eq.append(row)
            b_eq.append(0.0)
    res = linprog(-c, A_eq=np.asarray(a_eq), b_eq=np.asarray(b_eq),
                  bounds=[(0, 1)] * n, method="highs")
    return keys, offsets, res


def _params_from_lp(fb, keys, offsets, x) -> dict:
    params = {}
    for k in keys:
        p = np.clip(x[offsets[k]: offsets[k] + fb.size], 1e-15, None)
        params[k] = np.log(p / p.sum())
    return params


def _witnesses(compiled: _CompiledTask, params: dict) -> dict:
    """Per-domain response models when every block is canonically representable."""
    sel = compiled.task.sel
    diagram = sel.base
    a_nodes = compiled.a_nodes
    sub_dir = [(a, b) for a, b in diagram.directed_edges if a in a_nodes and b in a_nodes]
    sub_bi = [tuple(e) for e in diagram.bidirected_edges if set(e) <= set(a_nodes)]
    sub = CausalDiagram(a_nodes, sub_dir, sub_bi)
    supports = {v: compiled.supports[v] for v in a_nodes}
    free_by_block = {fb.block: fb for fb in compiled.free}
    out = {}
    for d in compiled.domains:
        tables = {}
        ok = True
        for bp in compiled.plan.blocks:
            if bp.block in free_by_block:
                fb = free_by_block[bp.block]
                if fb.mode != "canonical":
                    ok = False
                    break
                tables[bp.block] = fb.probs(params, d).reshape(fb.cards)
            else:
                src = bp.source if d == TARGET else d
                table = _canonical_table_for_factor(
                    compiled, bp.block, compiled.fitted[(src, bp.block)]
                )
                if table is None:
                    ok = False
                    break
                tables[bp.block] = table
        if ok:
            try:
                out[d] = CanonicalModel(sub, supports, tables)
            except (InputError, BudgetError):
                pass
    return out


def _canonical_table_for_factor(compiled, block, fitted: FittedCFactor):
    """Feasibility LP producing a block law that entails a fitted c-factor."""
    sel = compiled.task.sel
    diagram = sel.base
    supports = compiled.supports
    cards = tuple(response_card(v, supports, diagram.parents(v)) for v in block)
    size = int(np.prod(cards))
    if size > compiled.cfg.block_budget:
        return None
    scope_vars = set(block)
    for v in block:
        scope_vars |= set(diagram.parents(v))
    scope = tuple(v for v in compiled.a_nodes if v in scope_vars)
    emit = block_emission(diagram, supports, block, scope)
    emit = emit.reshape(-1, size)
    # reduce the fitted dense factor to the (parents, block) cells
    keep_axes = tuple(compiled.a_nodes.index(v) for v in scope)
    drop = tuple(i for i in range(len(compiled.a_nodes)) if i not in keep_axes)
    reduced = fitted.table
    if drop:
        norm = np.prod([compiled.shape[i] for i in drop])
        reduced = reduced.sum(axis=drop) / norm
    target = reduced.reshape(-1)
    a_eq = np.vstack([emit, np.ones((1, size))])
    b_eq = np.concatenate([target, [1.0]])
    res = linprog(np.zeros(size), A_eq=a_eq, b_eq=b_eq, bounds=[(0, 1)] * size,
                  method="highs")
    if res.status != 0:
        return None
    return np.clip(res.x, 0.0, None).reshape(cards) / max(res.x.sum(), 1e-15)


def solve_bounds(task: BoundTask, cfg: OptimizerConfig = OptimizerConfig()) -> BoundResult:
    """Best bound over constrained response models; see module docstring."""
    compiled = _CompiledTask(task, cfg, shortcut=cfg.shortcut)
    directions = ("max", "min") if task.direction == "both" else (task.direction,)
    values: dict[str, float] = {}
    witness_models: dict = {}
    witness_joint = None
    trace: list = []
    status = "converged"
    for sense in directions:
        result = _solve_direction(compiled, cfg, sense, trace)
        values[sense] = result["value"]
        if sense == "max" or "max" not in directions:
            witness_models = result["witnesses"]
            witness_joint = result["joint"]
        if result["status"] != "converged" and status == "converged":
            status = result["status"]
    return BoundResult(
        lower=values.get("min"),
        upper=values.get("max"),
        witness_models=witness_models,
        witness_joint=witness_joint,
        trace=trace,
        status=status,
        plan=compiled.plan,
    )


def _solve_direction(compiled: _CompiledTask, cfg, sense: str, trace) -> dict:
    sign = 1.0 if sense == "max" else -1.0
    flipped = compiled
    if sense == "min":
        flipped = _flip(compiled)
    if not flipped.free:
        value = float(flipped.psi_flat @ flipped.fixed_flat)
        trace.append((f"{sense}:point", sign * value, flipped.data_residual({})))
        return {
            "value": sign * value,
            "witnesses": _witnesses(flipped, {}),
            "joint": flipped.target_joint({}),
            "status": "converged",
        }
    if len(flipped.free) == 1 and flipped.free[0].mode == "canonical":
        fb = flipped.free[0]
        keys, offsets, res = _solve_lp_single_block(flipped)
        if res.status == 0:
            params = _params_from_lp(fb, keys, offsets, res.x)
            value = flipped.target_value(params)
            resid = flipped.residual(params)
            trace.append((f"{sense}:lp", sign * value, resid))
            return {
                "value": sign * value,
                "witnesses": _witnesses(flipped, params),
                "joint": flipped.target_joint(params),
                "status": "converged" if resid <= cfg.tol else "infeasible",
            }
        if res.status == 2:
            trace.append((f"{sense}:lp", float("nan"), float("inf")))
            # fall through to the penalized path; data may be off the polytope
    best = None
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)

    soft_ties = any(fb.mode == "canonical" and fb.ties for fb in flipped.free)

    def run(idx_seed):
        idx, seed = idx_seed
        rng = np.random.default_rng(seed)
        params = _init_params(flipped, rng)
        local_trace: list = []
        params = _em_fit(flipped, params,
                         cfg.max_iters if soft_ties else max(cfg.max_iters // 2, 10),
                         cfg.tol)
        local_trace.append((f"{sense}:r{idx}:em", flipped.target_value(params),
                            flipped.residual(params)))
        if soft_ties:
            # Cross-domain marginal ties inside multi-variable blocks are not
            # enforced by sharing, so reconcile them with the penalized ascent.
            for lam in cfg.lambda_schedule:
                params, _ = _ascend(
                    flipped, params, lam, cfg.max_iters, local_trace,
                    f"{sense}:r{idx}:lam{lam:g}"
                )
        else:
            # Objective-tilted rounds move the fit along data-equivalent
            # directions toward large objective values, then a final plain
            # round restores the exact data fit.
            for omega in (1.0, 0.2):
                params = _em_fit(flipped, params, max(cfg.max_iters // 4, 10), cfg.tol,
                                 obj_weight=omega)
            params = _em_fit(flipped, params, cfg.max_iters, cfg.tol)
            local_trace.append((f"{sense}:r{idx}:tilt", flipped.target_value(params),
                                flipped.residual(params)))
        params = _polish_target(flipped, params)
        value = flipped.target_value(params)
        resid = flipped.residual(params)
        local_trace.append((f"{sense}:r{idx}:final", value, resid))
        return idx, params, value, resid, local_trace

    tasks = list(enumerate(seeds))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            runs = list(pool.map(run, tasks))
    else:
        runs = [run(t) for t in tasks]
    for idx, params, value, resid, local_trace in sorted(runs, key=lambda r: r[0]):
        trace.extend(local_trace)
        feasible = resid <= cfg.tol
        if best is None:
            best = (feasible, value, resid, params, idx)
        else:
            b_feasible, b_value = best[0], best[1]
            if (feasible, value) > (b_feasible, b_value):
                best = (feasible, value, resid, params, idx)
    feasible, value, resid, params, _ = best
    if feasible:
        status = "converged"
    elif resid <= 100 * cfg.tol:
        status = "restart_exhausted"
    else:
        status = "infeasible"
    return {
        "value": sign * value,
        "witnesses": _witnesses(flipped, params),
        "joint": flipped.target_joint(params),
        "status": status,
    }


def _flip(compiled: _CompiledTask) -> _CompiledTask:
    import copy

    flipped = copy.copy(compiled)
    flipped.psi_flat = -compiled.psi_flat
    return flipped


# ---------------------------------------------------------------------------
# Constructive oracle


def brute_force_bound(task: BoundTask, resolution: int = 200, seed: int = 0,
                      cfg: OptimizerConfig = OptimizerConfig()) -> BoundResult:
    """Extremize over constructively sampled feasible points.

    Every evaluated point satisfies the constraints exactly, so the returned
    maximum lower-bounds the true supremum and the minimum upper-bounds the
    true infimum.  Source representations are drawn from the data-matching
    polytope by seeded hit-and-run from a linear-programming interior point
    plus vertex probes with random objectives; the target blocks are then
    maximized exactly by (coordinate ascent over) linear programs.
    """
    compiled = _CompiledTask(task, cfg, shortcut=True)
    for fb in compiled.free:
        if fb.mode != "canonical":
            raise BudgetError("free block dimension too large for the oracle")
    if _free_dimension(compiled) > 12:
        raise BudgetError("more than 12 free parameters; oracle unavailable")
    rng = np.random.default_rng(seed)
    directions = ("max", "min") if task.direction == "both" else (task.direction,)
    values = {}
    trace = []
    joint = None
    for sense in directions:
        flipped = compiled if sense == "max" else _flip(compiled)
        best_val, best_params = -np.inf, None
        for params in _oracle_source_points(flipped, resolution, rng):
            params = _oracle_inner_max(flipped, params)
            if params is None:
                continue
            v = flipped.target_value(params)
            if v > best_val:
                best_val, best_params = v, params
        if best_params is None:
            raise InfeasibleError("oracle found no feasible point")
        sign = 1.0 if sense == "max" else -1.0
        values[sense] = sign * best_val
        trace.append((f"{sense}:oracle", values[sense], flipped.residual(best_params)))
        if sense == directions[0]:
            joint = flipped.target_joint(best_params)
    return BoundResult(
        lower=values.get("min"),
        upper=values.get("max"),
        witness_models={},
        witness_joint=joint,
        trace=trace,
        status="converged",
        plan=compiled.plan,
    )


def _free_dimension(compiled: _CompiledTask) -> int:
    """Degrees of freedom after eliminating equality constraints, by rank."""
    dim = 0
    for fb in compiled.free:
        counted = set()
        for d in compiled.joints:
            key = fb.table_key(d)
            if key in counted:
                continue
            counted.add(key)
            a_eq, _ = _source_constraints(compiled, fb, d)
            dim += fb.size - np.linalg.matrix_rank(a_eq)
        if fb.table_key(TARGET) in counted:
            continue  # target table exactly shared with a source
        tie_rows = [np.ones(fb.size)]
        for v in fb.block:
            if any(TARGET in g and len(g) > 1 for g in fb.groups[v]):
                axis = fb.block.index(v)
                for val in range(fb.cards[axis]):
                    tie_rows.append(_marginal_mask(fb.cards, axis, val))
        dim += fb.size - np.linalg.matrix_rank(np.asarray(tie_rows))
    return dim


def _factor_cells(compiled, fb, d):
    """Emission rows and fitted c-factor values over (parents, block) cells.

    The block's c-factor is identified from the domain's joint, so pinning it
    per cell is equivalent to pinning the block's contribution to the joint
    regardless of the other blocks.
    """
    diagram = compiled.task.sel.base
    scope_vars = set(fb.block)
    for v in fb.block:
        scope_vars |= set(diagram.parents(v))
    scope = tuple(v for v in compiled.a_nodes if v in scope_vars)
    emit = block_emission(diagram, compiled.supports, fb.block, scope).reshape(-1, fb.size)
    keep_axes = tuple(compiled.a_nodes.index(v) for v in scope)
    drop = tuple(i for i in range(len(compiled.a_nodes)) if i not in keep_axes)
    reduced = compiled.fitted[(d, fb.block)].table
    if drop:
        # the fitted factor is constant along dropped axes; averaging is exact
        reduced = reduced.sum(axis=drop) / np.prod([compiled.shape[i] for i in drop])
    return emit, reduced.reshape(-1)


def _source_constraints(compiled, fb, d) -> tuple[np.ndarray, np.ndarray]:
    """Equality rows pinning a source's block table to its fitted c-factor."""
    emit, cells = _factor_cells(compiled, fb, d)
    a_eq = np.vstack([emit, np.ones((1, fb.size))])
    b_eq = np.concatenate([cells, [1.0]])
    return a_eq, b_eq


def _oracle_source_points(compiled: _CompiledTask, resolution: int, rng):
    """Yield parameter dicts with every source representation feasible."""
    per_block: dict = {}
    for fb in compiled.free:
        # one table per sharing group; stack the constraints of every domain
        # whose data pins that shared table
        by_key: dict = {}
        for d in compiled.joints:
            by_key.setdefault(fb.table_key(d), []).append(d)
        for key, doms in by_key.items():
            if key in per_block:
                continue
            rows, rhs = [], []
            for d in doms:
                a_eq, b_eq = _source_constraints(compiled, fb, d)
                rows.append(a_eq)
                rhs.append(b_eq)
            pts = _polytope_points(
                np.vstack(rows), np.concatenate(rhs), fb.size, resolution, rng
            )
            if not pts:
                raise InfeasibleError(f"no representation matches data for {key}")
            per_block[key] = pts
    keys = sorted(per_block, key=str)
    counts = [len(per_block[k]) for k in keys]
    total = int(np.prod(counts)) if keys else 1
    if total <= 4 * resolution:
        combos = itertools.product(*(range(c) for c in counts))
    else:
        combos = (tuple(rng.integers(0, c) for c in counts) for _ in range(4 * resolution))
    for combo in combos:
        params = {}
        for k, i in zip(keys, combo):
            p = np.clip(per_block[k][i], 1e-15, None)
            params[k] = np.log(p / p.sum())
        yield params


def _polytope_points(a_eq, b_eq, n, resolution, rng) -> list:
    """Interior point, vertex probes, and hit-and-run samples of {x>=0, Ax=b}."""
    base = linprog(np.zeros(n), A_eq=a_eq, b_eq=b_eq, bounds=[(0, 1)] * n, method="highs")
    if base.status != 0:
        return []
    points = [base.x]
    n_vertex = min(resolution, 2 * n + 4)
    for _ in range(n_vertex):
        obj = rng.normal(size=n)
        res = linprog(obj, A_eq=a_eq, b_eq=b_eq, bounds=[(0, 1)] * n, method="highs")
        if res.status == 0:
            points.append(res.x)
    ns = null_space(a_eq)
    if ns.size:
        x = np.mean(points, axis=0)
        for _ in range(resolution):
            d = ns @ rng.normal(size=ns.shape[1])
            norm = np.linalg.norm(d)
            if norm < 1e-12:
                continue
            d /= norm
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios_pos = np.where(d < -1e-12, -x / d, np.inf)
                ratios_neg = np.where(d > 1e-12, x / d, np.inf)
            t_max = float(np.min(ratios_pos))
            t_min = -float(np.min(ratios_neg))
            if not np.isfinite(t_max) or not np.isfinite(t_min) or t_max <= t_min:
                continue
            t = rng.uniform(t_min, t_max)
            x = np.clip(x + t * d, 0.0, None)
            points.append(x.copy())
    dedup = []
    for p in points:
        if not any(np.abs(p - q).max() < 1e-9 for q in dedup):
            dedup.append(p)
    return dedup


def _oracle_inner_max(compiled: _CompiledTask, params: dict):
    """Exact target maximization given fixed source representations."""
    params = dict(params)
    for fb in compiled.free:
        key = fb.table_key(TARGET)
        if key in params:
            continue  # exactly shared with a source
        params[key] = np.zeros(fb.size)
    for _ in range(3 if len(compiled.free) > 1 else 1):
        for i, fb in enumerate(compiled.free):
            if fb.table_key(TARGET) != ("table", fb.block, frozenset({TARGET})):
                continue
            weight = compiled.psi_flat * compiled.fixed_flat
            for j, f in enumerate(compiled.free_factors(params, TARGET)):
                if j != i:
                    weight = weight * f
            c = fb.emit.T @ weight
            a_eq = [np.ones(fb.size)]
            b_eq = [1.0]
            for v in fb.block:
                group = fb._group_of(v, TARGET)
                srcs = sorted(group - {TARGET})
                if not srcs:
                    continue
                ref = fb._marginal(fb.probs(params, srcs[0]), v)
                axis = fb.block.index(v)
                for val in range(fb.cards[axis]):
                    mask = np.zeros(fb.cards)
                    sl = [slice(None)] * len(fb.cards)
                    sl[axis] = val
                    mask[tuple(sl)] = 1.0
                    a_eq.append(mask.reshape(-1))
                    b_eq.append(float(ref[val]))
            res = linprog(-c, A_eq=np.asarray(a_eq), b_eq=np.asarray(b_eq),
                          bounds=[(0, 1)] * fb.size, method="highs")
            if res.status != 0:
                return None
            p = np.clip(res.x, 1e-15, None)
            params[fb.table_key(TARGET)] = np.log(p / p.sum())
    return params
