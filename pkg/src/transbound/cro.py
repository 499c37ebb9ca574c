"""Worst-case-optimal classifiers by iterated adversarial training.

The outer loop alternates two exact oracles: the bound engine evaluates the
current classifier's worst-case target risk and exhibits a witness
distribution attaining it; the witness joins an accumulated adversary
collection on which a group-robust classifier is refit.  The loop stops when
the worst-case risk exceeds the collection's empirical maximum by at most a
tolerance, at which point no feasible target model can degrade the classifier
further than the collection already does.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundResult, BoundTask, OptimizerConfig, solve_bounds
from .errors import InputError
from .graphs import SelectionDiagram
from .scm import Dataset, JointTable, TabularClassifier, risk, zero_one_loss


@dataclass(frozen=True)
class CroConfig:
    """Outer-loop tolerance, adversary sampling, and inner solver settings."""

    delta: float = 0.02
    adversary_samples: int = 5000
    max_rounds: int = 20
    inner_iters: int = 200
    inner_eta: float = 1.0
    exact_adversary: bool = False
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()

    def __post_init__(self):
        if self.delta <= 0:
            raise InputError("delta must be positive")
        if self.adversary_samples <= 0 or self.max_rounds <= 0:
            raise InputError("counts must be positive")


@dataclass
class CroResult:
    """Final classifier with the verbatim per-round metric sequence."""

    classifier: TabularClassifier
    rounds: list  # (worst_case_risk, max_empirical_risk, gap)
    adversary_datasets: list
    status: str  # "equilibrium" | "round_cap"

    def classifier_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        h = self.classifier
        writer.writerow(list(h.input_scope) + [h.label])
        for combo in itertools.product(*(h.supports[v] for v in h.input_scope)):
            writer.writerow(list(combo) + [h.table[combo]])
        return buf.getvalue()

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["round", "worst_case_risk", "max_empirical_risk", "gap"])
        for i, (wc, emp, gap) in enumerate(self.rounds):
            writer.writerow([i, repr(wc), repr(emp), repr(gap)])
        return buf.getvalue()


def _as_joint(d, scope) -> JointTable:
    if isinstance(d, Dataset):
        return d.empirical_joint().marginal(scope)
    if isinstance(d, JointTable):
        return d.marginal(scope)
    raise InputError(f"unsupported dataset type {type(d).__name__}")


def _weighted_best_response(joints, weights, scope, label, loss) -> TabularClassifier:
    """Exact minimizer of the mixture risk: the mixture loss is separable per
    input cell, so a per-cell weighted-majority argmin is optimal.  Ties go to
    the lowest label value."""
    supports = {v: joints[0].supports[v] for v in scope + (label,)}
    mix = np.zeros(joints[0].probs.shape)
    for w, p in zip(weights, joints):
        mix = mix + w * p.probs
    expected = mix @ loss  # (cells..., action), label axis contracted
    best = expected.reshape(-1, loss.shape[1]).argmin(axis=1)
    label_vals = supports[label]
    table = {}
    for i, combo in enumerate(itertools.product(*(supports[v] for v in scope))):
        table[combo] = label_vals[best[i]]
    return TabularClassifier(scope, label, supports, table)


def group_dro(datasets, scope, label: str, loss=None, iters: int = 200,
              eta: float = 1.0) -> TabularClassifier:
    """Approximate minimax classifier over a dataset collection.

    Multiplicative weights over datasets against exact best responses: the
    returned classifier is the iterate with the smallest maximum per-dataset
    risk encountered.
    """
    datasets = list(datasets)
    if not datasets:
        raise InputError("group_dro needs a nonempty dataset collection")
    scope = tuple(scope)
    joints = [_as_joint(d, scope + (label,)) for d in datasets]
    if loss is None:
        loss = zero_one_loss(joints[0].supports[label])
    loss = np.asarray(loss, dtype=float)
    weights = np.full(len(joints), 1.0 / len(joints))
    best_h, best_max = None, np.inf
    for _ in range(iters):
        h = _weighted_best_response(joints, weights, scope, label, loss)
        risks = np.array([risk(p, h, loss) for p in joints])
        worst = float(risks.max())
        if worst < best_max:
            best_h, best_max = h, worst
        weights = weights * np.exp(eta * risks)
        weights = weights / weights.sum()
    return best_h


def _sample_joint(joint: JointTable, n: int, rng, domain: str) -> Dataset:
    flat = joint.probs.reshape(-1)
    flat = flat / flat.sum()
    draws = rng.choice(flat.size, size=n, p=flat)
    rows = np.stack(np.unravel_index(draws, joint.probs.shape), axis=1)
    return Dataset(domain, joint.scope, joint.supports, rows)


def _random_classifier(supports, scope, label, rng) -> TabularClassifier:
    label_vals = supports[label]
    table = {}
    for combo in itertools.product(*(supports[v] for v in scope)):
        table[combo] = label_vals[int(rng.integers(len(label_vals)))]
    sub = {v: supports[v] for v in scope + (label,)}
    return TabularClassifier(scope, label, sub, table)


def cro_loop(sel: SelectionDiagram, sources: dict, scope, label: str, loss=None,
             cfg: CroConfig = CroConfig()) -> CroResult:
    """Iterate worst-case evaluation and group-robust refitting to a gap
    of at most cfg.delta; see the module docstring."""
    scope = tuple(scope)
    if label in scope:
        raise InputError("label cannot appear in the classifier scope")
    first = sources[sorted(sources)[0]]
    supports = dict(
        first.supports if isinstance(first, (Dataset, JointTable)) else {}
    )
    for v in scope + (label,):
        if v not in supports:
            raise InputError(f"source data does not cover {v!r}")
    if loss is None:
        loss = zero_one_loss(supports[label])
    loss = np.asarray(loss, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    h = _random_classifier(supports, scope, label, rng)
    adversary: list = []
    adversary_joints: list = []
    rounds: list = []
    status = "round_cap"
    for rnd in range(cfg.max_rounds):
        task = BoundTask(sel, sources, h.loss_table(loss), direction="max")
        result: BoundResult = solve_bounds(task, cfg.optimizer)
        worst_case = result.upper
        empirical = max(
            (risk(p, h, loss) for p in adversary_joints), default=-np.inf
        )
        gap = worst_case - empirical
        rounds.append((worst_case, float(empirical), float(gap)))
        if gap <= cfg.delta:
            status = "equilibrium"
            break
        witness = result.witness_joint.marginal(scope + (label,))
        if cfg.exact_adversary:
            adversary.append(witness)
        else:
            adversary.append(
                _sample_joint(witness, cfg.adversary_samples, rng, f"adv{rnd}")
            )
        adversary_joints.append(_as_joint(adversary[-1], scope + (label,)))
        h = group_dro(adversary, scope, label, loss,
                      iters=cfg.inner_iters, eta=cfg.inner_eta)
    return CroResult(h, rounds, adversary, status)
