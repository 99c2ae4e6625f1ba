"""Maximum-likelihood baselines: batch EM and stepwise online EM."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import LatentJTModel, random_model
from .structure import RootedJunctionTree
from .tensor import LabeledTensor

__all__ = ["EMConfig", "TrainResult", "em_train", "online_em_train", "stepsize", "m_step", "relative_change"]

ZERO_COLUMN_FLOOR = 1e-9


@dataclass(frozen=True)
class EMConfig:
    restarts: int = 5
    tol: float = 1e-4
    max_iter: int = 500
    rates: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0)
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainResult:
    model: LatentJTModel
    trace: list[float]
    seconds: float
    selected: int | float
    n_iter: int = 0
    converged: bool = False
    runs: list[dict] = field(default_factory=list)


def relative_change(prev: float, cur: float) -> float:
    avg = (abs(prev) + abs(cur)) / 2
    if avg == 0:
        return 0.0
    return abs(cur - prev) / avg


def m_step(tree: RootedJunctionTree, counts) -> LatentJTModel:
    """Normalize expected clique counts into P(R | S); all-zero columns become uniform."""
    pots = []
    for i, c in enumerate(counts):
        rem, sep = tree.remainders[i], tree.separators[i]
        if not rem:
            pots.append(LabeledTensor(sep, np.ones([v.cardinality for v in sep])))
            continue
        r = math.prod(v.cardinality for v in rem)
        table = np.asarray(c, dtype=float).reshape(r, -1)
        tot = table.sum(axis=0)
        empty = tot <= 0
        if empty.any():
            table = table.copy()
            table[:, empty] += ZERO_COLUMN_FLOOR
            tot = table.sum(axis=0)
        pots.append(LabeledTensor(rem + sep, (table / tot).reshape(np.shape(c))))
    return LatentJTModel(tree, tuple(pots))


def _check(tree, X):
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty sample set")
    if X.shape[1] != len(tree.observed):
        raise ValueError(f"samples have {X.shape[1]} columns, tree has {len(tree.observed)} observed variables")
    return X


def _seed(config: EMConfig, k: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, k])


def em_train(tree: RootedJunctionTree, X, config: EMConfig = EMConfig()) -> TrainResult:
    """Batch EM with random restarts; the best final log-likelihood wins.

    Stops when the relative change of the log-likelihood drops to
    ``config.tol`` or after ``config.max_iter`` M-steps.
    """
    X = _check(tree, X)
    t0 = time.perf_counter()
    best = None
    runs = []
    for r in range(config.restarts):
        model = random_model(tree, _seed(config, r))
        counts, ll = model.batched.expected_counts(X)
        trace = [ll]
        converged = False
        it = 0
        for it in range(1, config.max_iter + 1):
            model = m_step(tree, counts)
            counts, ll = model.batched.expected_counts(X)
            trace.append(ll)
            if relative_change(trace[-2], trace[-1]) <= config.tol:
                converged = True
                break
        runs.append({"restart": r, "log_likelihood": trace[-1], "n_iter": it, "converged": converged, "trace": trace})
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, r, it, converged)
    model, trace, r, it, converged = best
    return TrainResult(model, trace, time.perf_counter() - t0, r, it, converged, runs)


def stepsize(rate: float, k: int) -> float:
    """Stepwise interpolation weight for the k-th update (k = 0, 1, ...)."""
    return (k + 2) ** (-rate)


def _initial_stats(model: LatentJTModel):
    """Per-record statistics consistent with the model's own tables."""
    out = []
    for i, pot in enumerate(model.potentials):
        sep = model.tree.separators[i]
        s = math.prod(v.cardinality for v in sep)
        out.append(pot.values / s)
    return out


def online_em_train(tree: RootedJunctionTree, X, config: EMConfig = EMConfig()) -> TrainResult:
    """Stepwise online EM, one run per rate in ``config.rates``.

    Statistics move toward each mini-batch's per-record expected counts
    with weight ``(k + 2) ** -rate``; the run with the best final
    log-likelihood on the full data is kept.
    """
    X = _check(tree, X)
    n = X.shape[0]
    t0 = time.perf_counter()
    best = None
    runs = []
    for j, rate in enumerate(config.rates):
        rng = _seed(config, 10_000 + j)
        model = random_model(tree, rng)
        stats = _initial_stats(model)
        k = 0
        trace = []
        for _ in range(config.epochs):
            perm = rng.permutation(n)
            for lo in range(0, n, config.batch_size):
                batch = X[perm[lo:lo + config.batch_size]]
                counts, _ = model.batched.expected_counts(batch)
                eta = stepsize(rate, k)
                stats = [(1 - eta) * s + eta * c / len(batch) for s, c in zip(stats, counts)]
                model = m_step(tree, stats)
                k += 1
            trace.append(float(model.batched.log_likelihood(X).sum()))
        runs.append({"rate": rate, "log_likelihood": trace[-1], "updates": k})
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, rate, k)
    model, trace, rate, k = best
    return TrainResult(model, trace, time.perf_counter() - t0, rate, k, True, runs)
