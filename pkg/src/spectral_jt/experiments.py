"""Synthetic evaluation harness: structure families, benchmark loop, classification."""

from __future__ import annotations

import csv
import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .em import EMConfig, em_train, online_em_train
from .model import LatentJTModel, exact_marginal, random_model, sample
from .spectral import EmpiricalMoments, ObservedSetPlan, PlanError, infer_batch, learn, plan_observed_sets
from .structure import (
    GraphicalModelSpec,
    RootedJunctionTree,
    StructureError,
    build_junction_tree,
    LEAF_POLICIES,
    junction_tree_from_cliques,
    root_and_normalize,
    validate,
)
from .tensor import Variable

__all__ = [
    "FAMILIES",
    "LEARNERS",
    "THREADS_ENV",
    "BenchmarkConfig",
    "TrialResult",
    "gen_structure",
    "random_structure",
    "learnable_tree",
    "relative_error",
    "evaluate",
    "train_learner",
    "run_benchmark",
    "summarize",
    "parse_splice",
    "classify_sequences",
    "thread_count",
]

FAMILIES = ("hmm2", "hmm3", "factorial2", "synthetic-jt", "figure2")
LEARNERS = ("spectral", "em", "online-em")
THREADS_ENV = "LJT_THREADS"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer")
        return n
    return os.cpu_count() or 1


# -- structures --------------------------------------------------------------


class _Vars:
    """Sequential variable factory."""

    def __init__(self):
        self.items: list[Variable] = []

    def __call__(self, name: str, card: int, observed: bool = False) -> Variable:
        v = Variable(len(self.items), card, name, observed)
        self.items.append(v)
        return v


def _chain(order: int, length: int, k_h: int, k_o: int) -> GraphicalModelSpec:
    new = _Vars()
    H = [new(f"H{t + 1}", k_h) for t in range(length)]
    O = [new(f"O{t + 1}", k_o, True) for t in range(length)]
    parents = {}
    for t in range(length):
        pas = tuple(H[s] for s in range(t - 1, t - order - 1, -1) if s >= 0)
        if pas:
            parents[H[t]] = pas
        parents[O[t]] = (H[t],)
    return GraphicalModelSpec(tuple(new.items), parents=parents)


def _factorial(length: int, k_h: int, k_o: int) -> GraphicalModelSpec:
    new = _Vars()
    A = [new(f"A{t + 1}", k_h) for t in range(length)]
    B = [new(f"B{t + 1}", k_h) for t in range(length)]
    O = [new(f"O{t + 1}", k_o, True) for t in range(length)]
    parents = {}
    for t in range(length):
        if t:
            parents[A[t]] = (A[t - 1],)
            parents[B[t]] = (B[t - 1],)
        parents[O[t]] = (A[t], B[t])
    return GraphicalModelSpec(tuple(new.items), parents=parents)


def _latent_tree(depth: int, k_h: int, k_o: int) -> GraphicalModelSpec:
    """Binary tree of latent nodes, two hidden variables each; leaves emit two observations."""
    new = _Vars()
    parents = {}
    level = [(new("N0a", k_h), new("N0b", k_h))]
    parents[level[0][1]] = (level[0][0],)
    count = 1
    for _ in range(depth):
        nxt = []
        for pa, pb in level:
            for _ in range(2):
                a, b = new(f"N{count}a", k_h), new(f"N{count}b", k_h)
                parents[a] = (pa, pb)
                parents[b] = (pa, pb, a)
                nxt.append((a, b))
                count += 1
        level = nxt
    for j, (a, b) in enumerate(level):
        for r in range(2):
            parents[new(f"O{2 * j + r + 1}", k_o, True)] = (a, b)
    return GraphicalModelSpec(tuple(new.items), parents=parents)


def figure2_example(k_h: int = 2, k_o: int = 4) -> tuple[GraphicalModelSpec, RootedJunctionTree]:
    """Nine-variable worked example: hidden A-E, observed F-I.

    Cliques (node index): 0 ACE (root), 1 BCDE, 2 BDG, 3 BCF, 4 CEH, 5 AI.
    """
    new = _Vars()
    A, B, C, D, E = (new(n, k_h) for n in "ABCDE")
    F, G, H, I = (new(n, k_o, True) for n in "FGHI")
    parents = {C: (A,), E: (A, C), B: (C, E), D: (B, C, E), F: (B, C), G: (B, D), H: (C, E), I: (A,)}
    spec = GraphicalModelSpec(tuple(new.items), parents=parents)
    cliques = [(A, C, E), (B, C, D, E), (B, D, G), (B, C, F), (C, E, H), (A, I)]
    edges = [(0, 1), (0, 4), (0, 5), (1, 2), (1, 3)]
    jt = junction_tree_from_cliques(spec.variables, cliques, edges)
    return spec, root_and_normalize(jt, root=0)


_DEFAULTS = {
    "hmm2": {"length": 8, "k_h": 2, "k_o": 4},
    "hmm3": {"length": 8, "k_h": 2, "k_o": 4},
    "factorial2": {"length": 6, "k_h": 2, "k_o": 16},
    "synthetic-jt": {"depth": 3, "k_h": 2, "k_o": 16},
    "figure2": {"k_h": 2, "k_o": 4},
}


def gen_structure(family: str, params: Mapping | None = None) -> tuple[GraphicalModelSpec, RootedJunctionTree]:
    """Model graph and its rooted, degree-normalized junction tree.

    ``params`` overrides the family defaults (``length``/``depth``, ``k_h``,
    ``k_o``).  Unknown keys are rejected.
    """
    if family not in _DEFAULTS:
        raise ValueError(f"unknown structure family {family!r}; choose from {sorted(_DEFAULTS)}")
    p = dict(_DEFAULTS[family])
    extra = set(params or {}) - set(p)
    if extra:
        raise ValueError(f"unknown parameters for {family}: {sorted(extra)}")
    p.update(params or {})
    k_h, k_o = int(p["k_h"]), int(p["k_o"])
    if k_h < 1 or k_o < 1:
        raise ValueError("cardinalities must be positive")
    if family == "figure2":
        return figure2_example(k_h, k_o)
    if family == "synthetic-jt":
        if int(p["depth"]) < 1:
            raise ValueError("depth must be >= 1")
        spec = _latent_tree(int(p["depth"]), k_h, k_o)
    else:
        length = int(p["length"])
        if length < 2:
            raise ValueError("length must be >= 2")
        if family == "factorial2":
            spec = _factorial(length, k_h, k_o)
        else:
            spec = _chain(2 if family == "hmm2" else 3, length, k_h, k_o)
    return spec, learnable_tree(build_junction_tree(spec))


def learnable_tree(jt) -> RootedJunctionTree:
    """Rooted tree that admits an observed-set plan, preferring zero violations.

    Tries the default root under each leaf policy, then every other root.
    Falls back to the default tree when nothing plans.
    """
    default = None
    best = None
    for policy in LEAF_POLICIES:
        for root in [None, *range(len(jt.cliques))]:
            tree = root_and_normalize(jt, root, leaves=policy)
            if default is None:
                default = tree
            if root is not None and root == default.root and policy == LEAF_POLICIES[0]:
                continue
            n_bad = len(validate(tree))
            if best is not None and n_bad >= best[0]:
                continue
            try:
                plan_observed_sets(tree)
            except PlanError:
                continue
            best = (n_bad, tree)
            if n_bad == 0:
                return tree
    return best[1] if best else default


def random_structure(seed, max_variables: int = 8, max_cardinality: int = 4) -> tuple[GraphicalModelSpec, RootedJunctionTree]:
    """Random latent DAG: hidden variables with earlier hidden parents, observed leaves.

    The result always passes :func:`validate`, but need not admit an
    observable representation; see :func:`random_feasible`.
    """
    rng = np.random.default_rng(seed)
    if max_variables < 2 or max_cardinality < 2:
        raise ValueError("need at least 2 variables and cardinality 2")
    while True:
        n_hidden = int(rng.integers(1, max(2, max_variables // 2) + 1))
        n_obs = int(rng.integers(1, max_variables - n_hidden + 1))
        new = _Vars()
        H = [new(f"H{j + 1}", int(rng.integers(2, min(3, max_cardinality) + 1))) for j in range(n_hidden)]
        O = [new(f"O{j + 1}", int(rng.integers(2, max_cardinality + 1)), True) for j in range(n_obs)]
        parents = {}
        for j in range(1, n_hidden):
            k = int(rng.integers(1, min(2, j) + 1))
            parents[H[j]] = tuple(H[i] for i in sorted(rng.choice(j, size=k, replace=False).tolist()))
        for o in O:
            k = int(rng.integers(1, min(2, n_hidden) + 1))
            parents[o] = tuple(H[i] for i in sorted(rng.choice(n_hidden, size=k, replace=False).tolist()))
        spec = GraphicalModelSpec(tuple(new.items), parents=parents)
        try:
            tree = root_and_normalize(build_junction_tree(spec))
        except StructureError:
            continue
        if not validate(tree):
            return spec, tree


def random_feasible(seed, max_variables: int = 8, max_cardinality: int = 4, max_tries: int = 1000):
    """First random structure (by derived seed) whose observed-set plan succeeds."""
    for k in range(max_tries):
        spec, tree = random_structure([*np.atleast_1d(seed).tolist(), k], max_variables, max_cardinality)
        try:
            plan = plan_observed_sets(tree)
        except PlanError:
            continue
        return spec, tree, plan
    raise RuntimeError(f"no feasible structure after {max_tries} tries")


# -- metrics -----------------------------------------------------------------


def relative_error(estimate: float, truth: float) -> float:
    """|estimate - truth| / truth; undefined (ValueError) for truth <= 0."""
    if not truth > 0:
        raise ValueError("relative error needs a positive true probability")
    return abs(estimate - truth) / truth


def evaluate(estimates: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, int]:
    """Relative errors on queries with positive truth, plus the excluded count."""
    estimates, truth = np.asarray(estimates, float), np.asarray(truth, float)
    ok = truth > 0
    return np.abs(estimates[ok] - truth[ok]) / truth[ok], int((~ok).sum())


# -- benchmark ---------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    family: str = "hmm2"
    structure: Mapping = field(default_factory=dict)
    k_h: int = 2
    k_o: int = 4
    n_grid: tuple[int, ...] = (100, 1_000, 10_000, 100_000)
    test_size: int = 1000
    n_param_sets: int = 10
    seeds: tuple[int, ...] = (0,)
    learners: tuple[str, ...] = LEARNERS
    output: str | None = None
    em_restarts: int = 5
    em_tol: float = 1e-4
    em_max_iter: int = 500
    online_rates: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0)
    online_batch_size: int = 256
    n_minus: int = 1
    combine_minus: bool = False

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "learners", tuple(self.learners))
        object.__setattr__(self, "online_rates", tuple(float(r) for r in self.online_rates))
        object.__setattr__(self, "structure", dict(self.structure))
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be non-empty and strictly ascending")
        if self.n_grid[0] < 1:
            raise ValueError("sample sizes must be positive")
        if self.test_size < 1 or self.n_param_sets < 1 or not self.seeds:
            raise ValueError("test_size, n_param_sets and seeds must be non-empty/positive")
        bad = set(self.learners) - set(LEARNERS)
        if bad or not self.learners:
            raise ValueError(f"unknown learners {sorted(bad)}; choose from {LEARNERS}")
        if self.family not in _DEFAULTS:
            raise ValueError(f"unknown structure family {self.family!r}")

    @property
    def structure_params(self) -> dict:
        return {**self.structure, "k_h": self.k_h, "k_o": self.k_o}

    def em_config(self, seed: int) -> EMConfig:
        return EMConfig(
            restarts=self.em_restarts,
            tol=self.em_tol,
            max_iter=self.em_max_iter,
            rates=self.online_rates,
            batch_size=self.online_batch_size,
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BenchmarkConfig":
        names = {f.name for f in fields(cls)}
        extra = set(doc) - names
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**doc)


@dataclass
class TrialResult:
    learner: str
    n: int
    seed: int
    param_set: int
    errors: list[float]
    mean_error: float
    median_error: float
    n_excluded: int
    train_seconds: float
    failed: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, times: bool = True) -> dict:
        d = asdict(self)
        if not times:
            d.pop("train_seconds")
        return d


def train_learner(learner: str, tree: RootedJunctionTree, X: np.ndarray, *, plan: ObservedSetPlan | None = None,
                  em_config: EMConfig = EMConfig(), combine: bool = False):
    """Train one learner; returns (predict(X) -> probabilities, seconds, info)."""
    if learner == "spectral":
        if plan is None:
            plan = plan_observed_sets(tree)
        t0 = time.perf_counter()
        params = learn(tree, plan, EmpiricalMoments(X, tree.observed), combine=combine)
        seconds = time.perf_counter() - t0
        return (lambda Q: np.clip(infer_batch(params, Q), 0.0, None)), seconds, {"params": params}
    if learner == "em":
        res = em_train(tree, X, em_config)
    elif learner == "online-em":
        res = online_em_train(tree, X, em_config)
    else:
        raise ValueError(f"unknown learner {learner!r}")
    model = res.model
    info = {"model": model, "n_iter": res.n_iter, "selected": res.selected, "converged": res.converged}
    return (lambda Q: np.exp(model.batched.log_likelihood(Q))), res.seconds, info


def _trial_seeds(seed: int, p: int):
    model_rng = np.random.default_rng([seed, p, 0])
    test_rng = np.random.default_rng([seed, p, 1])
    return model_rng, test_rng


def _run_job(config: BenchmarkConfig, seed: int, p: int, n: int) -> list[dict]:
    _, tree = gen_structure(config.family, config.structure_params)
    model_rng, test_rng = _trial_seeds(seed, p)
    truth_model = random_model(tree, model_rng)
    test = sample(truth_model, config.test_size, test_rng)
    truth = _truth(truth_model, test)
    X = sample(truth_model, n, np.random.default_rng([seed, p, 2, n]))
    out = []
    plan = None
    for learner in config.learners:
        try:
            if learner == "spectral" and plan is None:
                plan = plan_observed_sets(tree, n_minus=config.n_minus)
            predict, secs, _ = train_learner(
                learner, tree, X, plan=plan, em_config=config.em_config(seed * 1000 + p), combine=config.combine_minus
            )
            errs, excluded = evaluate(predict(test), truth)
            out.append(TrialResult(learner, n, seed, p, errs.tolist(), float(errs.mean()), float(np.median(errs)),
                                   excluded, secs).to_dict())
        except Exception as exc:  # recorded per trial; the run continues
            out.append(TrialResult(learner, n, seed, p, [], float("nan"), float("nan"), 0, 0.0,
                                   f"{type(exc).__name__}: {exc}").to_dict())
    return out


def _truth(model: LatentJTModel, test: np.ndarray) -> np.ndarray:
    uniq, inv = np.unique(test, axis=0, return_inverse=True)
    vals = np.array([exact_marginal(model, row) for row in uniq])
    return vals[np.asarray(inv).reshape(-1)]


def summarize(trials: Sequence[Mapping]) -> list[dict]:
    """Per (N, learner): median over parameter sets of the mean test error, and mean train time."""
    groups: dict[tuple[int, str], list[Mapping]] = {}
    for t in trials:
        groups.setdefault((t["n"], t["learner"]), []).append(t)
    rows = []
    for (n, learner), ts in sorted(groups.items(), key=lambda kv: (kv[0][0], LEARNERS.index(kv[0][1]))):
        ok = [t for t in ts if t["failed"] is None]
        rows.append({
            "N": n,
            "learner": learner,
            "median_error": statistics.median(t["mean_error"] for t in ok) if ok else float("nan"),
            "mean_time_seconds": statistics.fmean(t["train_seconds"] for t in ok) if ok else float("nan"),
            "failures": len(ts) - len(ok),
        })
    return rows


def run_benchmark(config: BenchmarkConfig, threads: int | None = None) -> list[dict]:
    """Run every (seed, parameter set, N) job; all learners share that job's samples.

    When ``config.output`` is set, writes ``results.json`` (deterministic,
    no timings), ``timings.json`` and ``series.csv`` into that directory.
    """
    jobs = [(s, p, n) for s in config.seeds for p in range(config.n_param_sets) for n in config.n_grid]
    threads = thread_count() if threads is None else threads
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            chunks = list(pool.map(_run_job, [config] * len(jobs), *zip(*jobs)))
    else:
        chunks = [_run_job(config, *j) for j in jobs]
    trials = [t for chunk in chunks for t in chunk]
    trials.sort(key=lambda t: (t["seed"], t["param_set"], t["n"], LEARNERS.index(t["learner"])))
    if config.output:
        write_outputs(config, trials, config.output)
    return trials


def write_outputs(config: BenchmarkConfig, trials: Sequence[Mapping], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(trials)
    results = {
        "config": {k: v for k, v in config.to_dict().items() if k != "output"},
        "trials": [{k: v for k, v in t.items() if k != "train_seconds"} for t in trials],
        "summary": [{k: v for k, v in r.items() if k != "mean_time_seconds"} for r in rows],
    }
    (out / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    timings = [{k: t[k] for k in ("learner", "n", "seed", "param_set", "train_seconds")} for t in trials]
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n", encoding="utf-8")
    with open(out / "series.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "learner", "median_error", "mean_time_seconds"])
        for r in rows:
            w.writerow([r["N"], r["learner"], repr(r["median_error"]), repr(r["mean_time_seconds"])])


# -- sequence classification ---------------------------------------------------

SPLICE_ALPHABET = "ACGT"


def parse_splice(lines, alphabet: str = SPLICE_ALPHABET) -> tuple[list[str], list[str], np.ndarray, int]:
    """Parse ``class, name, sequence`` records.

    Returns class labels, record names, an int array of symbol indices, and
    the number of records skipped for symbols outside ``alphabet``.
    """
    if isinstance(lines, (str, Path)):
        with open(lines, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    index = {c: k for k, c in enumerate(alphabet)}
    labels, names, rows, skipped = [], [], [], 0
    length = None
    for line in lines:
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected 3 comma-separated fields, got {line!r}")
        cls, name, seq = parts
        seq = seq.upper()
        if length is None:
            length = len(seq)
        elif len(seq) != length:
            raise ValueError(f"sequence {name} has length {len(seq)}, expected {length}")
        if any(c not in index for c in seq):
            skipped += 1
            continue
        labels.append(cls)
        names.append(name)
        rows.append([index[c] for c in seq])
    X = np.array(rows, dtype=np.int64).reshape(len(rows), length or 0)
    return labels, names, X, skipped


@dataclass
class Classification:
    labels: list[int]
    scores: np.ndarray
    accuracy: float | None


def classify_sequences(train_sets: Sequence[np.ndarray], test: np.ndarray, learner: str = "spectral", *,
                       k_h: int = 2, k_o: int = 4, test_labels: Sequence[int] | None = None,
                       em_config: EMConfig = EMConfig()) -> Classification:
    """One second-order HMM per class; each test row goes to the most probable class.

    Spectral scores are clamped at zero, so ties (all zero) fall to the
    lowest class index.
    """
    if not train_sets:
        raise ValueError("need at least one class")
    test = np.asarray(test)
    length = test.shape[1]
    for k, X in enumerate(train_sets):
        if np.asarray(X).shape[1] != length:
            raise ValueError(f"class {k} sequences have length {np.asarray(X).shape[1]}, test has {length}")
    _, tree = gen_structure("hmm2", {"length": length, "k_h": k_h, "k_o": k_o})
    # chain observations are O1..OT in tree.observed order
    plan = plan_observed_sets(tree) if learner == "spectral" else None
    scores = np.empty((len(train_sets), test.shape[0]))
    for k, X in enumerate(train_sets):
        predict, _, _ = train_learner(learner, tree, np.asarray(X), plan=plan, em_config=em_config)
        scores[k] = predict(test)
    labels = np.argmax(scores, axis=0).tolist()
    acc = None
    if test_labels is not None:
        acc = float(np.mean(np.asarray(labels) == np.asarray(test_labels)))
    return Classification(labels, scores, acc)
