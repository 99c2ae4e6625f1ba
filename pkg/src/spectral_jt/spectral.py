"""Observable-representation learning for latent junction trees.

Each non-root node i gets an anchor set of observed variables inside its
subtree and one (or more) anchor sets outside it.  Learned tensors depend
only on joint marginals of observed variables; hidden-separator transforms
cancel between neighboring nodes during message passing.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .model import LatentJTModel, _as_assignment, einsum_labeled, marginal_table, random_model
from .structure import RootedJunctionTree
from .tensor import (
    DEFAULT_RCOND,
    LabeledTensor,
    RankDeficiencyError,
    Variable,
    fix_index,
    invert,
    matricize,
    multiply,
    svd_projector,
)

__all__ = [
    "ObservedSetPlan",
    "PlanError",
    "LearnError",
    "ObservableParams",
    "Diagnostics",
    "Estimate",
    "EmpiricalMoments",
    "PopulationMoments",
    "estimate_moment",
    "plan_observed_sets",
    "learn",
    "infer",
    "infer_batch",
    "combine_minus_candidates",
    "stacked_residual",
    "diagnostics",
]

MomentSource = Callable[[Sequence[Variable]], LabeledTensor]


class PlanError(ValueError):
    def __init__(self, failures: Mapping[int, str]):
        self.failures = dict(failures)
        lines = "; ".join(f"node {k}: {v}" for k, v in sorted(self.failures.items()))
        super().__init__(f"no rank-feasible anchor sets: {lines}")


class LearnError(np.linalg.LinAlgError):
    def __init__(self, node, anchors, singular_values):
        self.node = node
        self.anchors = anchors
        self.singular_values = singular_values
        super().__init__(f"node {node}: moment of anchors {list(anchors)} is rank deficient (singular values {singular_values})")


def _states(vs) -> int:
    return math.prod(v.cardinality for v in vs)


@dataclass(frozen=True)
class ObservedSetPlan:
    """Anchor sets per node.

    ``anchors[i]`` lies in the subtree of i (for leaves it is the observed
    remainder); ``minus[i]`` holds one or more candidate sets outside that
    subtree; ``free[i]`` are the observed variables fixed at node i when
    passing messages.
    """

    tree: RootedJunctionTree
    anchors: Mapping[int, tuple[Variable, ...]]
    minus: Mapping[int, tuple[tuple[Variable, ...], ...]]
    free: Mapping[int, tuple[Variable, ...]]

    def tau(self, node: int) -> int:
        return _states(self.tree.separators[node])

    def child_anchors(self, node: int) -> list[tuple[Variable, ...]]:
        return [self.anchors[c] for c in self.tree.children[node]]


class _Ranker:
    """Generic rank of P(anchor | separator), evaluated on a reference model."""

    def __init__(self, model: LatentJTModel, rtol: float):
        self.model = model
        self.rtol = rtol

    def rank(self, anchors, sep) -> int:
        t = marginal_table(self.model, list(anchors) + list(sep))
        s = np.linalg.svd(matricize(t, list(anchors)), compute_uv=False)
        return int((s > self.rtol * s[0]).sum()) if s.size and s[0] > 0 else 0


def _distances(tree: RootedJunctionTree, start: int, allowed: set[int]) -> dict[int, int]:
    nb: dict[int, list[int]] = {i: list(tree.children[i]) for i in range(tree.n_nodes)}
    for i, p in enumerate(tree.parent):
        if p is not None:
            nb[i].append(p)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for w in sorted(nb[u]):
            if w not in dist and w in allowed:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def _greedy(cands, sep, ranker, max_states, seed=()):
    tau = _states(sep)
    chosen = list(seed)
    if chosen and _states(chosen) >= tau and ranker.rank(chosen, sep) >= tau:
        return tuple(sorted(chosen))
    for v in cands:
        if v in chosen:
            continue
        chosen.append(v)
        states = _states(chosen)
        if states >= tau and ranker.rank(chosen, sep) >= tau:
            return tuple(sorted(chosen))
        if states > max_states:
            break
    return None


def plan_observed_sets(
    tree: RootedJunctionTree,
    *,
    n_minus: int = 1,
    reference: LatentJTModel | None = None,
    seed: int = 0,
    max_states: int = 4096,
    rank_rtol: float = 1e-8,
) -> ObservedSetPlan:
    """Choose anchor sets nearest-first (ties by variable id).

    An internal node starts from the nearest observed variable of each
    child branch.  Candidates are then added until their joint state count reaches the
    separator's state count and the conditional P(anchors | separator) has
    full column rank on a reference model (a random model by default, which
    attains the generic rank of the structure).
    """
    failures: dict[int, str] = {}
    for i in range(tree.n_nodes):
        bad = [v for v in tree.separators[i] if v.observed]
        if bad:
            failures[i] = f"observed variables {bad} in separator"
    if failures:
        raise PlanError(failures)
    ranker = _Ranker(reference if reference is not None else random_model(tree, seed), rank_rtol)
    owner_of: dict[int, list[Variable]] = {i: [] for i in range(tree.n_nodes)}
    for i, rem in enumerate(tree.remainders):
        owner_of[i] = [v for v in rem if v.observed]

    anchors, minus, free = {}, {}, {}
    all_nodes = set(range(tree.n_nodes))
    for i in tree.order:
        free[i] = tuple(owner_of[i])
        if i == tree.root:
            continue
        sep = tree.separators[i]
        tau = _states(sep)
        inside = set(tree.subtree(i))
        if tree.is_leaf(i):
            rem = tree.remainders[i]
            if any(not v.observed for v in rem):
                failures[i] = f"leaf remainder {list(rem)} is not fully observed"
                continue
            if _states(rem) < tau or ranker.rank(rem, sep) < tau:
                failures[i] = f"leaf remainder {list(rem)} cannot resolve separator {list(sep)} ({tau} states)"
                continue
            anchors[i] = tuple(rem)
        else:
            d_in = _distances(tree, i, inside)
            key = lambda v: (d_in[owner(tree, v)], v.id)
            cands = sorted((v for u in inside for v in owner_of[u]), key=key)
            # one nearest observation per child branch, then nearest-first
            seed = []
            for c in tree.children[i]:
                branch = [v for u in tree.subtree(c) for v in owner_of[u]]
                if branch:
                    seed.append(min(branch, key=key))
            if _states(seed) > max_states:
                seed = []
            got = _greedy(cands, sep, ranker, max_states, seed)
            if got is None:
                failures[i] = f"observed variables below cannot resolve separator {list(sep)} ({tau} states)"
                continue
            anchors[i] = got
        d_out = _distances(tree, i, (all_nodes - inside) | {i})
        pool = sorted(
            (v for u in all_nodes - inside for v in owner_of[u]),
            key=lambda v: (d_out[owner(tree, v)], v.id),
        )
        sets = []
        while len(sets) < n_minus:
            used = {v for s in sets for v in s}
            got = _greedy([v for v in pool if v not in used], sep, ranker, max_states)
            if got is None:
                break
            sets.append(got)
        if not sets:
            failures[i] = f"observed variables outside the subtree cannot resolve separator {list(sep)} ({tau} states)"
            continue
        minus[i] = tuple(sets)
    if failures:
        raise PlanError(failures)
    return ObservedSetPlan(tree, anchors, minus, free)


def owner(tree: RootedJunctionTree, v: Variable) -> int:
    for i, rem in enumerate(tree.remainders):
        if v in rem:
            return i
    raise KeyError(v)


# -- moments -----------------------------------------------------------------


class EmpiricalMoments:
    """Normalized co-occurrence counts of observed variables.

    ``data`` has one column per entry of ``columns``.
    """

    def __init__(self, data: np.ndarray, columns: Sequence[Variable]):
        data = np.asarray(data)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ValueError("empty sample set")
        if data.shape[1] != len(columns):
            raise ValueError(f"data has {data.shape[1]} columns for {len(columns)} variables")
        self.data = data
        self.col = {v: k for k, v in enumerate(columns)}
        self._cache: dict = {}

    def __call__(self, variables: Sequence[Variable]) -> LabeledTensor:
        variables = tuple(variables)
        hidden = [v for v in variables if not v.observed]
        if hidden:
            raise ValueError(f"moment requested over hidden variables {hidden}")
        if variables not in self._cache:
            dims = [v.cardinality for v in variables]
            flat = np.ravel_multi_index([self.data[:, self.col[v]] for v in variables], dims)
            counts = np.bincount(flat, minlength=math.prod(dims))
            self._cache[variables] = LabeledTensor(variables, counts.reshape(dims) / self.data.shape[0])
        return self._cache[variables]


class PopulationMoments:
    """Exact marginals of observed variables under a ground-truth model."""

    def __init__(self, model: LatentJTModel):
        self.model = model
        self._cache: dict = {}

    def __call__(self, variables: Sequence[Variable]) -> LabeledTensor:
        variables = tuple(variables)
        hidden = [v for v in variables if not v.observed]
        if hidden:
            raise ValueError(f"moment requested over hidden variables {hidden}")
        if variables not in self._cache:
            self._cache[variables] = marginal_table(self.model, variables)
        return self._cache[variables]


def estimate_moment(source, variables: Sequence[Variable], columns: Sequence[Variable] | None = None) -> LabeledTensor:
    """Joint marginal of observed ``variables`` from samples or a model."""
    if isinstance(source, LatentJTModel):
        return PopulationMoments(source)(variables)
    if columns is None:
        raise ValueError("columns are required for sample data")
    return EmpiricalMoments(source, columns)(variables)


# -- learning ----------------------------------------------------------------


class Estimate(NamedTuple):
    value: float
    clamped: float


@dataclass(frozen=True)
class ObservableParams:
    plan: ObservedSetPlan
    tensors: tuple[LabeledTensor, ...]
    projectors: Mapping[int, LabeledTensor]
    projected: Mapping[int, Variable] = field(default_factory=dict)

    @property
    def tree(self) -> RootedJunctionTree:
        return self.plan.tree


def projected_variable(node: int, rank: int) -> Variable:
    return Variable(-(node + 1), rank, f"proj[{node}]")


def _core(plan, node, moments, projectors, minus_set):
    """Moment over child anchors, free variables and ``minus_set``, child anchors projected."""
    tree = plan.tree
    kids = tree.children[node]
    vars_ = [v for c in kids for v in plan.anchors[c]] + list(plan.free[node]) + list(minus_set)
    t = moments(vars_)
    for c in kids:
        t = multiply(t, projectors[c], plan.anchors[c])
    return t


def _rhs(plan, node, moments, projector, minus_set):
    """P(anchors, minus) with the anchor modes projected: labels minus + proj."""
    a = moments(list(plan.anchors[node]) + list(minus_set))
    return multiply(a, projector, plan.anchors[node])


def _stack(plan, node, moments, projectors, candidates):
    proj = projectors[node].variables[-1]
    T_blocks, B_blocks, row_vars = [], [], None
    for m in candidates:
        core = _core(plan, node, moments, projectors, m)
        rows = [v for v in core.variables if v not in m]
        if row_vars is None:
            row_vars = rows
        T_blocks.append(matricize(core, row_vars))
        B = _rhs(plan, node, moments, projectors[node], m)
        B_blocks.append(matricize(B, [proj]))
    return row_vars, proj, np.hstack(T_blocks), np.hstack(B_blocks)


def combine_minus_candidates(
    plan: ObservedSetPlan,
    node: int,
    moments: MomentSource,
    projectors: Mapping[int, LabeledTensor],
    candidates: Sequence[Sequence[Variable]] | None = None,
    rcond: float = DEFAULT_RCOND,
) -> LabeledTensor:
    """Least-squares transformed tensor from several outside anchor sets.

    Every candidate m gives ``X @ B_m = T_m``; the blocks are stacked
    column-wise and solved jointly.  One candidate reduces to the direct
    formula.
    """
    if candidates is None:
        candidates = plan.minus[node]
    candidates = [tuple(m) for m in candidates]
    if len(candidates) == 1:
        return _node_tensor(plan, node, moments, projectors, candidates[0], rcond)
    row_vars, proj, T, B = _stack(plan, node, moments, projectors, candidates)
    s = np.linalg.svd(B, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        raise LearnError(node, plan.anchors[node], s)
    X = T @ np.linalg.pinv(B, rcond=rcond)
    return LabeledTensor(row_vars + [proj], X)


def stacked_residual(plan, node, moments, projectors, candidates, tensor: LabeledTensor) -> float:
    """Frobenius residual of ``tensor`` on the stacked candidate system."""
    row_vars, proj, T, B = _stack(plan, node, moments, projectors, [tuple(m) for m in candidates])
    X = matricize(tensor, row_vars)
    return float(np.linalg.norm(X @ B - T))


def _node_tensor(plan, node, moments, projectors, minus_set, rcond):
    core = _core(plan, node, moments, projectors, minus_set)
    B = _rhs(plan, node, moments, projectors[node], minus_set)
    try:
        Binv = invert(B, list(minus_set), rcond=rcond)
    except RankDeficiencyError as exc:
        raise LearnError(node, plan.anchors[node], exc.singular_values) from None
    return multiply(core, Binv, list(minus_set))


def learn(
    tree: RootedJunctionTree,
    plan: ObservedSetPlan,
    moments: MomentSource,
    *,
    rcond: float = DEFAULT_RCOND,
    combine: bool = False,
) -> ObservableParams:
    """Estimate the transformed tensor of every node from observed moments."""
    if plan.tree != tree:
        raise ValueError("plan was made for a different tree")
    projectors, projected = {}, {}
    for i in tree.order:
        if i == tree.root:
            continue
        tau = plan.tau(i)
        pv = projected_variable(i, tau)
        joint = moments(list(plan.anchors[i]) + list(plan.minus[i][0]))
        try:
            projectors[i] = svd_projector(joint, plan.anchors[i], tau, pv)
        except RankDeficiencyError as exc:
            raise LearnError(i, plan.anchors[i], exc.singular_values) from None
        projected[i] = pv
    tensors: list[LabeledTensor | None] = [None] * tree.n_nodes
    for i in tree.order:
        if i == tree.root:
            tensors[i] = _core(plan, i, moments, projectors, ())
        elif combine and len(plan.minus[i]) > 1:
            tensors[i] = combine_minus_candidates(plan, i, moments, projectors, rcond=rcond)
        else:
            tensors[i] = _node_tensor(plan, i, moments, projectors, plan.minus[i][0], rcond)
    return ObservableParams(plan, tuple(tensors), projectors, projected)


def infer(params: ObservableParams, assignment) -> Estimate:
    """Estimated P(observed = assignment) by transformed message passing."""
    plan, tree = params.plan, params.tree
    a = _as_assignment(tree, assignment)
    msgs: dict[int, LabeledTensor] = {}
    for node in reversed(tree.order):
        t = params.tensors[node]
        if plan.free[node]:
            t = fix_index(t, {v: a[v] for v in plan.free[node]})
        for c in tree.children[node]:
            t = multiply(t, msgs.pop(c), [params.projected[c]])
        msgs[node] = t
    value = msgs[tree.root].item()
    return Estimate(value, max(value, 0.0))


def infer_batch(params: ObservableParams, X: np.ndarray) -> np.ndarray:
    """Raw (unclamped) estimates for each row of ``X`` (columns: ``tree.observed``)."""
    plan, tree = params.plan, params.tree
    X = np.asarray(X)
    n = X.shape[0]
    col = {v: k for k, v in enumerate(tree.observed)}
    msgs: dict[int, tuple[np.ndarray, list]] = {}
    for node in reversed(tree.order):
        t = params.tensors[node]
        labels = list(t.variables)
        fr = list(plan.free[node])
        if fr:
            axes = [labels.index(v) for v in fr]
            moved = np.moveaxis(t.values, axes, list(range(len(axes))))
            arr = moved[tuple(X[:, col[v]] for v in fr)]
            op = (arr, ["n"] + [v for v in labels if v not in fr])
        else:
            op = (t.values, labels)
        ops = [op] + [msgs.pop(c) for c in tree.children[node]]
        if not any("n" in lab for _, lab in ops):
            ops.append((np.ones(n), ["n"]))
        out = ["n"] + ([params.projected[node]] if node != tree.root else [])
        msgs[node] = (einsum_labeled(ops, out), out)
    return msgs[tree.root][0]


# -- diagnostics -------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostics:
    tau: Mapping[int, int]
    sigma_joint: Mapping[int, float]
    sigma_transform: Mapping[int, float]
    alpha: float
    beta: float
    d_max: int
    e_max: int
    treewidth: int
    k_h: int
    k_o: int
    n_cliques: int
    epsilon: float
    delta: float
    log10_bound: float

    @property
    def bound(self) -> float:
        return math.inf if self.log10_bound > 300 else 10.0**self.log10_bound

    def to_dict(self) -> dict:
        return {
            "tau": {str(k): v for k, v in self.tau.items()},
            "sigma_joint": {str(k): v for k, v in self.sigma_joint.items()},
            "sigma_transform": {str(k): v for k, v in self.sigma_transform.items()},
            "alpha": self.alpha,
            "beta": self.beta,
            "d_max": self.d_max,
            "e_max": self.e_max,
            "treewidth": self.treewidth,
            "k_h": self.k_h,
            "k_o": self.k_o,
            "n_cliques": self.n_cliques,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "log10_bound": self.log10_bound,
        }


def _sigma(mat: np.ndarray, k: int) -> float:
    s = np.linalg.svd(mat, compute_uv=False)
    if k > s.size or s[0] == 0:
        return 0.0
    cutoff = s[0] * max(mat.shape) * np.finfo(float).eps
    return float(s[k - 1]) if s[k - 1] > cutoff else 0.0


def diagnostics(model: LatentJTModel, plan: ObservedSetPlan, epsilon: float = 0.1, delta: float = 0.05) -> Diagnostics:
    """Singular-value quantities of the sample-complexity bound on a known model."""
    tree = model.tree
    tau, s_joint, s_tr = {}, {}, {}
    for i in tree.order:
        if i == tree.root:
            continue
        k = plan.tau(i)
        tau[i] = k
        anchors, sep = list(plan.anchors[i]), list(tree.separators[i])
        joint = marginal_table(model, anchors + list(plan.minus[i][0]))
        s_joint[i] = _sigma(matricize(joint, anchors), k)
        pas = matricize(marginal_table(model, anchors + sep), anchors)
        ps = pas.sum(axis=0)
        cond = pas / np.where(ps > 0, ps, 1.0)
        s_tr[i] = _sigma(cond, k)
    alpha = min(s_joint.values()) if s_joint else 0.0
    beta = min(s_tr.values()) if s_tr else 0.0
    orders = [t.order for t in model.embedded]
    obs_modes = [sum(v.observed for v in t.variables) for t in model.embedded]
    d_max, e_max = max(orders), max(obs_modes)
    hid = [v.cardinality for v in tree.hidden] or [1]
    obs = [v.cardinality for v in tree.observed] or [1]
    k_h, k_o = max(hid), max(obs)
    C = tree.n_nodes
    if alpha <= 0 or beta <= 0:
        log10_bound = math.inf
    else:
        log10_bound = (
            d_max * math.log10(4 * k_h**2 / (3 * beta**2))
            + e_max * math.log10(k_o)
            + math.log10(max(math.log(C / delta), 1e-300))
            + 2 * math.log10(C)
            - 2 * math.log10(epsilon)
            - 4 * math.log10(alpha)
        )
    return Diagnostics(tau, s_joint, s_tr, alpha, beta, d_max, e_max, tree.treewidth, k_h, k_o, C, epsilon, delta, log10_bound)
