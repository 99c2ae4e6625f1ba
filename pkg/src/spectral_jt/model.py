"""CPT-parameterized latent junction tree models and exact inference."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .structure import RootedJunctionTree
from .tensor import LabeledTensor, Variable, diag_embed, fix_index, multiply

__all__ = [
    "LatentJTModel",
    "random_model",
    "sample",
    "embed_clique",
    "exact_marginal",
    "brute_force_joint",
    "marginal_table",
    "transfer_potentials",
    "BatchedTree",
    "einsum_labeled",
    "StateSpaceTooLarge",
]

BRUTE_FORCE_LIMIT = 10**7


class StateSpaceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class LatentJTModel:
    """One table P(R_i | S_i) per clique, modes ordered remainder then separator."""

    tree: RootedJunctionTree
    potentials: tuple[LabeledTensor, ...]

    def __post_init__(self):
        if len(self.potentials) != self.tree.n_nodes:
            raise ValueError("need one potential per clique")
        for i, pot in enumerate(self.potentials):
            want = self.tree.remainders[i] + self.tree.separators[i]
            if pot.variables != want:
                raise ValueError(f"potential {i} labeled {pot.variables}, expected {want}")
            if np.any(pot.values < 0):
                raise ValueError(f"potential {i} has negative entries")
            r = len(self.tree.remainders[i])
            sums = pot.values.reshape(math.prod(pot.dims[:r]), -1).sum(axis=0)
            if not np.allclose(sums, 1.0, rtol=0, atol=1e-10):
                raise ValueError(f"potential {i} is not normalized over its remainder")

    def cpt(self, node: int) -> np.ndarray:
        return self.potentials[node].values

    @cached_property
    def embedded(self) -> tuple[LabeledTensor, ...]:
        return tuple(embed_clique(self, i) for i in range(self.tree.n_nodes))

    @cached_property
    def batched(self) -> "BatchedTree":
        return BatchedTree(self.tree, [p.values for p in self.potentials])


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_model(tree: RootedJunctionTree, seed=None) -> LatentJTModel:
    """Every conditional column drawn from a flat Dirichlet."""
    rng = _rng(seed)
    pots = []
    for i in range(tree.n_nodes):
        rem, sep = tree.remainders[i], tree.separators[i]
        r = math.prod(v.cardinality for v in rem)
        s = math.prod(v.cardinality for v in sep)
        if rem:
            table = rng.dirichlet(np.ones(r), size=s).T
        else:
            table = np.ones((1, s))
        pots.append(LabeledTensor(rem + sep, table.reshape([v.cardinality for v in rem + sep])))
    return LatentJTModel(tree, tuple(pots))


def transfer_potentials(model: LatentJTModel, tree: RootedJunctionTree) -> LatentJTModel:
    """Re-express ``model`` on ``tree`` (e.g. its normalized version).

    Nodes with identical clique and separator keep their table; nodes with an
    empty remainder get the constant table 1.
    """
    old = {
        (frozenset(model.tree.cliques[i]), model.tree.separators[i]): model.potentials[i]
        for i in range(model.tree.n_nodes)
    }
    pots = []
    for i in range(tree.n_nodes):
        key = (frozenset(tree.cliques[i]), tree.separators[i])
        if key in old:
            pots.append(old[key])
        elif not tree.remainders[i]:
            sep = tree.separators[i]
            pots.append(LabeledTensor(sep, np.ones([v.cardinality for v in sep])))
        else:
            raise ValueError(f"no table for clique {tree.cliques[i]} with separator {tree.separators[i]}")
    return LatentJTModel(tree, tuple(pots))


def sample(model: LatentJTModel, n: int, seed=None, chunk: int = 200_000) -> np.ndarray:
    """Ancestral samples of the observed variables, columns in ``tree.observed`` order."""
    rng = _rng(seed)
    tree = model.tree
    values: dict[Variable, np.ndarray] = {}
    for node in tree.order:
        rem, sep = tree.remainders[node], tree.separators[node]
        if not rem:
            continue
        rdims = [v.cardinality for v in rem]
        table = model.cpt(node).reshape(math.prod(rdims), -1)
        if sep:
            s_idx = np.ravel_multi_index([values[v] for v in sep], [v.cardinality for v in sep])
        else:
            s_idx = np.zeros(n, dtype=np.intp)
        cum = np.cumsum(table, axis=0)
        r_idx = np.empty(n, dtype=np.intp)
        u = rng.random(n)
        for lo in range(0, n, chunk):
            c = cum[:-1, s_idx[lo:lo + chunk]].T
            r_idx[lo:lo + chunk] = (u[lo:lo + chunk, None] >= c).sum(axis=1)
        for v, col in zip(rem, np.unravel_index(r_idx, rdims)):
            values[v] = col
    obs = tree.observed
    if not obs:
        return np.zeros((n, 0), dtype=np.int64)
    return np.stack([values[v] for v in obs], axis=1).astype(np.int64)


def _d_counts(tree: RootedJunctionTree, node: int) -> Counter:
    d = Counter()
    for v in tree.separators[node]:
        d[v] += 1
    for c in tree.children[node]:
        for v in tree.separators[c]:
            d[v] += 1
    return d


def embed_clique(model: LatentJTModel, node: int) -> LabeledTensor:
    """Higher-order tensor for clique ``node``.

    A variable appearing in k incident separators occupies k diagonal modes.
    Observed remainder variables outside every separator keep one mode (they
    are fixed during message passing); hidden ones are summed out.
    """
    tree = model.tree
    d = _d_counts(tree, node)
    base = model.potentials[node]
    drop = [i for i, v in enumerate(base.variables) if d[v] == 0 and not v.observed]
    if drop:
        keep = [v for i, v in enumerate(base.variables) if i not in drop]
        base = LabeledTensor(keep, base.values.sum(axis=tuple(drop)))
    mult = {v: d[v] for v in base.variables if d[v] >= 1}
    return diag_embed(base, mult)


def _as_assignment(tree: RootedJunctionTree, assignment) -> dict[Variable, int]:
    obs = tree.observed
    if isinstance(assignment, Mapping):
        out = {v: int(s) for v, s in assignment.items()}
    else:
        vals = list(assignment)
        if len(vals) != len(obs):
            raise ValueError(f"assignment has {len(vals)} values for {len(obs)} observed variables")
        out = dict(zip(obs, (int(x) for x in vals)))
    missing = [v for v in obs if v not in out]
    if missing:
        raise ValueError(f"assignment misses observed variables {missing}")
    return out


def exact_marginal(model: LatentJTModel, assignment) -> float:
    """P(observed = assignment) by tensor message passing over embedded cliques."""
    tree = model.tree
    a = _as_assignment(tree, assignment)
    msgs: dict[int, LabeledTensor] = {}
    for node in reversed(tree.order):
        t = model.embedded[node]
        fix = {v: a[v] for v in set(t.variables) if v.observed}
        if fix:
            t = fix_index(t, fix)
        for c in tree.children[node]:
            m = msgs.pop(c)
            hid = [v for v in tree.separators[c] if not v.observed]
            if hid:
                t = multiply(t, m, hid)
            else:
                t = LabeledTensor(t.variables, t.values * m.item())
        msgs[node] = t
    return msgs[tree.root].item()


def brute_force_joint(model: LatentJTModel, assignment, chunk: int = 1 << 16) -> float:
    """Direct sum over all hidden configurations of the product of CPT entries."""
    tree = model.tree
    a = _as_assignment(tree, assignment)
    hidden = tree.hidden
    cards = [v.cardinality for v in hidden]
    total = math.prod(cards)
    if total > BRUTE_FORCE_LIMIT:
        raise StateSpaceTooLarge(f"{total} hidden configurations exceed {BRUTE_FORCE_LIMIT}")
    pos = {v: k for k, v in enumerate(hidden)}
    acc = 0.0
    for lo in range(0, total, chunk):
        n = min(chunk, total - lo)
        idx = np.unravel_index(np.arange(lo, lo + n), cards) if hidden else ()
        prod = np.ones(n)
        for node, pot in enumerate(model.potentials):
            key = tuple(a[v] if v.observed else idx[pos[v]] for v in pot.variables)
            prod = prod * pot.values[key]
        acc += float(prod.sum())
    return acc


def einsum_labeled(operands: Sequence[tuple[np.ndarray, Sequence]], out: Sequence) -> np.ndarray:
    """``np.einsum`` over arbitrary hashable axis labels."""
    table: dict = {}
    args = []
    for arr, labels in operands:
        args.append(arr)
        args.append([table.setdefault(lab, len(table)) for lab in labels])
    out_ids = [table.setdefault(lab, len(table)) for lab in out]
    if len(table) > 52:
        raise ValueError("too many distinct indices for a single contraction")
    return np.einsum(*args, out_ids, optimize=len(operands) > 2)


def marginal_table(model: LatentJTModel, variables: Sequence[Variable]) -> LabeledTensor:
    """Exact joint marginal over ``variables`` by variable elimination on the tree."""
    tree = model.tree
    query = list(variables)
    if len(set(query)) != len(query):
        raise ValueError("duplicate variables in query")
    qset = set(query)
    below: dict[int, set[Variable]] = {}
    msgs: dict[int, tuple[np.ndarray, list]] = {}
    for node in reversed(tree.order):
        held = set(tree.cliques[node])
        ops = [(model.cpt(node), list(model.potentials[node].variables))]
        for c in tree.children[node]:
            held |= below[c]
            ops.append(msgs.pop(c))
        below[node] = held
        keep = sorted(set(tree.separators[node]) | (qset & held))
        msgs[node] = (einsum_labeled(ops, keep), keep)
    arr, labels = msgs[tree.root]
    missing = qset - set(labels)
    if missing:
        raise ValueError(f"variables {missing} are not in the model")
    perm = [labels.index(v) for v in query]
    return LabeledTensor(query, np.transpose(arr, perm))


class BatchedTree:
    """Sum-product over CPT factors for many observed records at once.

    Messages are rescaled per record; log scale factors are accumulated so
    long chains do not underflow.
    """

    def __init__(self, tree: RootedJunctionTree, tables: Sequence[np.ndarray]):
        self.tree = tree
        self.tables = [np.asarray(t, dtype=float) for t in tables]
        self.col = {v: k for k, v in enumerate(tree.observed)}
        self.labels = [list(tree.remainders[i] + tree.separators[i]) for i in range(tree.n_nodes)]
        self.hidden_sep = [[v for v in tree.separators[i] if not v.observed] for i in range(tree.n_nodes)]

    def factor(self, node: int, X: np.ndarray) -> tuple[np.ndarray, list]:
        labels = self.labels[node]
        obs_axes = [k for k, v in enumerate(labels) if v.observed]
        rest = [v for v in labels if not v.observed]
        tab = self.tables[node]
        if not obs_axes:
            return tab, rest
        moved = np.moveaxis(tab, obs_axes, list(range(len(obs_axes))))
        key = tuple(X[:, self.col[labels[k]]] for k in obs_axes)
        return moved[key], ["n"] + rest

    def upward(self, X: np.ndarray):
        """Scaled inside messages, factors, and per-record log-likelihoods."""
        tree = self.tree
        n = X.shape[0]
        lam, factors = {}, {}
        logz = np.zeros(n)
        for node in reversed(tree.order):
            f = self.factor(node, X)
            factors[node] = f
            ops = [f] + [lam[c] for c in tree.children[node]]
            out = ["n"] + self.hidden_sep[node]
            if not any("n" in labels for _, labels in ops):
                ops.append((np.ones(n), ["n"]))
            m = einsum_labeled(ops, out)
            z = m.reshape(n, -1).sum(axis=1)
            safe = np.where(z > 0, z, 1.0)
            with np.errstate(divide="ignore"):
                logz += np.log(z)
            m = m / safe.reshape((n,) + (1,) * (m.ndim - 1))
            lam[node] = (m, out)
        return lam, factors, logz

    def log_likelihood(self, X: np.ndarray) -> np.ndarray:
        return self.upward(X)[2]

    def expected_counts(self, X: np.ndarray):
        """Posterior-expected clique counts (CPT-shaped) and total log-likelihood."""
        tree = self.tree
        n = X.shape[0]
        lam, factors, logz = self.upward(X)
        ok = np.isfinite(logz)
        pi: dict[int, tuple[np.ndarray, list] | None] = {tree.root: None}
        counts = []
        post = {}
        for node in tree.order:
            kids = tree.children[node]
            base = [factors[node]] + ([pi[node]] if pi[node] is not None else [])
            for c in kids:
                ops = base + [lam[k] for k in kids if k != c]
                out = ["n"] + self.hidden_sep[c]
                if not any("n" in labels for _, labels in ops):
                    ops.append((np.ones(n), ["n"]))
                m = einsum_labeled(ops, out)
                z = m.reshape(n, -1).sum(axis=1)
                m = m / np.where(z > 0, z, 1.0).reshape((n,) + (1,) * (m.ndim - 1))
                pi[c] = (m, out)
            hid = [v for v in self.labels[node] if not v.observed]
            ops = base + [lam[k] for k in kids]
            if not any("n" in labels for _, labels in ops):
                ops.append((np.ones(n), ["n"]))
            b = einsum_labeled(ops, ["n"] + hid)
            z = b.reshape(n, -1).sum(axis=1)
            b = b / np.where(z > 0, z, 1.0).reshape((n,) + (1,) * (b.ndim - 1))
            b[~ok] = 0.0
            post[node] = (b, hid)
        for node in range(tree.n_nodes):
            b, hid = post[node]
            labels = self.labels[node]
            obs = [v for v in labels if v.observed]
            if obs:
                odims = [v.cardinality for v in obs]
                flat = np.ravel_multi_index([X[:, self.col[v]] for v in obs], odims)
                acc = np.zeros((math.prod(odims),) + b.shape[1:])
                np.add.at(acc, flat, b)
                acc = acc.reshape(odims + list(b.shape[1:]))
                cur = obs + hid
            else:
                acc = b.sum(axis=0)
                cur = hid
            perm = [cur.index(v) for v in labels]
            counts.append(np.transpose(acc, perm))
        return counts, float(logz[ok].sum()) if ok.all() else -np.inf
