"""Dense tensors whose modes are labeled by discrete random variables.

Mode order never carries meaning on its own: every operation locates modes by
the variable that labels them.  A variable may label several modes of one
tensor (diagonal embeddings do this); the k-th mode carrying variable ``X``
(counting from the left) has occurrence ``k``.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

__all__ = [
    "Variable",
    "ModeLabel",
    "LabeledTensor",
    "LabelError",
    "RankDeficiencyError",
    "multiply",
    "identity",
    "invert",
    "diag_embed",
    "fix_index",
    "equivalent",
    "matricize",
    "singular_values",
    "svd_projector",
    "DEFAULT_RCOND",
]

DEFAULT_RCOND = 1e-10


@dataclass(frozen=True, order=True)
class Variable:
    """A discrete random variable.

    Ordering and hashing use every field, but ``id`` comes first so sorting a
    collection of variables sorts by id.
    """

    id: int
    cardinality: int
    name: str = ""
    observed: bool = False

    def __post_init__(self):
        if self.cardinality < 1:
            raise ValueError(f"cardinality must be >= 1, got {self.cardinality}")

    def __repr__(self):
        return self.name or f"X{self.id}"


class ModeLabel(NamedTuple):
    variable: Variable
    occurrence: int


class LabelError(ValueError):
    """A label required by an operation is missing or ambiguous."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Matricization is too rank deficient to invert or project."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


LabelLike = Union[Variable, ModeLabel]


class LabeledTensor:
    """Immutable dense array with one variable label per mode.

    Values are stored row-major over the label order.
    """

    __slots__ = ("_variables", "_values", "_labels")

    def __init__(self, variables: Sequence[Variable], values):
        variables = tuple(variables)
        arr = np.array(values, dtype=float)
        if arr.ndim == 0 and variables:
            raise ValueError("scalar values given for a labeled tensor")
        shape = tuple(v.cardinality for v in variables)
        if arr.shape != shape:
            if arr.size == math.prod(shape):
                arr = arr.reshape(shape)
            else:
                raise ValueError(f"values of shape {arr.shape} do not match labels {variables} ({shape})")
        arr.flags.writeable = False
        seen = Counter()
        labels = []
        for v in variables:
            labels.append(ModeLabel(v, seen[v]))
            seen[v] += 1
        self._variables = variables
        self._values = arr
        self._labels = tuple(labels)

    @classmethod
    def scalar(cls, value) -> "LabeledTensor":
        return cls((), np.asarray(float(value)))

    @property
    def variables(self) -> tuple[Variable, ...]:
        return self._variables

    @property
    def labels(self) -> tuple[ModeLabel, ...]:
        return self._labels

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dims(self) -> tuple[int, ...]:
        return self._values.shape

    @property
    def order(self) -> int:
        return len(self._variables)

    def positions(self, var: Variable) -> list[int]:
        return [i for i, v in enumerate(self._variables) if v == var]

    def item(self) -> float:
        if self.order:
            raise ValueError("tensor is not a scalar")
        return float(self._values)

    def transpose(self, order: Sequence[int]) -> "LabeledTensor":
        return LabeledTensor([self._variables[i] for i in order], np.transpose(self._values, order))

    def __repr__(self):
        return f"LabeledTensor({list(self._variables)}, dims={self.dims})"


def _resolve(t: LabeledTensor, items: Iterable[LabelLike]) -> list[int]:
    """Map variables / mode labels to axis positions of ``t``."""
    out = []
    for item in items:
        if isinstance(item, ModeLabel):
            try:
                pos = t.labels.index(item)
            except ValueError:
                raise LabelError(f"label {item} not on tensor {t}") from None
        else:
            pos_list = t.positions(item)
            if not pos_list:
                raise LabelError(f"variable {item!r} not on tensor {t}")
            if len(pos_list) > 1:
                raise LabelError(f"variable {item!r} labels {len(pos_list)} modes; pass a ModeLabel")
            pos = pos_list[0]
        if pos in out:
            raise LabelError(f"label {item} given twice")
        out.append(pos)
    return out


def _as_counter(sigma) -> Counter:
    if isinstance(sigma, Mapping):
        return Counter(dict(sigma))
    if isinstance(sigma, Variable):
        return Counter([sigma])
    return Counter(sigma)


def multiply(a: LabeledTensor, b: LabeledTensor, sigma) -> LabeledTensor:
    """Contract ``a`` and ``b`` along the variables in ``sigma``.

    ``sigma`` is an iterable of variables (repeats mean multiplicity) or a
    mapping variable -> multiplicity.  For each variable the lowest
    occurrences are contracted first.  Surviving modes of ``a`` come first.
    """
    counts = _as_counter(sigma)
    ax_a, ax_b = [], []
    for var, m in counts.items():
        if m < 1:
            raise LabelError(f"multiplicity of {var!r} must be positive")
        pa, pb = a.positions(var), b.positions(var)
        if not pa or not pb:
            raise LabelError(f"variable {var!r} is absent from {'first' if not pa else 'second'} operand")
        if len(pa) < m or len(pb) < m:
            raise LabelError(f"multiplicity {m} of {var!r} exceeds available occurrences ({len(pa)}, {len(pb)})")
        ax_a += pa[:m]
        ax_b += pb[:m]
    for i, j in zip(ax_a, ax_b):
        if a.dims[i] != b.dims[j]:
            raise LabelError(f"dimension mismatch on {a.variables[i]!r}: {a.dims[i]} vs {b.dims[j]}")
    vals = np.tensordot(a.values, b.values, axes=(ax_a, ax_b))
    sa, sb = set(ax_a), set(ax_b)
    out_vars = [v for i, v in enumerate(a.variables) if i not in sa]
    out_vars += [v for j, v in enumerate(b.variables) if j not in sb]
    return LabeledTensor(out_vars, vals)


def identity(sigma: Sequence[Variable]) -> LabeledTensor:
    """Identity w.r.t. ``sigma``: labels ``sigma + sigma``, block matricization = I."""
    sigma = tuple(sigma)
    if not sigma:
        raise ValueError("identity needs at least one variable")
    n = math.prod(v.cardinality for v in sigma)
    return LabeledTensor(sigma + sigma, np.eye(n))


def matricize(t: LabeledTensor, rows: Sequence[LabelLike]) -> np.ndarray:
    """Rows indexed by ``rows`` (in the given order), columns by the remaining modes."""
    rp = _resolve(t, rows)
    cp = [i for i in range(t.order) if i not in rp]
    arr = np.transpose(t.values, rp + cp)
    nr = math.prod(t.dims[i] for i in rp)
    return arr.reshape(nr, -1)


def singular_values(t: LabeledTensor, rows: Sequence[LabelLike]) -> np.ndarray:
    return np.linalg.svd(matricize(t, rows), compute_uv=False)


def invert(f: LabeledTensor, omega: Sequence[LabelLike], rcond: float = DEFAULT_RCOND) -> LabeledTensor:
    """Inverse of ``f`` with respect to the modes ``omega``.

    The result carries ``omega`` labels followed by the remaining labels
    ``sigma`` and satisfies ``multiply(f, inv, omega) ~ identity(sigma)``.
    Uses the pseudo-inverse of the (sigma x omega) matricization; square
    well-conditioned inputs take a direct solve.
    """
    wp = _resolve(f, omega)
    sp = [i for i in range(f.order) if i not in wp]
    if not sp or not wp:
        raise LabelError("omega must be a proper, non-empty subset of the labels")
    mat = np.transpose(f.values, sp + wp).reshape(math.prod(f.dims[i] for i in sp), -1)
    nrow, ncol = mat.shape
    s = np.linalg.svd(mat, compute_uv=False)
    if nrow > ncol or s[nrow - 1] <= rcond * s[0]:
        raise RankDeficiencyError(
            f"matricization {nrow}x{ncol} has insufficient row rank (singular values {s})",
            singular_values=s,
        )
    if nrow == ncol:
        inv = np.linalg.solve(mat, np.eye(nrow))
    else:
        inv = np.linalg.pinv(mat, rcond=rcond)
    out_vars = [f.variables[i] for i in wp] + [f.variables[i] for i in sp]
    return LabeledTensor(out_vars, inv)


def diag_embed(base: LabeledTensor, multiplicities: Mapping[Variable, int]) -> LabeledTensor:
    """Repeat each variable of ``base`` d times on the diagonal.

    Copies of one variable sit next to each other; variables absent from
    ``multiplicities`` keep a single mode.
    """
    for var, d in multiplicities.items():
        n = len(base.positions(var))
        if n == 0:
            raise LabelError(f"variable {var!r} not found in base tensor")
        if n > 1:
            raise LabelError(f"variable {var!r} labels base more than once")
        if d < 1:
            raise ValueError(f"multiplicity of {var!r} must be >= 1, got {d}")
    reps = [multiplicities.get(v, 1) for v in base.variables]
    out_vars = [v for v, d in zip(base.variables, reps) for _ in range(d)]
    out = np.zeros(tuple(v.cardinality for v in out_vars))
    grid = np.indices(base.dims).reshape(base.order, -1)
    idx = tuple(grid[k] for k, d in enumerate(reps) for _ in range(d))
    out[idx] = base.values.reshape(-1)
    return LabeledTensor(out_vars, out)


def fix_index(t: LabeledTensor, assignment: Mapping[Variable, int]) -> LabeledTensor:
    """Slice every occurrence of each assigned variable at the given state."""
    idx: list = [slice(None)] * t.order
    for var, state in assignment.items():
        pos = t.positions(var)
        if not pos:
            raise LabelError(f"variable {var!r} not on tensor {t}")
        if not 0 <= state < var.cardinality:
            raise IndexError(f"state {state} out of range for {var!r} (cardinality {var.cardinality})")
        for p in pos:
            idx[p] = int(state)
    keep = [v for v, i in zip(t.variables, idx) if isinstance(i, slice)]
    return LabeledTensor(keep, t.values[tuple(idx)])


def equivalent(a: LabeledTensor, b: LabeledTensor, tol: float = 1e-12) -> bool:
    """True iff ``b`` is a label-aligned mode permutation of ``a`` within ``tol``.

    Modes are put in canonical (variable, occurrence) order; duplicated modes
    of one variable may additionally permute among themselves.
    """
    if Counter(a.variables) != Counter(b.variables):
        return False
    key = lambda t: sorted(range(t.order), key=lambda i: (t.variables[i], t.labels[i].occurrence))
    va = np.transpose(a.values, key(a))
    order_b = key(b)
    vb = np.transpose(b.values, order_b)
    if va.shape != vb.shape:
        return False
    groups = []
    canon = [b.variables[i] for i in order_b]
    for _, grp in itertools.groupby(range(len(canon)), key=lambda i: canon[i]):
        grp = list(grp)
        if len(grp) > 1:
            groups.append(grp)
    base = list(range(len(canon)))
    for perms in itertools.product(*(itertools.permutations(g) for g in groups)):
        axes = base[:]
        for g, p in zip(groups, perms):
            for slot, src in zip(g, p):
                axes[slot] = src
        if np.allclose(va, np.transpose(vb, axes), rtol=0.0, atol=tol):
            return True
    return False


def svd_projector(
    t: LabeledTensor,
    row_labels: Sequence[LabelLike],
    rank: int,
    projected: Variable | None = None,
) -> LabeledTensor:
    """Top-``rank`` left singular vectors of the ``row_labels`` matricization.

    Returned labels are the row variables plus one projected mode
    (``projected``, a synthetic variable of cardinality ``rank``).
    """
    mat = matricize(t, row_labels)
    if rank < 1 or rank > min(mat.shape):
        raise RankDeficiencyError(f"rank {rank} exceeds matricization shape {mat.shape}")
    u, _, _ = np.linalg.svd(mat, full_matrices=False)
    if projected is None:
        projected = Variable(-1, rank, "proj")
    elif projected.cardinality != rank:
        raise ValueError("projected variable cardinality must equal rank")
    rows = _resolve(t, row_labels)
    row_vars = [t.variables[i] for i in rows]
    return LabeledTensor(row_vars + [projected], u[:, :rank])
