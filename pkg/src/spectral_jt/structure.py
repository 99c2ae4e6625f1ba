"""Junction tree construction, rooting and degree normalization."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import networkx as nx

from .tensor import Variable

__all__ = [
    "GraphicalModelSpec",
    "JunctionTree",
    "RootedJunctionTree",
    "Violation",
    "StructureError",
    "moral_graph",
    "min_fill_cliques",
    "build_junction_tree",
    "junction_tree_from_cliques",
    "root_and_normalize",
    "LEAF_POLICIES",
    "validate",
]


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class GraphicalModelSpec:
    """Variables plus either undirected ``edges`` or directed ``parents``."""

    variables: tuple[Variable, ...]
    edges: tuple[tuple[Variable, Variable], ...] = ()
    parents: Mapping[Variable, tuple[Variable, ...]] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.variables)
        if len(known) != len(self.variables) or len({v.id for v in known}) != len(known):
            raise StructureError("variable ids must be unique")
        for a, b in self.edges:
            if a not in known or b not in known:
                raise StructureError(f"edge ({a!r}, {b!r}) references an undeclared variable")
            if a == b:
                raise StructureError(f"self-loop on {a!r}")
        for child, pas in self.parents.items():
            for p in (child, *pas):
                if p not in known:
                    raise StructureError(f"parent list references undeclared {p!r}")
            if child in pas:
                raise StructureError(f"self-loop on {child!r}")

    @property
    def observed(self) -> tuple[Variable, ...]:
        return tuple(v for v in self.variables if v.observed)


def moral_graph(spec: GraphicalModelSpec) -> dict[Variable, set[Variable]]:
    adj: dict[Variable, set[Variable]] = {v: set() for v in spec.variables}

    def link(a, b):
        adj[a].add(b)
        adj[b].add(a)

    for a, b in spec.edges:
        link(a, b)
    for child, pas in spec.parents.items():
        for p in pas:
            link(child, p)
        for p, q in itertools.combinations(pas, 2):
            link(p, q)
    return adj


def _connected(adj: Mapping[Variable, set[Variable]]) -> bool:
    if not adj:
        return True
    start = min(adj)
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == len(adj)


def min_fill_cliques(adj: Mapping[Variable, set[Variable]]) -> list[frozenset[Variable]]:
    """Maximal cliques of the min-fill triangulation (ties: lowest variable id)."""
    work = {v: set(n) for v, n in adj.items()}
    candidates: list[frozenset[Variable]] = []
    while work:
        def fill(v):
            nbs = list(work[v])
            return sum(1 for a, b in itertools.combinations(nbs, 2) if b not in work[a])

        v = min(work, key=lambda x: (fill(x), x.id))
        nbs = work.pop(v)
        candidates.append(frozenset(nbs | {v}))
        for a, b in itertools.combinations(nbs, 2):
            work[a].add(b)
            work[b].add(a)
        for n in nbs:
            work[n].discard(v)
    maximal = [c for c in candidates if not any(c < d for d in candidates)]
    unique = sorted(set(maximal), key=lambda c: sorted(x.id for x in c))
    return unique


@dataclass
class JunctionTree:
    """Unrooted tree of cliques; ``edges`` index into ``cliques``."""

    variables: tuple[Variable, ...]
    cliques: list[frozenset[Variable]]
    edges: list[tuple[int, int]]

    def neighbors(self) -> dict[int, list[int]]:
        nb: dict[int, list[int]] = {i: [] for i in range(len(self.cliques))}
        for a, b in self.edges:
            nb[a].append(b)
            nb[b].append(a)
        return {k: sorted(v) for k, v in nb.items()}


def junction_tree_from_cliques(
    variables: Sequence[Variable],
    cliques: Sequence[Sequence[Variable]],
    edges: Sequence[tuple[int, int]] | None = None,
) -> JunctionTree:
    """Connect cliques by a maximum-weight spanning tree unless ``edges`` is given."""
    cl = [frozenset(c) for c in cliques]
    if edges is None:
        g = nx.Graph()
        g.add_nodes_from(range(len(cl)))
        for i, j in itertools.combinations(range(len(cl)), 2):
            w = len(cl[i] & cl[j])
            if w:
                g.add_edge(i, j, weight=w)
        if not nx.is_connected(g):
            raise StructureError("cliques do not form a connected graph")
        mst = nx.maximum_spanning_tree(g, algorithm="kruskal")
        edges = sorted(tuple(sorted(e)) for e in mst.edges())
    return JunctionTree(tuple(variables), cl, [tuple(e) for e in edges])


def build_junction_tree(spec: GraphicalModelSpec) -> JunctionTree:
    """Moralize, triangulate by min-fill, and join maximal cliques."""
    adj = moral_graph(spec)
    if not _connected(adj):
        raise StructureError("model graph is disconnected")
    return junction_tree_from_cliques(spec.variables, min_fill_cliques(adj))


@dataclass(frozen=True)
class RootedJunctionTree:
    """Junction tree oriented away from ``root``.

    Children are listed in increasing node index.  Construction does not
    validate; use :func:`validate`.
    """

    variables: tuple[Variable, ...]
    cliques: tuple[tuple[Variable, ...], ...]
    root: int
    parent: tuple[int | None, ...]
    children: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        order = [self.root]
        for node in order:
            order.extend(self.children[node])
        if len(order) != len(self.cliques):
            raise StructureError("parent/children links do not span all cliques")
        object.__setattr__(self, "order", tuple(order))
        seps, rems = [], []
        for i, c in enumerate(self.cliques):
            p = self.parent[i]
            s = set(c) & set(self.cliques[p]) if p is not None else set()
            seps.append(tuple(sorted(s)))
            rems.append(tuple(sorted(set(c) - s)))
        object.__setattr__(self, "separators", tuple(seps))
        object.__setattr__(self, "remainders", tuple(rems))

    @classmethod
    def from_edges(cls, variables, cliques, edges, root: int) -> "RootedJunctionTree":
        n = len(cliques)
        if not 0 <= root < n:
            raise StructureError(f"root {root} is not a clique index")
        nb: dict[int, list[int]] = {i: [] for i in range(n)}
        for a, b in edges:
            nb[a].append(b)
            nb[b].append(a)
        parent: list[int | None] = [None] * n
        children: list[list[int]] = [[] for _ in range(n)]
        seen = {root}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for w in sorted(nb[u]):
                if w not in seen:
                    seen.add(w)
                    parent[w] = u
                    children[u].append(w)
                    queue.append(w)
        if len(seen) != n:
            raise StructureError("tree edges do not connect all cliques")
        return cls(
            tuple(variables),
            tuple(tuple(sorted(c)) for c in cliques),
            root,
            tuple(parent),
            tuple(tuple(c) for c in children),
        )

    @property
    def n_nodes(self) -> int:
        return len(self.cliques)

    @property
    def observed(self) -> tuple[Variable, ...]:
        return tuple(sorted(v for v in self.variables if v.observed))

    @property
    def hidden(self) -> tuple[Variable, ...]:
        return tuple(sorted(v for v in self.variables if not v.observed))

    @property
    def treewidth(self) -> int:
        return max(len(c) for c in self.cliques) - 1

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(p, i) for i, p in enumerate(self.parent) if p is not None]

    def degree(self, node: int) -> int:
        return len(self.children[node]) + (self.parent[node] is not None)

    def is_leaf(self, node: int) -> bool:
        return node != self.root and not self.children[node]

    def owner(self) -> dict[Variable, int]:
        """Node whose remainder contains each variable (the topmost clique holding it)."""
        out = {}
        for i, rem in enumerate(self.remainders):
            for v in rem:
                out.setdefault(v, i)
        return out

    def subtree(self, node: int) -> list[int]:
        out = [node]
        for u in out:
            out.extend(self.children[u])
        return out

    def with_root(self, root: int) -> "RootedJunctionTree":
        return RootedJunctionTree.from_edges(self.variables, self.cliques, self.edges, root)


@dataclass(frozen=True)
class Violation:
    kind: str
    node: int | None
    message: str


def _default_root(cliques, nb) -> int:
    def key(i):
        internal = len(nb[i]) >= 2
        n_obs = sum(v.observed for v in cliques[i])
        return (internal, len(nb[i]) == 3, n_obs, -i)

    return max(range(len(cliques)), key=key)


def _outer_leaves(cliques, nb) -> None:
    """Reattach every leaf to the valid host with the fewest non-leaf neighbors."""
    n = len(cliques)
    leaves = [i for i in range(n) if len(nb[i]) == 1]
    core = [i for i in range(n) if len(nb[i]) >= 2]
    if not core or not leaves:
        return
    core_set = set(core)
    core_deg = {c: sum(w in core_set for w in nb[c]) for c in core}
    for leaf in leaves:
        old = nb[leaf][0]
        shared = cliques[leaf] & cliques[old]
        c = min((c for c in core if shared <= cliques[c]), key=lambda h: (core_deg[h], h))
        if c != old:
            nb[old].remove(leaf)
            nb[leaf] = [c]
            nb[c] = sorted(nb[c] + [leaf])


def _rebalance_leaves(cliques, nb) -> None:
    """Reattach leaves so that non-leaf cliques get as close to three neighbors as possible.

    A leaf may hang from any non-leaf clique holding the variables it shares
    with the rest of the tree.  A max-flow assignment fills each host up to
    ``3 - (non-leaf neighbors)``; leftovers go to the least-loaded valid host.
    """
    n = len(cliques)
    leaves = [i for i in range(n) if len(nb[i]) == 1]
    core = [i for i in range(n) if len(nb[i]) >= 2]
    if not core or not leaves:
        return
    core_set = set(core)
    core_deg = {c: sum(w in core_set for w in nb[c]) for c in core}
    hosts = {}
    for leaf in leaves:
        shared = cliques[leaf] & cliques[nb[leaf][0]]
        hosts[leaf] = [c for c in core if shared <= cliques[c]]
    g = nx.DiGraph()
    for leaf in leaves:
        g.add_edge("s", ("l", leaf), capacity=1)
        for c in hosts[leaf]:
            g.add_edge(("l", leaf), ("c", c), capacity=1)
    for c in core:
        g.add_edge(("c", c), "t", capacity=max(0, 3 - core_deg[c]))
    _, flow = nx.maximum_flow(g, "s", "t")
    assign = {}
    for leaf in leaves:
        for c in hosts[leaf]:
            if flow[("l", leaf)].get(("c", c), 0) > 0.5:
                assign[leaf] = c
    load = {c: core_deg[c] + sum(1 for h in assign.values() if h == c) for c in core}
    for leaf in leaves:
        if leaf not in assign:
            c = min(hosts[leaf], key=lambda h: (load[h], h))
            assign[leaf] = c
            load[c] += 1
    for leaf, c in assign.items():
        old = nb[leaf][0]
        if old != c:
            nb[old].remove(leaf)
            nb[leaf] = [c]
            nb[c] = sorted(nb[c] + [leaf])


LEAF_POLICIES = ("balance", "outer")


def root_and_normalize(
    jt: JunctionTree, root: int | None = None, normalize: bool = True, leaves: str = "balance"
) -> RootedJunctionTree:
    """Root ``jt`` and bring internal nodes toward exactly three neighbors.

    Normalization first redistributes leaves among the non-leaf cliques
    that can host them: ``leaves="balance"`` aims at three neighbors per
    internal node, ``leaves="outer"`` pushes leaves toward the periphery
    (useful when separators need several observations on each side).
    Remaining nodes with too many children get an extra node holding the
    union of two children's separators; that node owns no variables, so the
    represented distribution is unchanged.
    """
    cliques = [frozenset(c) for c in jt.cliques]
    n = len(cliques)
    if root is not None and not 0 <= root < n:
        raise StructureError(f"root {root} is not a clique index")
    nb = {i: list(v) for i, v in jt.neighbors().items()}
    if leaves not in LEAF_POLICIES:
        raise StructureError(f"unknown leaf policy {leaves!r}")
    if normalize:
        (_rebalance_leaves if leaves == "balance" else _outer_leaves)(cliques, nb)
    if root is None:
        root = _default_root(cliques, nb)
    edges = sorted({tuple(sorted((a, b))) for a in nb for b in nb[a]})
    tree = RootedJunctionTree.from_edges(jt.variables, cliques, edges, root)
    if not normalize:
        return tree

    parent = list(tree.parent)
    children = [list(c) for c in tree.children]
    cl = [frozenset(c) for c in tree.cliques]
    queue = deque([root])
    while queue:
        u = queue.popleft()
        limit = 3 if u == root else 2
        while len(children[u]) > limit:
            kids = children[u]
            sep = {k: cl[k] & cl[u] for k in kids}
            a, b = min(
                itertools.combinations(kids, 2),
                key=lambda p: (len(sep[p[0]] | sep[p[1]]), p),
            )
            w = len(cl)
            cl.append(sep[a] | sep[b])
            parent.append(u)
            children.append([a, b])
            parent[a] = parent[b] = w
            children[u] = sorted([k for k in kids if k not in (a, b)] + [w])
        queue.extend(children[u])
    return RootedJunctionTree(
        jt.variables,
        tuple(tuple(sorted(c)) for c in cl),
        root,
        tuple(parent),
        tuple(tuple(c) for c in children),
    )


def validate(tree: RootedJunctionTree) -> list[Violation]:
    """Structural problems that break the factorization or the learner."""
    out: list[Violation] = []
    for v in tree.variables:
        holders = {i for i, c in enumerate(tree.cliques) if v in c}
        if not holders:
            out.append(Violation("coverage", None, f"{v!r} is in no clique"))
            continue
        # connected iff exactly one holder has its parent outside the holder set
        tops = [i for i in holders if tree.parent[i] not in holders]
        if len(tops) > 1:
            out.append(Violation("running_intersection", None, f"cliques holding {v!r} are not connected: {sorted(holders)}"))
    for i in range(tree.n_nodes):
        deg = tree.degree(i)
        if deg >= 2 or i == tree.root:
            if deg != 3:
                out.append(Violation("degree", i, f"internal node {i} has {deg} neighbors"))
        if tree.is_leaf(i):
            hidden = [v for v in tree.remainders[i] if not v.observed]
            if hidden:
                out.append(Violation("leaf_hidden", i, f"leaf {i} remainder has hidden {hidden}"))
        if tree.parent[i] is not None and not tree.separators[i]:
            out.append(Violation("empty_separator", i, f"edge {tree.parent[i]}-{i} has an empty separator"))
    return out
