"""File formats: model spec JSON, sample CSV, learned-parameter JSON.

Model spec document (UTF-8 JSON)::

    {
      "variables": [{"name": "H1", "cardinality": 2, "observed": false}, ...],
      "parents":   {"H2": ["H1"], ...},          # directed model, or
      "edges":     [["H1", "O1"], ...],          # undirected model, or
      "cliques":   [["H1", "H2"], ...],          # explicit junction tree
      "tree_edges": [[0, 1], ...],               # optional, with "cliques"
      "root": 0,                                 # optional clique index
      "potentials": [                            # optional, one per clique
        {"clique": 0, "remainder": ["H2"], "separator": ["H1"], "values": [...]}
      ]
    }

Variable ids follow declaration order.  Potential values are row-major over
``remainder + separator``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import LatentJTModel
from .spectral import ObservableParams, ObservedSetPlan, projected_variable
from .structure import (
    GraphicalModelSpec,
    RootedJunctionTree,
    build_junction_tree,
    junction_tree_from_cliques,
    root_and_normalize,
)
from .tensor import LabeledTensor, Variable

__all__ = [
    "ModelDocument",
    "read_model",
    "write_model",
    "model_to_dict",
    "model_from_dict",
    "read_samples",
    "write_samples",
    "params_to_dict",
    "params_from_dict",
    "read_params",
    "write_params",
]


@dataclass
class ModelDocument:
    """Everything a model spec file can hold."""

    variables: tuple[Variable, ...]
    spec: GraphicalModelSpec | None
    tree: RootedJunctionTree
    model: LatentJTModel | None = None


def _variables(doc) -> tuple[Variable, ...]:
    out = []
    for i, v in enumerate(doc["variables"]):
        out.append(Variable(i, int(v["cardinality"]), str(v["name"]), bool(v.get("observed", False))))
    names = [v.name for v in out]
    if len(set(names)) != len(names):
        raise ValueError("variable names must be unique")
    return tuple(out)


def model_from_dict(doc: dict, normalize: bool | None = None) -> ModelDocument:
    """Parse a model document.

    A document with explicit ``tree_edges`` is taken as an already rooted
    and normalized tree unless ``normalize`` is True.
    """
    variables = _variables(doc)
    by_name = {v.name: v for v in variables}
    spec = None
    if "parents" in doc or "edges" in doc:
        spec = GraphicalModelSpec(
            variables,
            edges=tuple((by_name[a], by_name[b]) for a, b in doc.get("edges", [])),
            parents={by_name[c]: tuple(by_name[p] for p in ps) for c, ps in doc.get("parents", {}).items()},
        )
    if "cliques" in doc:
        cliques = [[by_name[n] for n in c] for c in doc["cliques"]]
        edges = [tuple(e) for e in doc["tree_edges"]] if "tree_edges" in doc else None
        jt = junction_tree_from_cliques(variables, cliques, edges)
    elif spec is not None:
        jt = build_junction_tree(spec)
    else:
        raise ValueError("model document needs 'cliques', 'edges' or 'parents'")
    if normalize is None:
        normalize = "tree_edges" not in doc
    tree = root_and_normalize(jt, doc.get("root"), normalize=normalize)
    model = None
    if "potentials" in doc:
        pots: list[LabeledTensor | None] = [None] * tree.n_nodes
        for p in doc["potentials"]:
            i = int(p["clique"])
            rem = tuple(by_name[n] for n in p["remainder"])
            sep = tuple(by_name[n] for n in p["separator"])
            if rem != tree.remainders[i] or sep != tree.separators[i]:
                raise ValueError(f"potential for clique {i} does not match the tree's remainder/separator")
            pots[i] = LabeledTensor(rem + sep, np.asarray(p["values"], dtype=float))
        if any(p is None for p in pots):
            raise ValueError("potentials missing for some cliques")
        model = LatentJTModel(tree, tuple(pots))
    return ModelDocument(variables, spec, tree, model)


def model_to_dict(tree: RootedJunctionTree, model: LatentJTModel | None = None, spec: GraphicalModelSpec | None = None) -> dict:
    doc: dict = {
        "variables": [
            {"name": v.name, "cardinality": v.cardinality, "observed": v.observed}
            for v in sorted(tree.variables, key=lambda v: v.id)
        ]
    }
    if spec is not None:
        if spec.parents:
            doc["parents"] = {c.name: [p.name for p in ps] for c, ps in spec.parents.items()}
        if spec.edges:
            doc["edges"] = [[a.name, b.name] for a, b in spec.edges]
    doc["cliques"] = [[v.name for v in c] for c in tree.cliques]
    doc["tree_edges"] = [list(e) for e in sorted(tuple(sorted(e)) for e in tree.edges)]
    doc["root"] = tree.root
    if model is not None:
        doc["potentials"] = [
            {
                "clique": i,
                "remainder": [v.name for v in tree.remainders[i]],
                "separator": [v.name for v in tree.separators[i]],
                "values": model.potentials[i].values.reshape(-1).tolist(),
            }
            for i in range(tree.n_nodes)
        ]
    return doc


def read_model(path, normalize: bool | None = None) -> ModelDocument:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh), normalize=normalize)


def write_model(path, tree, model=None, spec=None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(tree, model, spec), indent=1) + "\n", encoding="utf-8")


def write_samples(path, X: np.ndarray, variables: Sequence[Variable]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([v.name for v in variables])
        w.writerows(np.asarray(X, dtype=int).tolist())


def read_samples(path, variables: Sequence[Variable] | None = None) -> tuple[list[str], np.ndarray]:
    """Header names and an int array; columns reordered to ``variables`` if given."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    X = np.array([[int(x) for x in r] for r in rows[1:] if r], dtype=np.int64).reshape(-1, len(header))
    if variables is not None:
        missing = [v.name for v in variables if v.name not in header]
        if missing:
            raise ValueError(f"sample file lacks columns {missing}")
        X = X[:, [header.index(v.name) for v in variables]]
        header = [v.name for v in variables]
        for k, v in enumerate(variables):
            if X.size and (X[:, k].min() < 0 or X[:, k].max() >= v.cardinality):
                raise ValueError(f"column {v.name} has states outside 0..{v.cardinality - 1}")
    return header, X


def _tensor_dict(t: LabeledTensor) -> dict:
    return {"labels": [v.name for v in t.variables], "dims": list(t.dims), "values": t.values.reshape(-1).tolist()}


def params_to_dict(params: ObservableParams) -> dict:
    plan, tree = params.plan, params.tree
    names = lambda vs: [v.name for v in vs]
    return {
        "format": "spectral-jt-params/1",
        "model": model_to_dict(tree),
        "plan": {
            "anchors": {str(k): names(v) for k, v in sorted(plan.anchors.items())},
            "minus": {str(k): [names(s) for s in v] for k, v in sorted(plan.minus.items())},
            "free": {str(k): names(v) for k, v in sorted(plan.free.items())},
        },
        "tensors": [dict(node=i, **_tensor_dict(t)) for i, t in enumerate(params.tensors)],
        "projectors": [dict(node=i, **_tensor_dict(u)) for i, u in sorted(params.projectors.items())],
    }


def params_from_dict(doc: dict) -> ObservableParams:
    if doc.get("format") != "spectral-jt-params/1":
        raise ValueError("not a spectral-jt parameter document")
    tree = model_from_dict(doc["model"]).tree
    by_name = {v.name: v for v in tree.variables}
    projected = {}
    for u in doc["projectors"]:
        i = int(u["node"])
        projected[i] = projected_variable(i, int(u["dims"][-1]))
        by_name[projected[i].name] = projected[i]
    get = lambda ns: tuple(by_name[n] for n in ns)
    plan = ObservedSetPlan(
        tree,
        {int(k): get(v) for k, v in doc["plan"]["anchors"].items()},
        {int(k): tuple(get(s) for s in v) for k, v in doc["plan"]["minus"].items()},
        {int(k): get(v) for k, v in doc["plan"]["free"].items()},
    )

    def tensor(d):
        return LabeledTensor(get(d["labels"]), np.asarray(d["values"], dtype=float).reshape(d["dims"]))

    tensors = [None] * tree.n_nodes
    for d in doc["tensors"]:
        tensors[int(d["node"])] = tensor(d)
    projectors = {int(d["node"]): tensor(d) for d in doc["projectors"]}
    return ObservableParams(plan, tuple(tensors), projectors, projected)


def write_params(path, params: ObservableParams) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)) + "\n", encoding="utf-8")


def read_params(path) -> ObservableParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
