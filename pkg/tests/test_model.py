import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_jt.experiments import figure2_example, gen_structure, random_structure
from spectral_jt.model import (
    LatentJTModel,
    StateSpaceTooLarge,
    _d_counts,
    brute_force_joint,
    embed_clique,
    exact_marginal,
    marginal_table,
    random_model,
    sample,
)
from spectral_jt.structure import RootedJunctionTree
from spectral_jt.tensor import LabeledTensor, Variable

from helpers import all_assignments


def test_random_model_deterministic_and_normalized():
    _, tree = gen_structure("hmm2", {"length": 4})
    m1, m2 = random_model(tree, 5), random_model(tree, 5)
    for p, q in zip(m1.potentials, m2.potentials):
        np.testing.assert_array_equal(p.values, q.values)
    for i in range(tree.n_nodes):
        cols = m1.cpt(i).reshape(-1, int(np.prod([v.cardinality for v in tree.separators[i]] or [1])))
        if tree.remainders[i]:
            np.testing.assert_allclose(cols.sum(axis=0), 1.0, atol=1e-12)


def test_unnormalized_potential_rejected():
    h = Variable(0, 2, "H")
    a = Variable(1, 2, "A", True)
    tree = RootedJunctionTree.from_edges((h, a), [(h,), (h, a)], [(0, 1)], 0)
    with pytest.raises(ValueError):
        LatentJTModel(tree, (LabeledTensor([h], [0.5, 0.6]), LabeledTensor([a, h], [[0.5, 0.5], [0.5, 0.5]])))


def test_brute_force_sums_to_one():
    _, tree = gen_structure("hmm2", {"length": 4})
    m = random_model(tree, 1)
    total = sum(brute_force_joint(m, a) for a in all_assignments(tree.observed))
    assert abs(total - 1) < 1e-12


def test_fully_observed_single_clique_is_cpt_entry():
    a, b = Variable(0, 2, "A", True), Variable(1, 3, "B", True)
    tree = RootedJunctionTree.from_edges((a, b), [(a, b)], [], 0)
    vals = np.array([[0.1, 0.2, 0.05], [0.3, 0.15, 0.2]])
    m = LatentJTModel(tree, (LabeledTensor([a, b], vals),))
    assert brute_force_joint(m, [1, 2]) == pytest.approx(0.2, abs=1e-15)
    assert exact_marginal(m, {a: 0, b: 1}) == pytest.approx(0.2, abs=1e-15)


def test_no_hidden_model_is_product_of_cpt_entries():
    a, b, c = (Variable(i, 2, n, True) for i, n in enumerate("ABC"))
    tree = RootedJunctionTree.from_edges((a, b, c), [(a, b), (b, c)], [(0, 1)], 0)
    m = random_model(tree, 2)
    pab, pcb = m.cpt(0), m.cpt(1)  # (A,B) and (C|B)
    for x, y, z in itertools.product(range(2), repeat=3):
        want = pab[x, y] * pcb[z, y]
        assert exact_marginal(m, [x, y, z]) == pytest.approx(want, abs=1e-15)


def test_brute_force_guard():
    h = [Variable(i, 4, f"H{i}") for i in range(12)]
    o = Variable(12, 2, "O", True)
    cliques = [(h[i], h[i + 1]) for i in range(11)] + [(h[11], o)]
    tree = RootedJunctionTree.from_edges((*h, o), cliques, [(i, i + 1) for i in range(11)], 0)
    m = random_model(tree, 0)
    with pytest.raises(StateSpaceTooLarge):
        brute_force_joint(m, [0])


def test_sample_deterministic_model_is_constant():
    h = Variable(0, 2, "H")
    a = Variable(1, 3, "A", True)
    tree = RootedJunctionTree.from_edges((h, a), [(h,), (h, a)], [(0, 1)], 0)
    m = LatentJTModel(tree, (LabeledTensor([h], [0.0, 1.0]), LabeledTensor([a, h], [[1, 0], [0, 0], [0, 1.0]])))
    X = sample(m, 500, 0)
    assert X.shape == (500, 1) and set(X[:, 0]) == {2}


def test_sample_frequencies_match_brute_force():
    # 4-variable model, 10^6 draws, every cell within 3 standard errors
    h = Variable(0, 2, "H")
    a, b, c = (Variable(i + 1, 2, n, True) for i, n in enumerate("ABC"))
    tree = RootedJunctionTree.from_edges((h, a, b, c), [(h, a), (h, b), (h, c)], [(0, 1), (0, 2)], 0)
    m = random_model(tree, 9)
    n = 10**6
    X = sample(m, n, 1)
    assert X.shape == (n, 3)
    freq = Counter(map(tuple, X.tolist()))
    for cell in all_assignments(tree.observed):
        p = brute_force_joint(m, cell)
        se = np.sqrt(p * (1 - p) / n)
        assert abs(freq.get(cell, 0) / n - p) <= 3 * se + 1e-12


def test_embed_figure2_internal_node():
    _, tree = figure2_example()
    t = embed_clique(random_model(tree, 0), 1)
    assert t.order == 6
    assert sorted(v.name for v in t.variables) == ["B", "B", "C", "C", "D", "E"]


def test_embed_leaf_is_cpt():
    _, tree = figure2_example()
    m = random_model(tree, 0)
    leaf = 2
    np.testing.assert_array_equal(embed_clique(m, leaf).values, m.potentials[leaf].values)


def test_d_counts_example():
    A, B = Variable(0, 2, "A"), Variable(1, 2, "B")
    o1, o2, o3 = (Variable(2 + k, 2, f"O{k}", True) for k in range(3))
    # node 1 = {A,B}: separator {A} to parent, children with separators {A,B} and {B}
    cliques = [(A, o1), (A, B), (A, B, o2), (B, o3)]
    tree = RootedJunctionTree.from_edges((A, B, o1, o2, o3), cliques, [(0, 1), (1, 2), (1, 3)], 0)
    d = _d_counts(tree, 1)
    assert d[A] == 2 and d[B] == 2


@settings(max_examples=40)
@given(st.integers(0, 10**6))
def test_exact_matches_brute_force(seed):
    _, tree = random_structure(seed)
    m = random_model(tree, seed)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        a = [int(rng.integers(v.cardinality)) for v in tree.observed]
        assert abs(exact_marginal(m, a) - brute_force_joint(m, a)) <= 1e-10


def _rerooted(model, tree):
    """Same joint on another rooting: P(R|S) from exact clique marginals."""
    pots = []
    for i in range(tree.n_nodes):
        rem, sep = tree.remainders[i], tree.separators[i]
        joint = marginal_table(model, list(rem + sep)).values
        axes = tuple(range(len(rem)))
        pots.append(LabeledTensor(rem + sep, joint / joint.sum(axis=axes, keepdims=True)))
    return LatentJTModel(tree, tuple(pots))


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_root_invariance(seed):
    _, tree = random_structure(seed)
    m = random_model(tree, seed)
    a = [int(x) for x in np.random.default_rng(seed).integers(0, 2, len(tree.observed))]
    ref = exact_marginal(m, a)
    for r in range(tree.n_nodes):
        assert abs(exact_marginal(_rerooted(m, tree.with_root(r)), a) - ref) <= 1e-10


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_embedded_order_counts_separator_incidences(seed):
    _, tree = random_structure(seed)
    m = random_model(tree, seed)
    for i in range(tree.n_nodes):
        d = _d_counts(tree, i)
        t = embed_clique(m, i)
        free_obs = sum(1 for v in tree.cliques[i] if v.observed and d[v] == 0)
        assert t.order == sum(d.values()) + free_obs
        assert Counter(t.variables) == d + Counter(v for v in tree.cliques[i] if v.observed and d[v] == 0)


def test_normalization_over_all_assignments():
    _, tree = gen_structure("hmm2", {"length": 4})
    m = random_model(tree, 4)
    total = sum(exact_marginal(m, a) for a in all_assignments(tree.observed))
    assert abs(total - 1) < 1e-8


def test_marginal_table_matches_enumeration():
    _, tree = gen_structure("hmm2", {"length": 4})
    m = random_model(tree, 8)
    obs = tree.observed
    tab = marginal_table(m, [obs[2], obs[0]])
    for x, y in itertools.product(range(4), repeat=2):
        want = sum(
            brute_force_joint(m, a) for a in all_assignments(obs) if a[2] == x and a[0] == y
        )
        assert tab.values[x, y] == pytest.approx(want, abs=1e-12)


def test_incomplete_assignment_rejected():
    _, tree = gen_structure("hmm2", {"length": 4})
    m = random_model(tree, 0)
    with pytest.raises(ValueError):
        exact_marginal(m, [0, 1])


def test_batched_likelihood_matches_exact():
    _, tree = gen_structure("hmm2", {"length": 5})
    m = random_model(tree, 3)
    X = sample(m, 30, 4)
    got = np.exp(m.batched.log_likelihood(X))
    want = [exact_marginal(m, x) for x in X]
    np.testing.assert_allclose(got, want, rtol=1e-10)
