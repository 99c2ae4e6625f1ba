import itertools

import numpy as np
import pytest

from spectral_jt.em import EMConfig, em_train, m_step, online_em_train, relative_change, stepsize
from spectral_jt.experiments import gen_structure
from spectral_jt.model import random_model, sample
from spectral_jt.structure import RootedJunctionTree
from spectral_jt.tensor import Variable


@pytest.fixture(scope="module")
def hmm_data():
    _, tree = gen_structure("hmm2", {"length": 4})
    truth = random_model(tree, 21)
    return tree, truth, sample(truth, 2000, 22)


def test_config_validation():
    with pytest.raises(ValueError):
        EMConfig(tol=0)
    with pytest.raises(ValueError):
        EMConfig(restarts=0)


def test_relative_change_formula():
    assert relative_change(-100.0, -99.0) == pytest.approx(1 / 99.5)
    assert relative_change(0.0, 0.0) == 0.0


def test_stepsize_schedule():
    assert stepsize(1.0, 0) == pytest.approx(0.5)
    assert stepsize(0.5, 2) == pytest.approx(0.5)


def test_rate_one_is_running_average():
    # with eta_k = 1/(k+2), s_k = (1-eta) s_{k-1} + eta x_k averages the prior term and all updates
    s, xs = 1.0, [3.0, 5.0, 7.0]
    for k, x in enumerate(xs):
        eta = stepsize(1.0, k)
        s = (1 - eta) * s + eta * x
    assert s == pytest.approx(np.mean([1.0, *xs]))


def test_batch_em_monotone_every_restart(hmm_data):
    tree, _, X = hmm_data
    res = em_train(tree, X, EMConfig(restarts=3, max_iter=60, tol=1e-9))
    assert len(res.runs) == 3
    for run in res.runs:
        assert np.min(np.diff(run["trace"])) >= -1e-9
    assert res.trace[-1] == max(r["log_likelihood"] for r in res.runs)


def test_batch_em_deterministic(hmm_data):
    tree, _, X = hmm_data
    cfg = EMConfig(restarts=2, max_iter=10)
    a, b = em_train(tree, X, cfg), em_train(tree, X, cfg)
    assert a.trace == b.trace
    for p, q in zip(a.model.potentials, b.model.potentials):
        np.testing.assert_array_equal(p.values, q.values)


def _observed_chain():
    a, b, c = (Variable(i, k, n, True) for i, (n, k) in enumerate([("A", 2), ("B", 3), ("C", 2)]))
    return RootedJunctionTree.from_edges((a, b, c), [(a, b), (b, c)], [(0, 1)], 0)


def test_fully_observed_converges_in_one_iteration():
    tree = _observed_chain()
    X = sample(random_model(tree, 3), 500, 4)
    one = em_train(tree, X, EMConfig(restarts=1, max_iter=1))
    counts = np.zeros((2, 3))
    np.add.at(counts, (X[:, 0], X[:, 1]), 1)
    np.testing.assert_allclose(one.model.cpt(0), counts / len(X), atol=1e-15)
    cb = np.zeros((2, 3))  # C given B
    np.add.at(cb, (X[:, 2], X[:, 1]), 1)
    np.testing.assert_allclose(one.model.cpt(1), cb / cb.sum(axis=0), atol=1e-15)
    full = em_train(tree, X, EMConfig(restarts=1))
    assert full.converged and full.trace[1] == pytest.approx(full.trace[-1], abs=1e-9)


def test_expected_counts_match_brute_force_posterior():
    _, tree = gen_structure("hmm2", {"length": 3})
    m = random_model(tree, 5)
    x = sample(m, 1, 6)
    counts, ll = m.batched.expected_counts(x)
    hidden = tree.hidden
    obs = dict(zip(tree.observed, x[0]))
    # posterior over hidden assignments by enumeration
    joint = {}
    for h in itertools.product(*[range(v.cardinality) for v in hidden]):
        full = {**obs, **dict(zip(hidden, h))}
        p = 1.0
        for i in range(tree.n_nodes):
            labels = tree.remainders[i] + tree.separators[i]
            p *= m.cpt(i)[tuple(full[v] for v in labels)]
        joint[h] = (p, full)
    z = sum(p for p, _ in joint.values())
    assert ll == pytest.approx(np.log(z), abs=1e-10)
    for i in range(tree.n_nodes):
        labels = tree.remainders[i] + tree.separators[i]
        want = np.zeros(counts[i].shape)
        for p, full in joint.values():
            want[tuple(full[v] for v in labels)] += p / z
        np.testing.assert_allclose(counts[i], want, atol=1e-10)


def test_m_step_floor_for_empty_columns():
    tree = _observed_chain()
    counts = [np.zeros((2, 3)), np.zeros((2, 3))]
    counts[0][0, 0] = 1.0
    model = m_step(tree, counts)
    np.testing.assert_allclose(model.cpt(1).sum(axis=0), 1.0)
    np.testing.assert_allclose(model.cpt(1)[:, 0], [0.5, 0.5])


def test_online_em_grid_and_selection(hmm_data):
    tree, _, X = hmm_data
    res = online_em_train(tree, X, EMConfig(batch_size=128))
    assert [r["rate"] for r in res.runs] == [0.6, 0.7, 0.8, 0.9, 1.0]
    assert res.selected in (0.6, 0.7, 0.8, 0.9, 1.0)
    assert res.trace[-1] >= max(r["log_likelihood"] for r in res.runs)
    again = online_em_train(tree, X, EMConfig(batch_size=128))
    assert again.trace == res.trace


def test_empty_and_misshaped_samples_rejected(hmm_data):
    tree, _, X = hmm_data
    with pytest.raises(ValueError):
        em_train(tree, X[:0])
    with pytest.raises(ValueError):
        online_em_train(tree, X[:, :2])


def test_em_error_decreases_with_n():
    _, tree = gen_structure("hmm2", {"length": 4})
    truth = random_model(tree, 31)
    test = sample(truth, 300, 32)
    p = np.exp(truth.batched.log_likelihood(test))
    errs = []
    for n in (100, 10_000):
        res = em_train(tree, sample(truth, n, 33), EMConfig(restarts=2))
        q = np.exp(res.model.batched.log_likelihood(test))
        errs.append(np.mean(np.abs(q - p) / p))
    assert errs[1] < errs[0]
