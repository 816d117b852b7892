import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from neuraltd.env import (
    ChainNotMixing,
    FiniteMdp,
    FeatureMap,
    Policy,
    build_random_mdp,
    estimate_mixing,
    iid_stream,
    load_env,
    markov_stream,
    mdp_from_json,
    mdp_to_json,
    pair_chain,
    parse_generator_spec,
    sample_iid,
    sample_markov,
    stationary_distribution,
)
from neuraltd.rng import make_rng


def one_state(r=1.0, gamma=0.5):
    return FiniteMdp(np.ones((1, 1, 1)), np.array([[r]]), gamma)


def cycle():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    return FiniteMdp(P, np.zeros((2, 1)), 0.9)


def sticky(stay=0.9):
    P = np.array([[[stay, 1 - stay]], [[1 - stay, stay]]])
    return FiniteMdp(P, np.zeros((2, 1)), 0.9)


def uniform(mdp):
    return Policy.uniform(mdp.n_states, mdp.n_actions)


# --- stationary distribution


def test_single_pair_is_certain():
    mdp = one_state()
    assert stationary_distribution(mdp, uniform(mdp)).probs.tolist() == [1.0]


def test_cycle_is_uniform():
    mdp = cycle()
    mu = stationary_distribution(mdp, uniform(mdp))
    # the cycle is periodic; power iteration from the uniform law is already stationary
    np.testing.assert_allclose(mu.probs, [0.5, 0.5], atol=1e-12)


def test_garnet_matches_dense_eigensolver():
    mdp, _ = build_random_mdp(3, 2, 4, 2, seed=3)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol).probs
    vals, vecs = np.linalg.eig(pair_chain(mdp, pol).T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    v /= v.sum()
    assert 0.5 * np.abs(mu - v).sum() <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 3))
def test_stationary_is_fixed_point(seed, n_states, n_actions):
    mdp, _ = build_random_mdp(n_states, n_actions, 3, min(2, n_states), seed)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol).probs
    assert abs(mu.sum() - 1) <= 1e-10 and np.all(mu >= 0)
    assert 0.5 * np.abs(mu @ pair_chain(mdp, pol) - mu).sum() <= 1e-8


def test_non_mixing_chain_raises():
    # bipartite chain 0 -> {1, 2} -> 0: period two, the uniform start oscillates forever
    P = np.zeros((3, 1, 3))
    P[0, 0, 1:] = 0.5
    P[1, 0, 0] = P[2, 0, 0] = 1.0
    mdp = FiniteMdp(P, np.zeros((3, 1)), 0.9)
    with pytest.raises(ChainNotMixing):
        stationary_distribution(mdp, uniform(mdp), max_iters=1000)


# --- samplers


def test_iid_single_pair_constant():
    mdp = one_state(r=0.25)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol)
    rng = make_rng(5, "s")
    for _ in range(20):
        assert tuple(sample_iid(mdp, pol, mu, rng)) == (0, 0, 0.25, 0, 0)


def test_iid_frequencies_within_four_sigma():
    mdp, _ = build_random_mdp(5, 2, 4, 3, seed=1)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol)
    n = 10**6
    rows = iid_stream(mdp, pol, mu, make_rng(0, "freq"), n)
    counts = np.bincount(rows[:, 0] * 2 + rows[:, 1], minlength=10)
    sigma = np.sqrt(n * mu.probs * (1 - mu.probs))
    assert np.all(np.abs(counts - n * mu.probs) <= 4 * sigma)
    assert stats.chisquare(counts, n * mu.probs).pvalue > 1e-3


def test_iid_stream_matches_scalar_sampler():
    mdp, _ = build_random_mdp(4, 3, 4, 2, seed=2)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol)
    block = iid_stream(mdp, pol, mu, make_rng(9, "x"), 50)
    rng = make_rng(9, "x")
    for row in block:
        t = sample_iid(mdp, pol, mu, rng)
        assert (t.s, t.a, t.s_next, t.a_next) == tuple(row)
        assert t.r == mdp.reward[t.s, t.a]


def test_iid_equal_seeds_equal_tuples():
    mdp, _ = build_random_mdp(4, 2, 4, 2, seed=2)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol)
    a = iid_stream(mdp, pol, mu, make_rng(3, "z"), 1000)
    b = iid_stream(mdp, pol, mu, make_rng(3, "z"), 1000)
    assert np.array_equal(a, b)


def test_markov_cycle_alternates():
    mdp = cycle()
    rows = markov_stream((0, 0), mdp, uniform(mdp), make_rng(0, "m"), 10)
    assert rows[:, 0].tolist() == [0, 1] * 5


def test_markov_consecutive_tuples_chain():
    mdp, _ = build_random_mdp(5, 2, 4, 3, seed=4)
    rows = markov_stream((0, 0), mdp, uniform(mdp), make_rng(1, "m"), 5000)
    assert np.array_equal(rows[1:, 0], rows[:-1, 2])
    assert np.array_equal(rows[1:, 1], rows[:-1, 3])


def test_markov_stream_matches_scalar_sampler():
    mdp, _ = build_random_mdp(4, 2, 4, 2, seed=6)
    pol = uniform(mdp)
    block = markov_stream((1, 0), mdp, pol, make_rng(2, "q"), 40)
    rng, state = make_rng(2, "q"), (1, 0)
    for row in block:
        t, state = sample_markov(state, mdp, pol, rng)
        assert (t.s, t.a, t.s_next, t.a_next) == tuple(row)


def test_markov_ergodic_frequencies():
    mdp, _ = build_random_mdp(5, 2, 4, 3, seed=1)
    pol = uniform(mdp)
    mu = stationary_distribution(mdp, pol).probs
    K = pair_chain(mdp, pol)
    n = 10**6
    rows = markov_stream((0, 0), mdp, pol, make_rng(0, "erg"), n)
    freq = np.bincount(rows[:, 0] * 2 + rows[:, 1], minlength=10) / n
    # asymptotic variance of each indicator from the fundamental matrix Z = (I - K + 1 mu)^-1
    Z = np.linalg.inv(np.eye(len(mu)) - K + np.outer(np.ones(len(mu)), mu))
    for i in range(len(mu)):
        f = (np.arange(len(mu)) == i) - mu[i]
        var = mu @ (f * ((2 * Z - np.eye(len(mu))) @ f))
        assert abs(freq[i] - mu[i]) <= 4 * np.sqrt(var / n)


# --- mixing


def test_mixing_single_state_is_zero():
    curve = estimate_mixing(one_state(), Policy.uniform(1, 1), 10)
    assert np.all(curve.tv == 0)


def test_mixing_two_state_ratio():
    curve = estimate_mixing(sticky(0.9), Policy.uniform(2, 1), 30)
    ratios = curve.tv[1:] / curve.tv[:-1]
    np.testing.assert_allclose(ratios[curve.tv[1:] > 1e-12], 0.8, rtol=1e-9)
    assert curve.beta == pytest.approx(0.8, rel=1e-9)
    assert curve.mixing


def test_mixing_periodic_flag():
    curve = estimate_mixing(cycle(), Policy.uniform(2, 1), 20)
    assert curve.tv.min() >= 0.5
    assert curve.beta >= 1 and not curve.mixing


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mixing_curve_non_increasing(seed):
    mdp, _ = build_random_mdp(5, 2, 3, 2, seed)
    tv = estimate_mixing(mdp, uniform(mdp), 40).tv
    assert np.all(np.diff(tv) <= 1e-12)


def test_mixing_short_horizon_rejected():
    with pytest.raises(ValueError):
        estimate_mixing(one_state(), Policy.uniform(1, 1), 1)


# --- generator


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**30), st.integers(1, 6), st.integers(1, 4), st.integers(3, 9))
def test_generator_contract(seed, n_states, n_actions, d):
    branching = 1 + seed % n_states
    mdp, feats = build_random_mdp(n_states, n_actions, d, branching, seed)
    P = mdp.transition
    assert np.allclose(P.sum(axis=2), 1)
    assert np.all((P > 0).sum(axis=2) <= branching)
    assert np.all(np.abs(mdp.reward) <= 1)
    np.testing.assert_allclose(np.linalg.norm(feats.table, axis=2), 1.0, atol=1e-12)
    again = build_random_mdp(n_states, n_actions, d, branching, seed)
    assert np.array_equal(again[0].transition, P) and np.array_equal(again[1].table, feats.table)


def test_generated_features_distinct():
    _, feats = build_random_mdp(8, 3, 5, 3, seed=0)
    X = feats.matrix
    for i, j in itertools.combinations(range(len(X)), 2):
        assert np.arccos(np.clip(X[i] @ X[j], -1, 1)) > 0


@pytest.mark.parametrize("kwargs", [dict(n_states=0, n_actions=2), dict(n_states=3, n_actions=2, branching=4),
                                    dict(n_states=3, n_actions=2, d=2)])
def test_generator_rejects(kwargs):
    args = dict(n_states=3, n_actions=2, d=4, branching=2, seed=0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        build_random_mdp(**args)


def test_env_json_round_trip(tmp_path):
    mdp, feats = build_random_mdp(4, 2, 5, 2, seed=8)
    doc = json.loads(json.dumps(mdp_to_json(mdp, feats)))
    mdp2, feats2 = mdp_from_json(doc)
    assert np.array_equal(mdp2.transition, mdp.transition)
    assert np.array_equal(feats2.table, feats.table)
    path = tmp_path / "env.json"
    path.write_text(json.dumps(doc))
    assert np.array_equal(load_env(str(path))[0].reward, mdp.reward)


def test_generator_spec_parsing():
    assert parse_generator_spec("random:d=16,gamma=0.5")["d"] == 16
    assert parse_generator_spec("random:")["n_states"] == 5
    with pytest.raises(ValueError):
        parse_generator_spec("random:bogus=1")


def test_invalid_structures_rejected():
    with pytest.raises(ValueError):
        FiniteMdp(np.full((1, 1, 1), 0.5), np.zeros((1, 1)), 0.9)
    with pytest.raises(ValueError):
        FiniteMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0)
    with pytest.raises(ValueError):
        Policy(np.array([[0.7, 0.7]]))
    with pytest.raises(ValueError):
        FeatureMap(np.ones((1, 1, 3)))
