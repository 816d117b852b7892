import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuraltd.algo import (
    TRACE_COLUMNS,
    ConfigError,
    SoftConfig,
    TdConfig,
    boltzmann,
    default_stepsize,
    expected_return,
    neural_q_learning,
    neural_soft_q,
    neural_td,
    neural_td_deep,
    residual_delta,
    residual_delta0,
    semigradient_linearized_population,
    semigradient_population,
    semigradient_stochastic,
    semigradient_variance,
    soft_actor_critic,
    soft_state_value,
    variance_bound,
)
from neuraltd.env import (
    FeatureMap,
    FiniteMdp,
    Policy,
    Transition,
    build_random_mdp,
    iid_stream,
    stationary_distribution,
)
from neuraltd.net import ProjectionSpec, TwoLayerParams, init_deep, init_two_layer, project_ball, q_forward
from neuraltd.oracle import ntk_features, solve_projected_evaluation
from neuraltd.rng import make_rng


def env(n_states=5, n_actions=2, d=8, seed=0, gamma=0.9):
    mdp, feats = build_random_mdp(n_states, n_actions, d, min(3, n_states), seed, gamma=gamma)
    return mdp, feats, Policy.uniform(n_states, n_actions)


def hand_setup():
    # two states, one action; x(s0) = e1, x(s1) = e2 in R^3
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    mdp = FiniteMdp(P, np.array([[0.5], [0.0]]), 0.9)
    feats = FeatureMap(np.array([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]]))
    W = np.array([[1.0, 0.0, 0.3], [-1.0, 1.0, 0.0]])
    net = TwoLayerParams(np.array([1.0, -1.0]), W, W)
    return mdp, feats, net


# --- configs


def test_default_stepsizes():
    assert default_stepsize(0.9, 100, "population") == pytest.approx(0.1 / 8)
    assert default_stepsize(0.9, 40000, "iid") == pytest.approx(1 / 200)
    assert TdConfig(T=10, B=1.0, sampling="population").checks_every == 1
    assert TdConfig(T=10, B=1.0, sampling="iid").checks_every == 10


@pytest.mark.parametrize("kwargs", [dict(T=1, B=1.0), dict(T=5, B=0.0), dict(T=5, B=1.0, sampling="x"),
                                    dict(T=5, B=1.0, eta=-1.0)])
def test_config_validation(kwargs):
    with pytest.raises((ConfigError, ValueError)):
        TdConfig(**kwargs)
    with pytest.raises(ConfigError):
        SoftConfig(T=5, B=1.0, beta=0.0)


# --- residuals


def test_residual_zero_network():
    mdp, feats, _ = hand_setup()
    net = TwoLayerParams(np.array([1.0, -1.0]), np.zeros((2, 3)), np.zeros((2, 3)))
    assert residual_delta(net, net.W, Transition(0, 0, 1.0, 1, 0), feats, 0.9) == -1.0


def test_residual_self_loop():
    mdp, feats, net = hand_setup()
    q = q_forward(net, feats(0, 0))
    delta = residual_delta(net, net.W, Transition(0, 0, 0.0, 0, 0), feats, 0.9)
    assert delta == pytest.approx((1 - 0.9) * q, abs=1e-15)


def test_residual_hand_value():
    mdp, feats, net = hand_setup()
    # Q(e1) = (relu(1) - relu(-1)) / sqrt 2 and Q(e2) = (relu(0) - relu(1)) / sqrt 2
    q_next = -1 / math.sqrt(2)
    expected = 1 / math.sqrt(2) - 0.5 - 0.9 * q_next
    delta = residual_delta(net, net.W, Transition(0, 0, 0.5, 1, 0), feats, 0.9)
    assert delta == pytest.approx(expected, abs=1e-15)
    assert residual_delta0(net, net.W, Transition(0, 0, 0.5, 1, 0), feats, 0.9) == pytest.approx(expected)


def test_residual_requires_next_action():
    mdp, feats, net = hand_setup()
    with pytest.raises(ValueError):
        residual_delta(net, net.W, Transition(0, 0, 0.5, 1), feats, 0.9)


# --- semigradients


def test_population_gradient_zero_for_zero_problem():
    mdp, feats, pol = env()
    mdp = FiniteMdp(mdp.transition, np.zeros_like(mdp.reward), mdp.gamma)
    net = init_two_layer(8, 8, 0)
    mu = stationary_distribution(mdp, pol)
    assert np.all(semigradient_population(net, np.zeros((8, 8)), mdp, feats, mu, pol) == 0)


def test_population_equals_linearized_at_init():
    mdp, feats, pol = env()
    net = init_two_layer(32, 8, 1)
    mu = stationary_distribution(mdp, pol)
    g = semigradient_population(net, net.W0, mdp, feats, mu, pol)
    g0 = semigradient_linearized_population(net, net.W0, mdp, feats, mu, pol)
    assert np.array_equal(g, g0)


def _grouped_moments(net, W, mdp, feats, pol, n, seed):
    """Mean and entrywise second moment of g over n i.i.d. tuples, grouped by the sampled pair."""
    mu = stationary_distribution(mdp, pol)
    rows = iid_stream(mdp, pol, mu, make_rng(seed, "mc"), n)
    X = feats.matrix
    nA = mdp.n_actions
    q = np.array([q_forward(net, x, W) for x in X])
    i = rows[:, 0] * nA + rows[:, 1]
    j = rows[:, 2] * nA + rows[:, 3]
    delta = q[i] - mdp.reward.ravel()[i] - mdp.gamma * q[j]
    s1 = np.bincount(i, weights=delta, minlength=len(X))
    s2 = np.bincount(i, weights=delta * delta, minlength=len(X))
    first = np.zeros_like(W)
    second = np.zeros_like(W)
    for p in range(len(X)):
        G = np.outer(net.b * (W @ X[p] > 0) / math.sqrt(net.m), X[p])
        first += s1[p] * G
        second += s2[p] * G * G
    return first / n, second / n


def test_stochastic_mean_matches_population():
    mdp, feats, pol = env(d=4)
    net = init_two_layer(6, 4, 2)
    W = net.W0 + 0.3 * make_rng(0, "w").standard_normal(net.W0.shape)
    mu = stationary_distribution(mdp, pol)
    n = 10**6
    mean, second = _grouped_moments(net, W, mdp, feats, pol, n, 0)
    se = np.sqrt(np.maximum(second - mean**2, 0) / n)
    gbar = semigradient_population(net, W, mdp, feats, mu, pol)
    assert np.all(np.abs(mean - gbar) <= 4 * se + 1e-15)


def test_stochastic_gradient_matches_tuple_formula():
    mdp, feats, pol = env(d=4)
    net = init_two_layer(6, 4, 2)
    tup = Transition(1, 0, float(mdp.reward[1, 0]), 3, 1)
    g = semigradient_stochastic(net, net.W0, tup, feats, mdp.gamma)
    delta = residual_delta(net, net.W0, tup, feats, mdp.gamma)
    x = feats(1, 0)
    np.testing.assert_allclose(g, delta * np.outer(net.b * (net.W0 @ x > 0), x) / math.sqrt(6))


def test_variance_exact_against_enumeration():
    mdp, feats, pol = env(d=4, n_states=3)
    net = init_two_layer(6, 4, 3)
    W = net.W0 + 0.2
    mu = stationary_distribution(mdp, pol)
    gbar = semigradient_population(net, W, mdp, feats, mu, pol)
    total = 0.0
    for s in range(3):
        for a in range(2):
            for s2 in range(3):
                for a2 in range(2):
                    w = mu.probs[s * 2 + a] * mdp.transition[s, a, s2] * pol.probs[s2, a2]
                    if w == 0:
                        continue
                    g = semigradient_stochastic(net, W, Transition(s, a, float(mdp.reward[s, a]), s2, a2),
                                                feats, mdp.gamma)
                    total += w * np.sum((g - gbar) ** 2)
    assert semigradient_variance(net, W, mdp, feats, mu, pol) == pytest.approx(total, rel=1e-10)


# --- TD loop


def test_zero_stepsize_keeps_initialization():
    mdp, feats, pol = env()
    net = init_two_layer(16, 8, 0)
    tr = neural_td(mdp, feats, pol, net, TdConfig(T=2, B=1.0, eta=0.0))
    assert np.array_equal(tr.W_bar, net.W0)
    np.testing.assert_allclose(tr.q_out(feats.matrix), [q_forward(net, x) for x in feats.matrix])


@pytest.mark.parametrize("B", [5.0, 1e-3])
def test_single_population_step_replay(B):
    mdp, feats, pol = env()
    net = init_two_layer(16, 8, 0)
    cfg = TdConfig(T=2, B=B)
    tr = neural_td(mdp, feats, pol, net, cfg)
    mu = stationary_distribution(mdp, pol)
    g = semigradient_population(net, net.W0, mdp, feats, mu, pol)
    expected = project_ball(net.W0 - cfg.stepsize(mdp.gamma) * g, net.W0, ProjectionSpec(B))
    np.testing.assert_allclose(tr.W_final, expected, atol=1e-14)
    np.testing.assert_allclose(tr.W_bar, (net.W0 + expected) / 2, atol=1e-14)


def _replay_iterates(mdp, feats, pol, net, cfg):
    """Plain reimplementation of the stochastic loop on W, without incremental bookkeeping."""
    mu = stationary_distribution(mdp, pol)
    rows = iid_stream(mdp, pol, mu, make_rng(cfg.seed, "sampling"), cfg.T - 1)
    eta = cfg.stepsize(mdp.gamma)
    W = net.W0.copy()
    Ws = [W]
    for s, a, s2, a2 in rows:
        g = semigradient_stochastic(net, W, Transition(s, a, float(mdp.reward[s, a]), s2, a2), feats, mdp.gamma)
        W = project_ball(W - eta * g, net.W0, cfg.spec)
        Ws.append(W)
    return Ws


def test_stochastic_loop_matches_plain_replay():
    mdp, feats, pol = env()
    net = init_two_layer(32, 8, 4)
    cfg = TdConfig(T=400, B=0.5, sampling="iid", seed=4, eta=0.2)
    tr = neural_td(mdp, feats, pol, net, cfg)
    Ws = _replay_iterates(mdp, feats, pol, net, cfg)
    np.testing.assert_allclose(tr.W_final, Ws[-1], atol=1e-10)
    np.testing.assert_allclose(tr.W_bar, np.mean(Ws, axis=0), atol=1e-10)
    disp = [np.linalg.norm(W - net.W0) for W in Ws[:-1]]
    np.testing.assert_allclose(tr.columns["disp"], disp, atol=1e-10)


def test_incremental_metrics_match_exact_recompute():
    mdp, feats, pol = env()
    net = init_two_layer(64, 8, 5)
    fp = solve_projected_evaluation(mdp, pol, ntk_features(net, feats), ProjectionSpec(0.8))
    exact = neural_td(mdp, feats, pol, net, TdConfig(T=600, B=0.8, sampling="iid", check_every=1), fp)
    fast = neural_td(mdp, feats, pol, net, TdConfig(T=600, B=0.8, sampling="iid", check_every=10**9), fp)
    for col in ("dist_star", "lin_err", "net_err", "lin_gap", "flip", "disp", "delta"):
        np.testing.assert_allclose(fast.columns[col], exact.columns[col], atol=1e-10, err_msg=col)
    np.testing.assert_allclose(fast.W_bar, exact.W_bar, atol=1e-12)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["population", "iid", "markov"]), st.floats(0.01, 3.0))
def test_iterates_stay_in_ball(seed, mode, B):
    mdp, feats, pol = env(seed=seed % 7)
    net = init_two_layer(16, 8, seed)
    tr = neural_td(mdp, feats, pol, net, TdConfig(T=60, B=B, sampling=mode, seed=seed, eta=0.5))
    assert np.all(tr.columns["disp"] <= B + 1e-9)
    assert np.linalg.norm(tr.W_final - net.W0) <= B + 1e-9
    assert len(tr) == 59


def test_population_assertions_hold():
    mdp, feats, pol = env(d=16)
    net = init_two_layer(256, 16, 0)
    tr = neural_td(mdp, feats, pol, net, TdConfig(T=300, B=5.0))
    assert np.nanmin(tr.columns["mono_slack"]) >= -1e-9
    assert np.nanmin(tr.columns["descent_slack"]) >= -1e-9
    assert np.nanmax(tr.columns["var"]) <= 1.1 * tr.meta["var_bound"]


def test_population_error_decreases_with_horizon():
    mdp, feats, pol = env(d=16)
    net = init_two_layer(256, 16, 0)
    fp = solve_projected_evaluation(mdp, pol, ntk_features(net, feats), ProjectionSpec(5.0))
    errs = [np.mean(neural_td(mdp, feats, pol, net, TdConfig(T=T, B=5.0), fp).columns["lin_err"])
            for T in (250, 4000)]
    assert errs[1] <= errs[0]


def test_variance_bound_formula():
    mdp, feats, pol = env()
    net = init_two_layer(16, 8, 0)
    mu = stationary_distribution(mdp, pol)
    q0 = np.array([q_forward(net, x) for x in feats.matrix])
    assert variance_bound(net, mdp, feats, mu, 2.0) == pytest.approx(12 * mu.probs @ q0**2 + 48 + 3)


def test_same_seed_same_trace():
    mdp, feats, pol = env()
    net = init_two_layer(16, 8, 0)
    a = neural_td(mdp, feats, pol, net, TdConfig(T=200, B=1.0, sampling="markov", seed=3))
    b = neural_td(mdp, feats, pol, net, TdConfig(T=200, B=1.0, sampling="markov", seed=3))
    assert a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0].split(",") == list(TRACE_COLUMNS)


# --- Q-learning and soft Q-learning


def test_single_action_q_learning_matches_td():
    mdp, feats, pol = env(n_actions=1)
    net = init_two_layer(16, 8, 0)
    cfg = TdConfig(T=300, B=1.0, sampling="iid", seed=2)
    fp = solve_projected_evaluation(mdp, pol, ntk_features(net, feats), cfg.spec)
    td = neural_td(mdp, feats, pol, net, cfg, fp)
    ql = neural_q_learning(mdp, feats, pol, net, cfg, fp)
    assert np.array_equal(td.W_final, ql.W_final)
    np.testing.assert_array_equal(td.columns["delta"], ql.columns["delta"])


def test_q_learning_uses_greedy_next_action():
    mdp, feats, pol = env()
    net = init_two_layer(16, 8, 0)
    cfg = TdConfig(T=200, B=1.0, sampling="iid", seed=1, eta=0.0)
    tr = neural_q_learning(mdp, feats, pol, net, cfg)
    mu = stationary_distribution(mdp, pol)
    rows = iid_stream(mdp, pol, mu, make_rng(1, "sampling"), 199)
    q = np.array([q_forward(net, x) for x in feats.matrix]).reshape(5, 2)
    for t, (s, a, s2, _) in enumerate(rows):
        best = max(range(2), key=lambda b: (q[s2, b], -b))
        assert tr.columns["delta"][t] == pytest.approx(q[s, a] - mdp.reward[s, a] - mdp.gamma * q[s2, best])


def test_exploration_must_be_positive():
    mdp, feats, _ = env()
    pol = Policy(np.tile([1.0, 0.0], (5, 1)))
    with pytest.raises(ConfigError):
        neural_q_learning(mdp, feats, pol, init_two_layer(4, 8, 0), TdConfig(T=5, B=1.0, sampling="iid"))


def test_softmax_two_zero_actions():
    from neuraltd.oracle import softmax_value

    assert softmax_value(np.zeros((1, 2)), 1.0)[0] == pytest.approx(math.log(2), abs=1e-15)
    assert softmax_value(np.array([[1000.0, 0.0]]), 50.0)[0] == pytest.approx(1000.0)


def test_soft_residuals_close_to_hard_residuals():
    mdp, feats, pol = env()
    net = init_two_layer(32, 8, 0)
    beta = 100.0
    hard = neural_q_learning(mdp, feats, pol, net, TdConfig(T=500, B=1.0, sampling="iid", seed=6, eta=0.0))
    soft = neural_soft_q(mdp, feats, pol, net, SoftConfig(T=500, B=1.0, sampling="iid", seed=6, eta=0.0,
                                                          beta=beta))
    diff = np.abs(soft.columns["delta"] - hard.columns["delta"])
    assert diff.max() <= math.log(2) / beta + 1e-12
    gap = soft.columns["soft_gap"]
    assert np.all(gap >= -1e-12) and np.all(gap <= math.log(2) / beta + 1e-12)


# --- soft actor-critic


def test_boltzmann_flat_at_tiny_beta():
    q = make_rng(0, "q").uniform(-5, 5, size=(4, 3))
    pi = boltzmann(q, 1e-6)
    assert 0.5 * np.abs(pi - 1 / 3).sum(axis=1).max() <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_soft_value_above_uniform_mean(seed, beta):
    q = make_rng(seed, "q").normal(size=(3, 4))
    assert np.all(soft_state_value(q, beta) >= q.mean(axis=1) - 1e-12)


def test_sac_single_state_single_action():
    mdp = FiniteMdp(np.ones((1, 1, 1)), np.array([[0.3]]), 0.8)
    feats = FeatureMap(np.array([[[0.0, 0.6, 0.8]]]))
    net = init_two_layer(8, 3, 0)
    tr = soft_actor_critic(mdp, feats, net, SoftConfig(T=5, B=1.0, sampling="iid", beta=2.0))
    v = q_forward(net, feats(0, 0))
    assert tr.columns["kl"][0] == 0.0
    assert tr.columns["xi"][0] == pytest.approx(0.3 + (0.8 - 1) * v, abs=1e-14)
    assert tr.meta["final_return"] == pytest.approx(0.3 / 0.2)


def test_sac_runs_and_stays_in_ball():
    mdp, feats, _ = env()
    net = init_two_layer(16, 8, 0)
    tr = soft_actor_critic(mdp, feats, net, SoftConfig(T=100, B=0.5, sampling="iid", beta=1.0))
    assert np.all(tr.columns["disp"] <= 0.5 + 1e-9)
    assert np.allclose(tr.pi_out.sum(axis=1), 1)


# --- expected return


def test_expected_return_simple_cases():
    mdp = FiniteMdp(np.ones((1, 1, 1)), np.array([[1.0]]), 0.5)
    assert expected_return(mdp, Policy.uniform(1, 1)) == pytest.approx(2.0)
    mdp, _, pol = env()
    mdp = FiniteMdp(mdp.transition, np.zeros_like(mdp.reward), mdp.gamma)
    assert expected_return(mdp, pol) == 0.0


def test_expected_return_matches_rollouts():
    mdp, _, pol = env(n_states=4)
    mu = stationary_distribution(mdp, pol)
    rng = make_rng(0, "rollout")
    n = 10**5
    horizon = math.ceil(math.log(1e-6) / math.log(mdp.gamma))
    s = rng.choice(4, size=n, p=mu.state_marginal(2))
    ret = np.zeros(n)
    cP = np.cumsum(mdp.transition, axis=2)
    for t in range(horizon):
        a = (rng.random(n) < 0.5).astype(int)
        ret += mdp.gamma**t * mdp.reward[s, a]
        s = np.minimum((cP[s, a] <= rng.random(n)[:, None]).sum(axis=1), 3)
    se = ret.std(ddof=1) / math.sqrt(n)
    assert abs(ret.mean() - expected_return(mdp, pol)) <= 4 * se + 1e-6


# --- deep TD


def test_deep_td_stays_in_layer_balls():
    mdp, feats, pol = env(d=6)
    net = init_deep(2, 8, 6, 0)
    tr = neural_td_deep(mdp, feats, pol, net, TdConfig(T=50, B=0.1, sampling="iid", eta=0.5))
    for h in range(2):
        assert np.linalg.norm(tr.W_final[h] - net.Ws0[h]) <= 0.1 + 1e-9
    assert np.all(np.isfinite(tr.columns["lin_gap_max"]))
