import numpy as np
import pytest

from cepguide.guidance import cep_self_norm_loss
from cepguide.netcore import NetworkSpec, TrainConfig, init
from cepguide.qgpo import (
    PointGoalEnv,
    QModel,
    SupportActionSet,
    TransitionDataset,
    behavior_action,
    default_q_spec,
    evaluate_policy,
    generate_behavior_dataset,
    generate_support_actions,
    in_support_cep_loss,
    q_energy_adapter,
    q_loss_and_grads,
    softmax_q_target,
    support_index,
    train_behavior_policy,
    train_q,
    train_qgpo_guidance,
)

ENV = PointGoalEnv()
TINY = TrainConfig(steps=20, batch_size=64, learning_rate=1e-3)


def tiny_q(seed=0, beta_q=1.0):
    spec = NetworkSpec(2, 1, (8,), "relu", "none", cond_dim=2)
    online = [init(spec, seed), init(spec, seed + 1)]
    return QModel(online, [o.copy() for o in online], beta_q)


def test_env_step():
    s2, r = ENV.step(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(s2, [[0.5, 0.5]])
    assert r[0] == pytest.approx(-np.sqrt(2 * 1.5**2))
    s2, _ = ENV.step(np.array([[3.9, 0.0]]), np.array([[5.0, 0.0]]))
    np.testing.assert_allclose(s2, [[4.0, 0.0]])
    _, r = ENV.step(np.array([[1.5, 1.5]]), np.array([[1.0, 1.0]]))
    assert r[0] == 0.0


def test_behavior_action_modes():
    rng = np.random.default_rng(0)
    s = np.zeros((2000, 2))
    greedy = behavior_action(ENV, s, rng, 1.0, noise_std=0.0)
    np.testing.assert_allclose(greedy, np.tile([np.sqrt(0.5)] * 2, (2000, 1)))
    uniform = behavior_action(ENV, s, rng, 0.0)
    assert np.all(np.abs(uniform) <= 1.0) and abs(uniform.mean()) < 0.05


def test_dataset_generation_and_csv(tmp_path):
    ds = generate_behavior_dataset(ENV, 10, 0.5, 0)
    assert len(ds) == 10 * ENV.horizon
    assert not ds.dones.any()
    assert np.all(np.abs(ds.actions) <= 1.0)
    # episode-major: the next state of step k is the state of step k+1
    np.testing.assert_array_equal(ds.next_states[: ENV.horizon - 1], ds.states[1: ENV.horizon])
    np.testing.assert_allclose(ds.episode_returns[0], ds.rewards[: ENV.horizon].sum())
    ds.to_csv(tmp_path / "d.csv")
    back = TransitionDataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.states, ds.states)
    np.testing.assert_array_equal(back.rewards, ds.rewards)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "s1,s2,a1,a2,r,s1',s2',done"
    with pytest.raises(ValueError):
        generate_behavior_dataset(ENV, 2, 1.5, 0)


def test_greedy_data_beats_uniform_data():
    greedy = generate_behavior_dataset(ENV, 200, 1.0, 0).episode_returns.mean()
    uniform = generate_behavior_dataset(ENV, 200, 0.0, 0).episode_returns.mean()
    assert greedy > uniform + 10


def test_support_index_maps_states():
    ds = generate_behavior_dataset(ENV, 5, 0.5, 1)
    uniq, si, ni = support_index(ds)
    np.testing.assert_array_equal(uniq[si], ds.states)
    np.testing.assert_array_equal(uniq[ni], ds.next_states)


def test_support_actions_in_box_and_json(tmp_path):
    ds = generate_behavior_dataset(ENV, 5, 0.5, 2)
    behavior = train_behavior_policy(ds, NetworkSpec(2, 2, (8,), "silu", "sinusoidal", 4, cond_dim=2), TINY)
    sup = generate_support_actions(behavior, ds.states[:7], K=4)
    assert sup.actions.shape == (7, 4, 2) and sup.K == 4
    assert np.all(np.abs(sup.actions) <= 1.0)
    sup.to_json(tmp_path / "s.json")
    back = SupportActionSet.from_json(tmp_path / "s.json")
    np.testing.assert_array_equal(back.actions, sup.actions)
    with pytest.raises(ValueError):
        SupportActionSet(np.zeros((2, 2)), np.full((2, 3, 2), 2.0))


def test_softmax_target_limits():
    q = tiny_q()
    rng = np.random.default_rng(0)
    ns = rng.uniform(-1, 1, (4, 2))
    sup = rng.uniform(-1, 1, (4, 6, 2))
    qn = q.target_value(ns[:, None, :], sup)
    r = np.array([1.0, 0.0, -1.0, 2.0])
    done = np.zeros(4)
    q.beta_q = 0.0
    np.testing.assert_allclose(softmax_q_target(q, r, ns, sup, done, 0.9), r + 0.9 * qn.mean(axis=1))
    q.beta_q = 1e6
    np.testing.assert_allclose(softmax_q_target(q, r, ns, sup, done, 0.9), r + 0.9 * qn.max(axis=1), rtol=1e-6)
    np.testing.assert_allclose(softmax_q_target(q, r, ns, sup, np.ones(4), 0.9), r)


def test_equal_q_values_give_plain_average():
    q = tiny_q()
    for nets in (q.online, q.target):
        for net in nets:
            net.params[:] = 0.0
            net.params[-1] = 2.5
    ns = np.zeros((1, 2))
    sup = np.random.default_rng(0).uniform(-1, 1, (1, 5, 2))
    np.testing.assert_allclose(softmax_q_target(q, [0.0], ns, sup, [0.0], 0.5), [1.25])


def test_q_target_detachment():
    q = tiny_q()
    rng = np.random.default_rng(1)
    s, a = rng.uniform(-1, 1, (8, 2)), rng.uniform(-1, 1, (8, 2))
    y = softmax_q_target(q, np.zeros(8), s, rng.uniform(-1, 1, (8, 4, 2)), np.zeros(8), 0.9)
    loss, grads = q_loss_and_grads(q, s, a, y)
    assert len(grads) == len(q.online)
    # moving the target networks does not change the loss or its gradients once y is formed
    for t in q.target:
        t.params += 1.0
    loss2, grads2 = q_loss_and_grads(q, s, a, y)
    assert loss2 == loss
    for g1, g2 in zip(grads, grads2):
        np.testing.assert_array_equal(g1, g2)


def test_double_q_takes_minimum():
    q = tiny_q()
    s, a = np.zeros((3, 2)), np.random.default_rng(0).uniform(-1, 1, (3, 2))
    each = [net.forward(a, None, s)[:, 0] for net in q.online]
    np.testing.assert_array_equal(q.value(s, a), np.minimum(*each))


def test_in_support_cep_equals_adapter_composition():
    q = tiny_q(3)
    net = init(NetworkSpec(2, 1, (8,), "silu", "sinusoidal", 4, cond_dim=2), 0)
    rng = np.random.default_rng(2)
    states = rng.uniform(-2, 2, (3, 2))
    acts = rng.uniform(-1, 1, (3, 5, 2))
    t = rng.uniform(0.1, 0.9, 3)
    noise = rng.standard_normal((3, 5, 2))
    beta = 3.0
    direct = in_support_cep_loss(net, states, acts, q, beta, t, noise)
    adapter = q_energy_adapter(q, states).with_beta(beta)
    composed = cep_self_norm_loss(net, acts, adapter, t, noise, cond=states)
    assert direct == composed


def test_equal_q_gives_uniform_labels():
    q = tiny_q()
    for net in q.online:
        net.params[:] = 0.0
    net = init(NetworkSpec(2, 1, (), "silu", "none", cond_dim=2), 0)
    net.params[:] = 0.0
    acts = np.random.default_rng(0).uniform(-1, 1, (1, 4, 2))
    loss = in_support_cep_loss(net, np.zeros((1, 2)), acts, q, 3.0, 0.5, np.zeros_like(acts))
    assert loss == pytest.approx(np.log(4))


def test_small_pipeline_and_evaluation_determinism():
    ds = generate_behavior_dataset(ENV, 8, 0.5, 0)
    behavior = train_behavior_policy(ds, NetworkSpec(2, 2, (8,), "silu", "sinusoidal", 4, cond_dim=2), TINY)
    uniq, _, ni = support_index(ds)
    sup = generate_support_actions(behavior, uniq, K=4)
    q = train_q(ds, sup, ni, NetworkSpec(2, 1, (8,), "relu", "none", cond_dim=2), TINY, seed=0)
    assert len(q.loss_curve) >= 1 and q.reward_scale > 0
    g = train_qgpo_guidance(sup, q, 3.0, NetworkSpec(2, 1, (8,), "silu", "sinusoidal", 4, cond_dim=2), TINY)
    assert g.method == "CEP_SELF_NORM" and g.beta == 3.0
    a = evaluate_policy(ENV, behavior, g, 2.0, episodes=4, seed=3, steps=3)
    b = evaluate_policy(ENV, behavior, g, 2.0, episodes=4, seed=3, steps=3)
    np.testing.assert_array_equal(a.returns, b.returns)
    zero = evaluate_policy(ENV, behavior, g, 0.0, episodes=4, seed=3, steps=3)
    plain = evaluate_policy(ENV, behavior, None, 0.0, episodes=4, seed=3, steps=3)
    np.testing.assert_array_equal(zero.returns, plain.returns)
    assert default_q_spec().activation == "relu"


def test_transitions_satisfy_dynamics():
    ds = generate_behavior_dataset(ENV, 20, 0.5, 4)
    s2, r = ENV.step(ds.states, ds.actions)
    np.testing.assert_array_equal(s2, ds.next_states)
    np.testing.assert_array_equal(r, ds.rewards)


def test_uniform_dataset_matches_random_rollouts():
    # independent simulation of the uniform-random policy
    rng = np.random.default_rng(11)
    s = rng.uniform(-4, 4, (2000, 2))
    ret = np.zeros(2000)
    for _ in range(20):
        s = np.clip(s + 0.5 * rng.uniform(-1, 1, (2000, 2)), -4, 4)
        ret -= np.linalg.norm(s - 2.0, axis=1)
    ds = generate_behavior_dataset(ENV, 2000, 0.0, 0)
    se = np.hypot(ds.episode_returns.std(), ret.std()) / np.sqrt(2000)
    assert abs(ds.episode_returns.mean() - ret.mean()) < 4 * se


def test_noiseless_greedy_rollout_from_corner():
    # along the diagonal the distance obeys d <- |d - 0.5|, oscillating once inside 0.5 of the goal
    s = np.array([[-2.0, -2.0]])
    rng = np.random.default_rng(0)
    total = 0.0
    for _ in range(ENV.horizon):
        s, r = ENV.step(s, behavior_action(ENV, s, rng, 1.0, noise_std=0.0))
        total += r[0]
    d, expected = 4 * np.sqrt(2), 0.0
    for _ in range(20):
        d = abs(d - 0.5)
        expected -= d
    assert total == pytest.approx(expected, abs=1e-9)


def test_support_regeneration_is_deterministic():
    ds = generate_behavior_dataset(ENV, 3, 0.5, 2)
    behavior = train_behavior_policy(ds, NetworkSpec(2, 2, (8,), "silu", "sinusoidal", 4, cond_dim=2), TINY)
    a = generate_support_actions(behavior, ds.states[:5], K=3)
    b = generate_support_actions(behavior, ds.states[:5], K=3)
    np.testing.assert_array_equal(a.actions, b.actions)


class FixedQ:
    """Target values fixed per candidate index."""

    def __init__(self, values, beta_q):
        self.values = np.asarray(values, dtype=np.float64)
        self.beta_q = beta_q

    def target_value(self, states, actions):
        return np.broadcast_to(self.values, actions.shape[:-1])


@pytest.mark.parametrize("beta_q, expected", [(0.0, 0.5), (1000.0, 1.0)])
def test_softmax_target_two_candidates(beta_q, expected):
    y = softmax_q_target(FixedQ([0.0, 1.0], beta_q), [0.2], np.zeros((1, 2)), np.zeros((1, 2, 2)), [0.0], 0.9)
    assert y[0] == pytest.approx(0.2 + 0.9 * expected, abs=1e-3)


@pytest.mark.parametrize("beta_q", [0.0, 1.0, 50.0])
def test_softmax_target_single_candidate(beta_q):
    y = softmax_q_target(FixedQ([-0.7], beta_q), [1.0], np.zeros((1, 2)), np.zeros((1, 1, 2)), [0.0], 0.5)
    assert y[0] == pytest.approx(1.0 - 0.35)


def test_q_with_zero_discount_regresses_reward():
    ds = generate_behavior_dataset(ENV, 100, 0.5, 0)
    uniq, _, ni = support_index(ds)
    sup = SupportActionSet(uniq, np.zeros((len(uniq), 1, 2)))
    cfg = TrainConfig(steps=3000, batch_size=256, learning_rate=3e-3, cosine_decay=True)
    q = train_q(ds, sup, ni, NetworkSpec(2, 1, (64, 64), "relu", "none", cond_dim=2), cfg, seed=0, gamma=0.0)
    assert q.loss_curve[-1] < q.loss_curve[0]
    held = generate_behavior_dataset(ENV, 20, 0.5, 99)
    pred = q.value(held.states, held.actions)
    rmse = np.sqrt(np.mean((pred - held.rewards * q.reward_scale) ** 2))
    assert rmse < 0.1


def test_behavior_policy_tracks_nearest_neighbor_actions():
    ds = generate_behavior_dataset(ENV, 300, 1.0, 0, noise_std=0.1)
    cfg = TrainConfig(steps=1500, batch_size=512, learning_rate=1e-3, cosine_decay=True)
    behavior = train_behavior_policy(ds, None, cfg, seed=0)
    for s in ([-3.0, -3.0], [3.0, -1.0]):
        s = np.array(s)
        near = np.argsort(np.linalg.norm(ds.states - s, axis=1))[:50]
        sup = generate_support_actions(behavior, s[None], K=200)
        assert np.all(np.abs(sup.actions) <= 1.0)
        assert np.linalg.norm(sup.actions[0].mean(axis=0) - ds.actions[near].mean(axis=0)) < 0.3
