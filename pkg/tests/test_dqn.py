import math

import numpy as np
import pytest

from fracdose.dqn import (
    LAYER_ORDER,
    Adam,
    DQNConfig,
    DQNTrainer,
    QNetwork,
    ReplayBuffer,
    TrainingError,
    TrainingLog,
    act,
    bellman_loss,
    double_q_targets,
    epsilon_at,
    gradient_step,
    load_checkpoint,
    load_network,
    q_forward,
    save_checkpoint,
)
from fracdose.env import POPULATION_EXCEEDED, EnvConfig

SMALL_ENV = EnvConfig(horizon=300).replace(mu=0.8)
SMALL_DQN = DQNConfig(
    total_steps=2500, learning_starts=400, target_update_interval=100, buffer_size=1000,
    hidden=16, seed=7,
)


def tiny_net():
    net = QNetwork(2, 2, hidden=1)
    net.params.update(
        W1=np.array([[1.0], [-2.0]]), b1=np.array([0.5]),
        W2=np.array([[3.0]]), b2=np.array([-1.0]),
        W3=np.array([[2.0, -1.0]]), b3=np.array([0.1, 0.2]),
    )
    return net


# -- network ------------------------------------------------------------------

def test_zero_network_outputs_zero():
    net = QNetwork(5)
    np.testing.assert_array_equal(q_forward(net, np.arange(5.0)), [0.0, 0.0])


def test_output_bias_passes_through():
    net = QNetwork(5, rng=np.random.default_rng(0))
    for k in ("W2", "b2", "W3"):
        net.params[k][...] = 0.0
    net.params["b3"][...] = [1.5, -2.0]
    np.testing.assert_array_equal(q_forward(net, np.zeros(5)), [1.5, -2.0])


def test_tiny_network_by_hand():
    net = tiny_net()
    # z1 = 1 - 0.5 + 0.5 = 1, z2 = 3 - 1 = 2, q = 2 * [2, -1] + [0.1, 0.2]
    np.testing.assert_allclose(q_forward(net, np.array([1.0, 0.25])), [4.1, -1.8], rtol=1e-15)
    # both hidden units inactive: output is the bias
    np.testing.assert_array_equal(q_forward(net, np.array([0.0, 1.0])), [0.1, 0.2])


def test_observation_length_checked():
    with pytest.raises(ValueError):
        q_forward(QNetwork(5), np.zeros(4))


def test_flat_round_trip():
    net = QNetwork(5, hidden=8, rng=np.random.default_rng(1))
    other = QNetwork(5, hidden=8)
    other.set_flat(net.flat())
    for k in LAYER_ORDER:
        np.testing.assert_array_equal(other.params[k], net.params[k])
    assert net.flat().size == 5 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2


def test_init_ranges():
    net = QNetwork(5, rng=np.random.default_rng(2))
    assert np.abs(net.params["W1"]).max() <= 1 / math.sqrt(5)
    assert np.abs(net.params["W2"]).max() <= 1 / 8


# -- exploration ----------------------------------------------------------------

def test_epsilon_schedule():
    cfg = DQNConfig()
    tau = cfg.decay_steps
    assert tau == 30_000
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(int(tau), cfg) == pytest.approx(max(0.05, 1 / math.e))
    assert epsilon_at(10**9, cfg) == 0.05
    eps = [epsilon_at(s, cfg) for s in range(0, 300_000, 1000)]
    assert all(a >= b for a, b in zip(eps, eps[1:]))


def test_act_greedy_and_tie_break():
    net = QNetwork(1, hidden=1)
    rng = np.random.default_rng(0)
    net.params["b3"][...] = [1.0, 2.0]
    assert act(net, np.zeros(1), 0.0, rng) == 1
    net.params["b3"][...] = [3.0, 3.0]
    assert act(net, np.zeros(1), 0.0, rng) == 0


def test_act_uniform_when_exploring():
    net = QNetwork(1, hidden=1)
    net.params["b3"][...] = [0.0, 5.0]
    rng = np.random.default_rng(123)
    n = 10_000
    ones = sum(act(net, np.zeros(1), 1.0, rng) for _ in range(n))
    assert abs(ones - n / 2) <= 3 * math.sqrt(n / 4)


# -- targets and loss --------------------------------------------------------------

def const_net(values):
    net = QNetwork(1, hidden=1)
    net.params["b3"][...] = values
    return net


def test_double_q_target_hand_example():
    batch = {"rewards": np.array([1.0]), "dones": np.array([0.0]), "next_obs": np.zeros((1, 1))}
    y = double_q_targets(batch, const_net([2.0, 3.0]), const_net([10.0, 20.0]), 0.5)
    np.testing.assert_array_equal(y, [11.0])


def test_double_q_target_uses_online_argmax():
    batch = {"rewards": np.array([0.0]), "dones": np.array([0.0]), "next_obs": np.zeros((1, 1))}
    # online prefers action 0 even though the target rates action 1 higher
    y = double_q_targets(batch, const_net([5.0, 1.0]), const_net([2.0, 100.0]), 1.0 - 1e-3)
    np.testing.assert_allclose(y, [2.0 * (1.0 - 1e-3)])


def test_double_q_target_terminal_and_zero_discount():
    batch = {"rewards": np.array([0.7, -0.2]), "dones": np.array([1.0, 0.0]), "next_obs": np.zeros((2, 1))}
    y = double_q_targets(batch, const_net([2.0, 3.0]), const_net([10.0, 20.0]), 0.9)
    np.testing.assert_allclose(y, [0.7, -0.2 + 0.9 * 20.0])
    y = double_q_targets(batch, const_net([2.0, 3.0]), const_net([10.0, 20.0]), 0.0)
    np.testing.assert_array_equal(y, batch["rewards"])


def test_two_transition_loss_by_hand():
    net = tiny_net()
    batch = {"obs": np.array([[1.0, 0.25], [0.0, 1.0]]), "actions": np.array([0, 1])}
    # residuals 4.1 - 4.0 and 0.2 - 0.5
    loss, _ = bellman_loss(net, batch, np.array([4.0, 0.5]))
    assert loss == pytest.approx((0.1**2 + 0.3**2) / 2, rel=1e-12)


def _fd_gradient(net, batch, targets, h=1e-4):
    flat = net.flat()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        for sign in (1, -1):
            probe = flat.copy()
            probe[i] += sign * h
            net.set_flat(probe)
            loss, _ = bellman_loss(net, batch, targets)
            grad[i] = loss if sign == 1 else (grad[i] - loss) / (2 * h)
    net.set_flat(flat)
    return grad


@pytest.mark.parametrize("seed,batch_size", [(0, 1), (1, 1), (2, 4), (3, 32)])
def test_gradients_match_finite_differences(seed, batch_size):
    rng = np.random.default_rng(seed)
    net = QNetwork(5, hidden=6, rng=rng)
    batch = {"obs": rng.normal(size=(batch_size, 5)), "actions": rng.integers(0, 2, batch_size)}
    targets = rng.normal(size=batch_size)
    _, grads = bellman_loss(net, batch, targets)
    analytic = np.concatenate([grads[k].ravel() for k in LAYER_ORDER])
    numeric = _fd_gradient(net, batch, targets)
    err = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert err <= 1e-5


def test_zero_residual_leaves_weights_unchanged():
    net = QNetwork(5, hidden=8, rng=np.random.default_rng(4))
    obs = np.random.default_rng(5).normal(size=(3, 5))
    batch = {"obs": obs, "actions": np.array([0, 1, 1])}
    targets = net.forward(obs)[np.arange(3), batch["actions"]]
    before = net.flat()
    opt = Adam(net.params, 1e-3)
    assert gradient_step(net, batch, targets, opt) == 0.0
    np.testing.assert_array_equal(net.flat(), before)


def test_non_finite_loss_aborts():
    net = QNetwork(2, hidden=2, rng=np.random.default_rng(0))
    batch = {"obs": np.zeros((1, 2)), "actions": np.array([0])}
    with pytest.raises(TrainingError, match="non-finite"):
        gradient_step(net, batch, np.array([np.inf]), Adam(net.params, 1e-3))


def test_adam_first_step_is_sign_step():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    opt = Adam(params, lr=0.1)
    opt.update(params, {"w": np.array([0.5, -4.0, 0.0])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 3.0], atol=1e-7)


# -- replay -----------------------------------------------------------------------

def test_replay_fifo_eviction():
    buf = ReplayBuffer(3, 1)
    for i in range(5):
        buf.add([i], i % 2, float(i), [i + 1], False)
    assert len(buf) == 3
    assert sorted(buf.get(j).reward for j in range(3)) == [2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        buf.add([0, 0], 0, 0.0, [0], False)


def test_replay_sampling_is_uniform_without_replacement():
    n, batch = 1000, 32
    buf = ReplayBuffer(n, 1)
    for i in range(n):
        buf.add([i], 0, float(i), [i], False)
    rng = np.random.default_rng(0)
    counts = np.zeros(n)
    draws = 100_000 // batch
    for _ in range(draws):
        idx = buf.sample_indices(batch, rng)
        assert len(set(idx.tolist())) == batch
        counts[idx] += 1
    p = batch / n
    mean, sigma = draws * p, math.sqrt(draws * p * (1 - p))
    assert np.abs(counts - mean).max() <= 5 * sigma
    with pytest.raises(ValueError):
        ReplayBuffer(10, 1).sample_indices(2, rng)


# -- config ---------------------------------------------------------------------------

def test_effective_horizon():
    assert DQNConfig().effective_horizon == pytest.approx(1000.0, rel=1e-12)


def test_config_defaults_and_validation():
    cfg = DQNConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.gamma) == (32, 3.6e-4, 0.999)
    assert (cfg.target_update_interval, cfg.learning_starts, cfg.total_steps) == (1000, 10_000, 300_000)
    assert (cfg.buffer_size, cfg.epsilon_floor) == (100_000, 0.05)
    assert DQNConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(gamma=1.0), dict(batch_size=0), dict(learning_rate=-1.0), dict(polyak=0.0),
                dict(epsilon_floor=0.5, epsilon_start=0.1)):
        with pytest.raises(ValueError):
            DQNConfig(**bad)
    with pytest.raises(ValueError):
        DQNConfig.from_dict({"batchsize": 3})


# -- training -------------------------------------------------------------------------

def run(env_cfg=SMALL_ENV, cfg=SMALL_DQN):
    trainer = DQNTrainer(env_cfg, cfg)
    trainer.train()
    return trainer


def test_training_is_deterministic():
    a, b = run(), run()
    assert a.log.episodes == b.log.episodes
    np.testing.assert_array_equal(a.online.flat(), b.online.flat())
    np.testing.assert_array_equal(a.buffer.obs, b.buffer.obs)
    np.testing.assert_array_equal(a.buffer.actions, b.buffer.actions)
    c = run(cfg=SMALL_DQN.replace(seed=8))
    assert not np.array_equal(a.online.flat(), c.online.flat())


def test_training_accounting():
    t = run(cfg=SMALL_DQN.replace(buffer_size=SMALL_DQN.total_steps))
    eps = t.log.episodes
    assert t.steps == SMALL_DQN.total_steps
    assert sum(r.length for r in eps) == t.steps
    assert [r.end_step for r in eps] == sorted(r.end_step for r in eps)
    # one gradient step per env step of every episode that ended past learning_starts
    learned = sum(r.length for r in eps if r.end_step > SMALL_DQN.learning_starts)
    assert t.grad_steps == learned
    # only population overshoot is terminal; horizon truncation is not
    dones = t.buffer.dones[: t.buffer.size]
    n_exceeded = sum(r.reason == POPULATION_EXCEEDED for r in eps)
    assert dones.sum() == n_exceeded
    assert t.buffer.size == t.steps


def test_target_network_changes_only_at_interval():
    t = DQNTrainer(SMALL_ENV, SMALL_DQN.replace(target_update_interval=37))
    t.train(until=SMALL_DQN.learning_starts + 1)
    while t.grad_steps < 200:
        before = t.target.flat()
        t._learn()
        changed = not np.array_equal(before, t.target.flat())
        assert changed == (t.grad_steps % 37 == 0)
        if changed:
            np.testing.assert_array_equal(t.target.flat(), t.online.flat())


def test_polyak_target_update():
    t = DQNTrainer(SMALL_ENV, SMALL_DQN.replace(target_update_interval=1, polyak=0.25))
    t.train(until=SMALL_DQN.learning_starts + 1)
    before = t.target.flat()
    t._learn()
    np.testing.assert_allclose(t.target.flat(), 0.75 * before + 0.25 * t.online.flat(), rtol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    t = run()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(t, path)
    obs = np.array([0.1, -0.2, 0.3, 0.05, -0.4])
    net = load_network(path)
    assert np.array_equal(q_forward(net, obs), q_forward(t.online, obs))
    back = load_checkpoint(path)
    assert back.log.episodes == t.log.episodes
    assert back.rng.bit_generator.state == t.rng.bit_generator.state


def test_corrupted_header_rejected(tmp_path):
    t = DQNTrainer(SMALL_ENV, SMALL_DQN)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(t, path)
    with np.load(path) as data:
        arrays = dict(data)
    arrays["header"] = np.array(str(arrays["header"]).replace("dqn-checkpoint/1", "dqn-checkpoint/0"))
    bad = tmp_path / "bad.npz"
    np.savez(bad, **arrays)
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(bad)
    arrays["header"] = np.array("{not json")
    np.savez(bad, **arrays)
    with pytest.raises(ValueError, match="header"):
        load_network(bad)


def test_resume_matches_uninterrupted(tmp_path):
    full = run()
    part = DQNTrainer(SMALL_ENV, SMALL_DQN)
    part.train(until=1200)
    path = tmp_path / "mid.npz"
    save_checkpoint(part, path)
    resumed = load_checkpoint(path)
    resumed.train()
    assert resumed.log.episodes == full.log.episodes
    np.testing.assert_array_equal(resumed.online.flat(), full.online.flat())
    np.testing.assert_array_equal(resumed.target.flat(), full.target.flat())


def test_periodic_checkpoints(tmp_path):
    t = DQNTrainer(SMALL_ENV, SMALL_DQN)
    t.train(checkpoint_every=1000, checkpoint_dir=tmp_path)
    steps = [s for s, _ in t.log.checkpoints]
    assert len(steps) >= 2 and steps == sorted(steps)
    assert all((tmp_path / f"ckpt_{s:07d}.npz").exists() for s in steps)


def test_training_log_csv(tmp_path):
    t = run()
    path = tmp_path / "log.csv"
    t.log.write_csv(path)
    assert TrainingLog.read_csv(path).episodes == t.log.episodes
