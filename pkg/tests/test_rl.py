import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fogran.rl import (AdamState, CheckpointError, DQNAgent, EpsilonSchedule, QNetwork, QTable,
                       ReplayMemory, Transition, adam_step, forward, gradients, load_weights,
                       q_learning_update, save_weights, select_action, td_loss, td_targets)
from conftest import assert_uniform

DIMS = (14, 24, 24, 96)


def _batch(rng, n=8, dims=DIMS):
    x = rng.integers(0, 2, size=(n, dims[0])).astype(float)
    a = rng.integers(0, dims[-1], size=n)
    y = rng.normal(scale=3.0, size=n)
    return x, a, y


def _tr(i, terminal=False):
    return Transition(np.full(14, i % 2, float), i % 96, -float(i), np.zeros(14), terminal)


# ------------------------------------------------------------------ network

def test_zero_network_outputs_zero():
    net = QNetwork.zeros(DIMS)
    assert np.array_equal(forward(net, np.ones(14)), np.zeros(96))


def test_positive_path_is_linear():
    net = QNetwork.zeros((2, 2, 1))
    net.weights[0][:] = [[2.0, 0.0], [0.0, 3.0]]
    net.weights[1][:] = [[1.0], [1.0]]
    assert forward(net, np.array([1.0, 2.0]))[0] == pytest.approx(2.0 + 6.0)


def test_forward_is_pure_and_checks_shape():
    net = QNetwork.initialize(DIMS, np.random.default_rng(0))
    x = np.random.default_rng(1).random(14)
    assert np.array_equal(forward(net, x), forward(net, x))
    assert forward(net, x).shape == (96,)
    with pytest.raises(ValueError):
        forward(net, np.ones(13))


def test_glorot_range():
    net = QNetwork.initialize(DIMS, np.random.default_rng(2))
    for w, (a, b) in zip(net.weights, zip(DIMS[:-1], DIMS[1:])):
        assert np.all(np.abs(w) <= np.sqrt(6 / (a + b)))


def test_gradient_zero_when_targets_match():
    rng = np.random.default_rng(3)
    net = QNetwork.initialize(DIMS, rng)
    x, a, _ = _batch(rng)
    y = forward(net, x)[np.arange(len(a)), a]
    grads, loss = gradients(net, x, a, y)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_gradients_match_finite_differences():
    """Central differences, h = 1e-5, over 50 random nets and batches."""
    h = 1e-5
    worst = 0.0
    for trial in range(50):
        rng = np.random.default_rng(100 + trial)
        dims = (14, 24, 24, 96)
        net = QNetwork.initialize(dims, rng)
        for b in net.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        x, a, y = _batch(rng, n=6, dims=dims)
        grads, _ = gradients(net, x, a, y)
        for p, g in zip(net.params(), grads):
            # sample coordinates to keep the check fast
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in rng.choice(flat.size, size=min(flat.size, 40), replace=False):
                old = flat[j]
                flat[j] = old + h
                up = td_loss(net, x, a, y)
                flat[j] = old - h
                dn = td_loss(net, x, a, y)
                flat[j] = old
                fd = (up - dn) / (2 * h)
                err = abs(fd - gflat[j]) / max(abs(fd), abs(gflat[j]), 1e-6)
                worst = max(worst, err)
    assert worst < 1e-4


def test_residual_scaling_scales_gradient_on_linear_net():
    rng = np.random.default_rng(4)
    net = QNetwork.initialize((5, 3), rng)      # no hidden layer: a linear map
    x = rng.random((4, 5))
    a = rng.integers(0, 3, size=4)
    q = forward(net, x)[np.arange(4), a]
    r = rng.normal(size=4)
    g1, _ = gradients(net, x, a, q - r)
    g3, _ = gradients(net, x, a, q - 3 * r)
    for u, v in zip(g1, g3):
        assert np.allclose(v, 3 * u)


# ------------------------------------------------------------------ Adam

def test_adam_zero_gradient_leaves_parameters():
    net = QNetwork.initialize(DIMS, np.random.default_rng(5))
    before = net.copy()
    opt = AdamState.for_network(net)
    adam_step(net, [np.zeros_like(p) for p in net.params()], opt)
    assert net.same_as(before) and opt.step_count == 1


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_is_signed_learning_rate(g):
    net = QNetwork.zeros((2, 2))
    opt = AdamState.for_network(net, 1e-4)
    adam_step(net, [np.full_like(p, g) for p in net.params()], opt)
    for p in net.params():
        assert np.allclose(p, -1e-4 * np.sign(g), atol=1e-6 * 1e-4 + 1e-12, rtol=1e-6)


def test_adam_two_steps_match_hand_recurrence():
    net = QNetwork.zeros((1, 1))
    opt = AdamState.for_network(net, 0.01)
    gs = [0.5, -0.2]
    m = v = w = 0.0
    for t, g in enumerate(gs, 1):
        adam_step(net, [np.array([[g]]), np.array([g])], opt)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert net.weights[0][0, 0] == pytest.approx(w, rel=1e-12)
    assert opt.step_count == 2


# ------------------------------------------------------------------ replay and exploration

def test_replay_is_fifo():
    mem = ReplayMemory(5, 14)
    for i in range(8):
        mem.push(_tr(i))
    assert len(mem) == 5
    assert [t.reward for t in mem.records()] == [-3.0, -4.0, -5.0, -6.0, -7.0]


def test_replay_sampling_without_replacement():
    mem = ReplayMemory(50, 14)
    for i in range(40):
        mem.push(_tr(i))
    idx = mem.sample_indices(32, np.random.default_rng(0))
    assert len(set(idx.tolist())) == 32 and idx.max() < 40
    with pytest.raises(ValueError):
        ReplayMemory(10, 14).sample_indices(1, np.random.default_rng(0))


def test_epsilon_schedule_values():
    e = EpsilonSchedule()
    assert e(0) == 1.0
    assert e(1500) == pytest.approx(0.505)
    assert e(3000) == pytest.approx(0.01)
    assert e(10 ** 6) == pytest.approx(0.01)
    vals = [e(t) for t in range(0, 4000, 7)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_select_action_uniform_when_exploring():
    net = QNetwork.zeros(DIMS)
    rng = np.random.default_rng(8)
    sched = EpsilonSchedule(1.0, 1.0, 1)
    n = 100_000
    counts = np.bincount([select_action(net, np.zeros(14), 0, sched, rng) for _ in range(n)],
                         minlength=96)
    assert_uniform(counts, n)


def test_select_action_greedy_and_ties():
    sched = EpsilonSchedule(0.0, 0.0, 1)
    net = QNetwork.zeros(DIMS)
    rng = np.random.default_rng(0)
    assert select_action(net, np.zeros(14), 0, sched, rng) == 0
    net.biases[-1][42] = 1.0
    assert select_action(net, np.zeros(14), 0, sched, rng) == 42
    # shifting every output leaves the choice alone
    net.biases[-1] += 123.0
    assert select_action(net, np.zeros(14), 0, sched, rng) == 42


def test_td_target_examples():
    net = QNetwork.zeros((14, 96))
    net.biases[0][:] = -800.0
    net.biases[0][3] = -700.0
    s2 = np.zeros((1, 14))
    assert td_targets([-8.0], s2, [True], net, 0.99)[0] == -8.0
    assert td_targets([-8.0], s2, [False], net, 0.0)[0] == -8.0
    assert td_targets([-8.0], s2, [False], net, 0.99)[0] == pytest.approx(-701.0)
    assert td_targets([-8.0], s2, [False], net, 0.99, actions=[0])[0] == pytest.approx(-800.0)


# ------------------------------------------------------------------ agent

def _agent(seed=0, **kw):
    return DQNAgent.create(DIMS, np.random.default_rng(seed), **kw)


def test_train_step_on_trivial_memory_is_a_noop():
    net = QNetwork.zeros(DIMS)
    agent = DQNAgent.from_network(net)
    mem = ReplayMemory(64, 14)
    for _ in range(40):
        mem.push(Transition(np.zeros(14), 5, 0.0, np.zeros(14), True))
    loss = agent.train_step(mem, np.random.default_rng(0))
    assert loss == 0.0 and agent.net.same_as(net)


def test_train_step_loss_is_recomputable():
    agent = _agent()
    mem = ReplayMemory(100, 14)
    rng = np.random.default_rng(1)
    for i in range(60):
        mem.push(Transition(rng.integers(0, 2, 14).astype(float), int(rng.integers(96)),
                            -float(rng.random() * 50), rng.integers(0, 2, 14).astype(float),
                            bool(i % 30 == 29)))
    before = agent.net.copy()
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    loss = agent.train_step(mem, r1)
    s, a, r, s2, term = mem.batch(mem.sample_indices(32, r2))
    y = np.where(term, r, r + 0.99 * forward(agent.target, s2).max(axis=1))
    q = forward(before, s)[np.arange(32), a]
    assert loss == pytest.approx(np.mean((q - y) ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        _agent().train_step(ReplayMemory(10, 14), r1)


def test_training_and_sync_cadence():
    agent = _agent()
    mem = ReplayMemory(200, 14)
    for i in range(100):
        mem.push(_tr(i, i % 30 == 29))
    rng = np.random.default_rng(0)
    versions = []
    target_before = agent.target.copy()
    for g in range(4800):
        agent.after_step(g, mem, rng)
        versions.append(agent.updates)
        if g < 479:
            assert agent.target.same_as(target_before)
    trained = [g for g in range(1, 4800) if versions[g] != versions[g - 1]]
    assert all((g + 1) % 3 == 0 for g in trained) and versions[2] == 1
    assert agent.syncs == 10
    x = np.random.default_rng(2).random(14)
    assert np.array_equal(forward(agent.net, x), forward(agent.target, x))


@pytest.mark.slow
def test_parameters_stay_finite_under_long_training(full_env):
    from fogran.env import encode_state
    agent = _agent(3)
    mem = ReplayMemory(5000, 14)
    rng = np.random.default_rng(3)
    s = full_env.reset()
    steps = 100_000
    for g in range(steps):
        t = g % 30
        if t == 0:
            s = full_env.reset()
        a = int(rng.integers(96)) if rng.random() < 0.3 else \
            int(np.argmax(forward(agent.net, encode_state(s))))
        s2, r, _ = full_env.step(s, a, rng)
        mem.push(Transition(encode_state(s), a, r, encode_state(s2), t == 29))
        s = s2
        if len(mem) >= 1000:
            agent.after_step(g, mem, rng)
    assert agent.net.is_finite() and agent.target.is_finite()


# ------------------------------------------------------------------ tabular

def test_q_learning_examples():
    t = QTable(4, 0.1, 0.99)
    assert q_learning_update(t, 0, 1, -8.0, 1) == pytest.approx(-0.8)
    frozen = QTable(4, 0.0, 0.99)
    q_learning_update(frozen, 0, 1, -8.0, 1)
    assert frozen.get(0, 1) == 0.0
    one = QTable(4, 1.0, 0.99)
    assert q_learning_update(one, 0, 2, -5.0, 9) == -5.0
    assert QTable(3).get(123, 2) == 0.0


def test_q_learning_fixed_point():
    t = QTable(1, 0.5, 0.9)
    for _ in range(2000):
        q_learning_update(t, 0, 0, -2.0, 0)
    assert t.get(0, 0) == pytest.approx(-20.0, abs=1e-6)


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    net = QNetwork.initialize(DIMS, rng)
    opt = AdamState.for_network(net)
    adam_step(net, [rng.normal(size=p.shape) for p in net.params()], opt)
    path = tmp_path / "ck.json"
    save_weights(path, net, opt, "abc")
    ck = load_weights(path)
    assert ck.fingerprint == "abc" and ck.adam.step_count == 1
    xs = rng.random((100, 14))
    assert np.array_equal(forward(ck.net, xs), forward(net, xs))
    assert all(np.array_equal(a, b) for a, b in zip(ck.adam.v, opt.v))


def test_checkpoint_errors(tmp_path):
    net = QNetwork.initialize(DIMS, np.random.default_rng(0))
    path = tmp_path / "ck.json"
    save_weights(path, net)
    text = path.read_text()
    bad = tmp_path / "trunc.json"
    bad.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_weights(bad)
    doc = json.loads(text)
    doc["version"] = 99
    bad.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_weights(bad)
    doc["version"] = 1
    doc["weights"][1] = doc["weights"][1][:-1]
    bad.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="shape"):
        load_weights(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(CheckpointError):
        load_weights(bad)
