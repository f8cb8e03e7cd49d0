import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dessmarl.agent import AgentConfig, Batch, DdpgAgent, ReplayBuffer, TransitionRecord, make_batch
from dessmarl.environment import Observation, reference_units

DT = 1 / 60
UNIT = reference_units()[0]  # 700 kWh, +-180 kW


def make_agent(seed=0, obs_dim=7, **kw):
    return DdpgAgent(0, UNIT, obs_dim, DT, AgentConfig(**kw), np.random.default_rng(seed))


def random_batch(rng, m=16, obs_dim=7):
    obs = np.empty((m, obs_dim))
    obs[:, [0, *range(2, obs_dim - 1)]] = rng.uniform(0.2, 0.8, (m, obs_dim - 2))
    obs[:, [1, -1]] = rng.uniform(-20, 20, (m, 2))
    nxt = obs + rng.normal(0, 0.01, obs.shape)
    return Batch(obs, rng.uniform(-150, 150, m), rng.normal(-0.5, 0.2, m), nxt)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def fd(f, theta, h=1e-6):
    base = theta.copy()
    g = np.empty_like(base)
    for k in range(base.size):
        theta[k] = base[k] + h
        fp = f()
        theta[k] = base[k] - h
        fm = f()
        theta[k] = base[k]
        g[k] = (fp - fm) / (2 * h)
    return g


OBS = np.array([0.5, 3.0, 0.4, 0.6, 0.55, 0.5, 3.0])


def test_select_action_midpoint_when_final_layer_zero():
    a = make_agent()
    a.actor.W[-1][...] = 0.0
    assert a.select_action(OBS, (-100.0, 200.0)) == pytest.approx(50.0)


def test_select_action_uses_soc_bounds_by_default():
    a = make_agent()
    a.actor.W[-1][...] = 0.0
    lo, hi = a.bounds(OBS)
    assert a.select_action(OBS) == pytest.approx(0.5 * (lo + hi))
    assert (lo, hi) == (-180.0, 180.0)


def test_bounds_near_soc_limits():
    a = make_agent()
    o = OBS.copy()
    o[0] = 0.1
    lo, hi = a.bounds(o)
    assert hi == 0.0 and lo == -180.0


def test_select_action_deterministic_without_noise():
    a = make_agent()
    assert a.select_action(OBS) == a.select_action(OBS)
    obs = Observation(0.5, 3.0, np.array([0.4, 0.6, 0.55]), 0.5, 3.0)
    assert a.select_action(obs) == a.select_action(OBS)


def test_exploration_noise_statistics():
    a = make_agent(noise_sigma_kw=3.0)
    clean = a.select_action(OBS)
    rng = np.random.default_rng(1)
    draws = np.array([a.select_action(OBS, explore=True, rng=rng) for _ in range(10_000)]) - clean
    assert abs(draws.mean()) < 5 * 3 / np.sqrt(10_000)
    assert draws.std() == pytest.approx(3.0, rel=0.05)


def test_noise_decay():
    a = make_agent(noise_sigma_kw=5.0, noise_decay=0.5)
    a.decay_noise()
    a.decay_noise()
    assert a.noise_sigma_kw == 1.25


def test_td_target_gamma_zero_is_reward():
    a = make_agent(gamma=0.0)
    r = np.array([-1.0, 0.5])
    np.testing.assert_array_equal(a.td_target(r, np.stack([OBS, OBS])), r)


def test_td_target_zero_target_critic():
    a = make_agent()
    a.target_critic.theta[:] = 0.0
    np.testing.assert_array_equal(a.td_target(np.array([2.0]), OBS[None]), [2.0])


def test_td_target_constant_critic():
    a = make_agent()
    a.target_critic.theta[:] = 0.0
    a.target_critic.b[-1][...] = 1.0
    assert a.td_target(np.array([2.0]), OBS[None])[0] == pytest.approx(2.0 + 0.99 * 1.0)


def test_critic_loss_matches_hand_accumulation():
    rng = np.random.default_rng(2)
    a = make_agent(seed=3)
    b = random_batch(rng)
    y = rng.normal(size=len(b))
    loss, _ = a.critic_loss_grad(b, y)
    total = 0.0
    for k in range(len(b)):
        q = float(a.critic.forward(a.critic_input(b.obs[k], b.action[k]))[0])
        total += (q - y[k]) ** 2
    assert loss == pytest.approx(total / len(b), rel=1e-12)


def test_critic_updates_reduce_fixed_target_loss():
    rng = np.random.default_rng(4)
    a = make_agent(seed=5)
    b = random_batch(rng, m=32)
    y = rng.normal(-1.0, 0.3, len(b))
    first, _ = a.critic_loss_grad(b, y)
    for _ in range(200):
        _, g = a.critic_loss_grad(b, y)
        a.critic_opt.step(a.critic, g)
    last, _ = a.critic_loss_grad(b, y)
    assert last < 0.1 * first


def test_actor_grad_zero_under_constant_critic():
    a = make_agent()
    a.critic.theta[:] = 0.0
    a.critic.b[-1][...] = 4.0
    _, g = a.actor_objective_grad(random_batch(np.random.default_rng(0)))
    assert not g.any()


def test_actor_follows_linear_critic():
    # Q decreasing in the scaled action input: the actor should drift to its lower bound
    a = make_agent(seed=1, lr=1e-3)
    a.critic.theta[:] = 0.0
    a.critic.W[0][0, -1] = 1.0
    a.critic.b[0][0] = 10.0
    a.critic.W[1][0, 0] = 1.0
    a.critic.W[2][0, 0] = -1.0
    b = random_batch(np.random.default_rng(1))
    lo, hi = a.bounds(b.obs)
    before = a.to_power(a.actor.forward(a.scale_obs(b.obs))[:, 0], lo, hi)
    objs = [a.update_actor(b) for _ in range(300)]
    after = a.to_power(a.actor.forward(a.scale_obs(b.obs))[:, 0], lo, hi)
    assert objs[-1] > objs[0]
    assert np.all(after < before)
    assert np.all(after - lo < 0.05 * (hi - lo))


class QuadraticCritic:
    """Critic double with Q(o, a) = -(a - 3)^2, ``a`` in kW."""

    def __init__(self, p_max):
        self.p_max = p_max

    def forward(self, x, cache=False):
        a = x[:, -1] * self.p_max
        q = -((a - 3.0) ** 2)[:, None]
        return (q, x) if cache else q

    def backward(self, x, upstream):
        g = np.zeros_like(x)
        g[:, -1] = upstream[:, 0] * -2.0 * (x[:, -1] * self.p_max - 3.0) * self.p_max
        return None, g


def test_actor_ascends_quadratic_critic():
    a = make_agent(seed=1, lr=1e-3)
    a.critic = QuadraticCritic(UNIT.p_max_kw)
    b = random_batch(np.random.default_rng(1))
    lo, hi = a.bounds(b.obs)

    def policy():
        return a.to_power(a.actor.forward(a.scale_obs(b.obs))[:, 0], lo, hi)

    start = np.abs(policy() - 3.0).max()
    for _ in range(500):
        a.update_actor(b)
    assert np.abs(policy() - 3.0).max() < 0.1 * max(start, 1.0)


@pytest.mark.parametrize("seed", range(4))
def test_actor_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    a = make_agent(seed=seed, hidden=(8, 8), hidden_activation="tanh", actor_final_scale=0.5)
    b = random_batch(rng)
    _, g = a.actor_objective_grad(b)
    num = fd(lambda: a.actor_objective_grad(b)[0], a.actor.theta)
    assert rel_err(g, num) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_critic_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    a = make_agent(seed=seed, hidden=(8, 8), hidden_activation="tanh")
    b = random_batch(rng)
    y = a.td_target(b.reward, b.next_obs)
    _, g = a.critic_loss_grad(b, y)
    num = fd(lambda: a.critic_loss_grad(b, y)[0], a.critic.theta)
    assert rel_err(g, num) < 1e-4


@pytest.mark.parametrize("tau", [1.0, 0.5])
def test_soft_update(tau):
    a = make_agent(tau=tau)
    a.actor.theta[:] = 2.0
    a.target_actor.theta[:] = 4.0
    a.soft_update()
    np.testing.assert_allclose(a.target_actor.theta, tau * 2.0 + (1 - tau) * 4.0)


def test_soft_update_tiny_tau_barely_moves():
    a = make_agent(tau=1e-9)
    before = a.target_critic.theta.copy()
    a.critic.theta += 1.0
    a.soft_update()
    np.testing.assert_allclose(a.target_critic.theta, before, atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(tau=0.0)
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.0)
    with pytest.raises(ValueError):
        DdpgAgent(0, UNIT, 3, DT)


def test_replay_buffer_fifo_eviction():
    buf = ReplayBuffer(3, 2)
    for k in range(5):
        buf.push(TransitionRecord(np.full(2, k), float(k), -k, np.full(2, k + 1)))
    assert len(buf) == 3
    assert [r.action_kw for r in buf.records] == [2.0, 3.0, 4.0]


def test_replay_sample_distinct_and_guarded():
    buf = ReplayBuffer(100, 1)
    for k in range(50):
        buf.push_arrays([k], k, 0.0, [k])
    b = buf.sample(50, np.random.default_rng(0))
    assert sorted(b.action.tolist()) == list(range(50))
    with pytest.raises(ValueError):
        buf.sample(51, np.random.default_rng(0))


def test_replay_sampling_uniform():
    buf = ReplayBuffer(10, 1)
    for k in range(10):
        buf.push_arrays([k], k, 0.0, [k])
    rng = np.random.default_rng(3)
    counts = np.zeros(10)
    for _ in range(4000):
        counts[buf.sample(2, rng).action.astype(int)] += 1
    expected = 4000 * 2 / 10
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert chi2 < 27.9  # 99.9% quantile, 9 dof


def test_learn_touches_only_own_networks():
    a, b = make_agent(seed=1, learning_starts=64), make_agent(seed=2, learning_starts=64)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, m=64)
    for k in range(64):
        a.buffer.push_arrays(batch.obs[k], batch.action[k], batch.reward[k], batch.next_obs[k])
    before_a = [n.theta.copy() for n in a.networks()]
    before_b = [n.theta.copy() for n in b.networks()]
    assert a.learn() is not None and b.learn() is None
    assert all(not np.array_equal(x, n.theta) for x, n in zip(before_a, a.networks()))
    assert all(np.array_equal(x, n.theta) for x, n in zip(before_b, b.networks()))


def test_make_batch():
    recs = [TransitionRecord(np.ones(4) * k, k, -1.0, np.zeros(4)) for k in range(3)]
    b = make_batch(recs)
    assert b.obs.shape == (3, 4) and b.action.tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        make_batch([])


def test_save_load_roundtrip_and_mismatch(tmp_path):
    a = make_agent(seed=4)
    a.save(tmp_path / "a.dmrl")
    b = make_agent(seed=9)
    b.load(tmp_path / "a.dmrl")
    assert all(x.theta.tobytes() == y.theta.tobytes() for x, y in zip(a.networks(), b.networks()))
    c = DdpgAgent(3, UNIT, 6, DT)
    with pytest.raises(ValueError, match="agent 3"):
        c.load(tmp_path / "a.dmrl")


@settings(max_examples=40, deadline=None)
@given(st.floats(-1, 1), st.floats(-500, 0), st.floats(0, 500))
def test_to_power_maps_interval(u, lo, hi):
    p = DdpgAgent.to_power(u, lo, hi)
    assert lo - 1e-9 <= p <= hi + 1e-9
