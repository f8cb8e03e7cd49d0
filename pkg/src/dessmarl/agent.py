"""
Per-unit DDPG learner: replay memory, exploration, TD targets, critic and
actor updates and soft target tracking.

Each agent only ever sees its own observation vector, its own executed
power and the consensus-averaged reward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .environment import EsuParams, Observation
from .neural import MLP, Adam, read_networks, write_networks


@dataclass(frozen=True)
class AgentConfig:
    """Learning defaults shared by every agent.

    ``deviation_gain`` scales SoC deviations from the estimated mean before
    they enter the networks, so a 0.05 deviation reads as 1. ``level_gain``
    and ``demand_gain`` weight the estimated mean SoC and the demand inputs;
    both default to 0 so the policy depends on relative SoC only and
    carries over to SoC levels and demand shapes it never trained on.
    ``critic_lr`` falls back to ``lr`` when ``None``.
    """

    lr: float = 1e-4
    critic_lr: Optional[float] = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_capacity: int = 30000
    noise_sigma_kw: float = 5.0
    noise_decay: float = 0.999
    learning_starts: int = 1000
    hidden: tuple[int, ...] = (64, 64)
    hidden_activation: str = "relu"
    actor_final_scale: float = 3e-3
    deviation_gain: float = 20.0
    level_gain: float = 0.0
    demand_gain: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch_size and buffer_capacity must be positive")
        if self.noise_sigma_kw < 0 or not 0 < self.noise_decay <= 1:
            raise ValueError("noise_sigma_kw must be >= 0 and noise_decay in (0, 1]")
        if self.learning_starts < 0:
            raise ValueError("learning_starts must be >= 0")


@dataclass(frozen=True)
class TransitionRecord:
    observation: np.ndarray
    action_kw: float
    avg_reward: float
    next_observation: np.ndarray

    def __post_init__(self):
        for name in ("observation", "next_observation"):
            v = getattr(self, name)
            if isinstance(v, Observation):
                object.__setattr__(self, name, v.as_vector())
            else:
                object.__setattr__(self, name, np.asarray(v, dtype=float))


class Batch(NamedTuple):
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions backed by ring arrays."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self._obs = np.empty((capacity, obs_dim))
        self._next = np.empty((capacity, obs_dim))
        self._act = np.empty(capacity)
        self._rew = np.empty(capacity)
        self._head = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, record: TransitionRecord) -> None:
        self.push_arrays(record.observation, record.action_kw, record.avg_reward, record.next_observation)

    def push_arrays(self, obs, action_kw, avg_reward, next_obs) -> None:
        i = self._head
        self._obs[i] = obs
        self._next[i] = next_obs
        self._act[i] = action_kw
        self._rew[i] = avg_reward
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = self._head - self._size
        return (np.arange(self._size) + start) % self.capacity

    @property
    def records(self) -> list[TransitionRecord]:
        """Stored transitions, oldest first."""
        return [TransitionRecord(self._obs[i].copy(), float(self._act[i]), float(self._rew[i]), self._next[i].copy())
                for i in self._order()]

    def sample_indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if self._size < k:
            raise ValueError(f"buffer holds {self._size} records, cannot sample {k}")
        return rng.choice(self._size, size=k, replace=False)

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        """Uniform draw of ``k`` distinct records."""
        idx = self._order()[self.sample_indices(k, rng)]
        return Batch(self._obs[idx], self._act[idx], self._rew[idx], self._next[idx])


def make_batch(records: Sequence[TransitionRecord]) -> Batch:
    if not records:
        raise ValueError("empty batch")
    return Batch(np.stack([r.observation for r in records]),
                 np.array([r.action_kw for r in records], dtype=float),
                 np.array([r.avg_reward for r in records], dtype=float),
                 np.stack([r.next_observation for r in records]))


class DdpgAgent:
    """
    One storage unit's learner.

    Observation vectors follow the layout ``[own_soc, own_demand,
    neighbor_socs..., est_mean_soc, est_mean_demand]``. Network inputs are
    mapped affinely: own and neighbour SoCs become deviations from the
    estimated mean scaled by ``deviation_gain``, the mean itself maps the SoC
    band to [-1, 1], and demands and powers are divided by the plate rating.
    """

    def __init__(self, agent_id: int, params: EsuParams, obs_dim: int, dt_hours: float,
                 cfg: AgentConfig = AgentConfig(), rng: Optional[np.random.Generator] = None):
        if obs_dim < 4:
            raise ValueError("observation needs at least own soc/demand and two estimates")
        self.agent_id = agent_id
        self.params = params
        self.obs_dim = obs_dim
        self.dt_hours = dt_hours
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng()
        h = list(cfg.hidden)
        self.actor = MLP([obs_dim, *h, 1], cfg.hidden_activation, "tanh", self.rng, cfg.actor_final_scale)
        self.critic = MLP([obs_dim + 1, *h, 1], cfg.hidden_activation, "identity", self.rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.theta.size, cfg.lr)
        self.critic_opt = Adam(self.critic.theta.size, cfg.critic_lr or cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim)
        self.noise_sigma_kw = cfg.noise_sigma_kw
        self.tau, self.gamma, self.batch_size = cfg.tau, cfg.gamma, cfg.batch_size

        # affine input map: SoC features relative to the estimated mean SoC
        mid = 0.5 * (params.soc_min + params.soc_max)
        half = 0.5 * (params.soc_max - params.soc_min)
        m = obs_dim - 2
        k = cfg.deviation_gain
        A = np.zeros((obs_dim, obs_dim))
        for j in [0, *range(2, m)]:
            A[j, j] = k
            A[j, m] = -k
        A[1, 1] = A[-1, -1] = cfg.demand_gain / params.p_max_kw
        A[m, m] = cfg.level_gain / half
        self._A = A
        self._b = np.zeros(obs_dim)
        self._b[m] = -cfg.level_gain * mid / half

    # -- feature maps --------------------------------------------------------

    def scale_obs(self, obs) -> np.ndarray:
        return np.asarray(obs, dtype=float) @ self._A.T + self._b

    def bounds(self, obs) -> tuple:
        """SoC-dependent power bounds from the own-SoC entry (scalar or batch)."""
        p = self.params
        soc = np.asarray(obs, dtype=float)[..., 0]
        upper = np.minimum(p.efficiency * (soc - p.soc_min) * p.capacity_kwh / self.dt_hours, p.p_max_kw)
        lower = np.maximum((soc - p.soc_max) * p.capacity_kwh / (p.efficiency * self.dt_hours), p.p_min_kw)
        return lower, upper

    @staticmethod
    def to_power(u, lower, upper):
        """Map an actor output in (-1, 1) affinely onto (lower, upper)."""
        return lower + 0.5 * (u + 1.0) * (upper - lower)

    def critic_input(self, obs, action_kw) -> np.ndarray:
        x = self.scale_obs(obs)
        a = np.asarray(action_kw, dtype=float) / self.params.p_max_kw
        return np.concatenate([x, a[..., None]], axis=-1)

    # -- acting --------------------------------------------------------------

    def _as_vector(self, obs):
        return obs.as_vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=float)

    def select_action(self, obs, bounds: Optional[tuple] = None, explore: bool = False,
                      rng: Optional[np.random.Generator] = None) -> float:
        """
        Deterministic actor output mapped onto ``bounds``, plus Gaussian noise
        of std ``noise_sigma_kw`` when ``explore`` is set. The result may leave
        the bounds; the demand-balance stage brings it back.
        """
        o = self._as_vector(obs)
        lower, upper = bounds if bounds is not None else self.bounds(o)
        u = float(self.actor.forward(self.scale_obs(o))[0])
        p = float(self.to_power(u, lower, upper))
        if explore and self.noise_sigma_kw > 0:
            p += (rng or self.rng).normal(0.0, self.noise_sigma_kw)
        return p

    def decay_noise(self) -> None:
        self.noise_sigma_kw *= self.cfg.noise_decay

    # -- learning ------------------------------------------------------------

    def td_target(self, reward, next_obs) -> np.ndarray:
        """``r + gamma * Q'(o', pi'(o'))`` from target networks; no terminal mask."""
        o2 = np.atleast_2d(np.asarray(next_obs, dtype=float))
        lo, hi = self.bounds(o2)
        u = self.target_actor.forward(self.scale_obs(o2))[:, 0]
        q = self.target_critic.forward(self.critic_input(o2, self.to_power(u, lo, hi)))[:, 0]
        y = np.asarray(reward, dtype=float) + self.gamma * q
        return y

    def critic_loss_grad(self, batch: Batch, y: Optional[np.ndarray] = None):
        """Mean squared TD error and its gradient w.r.t. critic parameters."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        if y is None:
            y = self.td_target(batch.reward, batch.next_obs)
        q, trace = self.critic.forward(self.critic_input(batch.obs, batch.action), cache=True)
        err = q[:, 0] - y
        m = len(err)
        grad, _ = self.critic.backward(trace, (2.0 / m) * err[:, None])
        return float(np.mean(err ** 2)), grad

    def actor_objective_grad(self, batch: Batch):
        """Mean ``Q(o, pi(o))`` and its gradient w.r.t. actor parameters."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        obs = batch.obs
        lo, hi = self.bounds(obs)
        u, a_trace = self.actor.forward(self.scale_obs(obs), cache=True)
        p = self.to_power(u[:, 0], lo, hi)
        q, c_trace = self.critic.forward(self.critic_input(obs, p), cache=True)
        m = q.shape[0]
        _, dq_dx = self.critic.backward(c_trace, np.full((m, 1), 1.0 / m))
        # critic action input is p / p_max and p = lo + (u + 1)(hi - lo) / 2
        du = dq_dx[:, -1] * 0.5 * (hi - lo) / self.params.p_max_kw
        grad, _ = self.actor.backward(a_trace, du[:, None])
        return float(np.mean(q)), grad

    def update_critic(self, batch: Batch) -> float:
        """One Adam step on the TD loss; returns the pre-step loss."""
        loss, grad = self.critic_loss_grad(batch)
        self.critic_opt.step(self.critic, grad)
        return loss

    def update_actor(self, batch: Batch) -> float:
        """One ascent step on mean Q(o, pi(o)); returns the pre-step objective."""
        obj, grad = self.actor_objective_grad(batch)
        self.actor_opt.step(self.actor, -grad)
        return obj

    def soft_update(self) -> None:
        tau = self.tau
        for target, online in ((self.target_actor, self.actor), (self.target_critic, self.critic)):
            target.theta *= 1.0 - tau
            target.theta += tau * online.theta

    def ready(self) -> bool:
        return len(self.buffer) >= max(self.cfg.learning_starts, self.batch_size)

    def learn(self) -> Optional[tuple[float, float]]:
        """Sample a mini-batch and run critic, actor and target updates."""
        if not self.ready():
            return None
        batch = self.buffer.sample(self.batch_size, self.rng)
        loss = self.update_critic(batch)
        obj = self.update_actor(batch)
        self.soft_update()
        return loss, obj

    # -- persistence -----------------------------------------------------------

    def networks(self) -> list[MLP]:
        return [self.actor, self.critic, self.target_actor, self.target_critic]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            write_networks(fh, self.networks())

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            nets = read_networks(fh)
        if len(nets) != 4:
            raise ValueError(f"agent {self.agent_id}: checkpoint holds {len(nets)} networks, expected 4")
        for mine, theirs in zip(self.networks(), nets):
            if not mine.same_shape(theirs):
                raise ValueError(
                    f"agent {self.agent_id}: checkpoint dims {theirs.layer_dims} do not match {mine.layer_dims}"
                )
            mine.set_theta(theirs.theta)
