"""
End-to-end training and evaluation loops.

One training step runs, in order: consensus on local demand and SoC,
observation assembly, action proposal, demand balance, environment step,
consensus on local rewards, experience storage and per-agent learning.
Every cross-agent quantity an agent uses comes out of a consensus run or a
neighbor read along a graph edge; :func:`decentralization_audit` checks
this on a recorded access trace.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .agent import AgentConfig, DdpgAgent
from .consensus import ConsensusConfig, check_convergence, metropolis_weights, run_consensus
from .demand_balance import CdbConfig, balance, proportional_shares
from .environment import (RewardWeights, Scenario, UnitBank, build_observation, env_step,
                          observation_dim, reset)

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "mean_reward", "soc_variance_end", "max_mismatch_kw",
                  "mean_cdb_rounds", "noise_sigma", "wall_ms")

# stream ids for the seed lattice
_STREAM = {"env": 0, "cdb": 1, "init": 2, "agent": 3, "probe": 4}


def derive_rng(seed: int, stream: str, agent: Optional[int] = None) -> np.random.Generator:
    """Independent generator for ``(seed, stream[, agent])``.

    Agent streams do not depend on how many agents exist.
    """
    key = (_STREAM[stream],) if agent is None else (_STREAM[stream], int(agent))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 300
    reward: RewardWeights = RewardWeights()
    consensus: ConsensusConfig = ConsensusConfig()
    cdb: CdbConfig = CdbConfig()
    agent: AgentConfig = AgentConfig()
    seed: int = 0
    metrics_path: Optional[str] = None
    timing: bool = False
    workers: int = 1
    max_unconverged_fraction: float = 0.0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def config_hash(obj) -> str:
    """Stable short hash of a (nested) dataclass or plain mapping."""
    data = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    blob = json.dumps(data, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (frozenset, set)):
        return sorted(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    return str(o)


def run_hash(cfg: TrainConfig, scenario: Scenario) -> str:
    """Hash of everything that affects results; output paths, timing and
    worker count are left out."""
    core = replace(cfg, metrics_path=None, timing=False, workers=1)
    return config_hash({"train": asdict(core), "scenario": scenario_dict(scenario)})


def scenario_dict(scenario: Scenario) -> dict:
    return {
        "units": [asdict(u) for u in scenario.units],
        "topology": {str(k): v for k, v in scenario.topology.adjacency().items()},
        "demand": asdict(scenario.demand),
        "initial_soc": asdict(scenario.initial_soc),
        "horizon": scenario.horizon,
        "dt_hours": scenario.dt_hours,
    }


# -- decentralization audit ---------------------------------------------------

class AccessTrace:
    """Log of every datum an agent consumed: ``(step, agent, kind, source, item)``.

    ``kind`` is ``own``, ``neighbor`` or ``consensus``; anything else counts
    as a global read.
    """

    def __init__(self):
        self.entries: list[tuple[int, int, str, int, str]] = []

    def record(self, step: int, agent: int, kind: str, source: int, item: str) -> None:
        self.entries.append((int(step), int(agent), kind, int(source), item))

    def __len__(self):
        return len(self.entries)


@dataclass
class AuditReport:
    checked: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def decentralization_audit(trace: AccessTrace, topology) -> AuditReport:
    """Flag every access that is neither own data, a neighbor read along an
    edge, nor the agent's own consensus output."""
    report = AuditReport(len(trace))
    for entry in trace.entries:
        step, agent, kind, source, item = entry
        if kind == "own" and source == agent:
            continue
        if kind == "neighbor" and topology.has_edge(agent, source):
            continue
        if kind == "consensus" and source == agent:
            continue
        report.violations.append(entry)
    return report


# -- metrics --------------------------------------------------------------------

@dataclass
class EpisodeMetrics:
    episode: int
    mean_reward: float
    soc_variance_end: float
    max_mismatch_kw: float
    mean_cdb_rounds: float
    noise_sigma: float
    wall_ms: float = 0.0

    def row(self) -> list[str]:
        return [str(self.episode), repr(self.mean_reward), repr(self.soc_variance_end),
                repr(self.max_mismatch_kw), repr(self.mean_cdb_rounds), repr(self.noise_sigma),
                repr(round(self.wall_ms, 3))]


def metrics_csv(metrics: Sequence[EpisodeMetrics], cfg_hash: str, seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# dessmarl {__version__} config_hash={cfg_hash} seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


@dataclass
class TrainResult:
    agents: list
    metrics: list
    config_hash: str
    seed: int
    unconverged_steps: int = 0
    total_steps: int = 0
    max_reward_estimate_error: float = 0.0
    consensus_iterations: int = 0

    def metrics_csv(self) -> str:
        return metrics_csv(self.metrics, self.config_hash, self.seed)

    def rewards(self) -> np.ndarray:
        return np.array([m.mean_reward for m in self.metrics])

    def variances(self) -> np.ndarray:
        return np.array([m.soc_variance_end for m in self.metrics])


# -- setup ----------------------------------------------------------------------

def make_agents(scenario: Scenario, cfg: AgentConfig, seed: int) -> list[DdpgAgent]:
    agents = []
    for i, unit in enumerate(scenario.units):
        dim = observation_dim(scenario.topology, i)
        init_rng = derive_rng(seed, "init", i)
        agent = DdpgAgent(i, unit, dim, scenario.dt_hours, cfg, rng=init_rng)
        agent.rng = derive_rng(seed, "agent", i)
        agents.append(agent)
    return agents


class _Context:
    def __init__(self, scenario: Scenario, consensus: ConsensusConfig):
        self.scenario = scenario
        self.bank = UnitBank(scenario.units)
        self.W = metropolis_weights(scenario.topology)
        self.ccfg = consensus
        check_convergence(self.W, consensus)
        self.consensus_iterations = 0

    def estimates(self, state):
        """Consensus estimates of mean demand and mean SoC for every agent."""
        res = run_consensus(np.column_stack([state.local_demand_kw, state.soc]), self.W, self.ccfg)
        if not res.converged:
            log.warning("consensus on demand/soc did not converge at step %d", state.time_step)
        self.consensus_iterations += res.iterations
        return res.estimates[:, 0], res.estimates[:, 1]

    def observations(self, state, d_hat, e_hat, trace=None):
        topo = self.scenario.topology
        return [build_observation(state, i, topo, e_hat[i], d_hat[i], trace).as_vector()
                for i in range(self.scenario.n)]


# -- training -------------------------------------------------------------------

def train(cfg: TrainConfig, scenario: Scenario, trace: Optional[AccessTrace] = None,
          agents: Optional[list] = None, on_episode: Optional[Callable] = None) -> TrainResult:
    """
    Decentralized actor-critic training over ``cfg.episodes`` episodes.

    Returns the trained agents and one :class:`EpisodeMetrics` per episode.
    If ``cfg.metrics_path`` is set the metrics CSV is written there.
    """
    ctx = _Context(scenario, cfg.consensus)
    n, dt, eps = scenario.n, scenario.dt_hours, cfg.cdb.epsilon_kw
    if agents is None:
        agents = make_agents(scenario, cfg.agent, cfg.seed)
    if len(agents) != n:
        raise ValueError(f"{len(agents)} agents for {n} units")
    env_rng = derive_rng(cfg.seed, "env")
    cdb_rng = derive_rng(cfg.seed, "cdb")
    chash = run_hash(cfg, scenario)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    result = TrainResult(agents, [], chash, cfg.seed)

    try:
        for ep in range(cfg.episodes):
            t0 = time.perf_counter()
            state = reset(scenario, env_rng)
            d_hat, e_hat = ctx.estimates(state)
            obs = ctx.observations(state, d_hat, e_hat, trace)
            reward_sum, max_gap, rounds = 0.0, 0.0, 0
            for t in range(scenario.horizon):
                lower, upper = ctx.bank.power_bounds(state.soc, dt)
                proposals = np.array([a.select_action(obs[i], (lower[i], upper[i]), explore=True)
                                      for i, a in enumerate(agents)])
                out = balance(proposals, state.local_demand_kw, lower, upper, ctx.W, cfg.cdb, ctx.ccfg, cdb_rng)
                ctx.consensus_iterations += out.consensus_iterations
                rounds += out.rounds_used
                if not out.converged:
                    result.unconverged_steps += 1
                    log.warning("episode %d step %d: demand balance unconverged, residual %.4g kW",
                                ep, t, out.residual_mean_kw)
                gap = abs(out.final_powers_kw.sum() - state.local_demand_kw.sum())
                max_gap = max(max_gap, gap)
                nxt, r = env_step(state, out.final_powers_kw, scenario.demand, ctx.bank, cfg.reward, dt,
                                  e_hat, balance_tol=n * eps if out.converged else None)
                rres = run_consensus(r, ctx.W, ctx.ccfg)
                ctx.consensus_iterations += rres.iterations
                r_hat = rres.estimates
                result.max_reward_estimate_error = max(result.max_reward_estimate_error,
                                                       float(np.max(np.abs(r_hat - r.mean()))))
                if trace is not None:
                    for i in range(n):
                        trace.record(t, i, "consensus", i, "mean_reward")
                        trace.record(t, i, "own", i, "executed_power")
                d_hat, e_hat = ctx.estimates(nxt)
                nobs = ctx.observations(nxt, d_hat, e_hat, trace)
                for i, a in enumerate(agents):
                    a.buffer.push_arrays(obs[i], out.final_powers_kw[i], r_hat[i], nobs[i])
                if pool is None:
                    for a in agents:
                        a.learn()
                else:
                    list(pool.map(lambda a: a.learn(), agents))
                reward_sum += float(r.mean())
                state, obs = nxt, nobs
            for a in agents:
                a.decay_noise()
            wall = (time.perf_counter() - t0) * 1000 if cfg.timing else 0.0
            m = EpisodeMetrics(ep, reward_sum / scenario.horizon, float(np.var(state.soc)), max_gap,
                               rounds / scenario.horizon, agents[0].noise_sigma_kw, wall)
            result.metrics.append(m)
            result.total_steps += scenario.horizon
            if on_episode is not None:
                on_episode(m)
    finally:
        if pool is not None:
            pool.shutdown()
    result.consensus_iterations = ctx.consensus_iterations
    if cfg.metrics_path:
        Path(cfg.metrics_path).write_text(result.metrics_csv())
    return result


# -- evaluation -------------------------------------------------------------------

@dataclass
class Trajectory:
    soc: np.ndarray          # (T+1, N)
    powers: np.ndarray       # (T, N)
    demand_total: np.ndarray  # (T,)
    cdb_rounds: np.ndarray   # (T,)
    converged: np.ndarray    # (T,)
    rewards: np.ndarray      # (T, N)

    @property
    def variance(self) -> np.ndarray:
        return self.soc.var(axis=1)

    @property
    def power_total(self) -> np.ndarray:
        return self.powers.sum(axis=1)

    @property
    def mismatch(self) -> np.ndarray:
        return np.abs(self.power_total - self.demand_total)

    def to_csv(self, cfg_hash: str = "", seed: int = 0) -> str:
        """One row per executed step; SoC columns hold the post-step SoC."""
        buf = io.StringIO()
        buf.write(f"# dessmarl {__version__} config_hash={cfg_hash} seed={seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        n = self.soc.shape[1]
        w.writerow(["step", "demand_total", "power_total", *[f"soc_{i + 1}" for i in range(n)], "variance"])
        var = self.variance
        for t in range(len(self.demand_total)):
            w.writerow([t, repr(float(self.demand_total[t])), repr(float(self.power_total[t])),
                        *[repr(float(s)) for s in self.soc[t + 1]], repr(float(var[t + 1]))])
        return buf.getvalue()


def _rollout(scenario: Scenario, propose: Callable, cfg: TrainConfig, seed: int) -> Trajectory:
    ctx = _Context(scenario, cfg.consensus)
    n, dt, eps = scenario.n, scenario.dt_hours, cfg.cdb.epsilon_kw
    env_rng = derive_rng(seed, "env")
    cdb_rng = derive_rng(seed, "cdb")
    state = reset(scenario, env_rng)
    T = scenario.horizon
    soc = np.empty((T + 1, n))
    soc[0] = state.soc
    powers, rewards = np.empty((T, n)), np.empty((T, n))
    demand, rounds, conv = np.empty(T), np.empty(T, dtype=int), np.empty(T, dtype=bool)
    for t in range(T):
        d_hat, e_hat = ctx.estimates(state)
        lower, upper = ctx.bank.power_bounds(state.soc, dt)
        proposals = propose(ctx, state, d_hat, e_hat, lower, upper)
        out = balance(proposals, state.local_demand_kw, lower, upper, ctx.W, cfg.cdb, ctx.ccfg, cdb_rng)
        demand[t] = state.local_demand_kw.sum()
        state, r = env_step(state, out.final_powers_kw, scenario.demand, ctx.bank, cfg.reward, dt, e_hat,
                            balance_tol=n * eps if out.converged else None)
        soc[t + 1], powers[t], rewards[t] = state.soc, out.final_powers_kw, r
        rounds[t], conv[t] = out.rounds_used, out.converged
    return Trajectory(soc, powers, demand, rounds, conv, rewards)


def evaluate(agents: Sequence[DdpgAgent], scenario: Scenario, cfg: TrainConfig = TrainConfig(),
             seed: Optional[int] = None) -> Trajectory:
    """Greedy (noise-free) rollout of trained agents with demand balance active."""
    if len(agents) != scenario.n:
        raise ValueError(f"{len(agents)} agents for {scenario.n} units")
    for i, a in enumerate(agents):
        dim = observation_dim(scenario.topology, i)
        if a.obs_dim != dim:
            raise ValueError(f"agent {i}: network expects observation dim {a.obs_dim}, scenario gives {dim}")

    def propose(ctx, state, d_hat, e_hat, lower, upper):
        obs = ctx.observations(state, d_hat, e_hat)
        return np.array([a.select_action(obs[i], (lower[i], upper[i]), explore=False)
                         for i, a in enumerate(agents)])

    return _rollout(scenario, propose, cfg, cfg.seed if seed is None else seed)


def run_baseline(scenario: Scenario, cfg: TrainConfig = TrainConfig(), seed: Optional[int] = None) -> Trajectory:
    """Capacity-proportional shares passed through the demand-balance loop."""
    def propose(ctx, state, d_hat, e_hat, lower, upper):
        return proportional_shares(state.local_demand_kw.sum(), ctx.bank.capacity)

    return _rollout(scenario, propose, cfg, cfg.seed if seed is None else seed)


def pinned_units(traj: Trajectory, scenario: Scenario, band: float = 0.01, tail: float = 0.25) -> list[int]:
    """Units whose SoC stays within ``band`` of its upper limit over the last
    ``tail`` fraction of the trajectory."""
    bank = UnitBank(scenario.units)
    start = int(len(traj.soc) * (1 - tail))
    seg = traj.soc[start:]
    return [i for i in range(scenario.n) if np.all(seg[:, i] >= bank.soc_max[i] - band)]


# -- ablation ------------------------------------------------------------------------

@dataclass
class AblationResult:
    counterfactual: TrainResult
    factual: TrainResult

    def cumulative(self, which: str) -> np.ndarray:
        return np.cumsum(getattr(self, which).rewards())


def ablation_configs(cfg: TrainConfig) -> tuple[TrainConfig, TrainConfig]:
    cf = replace(cfg, cdb=replace(cfg.cdb, drag_mode="counterfactual"), metrics_path=None)
    fa = replace(cfg, cdb=replace(cfg.cdb, drag_mode="factual"), metrics_path=None)
    assert replace(cf, cdb=fa.cdb) == fa, "ablation configs differ beyond drag_mode"
    return cf, fa


def run_ablation(cfg: TrainConfig, scenario: Scenario,
                 counterfactual: Optional[TrainResult] = None) -> AblationResult:
    """Paired runs that differ only in the drag rule.

    A previously computed counterfactual run with the same configuration
    may be passed in to avoid retraining it.
    """
    cf, fa = ablation_configs(cfg)
    if counterfactual is None:
        counterfactual = train(cf, scenario)
    return AblationResult(counterfactual, train(fa, scenario))


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoints(agents: Sequence[DdpgAgent], out_dir, cfg_hash: str, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for a in agents:
        name = f"agent_{a.agent_id}.dmrl"
        a.save(out / name)
        entries.append({"agent_id": a.agent_id, "file": name, "obs_dim": a.obs_dim,
                        "actor_dims": list(a.actor.layer_dims), "critic_dims": list(a.critic.layer_dims)})
    manifest = {"format": "DMRL1", "version": __version__, "config_hash": cfg_hash, "seed": seed,
                "agents": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_checkpoints(ckpt_dir, scenario: Scenario, agent_cfg: AgentConfig = AgentConfig()) -> list[DdpgAgent]:
    d = Path(ckpt_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    entries = sorted(manifest["agents"], key=lambda e: e["agent_id"])
    if len(entries) != scenario.n:
        raise ValueError(f"checkpoint holds {len(entries)} agents, scenario has {scenario.n} units")
    agents = []
    for e in entries:
        i = e["agent_id"]
        dim = observation_dim(scenario.topology, i)
        if e["obs_dim"] != dim:
            raise ValueError(f"agent {i}: checkpoint observation dim {e['obs_dim']} does not match scenario dim {dim}")
        hidden = tuple(e["actor_dims"][1:-1])
        a = DdpgAgent(i, scenario.units[i], dim, scenario.dt_hours, replace(agent_cfg, hidden=hidden))
        a.load(d / e["file"])
        agents.append(a)
    return agents
