"""
Island-mode DESS simulator: SoC dynamics, SoC-dependent power bounds,
throughput degradation cost, demand profiles and local rewards.

Sign convention: positive power discharges a unit into the microgrid,
negative power charges it. Powers are in kW, capacities in kWh, steps in
hours (one minute = 1/60 h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .consensus import GraphTopology

# Soc/power slack absorbed as floating-point rounding rather than reported.
ROUNDING_SLACK = 1e-9


class StateError(ValueError):
    """Raised when a SoC or power leaves its admissible range."""


@dataclass(frozen=True)
class EsuParams:
    """Static description of one energy storage unit.

    The degradation constants are implementation defaults; only capacity,
    power range, SoC range and efficiency come from the reference unit table.
    """

    capacity_kwh: float
    p_min_kw: float
    p_max_kw: float
    soc_min: float = 0.1
    soc_max: float = 0.9
    efficiency: float = 0.99
    degr_b1: float = 1e-4
    degr_b2: float = 0.5
    c_rate: float = 1.0
    install_cost: float = 1000.0
    eol_retained_fraction: float = 0.8

    def __post_init__(self):
        if not self.capacity_kwh > 0:
            raise ValueError(f"capacity_kwh must be positive, got {self.capacity_kwh}")
        if not self.p_min_kw < 0 < self.p_max_kw:
            raise ValueError(f"need p_min < 0 < p_max, got [{self.p_min_kw}, {self.p_max_kw}]")
        if not 0 <= self.soc_min < self.soc_max <= 1:
            raise ValueError(f"need 0 <= soc_min < soc_max <= 1, got [{self.soc_min}, {self.soc_max}]")
        if not 0 < self.efficiency <= 1:
            raise ValueError(f"efficiency must lie in (0, 1], got {self.efficiency}")
        if self.degr_b1 < 0 or self.c_rate < 0 or self.install_cost < 0:
            raise ValueError("degradation constants b1, c_rate, install_cost must be nonnegative")
        if not math.isfinite(self.degr_b2):
            raise ValueError("degr_b2 must be finite")
        if not 0 <= self.eol_retained_fraction < 1:
            raise ValueError(f"eol_retained_fraction must lie in [0, 1), got {self.eol_retained_fraction}")

    @property
    def degradation_cost_per_kwh(self) -> float:
        """Cost of one kWh of throughput."""
        return self.install_cost * self.degr_b1 * math.exp(self.degr_b2 * self.c_rate) / (1.0 - self.eol_retained_fraction)


# Reference fleet: capacity (kWh), symmetric power range (kW); SoC range [0.1, 0.9], efficiency 0.99.
REFERENCE_UNIT_TABLE = (
    (700.0, 180.0),
    (1000.0, 300.0),
    (1200.0, 360.0),
    (1500.0, 480.0),
    (1800.0, 600.0),
)


def reference_units(**overrides) -> list[EsuParams]:
    """The five reference units; keyword overrides apply to every unit."""
    return [EsuParams(capacity_kwh=c, p_min_kw=-p, p_max_kw=p, **overrides) for c, p in REFERENCE_UNIT_TABLE]


class UnitBank:
    """Column view of a list of ``EsuParams`` for vectorized evaluation."""

    def __init__(self, units: Sequence[EsuParams]):
        self.units = tuple(units)
        self.n = len(self.units)
        get = lambda name: np.array([getattr(u, name) for u in self.units], dtype=float)
        self.capacity = get("capacity_kwh")
        self.p_min = get("p_min_kw")
        self.p_max = get("p_max_kw")
        self.soc_min = get("soc_min")
        self.soc_max = get("soc_max")
        self.eta = get("efficiency")
        self.cost_per_kwh = np.array([u.degradation_cost_per_kwh for u in self.units])

    def __len__(self):
        return self.n

    def power_bounds(self, soc: np.ndarray, dt_hours: float) -> tuple[np.ndarray, np.ndarray]:
        soc = np.asarray(soc, dtype=float)
        if np.any(soc < self.soc_min) or np.any(soc > self.soc_max):
            bad = int(np.flatnonzero((soc < self.soc_min) | (soc > self.soc_max))[0])
            raise StateError(f"unit {bad}: soc {soc[bad]!r} outside [{self.soc_min[bad]}, {self.soc_max[bad]}]")
        upper = np.minimum(self.eta * (soc - self.soc_min) * self.capacity / dt_hours, self.p_max)
        lower = np.maximum((soc - self.soc_max) * self.capacity / (self.eta * dt_hours), self.p_min)
        return lower, upper

    def soc_transition(self, soc: np.ndarray, power: np.ndarray, dt_hours: float) -> np.ndarray:
        power = np.asarray(power, dtype=float)
        lower, upper = self.power_bounds(soc, dt_hours)
        bad = (power < lower - ROUNDING_SLACK) | (power > upper + ROUNDING_SLACK)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise StateError(f"unit {i}: power {power[i]!r} kW outside bounds [{lower[i]!r}, {upper[i]!r}]")
        delta = np.where(power > 0, -power * dt_hours / (self.eta * self.capacity),
                         -self.eta * power * dt_hours / self.capacity)
        return np.clip(soc + delta, self.soc_min, self.soc_max)

    def degradation_cost(self, power: np.ndarray, dt_hours: float) -> np.ndarray:
        return self.cost_per_kwh * np.abs(power) * dt_hours


def power_bounds(params: EsuParams, soc: float, dt_hours: float) -> tuple[float, float]:
    """
    Feasible output power for one step, combining the plate rating with the
    energy that can leave or enter before hitting the SoC limits.

    Returns
    -------
    (lower_kw, upper_kw)
        ``lower <= 0 <= upper``; any power inside keeps the next SoC admissible.
    """
    if not params.soc_min <= soc <= params.soc_max:
        raise StateError(f"soc {soc!r} outside [{params.soc_min}, {params.soc_max}]")
    eta, cap = params.efficiency, params.capacity_kwh
    upper = min(eta * (soc - params.soc_min) * cap / dt_hours, params.p_max_kw)
    lower = max((soc - params.soc_max) * cap / (eta * dt_hours), params.p_min_kw)
    return lower, upper


def soc_transition(params: EsuParams, soc: float, power_kw: float, dt_hours: float) -> float:
    """Next SoC after holding ``power_kw`` for one step.

    Discharge draws ``P dt / eta`` from storage; charge stores ``eta |P| dt``.
    """
    lower, upper = power_bounds(params, soc, dt_hours)
    if not lower - ROUNDING_SLACK <= power_kw <= upper + ROUNDING_SLACK:
        raise StateError(f"power {power_kw!r} kW outside bounds [{lower!r}, {upper!r}]")
    cap, eta = params.capacity_kwh, params.efficiency
    if power_kw > 0:
        nxt = soc - power_kw * dt_hours / (eta * cap)
    elif power_kw < 0:
        nxt = soc + eta * (-power_kw) * dt_hours / cap
    else:
        return soc
    return min(max(nxt, params.soc_min), params.soc_max)


def degradation_cost(params: EsuParams, power_kw: float, dt_hours: float) -> float:
    """Throughput degradation cost of one step; even in ``power_kw``."""
    q_loss = params.degr_b1 * math.exp(params.degr_b2 * params.c_rate) * abs(power_kw) * dt_hours
    return params.install_cost * q_loss / (1.0 - params.eol_retained_fraction)


@dataclass(frozen=True)
class DemandProfile:
    """Total net demand (load minus PV) as a function of the step index.

    ``sinusoid``: ``amplitude * sin(t * pi / period_steps)``.
    ``ramp``: linear from ``amplitude`` at t=0 to 0 at ``t = period_steps``,
    then flat at 0 (a negative amplitude gives a charging ramp).
    ``trace``: explicit per-step totals.
    All kinds are multiplied by ``scale``.
    """

    kind: str = "sinusoid"
    amplitude_kw: float = 3.0
    period_steps: int = 720
    trace: Optional[tuple[float, ...]] = None
    split: str = "uniform"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sinusoid", "ramp", "trace"):
            raise ValueError(f"unknown demand kind {self.kind!r}")
        if self.period_steps < 1:
            raise ValueError("period_steps must be positive")
        if self.kind == "trace" and not self.trace:
            raise ValueError("trace demand needs a nonempty trace")
        if self.split != "uniform":
            raise ValueError(f"unknown demand split {self.split!r}")
        if self.trace is not None:
            object.__setattr__(self, "trace", tuple(float(v) for v in self.trace))


def total_demand(profile: DemandProfile, t: int) -> float:
    """Total demand in kW at step ``t``."""
    if profile.kind == "sinusoid":
        d = profile.amplitude_kw * math.sin(t * math.pi / profile.period_steps)
    elif profile.kind == "ramp":
        d = profile.amplitude_kw * (1.0 - t / profile.period_steps) if t < profile.period_steps else 0.0
    else:
        if not 0 <= t < len(profile.trace):
            raise IndexError(f"step {t} beyond demand trace of length {len(profile.trace)}")
        d = profile.trace[t]
    return profile.scale * d


def local_demands(profile: DemandProfile, t: int, n: int) -> np.ndarray:
    return np.full(n, total_demand(profile, t) / n)


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = -200.0
    beta: float = -0.5

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("reward weights must be finite")


def local_reward(weights: RewardWeights, next_soc, est_mean_soc, degr_cost):
    """``alpha * (next_soc - est_mean_soc)**2 + beta * degr_cost``; broadcasts."""
    return weights.alpha * (next_soc - est_mean_soc) ** 2 + weights.beta * degr_cost


@dataclass(frozen=True)
class DessState:
    soc: np.ndarray
    local_demand_kw: np.ndarray
    time_step: int = 0

    def __post_init__(self):
        if len(self.soc) != len(self.local_demand_kw):
            raise ValueError("soc and local_demand_kw lengths differ")


@dataclass(frozen=True)
class InitialSoc:
    """Uniform draw in ``[low, high]`` or a fixed vector."""

    low: float = 0.7
    high: float = 0.9
    values: Optional[tuple[float, ...]] = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.values is not None:
            if len(self.values) != n:
                raise ValueError(f"initial soc vector has {len(self.values)} entries for {n} units")
            return np.array(self.values, dtype=float)
        return rng.uniform(self.low, self.high, n)


@dataclass(frozen=True)
class Scenario:
    units: tuple[EsuParams, ...]
    topology: GraphTopology
    demand: DemandProfile = DemandProfile()
    initial_soc: InitialSoc = InitialSoc()
    horizon: int = 288
    dt_hours: float = 1.0 / 60.0

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        if len(self.units) != self.topology.node_count:
            raise ValueError(f"{len(self.units)} units but topology has {self.topology.node_count} nodes")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.dt_hours > 0:
            raise ValueError("dt_hours must be positive")
        if self.demand.kind == "trace" and len(self.demand.trace) < self.horizon + 1:
            raise ValueError("demand trace shorter than horizon + 1")

    @property
    def n(self) -> int:
        return len(self.units)

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)


def reset(scenario: Scenario, rng: np.random.Generator) -> DessState:
    soc = scenario.initial_soc.sample(scenario.n, rng)
    bank = UnitBank(scenario.units)
    if np.any(soc < bank.soc_min) or np.any(soc > bank.soc_max):
        raise StateError(f"initial soc {soc} outside the admissible band")
    return DessState(soc, local_demands(scenario.demand, 0, scenario.n), 0)


def env_step(state: DessState, final_powers_kw, profile: DemandProfile, bank: UnitBank,
             weights: RewardWeights, dt_hours: float, est_mean_soc,
             balance_tol: Optional[float] = None) -> tuple[DessState, np.ndarray]:
    """
    Apply one step of executed powers.

    Parameters
    ----------
    est_mean_soc : array_like
        Each agent's consensus estimate of the mean SoC taken before acting;
        the reward compares it with the agent's post-step SoC.
    balance_tol : float, optional
        If given, require ``|sum(P) - sum(D)| <= balance_tol``.

    Returns
    -------
    next_state, local_rewards
    """
    p = np.asarray(final_powers_kw, dtype=float)
    if p.shape != state.soc.shape:
        raise ValueError(f"expected {state.soc.shape[0]} powers, got {p.shape}")
    if balance_tol is not None:
        gap = abs(p.sum() - state.local_demand_kw.sum())
        if gap > balance_tol:
            raise StateError(f"demand mismatch {gap:.6g} kW exceeds {balance_tol:.6g} kW")
    next_soc = bank.soc_transition(state.soc, p, dt_hours)
    cost = bank.degradation_cost(p, dt_hours)
    rewards = local_reward(weights, next_soc, np.asarray(est_mean_soc, dtype=float), cost)
    t = state.time_step + 1
    return DessState(next_soc, local_demands(profile, t, len(p)), t), rewards


@dataclass(frozen=True)
class Observation:
    own_soc: float
    own_demand_kw: float
    neighbor_socs: tuple[float, ...]
    est_mean_soc: float
    est_mean_demand_kw: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.own_soc, self.own_demand_kw, *self.neighbor_socs,
                         self.est_mean_soc, self.est_mean_demand_kw])

    @property
    def dim(self) -> int:
        return 4 + len(self.neighbor_socs)


def observation_dim(topology: GraphTopology, agent_id: int) -> int:
    return 4 + topology.degree(agent_id)


def build_observation(state: DessState, agent_id: int, topology: GraphTopology,
                      est_mean_soc: float, est_mean_demand_kw: float, trace=None) -> Observation:
    """Agent ``agent_id``'s partial view: own data, neighbor SoCs, consensus estimates.

    If ``trace`` is given, every datum read is logged to it for the
    decentralization audit.
    """
    nbrs = topology.neighbors(agent_id)
    if trace is not None:
        t = state.time_step
        trace.record(t, agent_id, "own", agent_id, "soc")
        trace.record(t, agent_id, "own", agent_id, "demand")
        for j in nbrs:
            trace.record(t, agent_id, "neighbor", j, "soc")
        trace.record(t, agent_id, "consensus", agent_id, "mean_soc")
        trace.record(t, agent_id, "consensus", agent_id, "mean_demand")
    return Observation(
        own_soc=float(state.soc[agent_id]),
        own_demand_kw=float(state.local_demand_kw[agent_id]),
        neighbor_socs=tuple(float(state.soc[j]) for j in nbrs),
        est_mean_soc=float(est_mean_soc),
        est_mean_demand_kw=float(est_mean_demand_kw),
    )


def balancing_cost(soc_traj: np.ndarray, powers: np.ndarray, bank: UnitBank,
                   weights: RewardWeights, dt_hours: float) -> float:
    """
    Negated total reward of a trajectory measured against the exact mean SoC.

    ``soc_traj`` has shape (T+1, N), ``powers`` shape (T, N). Each step
    compares the post-step SoC with the pre-step network mean, matching the
    reward timing.
    """
    soc_traj = np.asarray(soc_traj, dtype=float)
    powers = np.asarray(powers, dtype=float)
    dev = soc_traj[1:] - soc_traj[:-1].mean(axis=1, keepdims=True)
    cost = bank.cost_per_kwh * np.abs(powers) * dt_hours
    return -float(np.sum(weights.alpha * dev ** 2 + weights.beta * cost))
