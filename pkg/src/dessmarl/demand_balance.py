"""
Decentralized demand balance.

Agents repeatedly shift their proposed powers by a random fraction of the
network-average mismatch (obtained by consensus) and drag out-of-range
values back inside their feasible interval, until the average mismatch
falls below ``epsilon_kw``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .consensus import ConsensusConfig, run_consensus
from .environment import ROUNDING_SLACK, StateError, UnitBank


class InfeasibleDemand(ValueError):
    """Total demand lies outside the summed feasible power interval."""


DRAG_MODES = ("counterfactual", "factual")


@dataclass(frozen=True)
class CdbConfig:
    epsilon_kw: float = 0.01
    delta_p_kw: float = 0.01
    max_rounds: int = 1000
    drag_mode: str = "counterfactual"

    def __post_init__(self):
        if not self.epsilon_kw > 0:
            raise ValueError("epsilon_kw must be > 0")
        if not self.delta_p_kw > 0:
            raise ValueError("delta_p_kw must be > 0")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.drag_mode not in DRAG_MODES:
            raise ValueError(f"drag_mode must be one of {DRAG_MODES}, got {self.drag_mode!r}")


@dataclass
class BalanceOutcome:
    final_powers_kw: np.ndarray
    rounds_used: int
    converged: bool
    residual_mean_kw: float
    consensus_iterations: int = 0
    residual_trace: list = field(default_factory=list)
    power_trace: list = field(default_factory=list)


def drag_counterfactual(proposed_kw, lower_kw, upper_kw, rng=None, n2=None):
    """
    Counterfactual drag: a proposal below ``lower`` lands at ``n2 * upper``,
    one above ``upper`` lands at ``n2 * lower``, with ``n2 ~ U(0, 1)``.

    Works elementwise on arrays. ``n2`` may be passed explicitly (scalar or
    array); otherwise it is drawn from ``rng``.
    """
    p = np.asarray(proposed_kw, dtype=float)
    if n2 is None:
        n2 = rng.random(p.shape)
    out = np.where(p < lower_kw, n2 * upper_kw, np.where(p > upper_kw, n2 * lower_kw, p))
    return out if out.ndim else float(out)


def drag_factual(proposed_kw, lower_kw, upper_kw):
    """Clamp to the nearest bound."""
    out = np.clip(np.asarray(proposed_kw, dtype=float), lower_kw, upper_kw)
    return out if out.ndim else float(out)


def _drag(p, lower, upper, mode, n2):
    if mode == "counterfactual":
        return drag_counterfactual(p, lower, upper, n2=n2)
    return drag_factual(p, lower, upper)


def _check_range(p, lower, upper, where):
    bad = (p < lower - ROUNDING_SLACK) | (p > upper + ROUNDING_SLACK)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise StateError(f"{where}: unit {i} power {p[i]!r} outside [{lower[i]!r}, {upper[i]!r}]")


def balance(initial_powers_kw, local_demands_kw, lower_kw, upper_kw, weights: np.ndarray,
            cdb: CdbConfig = CdbConfig(), consensus_cfg: ConsensusConfig = ConsensusConfig(),
            rng: Optional[np.random.Generator] = None, record_trace: bool = False) -> BalanceOutcome:
    """
    Adjust proposed powers until total output meets total demand.

    Each round every agent draws its own ``n1, n2 ~ U(0, 1)``, moves by
    ``sign(d_hat) * n1 * max(|d_hat|, delta_p)`` where ``d_hat`` is its
    consensus estimate of the mean of ``demand - power``, then applies the
    configured drag. Both draws are consumed every round regardless of the
    drag mode, so paired runs see the same random stream.

    Initial proposals outside their bounds are dragged before the first
    round. The loop stops once every agent's estimate satisfies
    ``|d_hat_i| <= epsilon - consensus tolerance``, which guarantees
    ``|mean(D) - mean(P)| <= epsilon`` for the exact mean.

    Parameters
    ----------
    initial_powers_kw, local_demands_kw, lower_kw, upper_kw : array_like, shape (N,)
    weights : ndarray, shape (N, N)
        Averaging matrix used for every mismatch estimate.

    Returns
    -------
    BalanceOutcome
        With ``record_trace`` set, ``residual_trace`` and ``power_trace``
        hold the exact mean mismatch and the powers after the initial drag
        and after every round.

    Raises
    ------
    InfeasibleDemand
        If ``sum(D)`` lies outside ``[sum(lower), sum(upper)]``.
    """
    if rng is None:
        rng = np.random.default_rng()
    lower = np.asarray(lower_kw, dtype=float)
    upper = np.asarray(upper_kw, dtype=float)
    demand = np.asarray(local_demands_kw, dtype=float)
    p = np.array(initial_powers_kw, dtype=float)
    n = p.shape[0]
    if not (lower.shape == upper.shape == demand.shape == (n,)):
        raise ValueError("initial powers, demands and bounds must all have length N")
    if np.any(lower > upper):
        i = int(np.flatnonzero(lower > upper)[0])
        raise ValueError(f"unit {i}: lower bound {lower[i]} exceeds upper bound {upper[i]}")
    total = demand.sum()
    slack = n * ROUNDING_SLACK
    if total < lower.sum() - slack or total > upper.sum() + slack:
        raise InfeasibleDemand(
            f"total demand {total:.6g} kW outside feasible range [{lower.sum():.6g}, {upper.sum():.6g}] kW"
        )
    if cdb.epsilon_kw <= consensus_cfg.tolerance:
        raise ValueError("epsilon_kw must exceed the consensus tolerance")
    stop = cdb.epsilon_kw - consensus_cfg.tolerance
    mode = cdb.drag_mode

    if np.any(p < lower) or np.any(p > upper):
        p = _drag(p, lower, upper, mode, rng.random(n))
    _check_range(p, lower, upper, "initial drag")

    res = run_consensus(demand - p, weights, consensus_cfg)
    d_hat, iters = res.estimates, res.iterations
    trace = [float(total - p.sum()) / n] if record_trace else []
    powers = [p.copy()] if record_trace else []
    rounds = 0
    while np.max(np.abs(d_hat)) > stop:
        if rounds == cdb.max_rounds:
            break
        n1 = rng.random(n)
        n2 = rng.random(n)
        p = p + np.sign(d_hat) * n1 * np.maximum(np.abs(d_hat), cdb.delta_p_kw)
        p = _drag(p, lower, upper, mode, n2)
        _check_range(p, lower, upper, f"round {rounds + 1}")
        res = run_consensus(demand - p, weights, consensus_cfg)
        d_hat = res.estimates
        iters += res.iterations
        rounds += 1
        if record_trace:
            trace.append(float(total - p.sum()) / n)
            powers.append(p.copy())
    converged = bool(np.max(np.abs(d_hat)) <= stop)
    return BalanceOutcome(p, rounds, converged, float(total - p.sum()) / n, iters, trace, powers)


def proportional_shares(total_demand_kw: float, capacities) -> np.ndarray:
    """Split a total in proportion to unit capacity."""
    c = np.asarray(capacities, dtype=float)
    return total_demand_kw * c / c.sum()


def proportional_allocate(total_demand_kw: float, units, socs, dt_hours: float, weights: np.ndarray,
                          cdb: CdbConfig = CdbConfig(), consensus_cfg: ConsensusConfig = ConsensusConfig(),
                          rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Centralized proportional baseline: capacity-weighted shares, then the
    demand-balance loop to respect the SoC-dependent bounds.
    """
    bank = units if isinstance(units, UnitBank) else UnitBank(units)
    lower, upper = bank.power_bounds(np.asarray(socs, dtype=float), dt_hours)
    shares = proportional_shares(total_demand_kw, bank.capacity)
    demands = np.full(bank.n, total_demand_kw / bank.n)
    return balance(shares, demands, lower, upper, weights, cdb, consensus_cfg, rng).final_powers_kw
