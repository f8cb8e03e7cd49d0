"""
Command-line entry point.

Every subcommand reads a YAML run configuration (``--config``; the bundled
``default`` and ``comparison`` configurations are available by name),
applies command-line overrides, and writes CSV outputs whose first line
carries the package version, the canonical config hash and the seed.

Log verbosity comes from the ``DESSMARL_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .agent import AgentConfig
from .consensus import ConsensusConfig, GraphTopology, consensus_step, metropolis_weights, spread
from .demand_balance import CdbConfig
from .environment import DemandProfile, EsuParams, InitialSoc, RewardWeights, Scenario
from .orchestrator import (AccessTrace, TrainConfig, config_hash, decentralization_audit, evaluate,
                           load_checkpoints, metrics_csv, pinned_units, run_baseline, save_checkpoints, train)

log = logging.getLogger("dessmarl")

BUNDLED = ("default", "comparison")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key path."""


def _names(cls) -> set:
    return {f.name for f in fields(cls)}


# section -> (required keys, optional keys); nested mappings are checked separately
SCHEMA = {
    "units": None,
    "topology": ({"nodes", "edges"}, set()),
    "demand": ({"kind"}, _names(DemandProfile) - {"kind"}),
    "consensus": (_names(ConsensusConfig), set()),
    "cdb": ({"epsilon_kw", "delta_p_kw", "max_rounds", "drag_mode"}, set()),
    "learning": ({"lr", "gamma", "tau", "batch_size", "buffer_capacity", "noise_sigma_kw"},
                 _names(AgentConfig) - {"lr", "gamma", "tau", "batch_size", "buffer_capacity", "noise_sigma_kw"}),
    "train": ({"episodes", "horizon", "seed"},
              {"workers", "initial_soc", "reward", "dt_hours", "max_unconverged_fraction"}),
    "output": ({"dir"}, set()),
}
UNIT_REQUIRED = {"capacity_kwh", "p_min_kw", "p_max_kw"}
NESTED = {
    ("train", "initial_soc"): (set(), {"low", "high", "values"}),
    ("train", "reward"): ({"alpha", "beta"}, set()),
}


def _check_keys(mapping, required: set, optional: set, path: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - required - optional)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    missing = sorted(required - set(mapping))
    if missing:
        raise ConfigError(f"{path}.{missing[0]}: missing required key")


def validate(doc) -> dict:
    """Check ``doc`` against the schema and return it unchanged."""
    _check_keys(doc, set(SCHEMA), set(), "config")
    for section, spec in SCHEMA.items():
        if spec is not None:
            _check_keys(doc[section], *spec, section)
    units = doc["units"]
    if not isinstance(units, list) or not units:
        raise ConfigError("units: expected a nonempty list")
    for k, u in enumerate(units):
        _check_keys(u, UNIT_REQUIRED, _names(EsuParams) - UNIT_REQUIRED, f"units[{k}]")
    for (section, key), spec in NESTED.items():
        if key in doc[section]:
            _check_keys(doc[section][key], *spec, f"{section}.{key}")
    return doc


def load_config(source: str) -> dict:
    """Read a YAML file, or a bundled configuration by name."""
    if source in BUNDLED and not Path(source).exists():
        text = resources.files("dessmarl").joinpath("data", f"{source}.yaml").read_text()
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return validate(doc)


def apply_overrides(doc: dict, args: argparse.Namespace) -> dict:
    doc = copy.deepcopy(doc)
    for flag, section, key in (("seed", "train", "seed"), ("episodes", "train", "episodes"),
                               ("horizon", "train", "horizon"), ("workers", "train", "workers"),
                               ("drag_mode", "cdb", "drag_mode"), ("out", "output", "dir")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[section][key] = value
    return doc


def canonical_hash(doc: dict) -> str:
    """Hash of the result-relevant part of a config: output location and
    worker count are excluded."""
    core = copy.deepcopy(doc)
    core.pop("output", None)
    core["train"].pop("workers", None)
    return config_hash(core)


def _build(factory, mapping: dict, path: str):
    try:
        return factory(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve(doc: dict) -> tuple[Scenario, TrainConfig]:
    """Turn a validated config document into a scenario and training config."""
    units = [_build(EsuParams, u, f"units[{k}]") for k, u in enumerate(doc["units"])]
    topo_doc = doc["topology"]
    topology = _build(lambda nodes, edges: GraphTopology(nodes, [tuple(e) for e in edges]), topo_doc, "topology")
    demand_doc = dict(doc["demand"])
    if demand_doc.get("trace") is not None:
        demand_doc["trace"] = tuple(demand_doc["trace"])
    demand = _build(DemandProfile, demand_doc, "demand")
    tr = doc["train"]
    init_doc = dict(tr.get("initial_soc", {}))
    if init_doc.get("values") is not None:
        init_doc["values"] = tuple(init_doc["values"])
    initial = _build(InitialSoc, init_doc, "train.initial_soc")
    scenario_kw = {"horizon": tr["horizon"]}
    if "dt_hours" in tr:
        scenario_kw["dt_hours"] = tr["dt_hours"]
    scenario = _build(Scenario, dict(units=units, topology=topology, demand=demand, initial_soc=initial,
                                     **scenario_kw), "train")
    learning = dict(doc["learning"])
    if "hidden" in learning:
        learning["hidden"] = tuple(learning["hidden"])
    cfg = _build(TrainConfig, dict(
        episodes=tr["episodes"], seed=tr["seed"], workers=tr.get("workers", 1),
        max_unconverged_fraction=tr.get("max_unconverged_fraction", 0.0),
        reward=_build(RewardWeights, tr.get("reward", {}), "train.reward"),
        consensus=_build(ConsensusConfig, doc["consensus"], "consensus"),
        cdb=_build(CdbConfig, doc["cdb"], "cdb"),
        agent=_build(AgentConfig, learning, "learning"),
    ), "train")
    return scenario, cfg


# -- subcommands ------------------------------------------------------------------

def _out_dir(doc: dict) -> Path:
    out = Path(doc["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(doc: dict, out: Path, chash: str) -> None:
    header = f"# dessmarl {__version__} config_hash={chash} seed={doc['train']['seed']}\n"
    (out / "config.resolved.yaml").write_text(header + yaml.safe_dump(doc, sort_keys=True))


def cmd_train(doc, args) -> int:
    scenario, cfg = resolve(doc)
    cfg = replace(cfg, timing=bool(args.timing))
    chash = canonical_hash(doc)
    out = _out_dir(doc)
    _snapshot(doc, out, chash)
    res = train(cfg, scenario, on_episode=lambda m: log.info(
        "episode %d reward %.4f variance %.3g", m.episode, m.mean_reward, m.soc_variance_end))
    (out / "metrics.csv").write_text(metrics_csv(res.metrics, chash, cfg.seed))
    save_checkpoints(res.agents, out / "checkpoints", chash, cfg.seed)
    frac = res.unconverged_steps / max(res.total_steps, 1)
    print(f"trained {len(res.metrics)} episodes; last reward {res.metrics[-1].mean_reward:.4f}; "
          f"unconverged balance steps {res.unconverged_steps}/{res.total_steps}; outputs in {out}")
    if frac > cfg.max_unconverged_fraction:
        print(f"error: unconverged fraction {frac:.4g} exceeds {cfg.max_unconverged_fraction}", file=sys.stderr)
        return 3
    return 0


def _write_trace(traj, out: Path, name: str, chash: str, seed: int) -> None:
    (out / name).write_text(traj.to_csv(chash, seed))


def cmd_eval(doc, args) -> int:
    scenario, cfg = resolve(doc)
    agents = load_checkpoints(args.checkpoints, scenario, cfg.agent)
    chash = canonical_hash(doc)
    out = _out_dir(doc)
    traj = evaluate(agents, scenario, cfg)
    _write_trace(traj, out, "eval_trace.csv", chash, cfg.seed)
    print(f"terminal soc {np.round(traj.soc[-1], 4).tolist()} variance {traj.variance[-1]:.6g}")
    return 0


def cmd_baseline(doc, args) -> int:
    scenario, cfg = resolve(doc)
    chash = canonical_hash(doc)
    out = _out_dir(doc)
    traj = run_baseline(scenario, cfg)
    _write_trace(traj, out, "baseline_trace.csv", chash, cfg.seed)
    pinned = pinned_units(traj, scenario)
    print(f"terminal soc {np.round(traj.soc[-1], 4).tolist()} variance {traj.variance[-1]:.6g}")
    print(f"units pinned at the upper soc limit: {[i + 1 for i in pinned] or 'none'}")
    return 0


def cmd_ablate(doc, args) -> int:
    from .orchestrator import run_ablation
    scenario, cfg = resolve(doc)
    chash = canonical_hash(doc)
    out = _out_dir(doc)
    ab = run_ablation(cfg, scenario)
    for mode in ("counterfactual", "factual"):
        res = getattr(ab, mode)
        (out / f"metrics_{mode}.csv").write_text(metrics_csv(res.metrics, chash, cfg.seed))
    cf, fa = ab.cumulative("counterfactual"), ab.cumulative("factual")
    lines = [f"# dessmarl {__version__} config_hash={chash} seed={cfg.seed}",
             "episode,cumulative_counterfactual,cumulative_factual"]
    lines += [f"{k},{cf[k]!r},{fa[k]!r}" for k in range(len(cf))]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    third = max(len(cf) // 3 - 1, 0)
    print(f"cumulative reward at episode {third}: counterfactual {cf[third]:.3f} factual {fa[third]:.3f}")
    print(f"cumulative reward at the end: counterfactual {cf[-1]:.3f} factual {fa[-1]:.3f}")
    return 0


def cmd_audit(doc, args) -> int:
    scenario, cfg = resolve(doc)
    trace = AccessTrace()
    train(cfg, scenario, trace=trace)
    report = decentralization_audit(trace, scenario.topology)
    print(f"checked {report.checked} reads, {len(report.violations)} violations")
    for v in report.violations:
        print(f"  step {v[0]} agent {v[1]} read {v[2]} {v[4]} of unit {v[3]}")
    return 0 if report.ok else 4


def cmd_consensus_demo(doc, args) -> int:
    scenario, cfg = resolve(doc)
    W = metropolis_weights(scenario.topology)
    if args.values is not None:
        x = np.array([float(v) for v in args.values.split(",")])
    else:
        x = np.linspace(0.0, 1.0, scenario.n)
    if x.size != scenario.n:
        raise ConfigError(f"--values has {x.size} entries, topology has {scenario.n} nodes")
    tol, cap = cfg.consensus.tolerance, cfg.consensus.max_iterations
    fmt = lambda v: " ".join(f"{e:.6f}" for e in v)
    print(f"target mean {x.mean():.6f}")
    k = 0
    print(f"iter {k:4d}: {fmt(x)}")
    while spread(x) > tol and k < cap:
        x = consensus_step(x, W)
        k += 1
        print(f"iter {k:4d}: {fmt(x)}")
    return 0 if spread(x) <= tol else 5


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "ablate": cmd_ablate,
    "audit": cmd_audit, "consensus-demo": cmd_consensus_demo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dessmarl", description="Decentralized SoC balancing with multi-agent RL.")
    p.add_argument("--version", action="version", version=f"dessmarl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", default="default", help="YAML file or bundled name (default, comparison)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--episodes", type=int)
        s.add_argument("--horizon", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--drag-mode", choices=["counterfactual", "factual"])
        s.add_argument("--timing", action="store_true", help="record wall-clock time per episode")
        if name == "eval":
            s.add_argument("--checkpoints", required=True, help="directory written by train")
        if name == "consensus-demo":
            s.add_argument("--values", help="comma-separated initial values, one per node")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, os.environ.get("DESSMARL_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = apply_overrides(load_config(args.config), args)
        validate(doc)
        return COMMANDS[args.command](doc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
