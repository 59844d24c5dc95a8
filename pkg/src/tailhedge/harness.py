"""Run configuration, training/evaluation orchestration and report emission.

Configuration is a single TOML document (sections ``[market]``, ``[agent]``,
``[sweep]``) validated with field-level messages.  All randomness flows from
the single ``seed`` field: training derives init/env/update streams from it,
and evaluation episode i is seeded by (seed, i) so its trajectory never
depends on how many episodes run before it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

from .agent import (AgentConfig, AgentNets, ReplayBuffer, actor_action,
                    build_nets, config_hash, load_checkpoint, save_checkpoint,
                    train_step)
from .market import HedgingEnv, MarketParams, gamma_hedge_ratio
from .quantiles import QuantileDistribution, RiskMeasureSpec, cvar_alpha, var_alpha

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "reward", "qr_loss", "actor_objective",
                   "gpd_sigma_mean", "gpd_eps_mean", "tail_update_skips")
AGGREGATE_METRICS = ("mean", "std", "var", "cvar", "gamma_hedge_ratio")
DEFAULT_SWEEP_VOLS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class ConfigError(Exception):
    """Invalid run configuration; carries one message per offending field."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_train_steps: int = 10_000
    n_eval_scenarios: int = 5_000
    output_dir: str = "runs/latest"
    market: MarketParams = field(default_factory=MarketParams)
    agent: AgentConfig = field(default_factory=AgentConfig)
    sweep_volatilities: tuple[float, ...] = DEFAULT_SWEEP_VOLS
    sweep_risk_measures: tuple[RiskMeasureSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.n_train_steps < 0:
            raise ValueError("n_train_steps must be >= 0")
        if self.n_eval_scenarios < 1:
            raise ValueError("n_eval_scenarios must be >= 1")
        if any(v <= 0.0 for v in self.sweep_volatilities):
            raise ValueError("sweep volatilities must be positive")

    @property
    def risk_measures(self) -> tuple[RiskMeasureSpec, ...]:
        return self.sweep_risk_measures or (self.agent.risk,)


# -- TOML loading --------------------------------------------------------------

_TOP_TYPES = {"seed": int, "n_train_steps": int, "n_eval_scenarios": int,
              "output_dir": str}


def _numeric(section: str, key: str, value, errors: list) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{section}.{key}: expected a number, got {value!r}")
        return 1.0
    return float(value)


def _build_section(cls, section: str, data: dict, errors: list,
                   overrides: dict | None = None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(overrides or {})
    for key, value in data.items():
        if key not in fields:
            errors.append(f"{section}.{key}: unknown field")
            continue
        ftype = fields[key].type
        if ftype == "float":
            kwargs[key] = _numeric(section, key, value, errors)
        elif ftype == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{section}.{key}: expected an integer, got {value!r}")
                continue
            kwargs[key] = value
        elif ftype == "bool":
            if not isinstance(value, bool):
                errors.append(f"{section}.{key}: expected true/false, got {value!r}")
                continue
            kwargs[key] = value
        elif ftype == "str":
            if not isinstance(value, str):
                errors.append(f"{section}.{key}: expected a string, got {value!r}")
                continue
            kwargs[key] = value
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        errors.append(f"{section}: {exc}")
        return None


def _parse_risk(section: str, data: dict, errors: list) -> RiskMeasureSpec | None:
    try:
        return RiskMeasureSpec(kind=data.get("kind", "cvar"),
                               alpha=data.get("alpha", 0.95))
    except (ValueError, TypeError) as exc:
        errors.append(f"{section}: {exc}")
        return None


def config_from_dict(raw: dict) -> RunConfig:
    errors: list[str] = []
    known = set(_TOP_TYPES) | {"market", "agent", "sweep"}
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown field")

    top = {}
    for key, typ in _TOP_TYPES.items():
        if key in raw:
            value = raw[key]
            if isinstance(value, bool) or not isinstance(value, typ):
                errors.append(f"{key}: expected {typ.__name__}, got {value!r}")
            else:
                top[key] = value

    market = _build_section(MarketParams, "market", raw.get("market", {}), errors)

    agent_raw = dict(raw.get("agent", {}))
    overrides = {}
    risk_kind = agent_raw.pop("risk_kind", None)
    risk_alpha = agent_raw.pop("risk_alpha", None)
    if risk_kind is not None or risk_alpha is not None:
        risk = _parse_risk("agent.risk", {"kind": risk_kind or "cvar",
                                          "alpha": risk_alpha if risk_alpha is not None else 0.95},
                           errors)
        if risk is not None:
            overrides["risk"] = risk
    if "hidden_sizes" in agent_raw:
        hs = agent_raw.pop("hidden_sizes")
        if (not isinstance(hs, list) or not hs
                or any(isinstance(v, bool) or not isinstance(v, int) for v in hs)):
            errors.append("agent.hidden_sizes: expected a nonempty list of integers")
        else:
            overrides["hidden_sizes"] = tuple(hs)
    agent = _build_section(AgentConfig, "agent", agent_raw, errors, overrides)

    sweep_raw = raw.get("sweep", {})
    sweep_kwargs = {}
    for key in sweep_raw:
        if key not in ("volatilities", "risk_measures"):
            errors.append(f"sweep.{key}: unknown field")
    if "volatilities" in sweep_raw:
        vols = sweep_raw["volatilities"]
        if not isinstance(vols, list) or any(
                isinstance(v, bool) or not isinstance(v, (int, float)) for v in vols):
            errors.append("sweep.volatilities: expected a list of numbers")
        else:
            sweep_kwargs["sweep_volatilities"] = tuple(float(v) for v in vols)
    if "risk_measures" in sweep_raw:
        rms = sweep_raw["risk_measures"]
        if not isinstance(rms, list) or any(not isinstance(r, dict) for r in rms):
            errors.append("sweep.risk_measures: expected a list of {kind, alpha} tables")
        else:
            parsed = [_parse_risk(f"sweep.risk_measures[{i}]", r, errors)
                      for i, r in enumerate(rms)]
            if all(p is not None for p in parsed):
                sweep_kwargs["sweep_risk_measures"] = tuple(parsed)

    if errors or market is None or agent is None:
        raise ConfigError(errors or ["invalid configuration"])
    try:
        return RunConfig(market=market, agent=agent, **top, **sweep_kwargs)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError([f"config file not found: {path}"]) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"config is not valid TOML: {exc}"]) from exc
    return config_from_dict(raw)


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-episode PnL plus aggregates; everything below ``pnls`` is a pure
    function of the per-episode data and the risk spec."""

    label: str
    seed: int
    risk: RiskMeasureSpec
    pnls: np.ndarray
    gamma_hedge_ratios: list
    mean: float
    std: float
    var: float
    cvar: float
    mean_gamma_hedge_ratio: float | None
    config: dict


def pnl_aggregates(pnls, risk: RiskMeasureSpec) -> tuple[float, float, float, float]:
    """(mean, std, VaR, CVaR) of a PnL sample, order-statistic estimators."""
    arr = np.asarray(pnls, dtype=float)
    dist = QuantileDistribution(arr)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std, var_alpha(dist, risk.alpha), cvar_alpha(dist, risk.alpha)


def evaluate_policy(policy, market: MarketParams, n_episodes: int, seed: int,
                    risk: RiskMeasureSpec, label: str = "policy",
                    config_echo: dict | None = None) -> EvalReport:
    """Run ``n_episodes`` independent episodes of a deterministic policy.

    ``policy`` maps an observation vector to an action in [0, 1].
    """
    pnls = np.zeros(n_episodes)
    ghrs: list = []
    for i in range(n_episodes):
        env = HedgingEnv(market, seed=[seed, i])
        state, done = env.state, False
        while not done:
            state, _, done = env.step(policy(state.observation))
        pnls[i] = env.log[-1].cumulative_pnl
        ghrs.append(gamma_hedge_ratio(env.log))
    mean, std, var, cvar = pnl_aggregates(pnls, risk)
    defined = [g for g in ghrs if g is not None]
    mean_ghr = float(np.mean(defined)) if defined else None
    return EvalReport(label=label, seed=seed, risk=risk, pnls=pnls,
                      gamma_hedge_ratios=ghrs, mean=mean, std=std, var=var,
                      cvar=cvar, mean_gamma_hedge_ratio=mean_ghr,
                      config=config_echo or {})


def checkpoint_policy(agent: AgentNets):
    return lambda obs: actor_action(agent, obs)


def constant_policy(a: float):
    return lambda obs: a


# -- training ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_train(cfg: RunConfig, out_dir=None) -> dict:
    """Train an agent; writes checkpoint.json and metrics.csv, returns paths."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    init_ss, env_ss, upd_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    agent = build_nets(cfg.agent, obs_dim=3, rng=np.random.default_rng(init_ss))
    env = HedgingEnv(cfg.market, seed=env_ss)
    buffer = ReplayBuffer(cfg.agent.replay_capacity, obs_dim=3)
    rng = np.random.default_rng(upd_ss)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for step in range(cfg.n_train_steps):
            m = train_step(env, agent, buffer, cfg.agent, rng, step)
            writer.writerow([_fmt(m[c]) for c in METRICS_COLUMNS])

    ckpt_path = out / "checkpoint.json"
    save_checkpoint(ckpt_path, agent, cfg.agent, step=cfg.n_train_steps)
    logger.info("trained %d steps -> %s", cfg.n_train_steps, ckpt_path)
    return {"checkpoint": ckpt_path, "metrics": metrics_path}


def load_compatible_checkpoint(path, cfg: RunConfig) -> AgentNets:
    agent, stored_hash, _ = load_checkpoint(path)
    if stored_hash != config_hash(cfg.agent):
        raise ConfigError([
            "checkpoint/config mismatch: the checkpoint was written under a "
            "different [agent] configuration"])
    return agent


def run_eval(checkpoint_path, cfg: RunConfig, label: str = "agent") -> EvalReport:
    agent = load_compatible_checkpoint(checkpoint_path, cfg)
    return evaluate_policy(checkpoint_policy(agent), cfg.market,
                           cfg.n_eval_scenarios, cfg.seed, cfg.agent.risk,
                           label=label, config_echo=config_echo(cfg))


def config_echo(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["agent"]["hidden_sizes"] = list(cfg.agent.hidden_sizes)
    return d


# -- sweep ----------------------------------------------------------------------

def _cell_seed(seed: int, vol: float, risk: RiskMeasureSpec) -> list[int]:
    kind_code = 0 if risk.kind == "var" else 1
    return [seed, int(round(vol * 1e6)), kind_code, int(round(risk.alpha * 1e6))]


def run_sweep(cfg: RunConfig, checkpoint=None, out_dir=None) -> list[dict]:
    """Evaluate (or train then evaluate) one cell per (volatility, risk
    measure); emits sweep.csv plus one report JSON per cell.  Cell seeds are
    keyed by cell content, so results do not depend on sweep ordering."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    reports = []
    for vol in cfg.sweep_volatilities:
        for risk in cfg.risk_measures:
            market = dataclasses.replace(cfg.market, vol=vol)
            cell_seed = _cell_seed(cfg.seed, vol, risk)
            label = f"vol{vol:g}_{risk.label}"
            if checkpoint is not None:
                agent = load_compatible_checkpoint(checkpoint, cfg)
            else:
                cell_cfg = dataclasses.replace(
                    cfg, market=market,
                    agent=dataclasses.replace(cfg.agent, risk=risk),
                    seed=int(np.random.SeedSequence(cell_seed).generate_state(1)[0]))
                paths = run_train(cell_cfg, out_dir=out / label)
                agent = load_compatible_checkpoint(paths["checkpoint"], cell_cfg)
            report = evaluate_policy(
                checkpoint_policy(agent), market, cfg.n_eval_scenarios,
                int(np.random.SeedSequence(cell_seed).generate_state(1)[0]),
                risk, label=label, config_echo=config_echo(cfg))
            reports.append(report)
            rows.append({
                "volatility": vol, "risk_kind": risk.kind, "alpha": risk.alpha,
                "mean": report.mean, "std": report.std, "var": report.var,
                "cvar": report.cvar,
                "gamma_hedge_ratio": report.mean_gamma_hedge_ratio,
            })
    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v)
                             for k, v in row.items()})
    emit_report(reports, "json", out)
    return rows


# -- report emission -------------------------------------------------------------

def _round6(x: float) -> float:
    return float(f"{x:.6g}")


def report_to_dict(report: EvalReport) -> dict:
    """JSON form with 6-significant-digit numbers; aggregates are recomputed
    from the rounded per-episode series so the emitted file audits exactly."""
    pnls = [_round6(p) for p in report.pnls]
    mean, std, var, cvar = pnl_aggregates(pnls, report.risk)
    defined = [g for g in report.gamma_hedge_ratios if g is not None]
    ghr = _round6(float(np.mean([_round6(g) for g in defined]))) if defined else None
    return {
        "label": report.label,
        "seed": report.seed,
        "risk": {"kind": report.risk.kind, "alpha": report.risk.alpha},
        "n_episodes": len(pnls),
        "pnl": pnls,
        "gamma_hedge_ratio": [None if g is None else _round6(g)
                              for g in report.gamma_hedge_ratios],
        "aggregates": {"mean": _round6(mean), "std": _round6(std),
                       "var": _round6(var), "cvar": _round6(cvar),
                       "gamma_hedge_ratio": ghr},
        "config": report.config,
    }


def report_from_dict(d: dict) -> EvalReport:
    risk = RiskMeasureSpec(d["risk"]["kind"], d["risk"]["alpha"])
    agg = d["aggregates"]
    return EvalReport(label=d["label"], seed=d["seed"], risk=risk,
                      pnls=np.asarray(d["pnl"], dtype=float),
                      gamma_hedge_ratios=list(d["gamma_hedge_ratio"]),
                      mean=agg["mean"], std=agg["std"], var=agg["var"],
                      cvar=agg["cvar"],
                      mean_gamma_hedge_ratio=agg["gamma_hedge_ratio"],
                      config=d.get("config", {}))


def emit_report(reports, fmt: str, out_dir) -> list[Path]:
    """Write per-episode CSVs plus an aggregate table (csv) or the full
    reports (json).  Aggregate rows per run: mean, std, var, cvar,
    gamma_hedge_ratio, keyed by the run's risk-measure label, one value
    column per run."""
    if not reports:
        raise ValueError("need at least one report")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    dicts = [report_to_dict(r) for r in reports]

    if fmt == "json":
        path = out / "report.json"
        path.write_text(json.dumps(dicts, indent=1, sort_keys=True))
        written.append(path)
        return written

    for d in dicts:
        path = out / f"episodes_{d['label']}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "pnl", "gamma_hedge_ratio"])
            for i, (pnl, ghr) in enumerate(zip(d["pnl"], d["gamma_hedge_ratio"])):
                writer.writerow([i, f"{pnl:.6g}",
                                 "" if ghr is None else f"{ghr:.6g}"])
        written.append(path)

    path = out / "aggregate.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["risk_measure", "metric"] + [d["label"] for d in dicts])
        risk_labels = []
        for d in dicts:
            lbl = RiskMeasureSpec(d["risk"]["kind"], d["risk"]["alpha"]).label
            if lbl not in risk_labels:
                risk_labels.append(lbl)
        for risk_label in risk_labels:
            for metric in AGGREGATE_METRICS:
                row = [risk_label, metric]
                for d in dicts:
                    lbl = RiskMeasureSpec(d["risk"]["kind"], d["risk"]["alpha"]).label
                    if lbl != risk_label:
                        row.append("")
                        continue
                    value = d["aggregates"][metric]
                    row.append("" if value is None else f"{value:.6g}")
                writer.writerow(row)
    written.append(path)
    return written
