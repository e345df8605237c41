"""Experiment orchestration: config files, runs, sweeps, CSV emission.

Config files are INI-style with sections [federation], [algorithm],
[privacy], and optionally [sweep] and [experiment]; unknown sections or
keys are rejected.  All floating-point CSV fields are printed with 17
significant digits, so parsing an emitted file reproduces every float64
bit for bit, and repeated runs produce byte-identical files for any worker
count (all randomness is pre-keyed per seed / cell / replication).
"""

from __future__ import annotations

import configparser
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import problems, streams
from .algorithms import FedAvgConfig, RoundRecord, ScaffNewConfig, run
from .privacy import MechanismParams, PrivacyBudget, calibrate_sigma2, check_epsilon_regime

logger = logging.getLogger(__name__)

ROUND_CSV_HEADER = (
    "seed,algorithm,round,communicated,tau_or_p,eta,epsilon,delta,clip,"
    "sigma2,psi,global_loss,dist_opt,max_update_norm,clip_count,status"
)
SWEEP_CSV_HEADER = (
    "mode,cell_value,epsilon,replication,final_psi,final_loss,final_dist,"
    "comm_rounds_realized,status"
)

_SWEEP_MODES = ("local_steps", "comm_rounds", "epsilon")
_MODE_IDS = {"local_steps": 1, "comm_rounds": 2, "epsilon": 3}


class ConfigError(Exception):
    """Invalid experiment configuration (CLI exit code 2)."""


def fmt_float(x: float) -> str:
    """17-significant-digit decimal text; round-trips float64 exactly."""
    return "%.17g" % x


@dataclass(frozen=True)
class SweepSpec:
    """One sweep protocol: what varies, against which privacy rows."""

    mode: str
    values: Tuple[float, ...]
    epsilons: Tuple[Optional[float], ...] = (None,)
    budget_steps: Optional[int] = None
    replications: int = 1

    def __post_init__(self):
        if self.mode not in _SWEEP_MODES:
            raise ConfigError(f"unknown sweep mode {self.mode!r}")
        if len(self.values) < 1:
            raise ConfigError("sweep needs at least one value")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError("sweep values must be strictly increasing")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.mode == "local_steps":
            if self.budget_steps is None:
                raise ConfigError("local-steps mode needs a computation budget")
            for tau in self.values:
                if int(tau) != tau or self.budget_steps % int(tau) != 0:
                    raise ConfigError(
                        f"local step count {tau} does not divide the "
                        f"budget {self.budget_steps}"
                    )
        if self.mode == "epsilon" and any(v <= 0 for v in self.values):
            raise ConfigError("epsilon values must be positive")


@dataclass
class ExperimentConfig:
    """Fully resolved experiment: federation, algorithm, privacy, seeds."""

    federation: problems.Federation
    algorithm: str
    eta: float
    tau: int = 1
    rounds: int = 1
    p: float = 1.0
    batch_size: Union[int, str] = "full"
    start_distance: Optional[float] = None
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    clip_threshold: float = math.inf
    v: float = 2.0
    u: Optional[float] = None
    sigma2_override: Optional[float] = None
    seeds: Tuple[int, ...] = (0,)
    out: Optional[str] = None
    sweep_spec: Optional[SweepSpec] = None

    def __post_init__(self):
        if self.algorithm not in ("fedavg", "scaffnew"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if len(self.seeds) < 1:
            raise ConfigError("need at least one seed")
        if self.epsilon is not None and self.delta is None:
            raise ConfigError("epsilon requires a delta")
        if self.start_distance is not None:
            if self.start_distance < 0:
                raise ConfigError("start distance must be nonnegative")
            if self.federation.optimum is None:
                raise ConfigError(
                    "start_distance needs a federation with a known optimum"
                )

    def start_point(self) -> Optional[np.ndarray]:
        """x0 at the configured distance from the optimum, toward the origin.

        None (the default) means the origin itself.
        """
        if self.start_distance is None:
            return None
        x_star = self.federation.optimum
        direction = (0.0 - x_star) / np.linalg.norm(x_star)
        return x_star + self.start_distance * direction


_SECTION_KEYS = {
    "federation": {
        "file", "kind", "zeta", "condition_number", "clients", "dimension",
        "samples_per_client", "seed",
    },
    "algorithm": {"name", "eta", "tau", "rounds", "iterations", "p", "batch_size",
                  "start_distance"},
    "privacy": {"epsilon", "delta", "clip", "v", "u", "sigma2"},
    "sweep": {"mode", "values", "epsilons", "budget", "replications"},
    "experiment": {"seeds", "out"},
}


def _get(section, key, cast, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return default
    raw = section[key]
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def _float_list(raw: str) -> Tuple[float, ...]:
    return tuple(float(tok) for tok in raw.split())


def _int_list(raw: str) -> Tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split())


def parse_config(path: str) -> ExperimentConfig:
    """Read and validate an experiment file; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    if "federation" not in parser or "algorithm" not in parser:
        raise ConfigError("config needs [federation] and [algorithm] sections")

    fed = _parse_federation(parser["federation"])

    alg = parser["algorithm"]
    name = _get(alg, "name", str, required=True)
    eta = _get(alg, "eta", float, required=True)
    tau = _get(alg, "tau", int, default=1)
    if name == "scaffnew":
        rounds = _get(alg, "iterations", int, default=_get(alg, "rounds", int, default=None))
    else:
        rounds = _get(alg, "rounds", int, default=None)
    if rounds is None:
        raise ConfigError("the round/iteration count is required")
    p = _get(alg, "p", float, default=1.0)
    batch_raw = _get(alg, "batch_size", str, default="full")
    batch: Union[int, str] = "full" if batch_raw == "full" else int(batch_raw)
    start_distance = _get(alg, "start_distance", float)

    priv = parser["privacy"] if "privacy" in parser else {}
    epsilon = _get(priv, "epsilon", float)
    delta = _get(priv, "delta", float)
    clip_threshold = _get(priv, "clip", float, default=math.inf)
    v = _get(priv, "v", float, default=2.0)
    u = _get(priv, "u", float)
    sigma2_override = _get(priv, "sigma2", float)

    sweep_spec = None
    if "sweep" in parser:
        sw = parser["sweep"]
        mode = _get(sw, "mode", str, required=True).replace("-", "_")
        values = _get(sw, "values", _float_list, required=True)
        epsilons_raw = _get(sw, "epsilons", _float_list)
        sweep_spec = SweepSpec(
            mode=mode,
            values=values,
            epsilons=tuple(epsilons_raw) if epsilons_raw else (None,),
            budget_steps=_get(sw, "budget", int),
            replications=_get(sw, "replications", int, default=1),
        )

    exp = parser["experiment"] if "experiment" in parser else {}
    seeds = _get(exp, "seeds", _int_list, default=(0,))
    out = _get(exp, "out", str)

    return ExperimentConfig(
        federation=fed,
        algorithm=name,
        eta=eta,
        tau=tau,
        rounds=rounds,
        p=p,
        batch_size=batch,
        start_distance=start_distance,
        epsilon=epsilon,
        delta=delta,
        clip_threshold=clip_threshold,
        v=v,
        u=u,
        sigma2_override=sigma2_override,
        seeds=tuple(seeds),
        out=out,
        sweep_spec=sweep_spec,
    )


def _parse_federation(section) -> problems.Federation:
    if "file" in section:
        extras = set(section) - {"file"}
        if extras:
            raise ConfigError(
                f"[federation] file= cannot be combined with {sorted(extras)}"
            )
        return problems.load_federation(section["file"])
    spec = problems.HeterogeneitySpec(
        zeta=_get(section, "zeta", float, default=0.0),
        condition_number=_get(section, "condition_number", float, default=1.0),
        clients=_get(section, "clients", int, required=True),
        dimension=_get(section, "dimension", int, required=True),
        kind=_get(section, "kind", str, default="quadratic"),
        samples_per_client=_get(section, "samples_per_client", int, default=32),
    )
    return problems.generate_federation(spec, _get(section, "seed", int, default=0))


def parse_heterogeneity_spec(path: str) -> Tuple[problems.HeterogeneitySpec, int]:
    """Read only the [federation] generator block (for the gen subcommand)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read spec file {path!r}")
    if "federation" not in parser:
        raise ConfigError("spec file needs a [federation] section")
    section = parser["federation"]
    for key in section:
        if key not in _SECTION_KEYS["federation"] or key == "file":
            raise ConfigError(f"unknown key {key!r} in section [federation]")
    spec = problems.HeterogeneitySpec(
        zeta=_get(section, "zeta", float, default=0.0),
        condition_number=_get(section, "condition_number", float, default=1.0),
        clients=_get(section, "clients", int, required=True),
        dimension=_get(section, "dimension", int, required=True),
        kind=_get(section, "kind", str, default="quadratic"),
        samples_per_client=_get(section, "samples_per_client", int, default=32),
    )
    return spec, _get(section, "seed", int, default=0)


# ---------------------------------------------------------------------------
# Single experiment
# ---------------------------------------------------------------------------


def _resolve_sigma2(cfg: ExperimentConfig) -> float:
    if cfg.sigma2_override is not None:
        if cfg.epsilon is not None:
            logger.warning(
                "sigma2 override %g given although epsilon=%g is set; "
                "running with the override",
                cfg.sigma2_override,
                cfg.epsilon,
            )
        return cfg.sigma2_override
    if cfg.epsilon is None:
        return 0.0
    budget = PrivacyBudget(epsilon=cfg.epsilon, delta=cfg.delta)
    p_comm = cfg.p if cfg.algorithm == "scaffnew" else 1.0
    if cfg.u is not None:
        check_epsilon_regime(budget, cfg.u, p_comm, cfg.rounds)
    return calibrate_sigma2(budget, cfg.clip_threshold, p_comm, cfg.rounds, cfg.v)


def _algorithm_config(cfg: ExperimentConfig, sigma2: float):
    mech = MechanismParams(
        clip_threshold=cfg.clip_threshold, v=cfg.v, u=cfg.u, sigma2=sigma2
    )
    budget = (
        PrivacyBudget(cfg.epsilon, cfg.delta) if cfg.epsilon is not None else None
    )
    if cfg.algorithm == "scaffnew":
        return ScaffNewConfig(
            eta=cfg.eta, p=cfg.p, iterations=cfg.rounds, mechanism=mech, budget=budget
        )
    return FedAvgConfig(
        eta=cfg.eta,
        tau=cfg.tau,
        rounds=cfg.rounds,
        mechanism=mech,
        budget=budget,
        batch_size=cfg.batch_size,
    )


def _seed_task(args) -> List[RoundRecord]:
    fed, algorithm, alg_cfg, seed, x0 = args
    records, _ = run(algorithm, fed, alg_cfg, seed, x0=x0)
    return records


def _round_rows(
    cfg: ExperimentConfig, seed: int, records: Sequence[RoundRecord]
) -> List[str]:
    tau_or_p = str(cfg.tau) if cfg.algorithm == "fedavg" else fmt_float(cfg.p)
    eps = fmt_float(cfg.epsilon) if cfg.epsilon is not None else "nan"
    dlt = fmt_float(cfg.delta) if cfg.delta is not None else "nan"
    base = (
        f"{seed},{cfg.algorithm},{{round}},{{comm}},{tau_or_p},{fmt_float(cfg.eta)},"
        f"{eps},{dlt},{fmt_float(cfg.clip_threshold)},{{sigma2}},{{psi}},{{loss}},"
        f"{{dist}},{{maxu}},{{clipc}},{{status}}"
    )
    rows = []
    for rec in records:
        rows.append(
            base.format(
                round=rec.round,
                comm=int(rec.communicated),
                sigma2=fmt_float(rec.sigma2),
                psi=fmt_float(rec.psi),
                loss=fmt_float(rec.global_loss),
                dist=fmt_float(rec.dist_opt),
                maxu=fmt_float(rec.max_update_norm),
                clipc=rec.clip_count,
                status=rec.status,
            )
        )
    return rows


def run_experiment(
    cfg: ExperimentConfig,
    seeds: Optional[Sequence[int]] = None,
    out: Optional[str] = None,
    workers: int = 1,
) -> Tuple[str, int]:
    """Run every seed and emit one CSV row per (seed, round).

    Returns (csv_text, diverged_seed_count).  Divergence of one seed is
    recorded in its rows; remaining seeds still run.
    """
    seeds = tuple(seeds) if seeds is not None else cfg.seeds
    sigma2 = _resolve_sigma2(cfg)
    alg_cfg = _algorithm_config(cfg, sigma2)
    x0 = cfg.start_point()
    tasks = [(cfg.federation, cfg.algorithm, alg_cfg, seed, x0) for seed in seeds]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_seed_task, tasks))
    else:
        per_seed = [_seed_task(t) for t in tasks]
    lines = [ROUND_CSV_HEADER]
    diverged = 0
    for seed, records in zip(seeds, per_seed):
        lines.extend(_round_rows(cfg, seed, records))
        if records and records[-1].status != "ok":
            diverged += 1
    text = "\n".join(lines) + "\n"
    target = out if out is not None else cfg.out
    if target:
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text, diverged


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    """Aggregated sweep outcome for one metric."""

    mode: str
    values: Tuple[float, ...]
    epsilons: Tuple[Optional[float], ...]
    means: np.ndarray  # (rows, cols)
    stds: np.ndarray
    failed: np.ndarray  # replications that diverged, per cell
    metric: str = "final_psi"
    argmin: List[Optional[int]] = field(default_factory=list)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        self.failed = np.asarray(self.failed, dtype=np.int64)
        if self.means.shape != (len(self.epsilons), len(self.values)):
            raise ValueError("cell grid does not match row/column labels")
        if not self.argmin:
            self.argmin = []
            for r in range(self.means.shape[0]):
                row = self.means[r]
                if np.isnan(row).all():
                    self.argmin.append(None)
                else:
                    self.argmin.append(int(np.nanargmin(row)))


def _cell_run_params(
    base: ExperimentConfig, spec: SweepSpec, value: float, eps: Optional[float]
) -> Tuple[int, int, Optional[float], float]:
    """(tau, rounds, epsilon, sigma2) for one sweep cell."""
    tau, rounds, epsilon = base.tau, base.rounds, eps
    if spec.mode == "local_steps":
        if base.algorithm != "fedavg":
            raise ConfigError("local-steps sweeps require the fedavg algorithm")
        tau = int(value)
        rounds = spec.budget_steps // tau
    elif spec.mode == "comm_rounds":
        rounds = int(value)
    else:
        epsilon = float(value)
    if epsilon is None:
        sigma2 = 0.0
    else:
        delta = base.delta if base.delta is not None else 1e-5
        p_comm = base.p if base.algorithm == "scaffnew" else 1.0
        sigma2 = calibrate_sigma2(
            PrivacyBudget(epsilon, delta), base.clip_threshold, p_comm, rounds, base.v
        )
    return tau, rounds, epsilon, sigma2


def _cell_task(args):
    fed, algorithm, alg_cfg, seed, x0 = args
    records, state = run(algorithm, fed, alg_cfg, seed, x0=x0)
    last = records[-1]
    return (
        last.psi,
        last.global_loss,
        last.dist_opt,
        state.comm_rounds,
        last.status,
    )


def sweep(
    spec: SweepSpec,
    base: ExperimentConfig,
    metric: str = "final_psi",
    workers: int = 1,
) -> Tuple[SweepResult, str]:
    """Run the full (epsilon-row x value-column x replication) grid.

    Every cell recalibrates the noise variance from its own expected
    communication count; every replication owns an independent seed derived
    from (master seed, mode, cell coordinates, replication).
    Returns the aggregated result and the raw per-replication CSV text.
    """
    if metric not in ("final_psi", "final_loss", "final_dist"):
        raise ConfigError(f"unknown sweep metric {metric!r}")
    if spec.mode == "epsilon":
        rows: Tuple[Optional[float], ...] = (None,)
    else:
        rows = spec.epsilons
    master = base.seeds[0]
    mode_id = _MODE_IDS[spec.mode]
    x0 = base.start_point()

    cells = []
    tasks = []
    for r, eps in enumerate(rows):
        for c, value in enumerate(spec.values):
            tau, rounds, epsilon, sigma2 = _cell_run_params(base, spec, value, eps)
            mech = MechanismParams(
                clip_threshold=base.clip_threshold, v=base.v, u=base.u, sigma2=sigma2
            )
            budget = (
                PrivacyBudget(epsilon, base.delta if base.delta is not None else 1e-5)
                if epsilon is not None
                else None
            )
            if base.algorithm == "scaffnew":
                alg_cfg = ScaffNewConfig(
                    eta=base.eta, p=base.p, iterations=rounds,
                    mechanism=mech, budget=budget,
                )
            else:
                alg_cfg = FedAvgConfig(
                    eta=base.eta, tau=tau, rounds=rounds,
                    mechanism=mech, budget=budget, batch_size=base.batch_size,
                )
            for rep in range(spec.replications):
                seed = streams.mix64(master, mode_id, c, r, rep)
                cells.append((r, c, value, epsilon, rep))
                tasks.append((base.federation, base.algorithm, alg_cfg, seed, x0))

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_cell_task, tasks, chunksize=8))
    else:
        outcomes = [_cell_task(t) for t in tasks]

    n_rows, n_cols = len(rows), len(spec.values)
    finals: Dict[Tuple[int, int], List[Tuple[float, float, float]]] = {
        (r, c): [] for r in range(n_rows) for c in range(n_cols)
    }
    failed = np.zeros((n_rows, n_cols), dtype=np.int64)
    lines = [SWEEP_CSV_HEADER]
    for (r, c, value, epsilon, rep), (psi, lossv, dist, comm, status) in zip(
        cells, outcomes
    ):
        eps_txt = fmt_float(epsilon) if epsilon is not None else "nan"
        lines.append(
            f"{spec.mode},{fmt_float(value)},{eps_txt},{rep},{fmt_float(psi)},"
            f"{fmt_float(lossv)},{fmt_float(dist)},{comm},{status}"
        )
        if status == "ok":
            finals[(r, c)].append((psi, lossv, dist))
        else:
            failed[r, c] += 1

    col = {"final_psi": 0, "final_loss": 1, "final_dist": 2}[metric]
    means = np.full((n_rows, n_cols), np.nan)
    stds = np.full((n_rows, n_cols), np.nan)
    for (r, c), oks in finals.items():
        if oks:
            vals = np.array([o[col] for o in oks])
            means[r, c] = vals.mean()
            stds[r, c] = vals.std()
    result = SweepResult(
        mode=spec.mode,
        values=spec.values,
        epsilons=rows,
        means=means,
        stds=stds,
        failed=failed,
        metric=metric,
    )
    return result, "\n".join(lines) + "\n"


def emit_summary(result: SweepResult) -> str:
    """Human-readable cell table; '*' marks each row's argmin cell."""
    col_labels = [_label(v) for v in result.values]
    header = [f"{result.metric} \\ {result.mode}"] + col_labels + ["failed"]
    body = []
    for r, eps in enumerate(result.epsilons):
        if eps is not None:
            row_label = f"eps={_label(eps)}"
        elif result.mode == "epsilon":
            row_label = "per-cell eps"
        else:
            row_label = "noiseless"
        cells = []
        for c in range(len(result.values)):
            mean = result.means[r, c]
            std = result.stds[r, c]
            if math.isnan(mean):
                text = "failed"
            else:
                text = f"{mean:.4g} +- {std:.4g}"
            if result.argmin[r] == c:
                text = "*" + text
            cells.append(text)
        body.append([row_label] + cells + [str(int(result.failed[r].sum()))])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    out_lines = []
    for row in [header] + body:
        out_lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(out_lines) + "\n"


def _label(v) -> str:
    if v is None:
        return "-"
    if float(v) == int(v):
        return str(int(v))
    return f"{v:g}"


def any_cell_fully_diverged(result: SweepResult, replications: int) -> bool:
    return bool((result.failed >= replications).any())
