#!/usr/bin/env python3
# fedamp/jobs/experiment.py
"""
Jobs `run` e `sweep`.

Fluxo: configuração validada -> sementes derivadas -> população e x₀ -> cronograma por
replicação -> plano de taxas -> execuções -> metrics.csv / meta.txt (ou sweep.csv).
As replicações (e, na varredura, os pontos) rodam em paralelo (threads) e são gravadas em ordem.
"""
from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, TypeVar

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from fedamp.api.schemas import (
    ExperimentConfig,
    PatternChoice,
    PlanDirective,
    PopulationKind,
    format_value,
)
from fedamp.config import get_settings
from fedamp.exceptions import ConfigError, DivergenceError, FedAmpError
from fedamp.logging_config import AUDIT_LOGGER
from fedamp.metrics import job_duration, sweep_points_total, track_time
from fedamp.services.convergence import fit_power_law
from fedamp.services.fedavg_engine import RunConfig, Trace, run, run_with_warmup
from fedamp.services.objectives import (
    NoiseModel,
    Population,
    build_logistic,
    build_quadratic,
    initial_gap,
    initial_point,
)
from fedamp.services.participation import (
    WeightSchedule,
    generate_schedule,
    rho_bound,
)
from fedamp.services.planner import (
    LRPlan,
    PlanSource,
    lr_corollary1,
    lr_corollary2,
    lr_fixed_eta,
    make_plan,
    manual_plan,
    speedup_factor,
    wait_rate_prediction,
)
from fedamp.services.substreams import derive_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILED = 2

DERIVATION_RULE = 'sha1("<master>:<label>")[:16] como u64'
META_KEY_DELIMITERS = ("=", ":")

_T = TypeVar("_T")

# =============================================================================
# Sementes
# =============================================================================


@dataclass(frozen=True)
class SeedPlan:
    """Sementes rotuladas derivadas da semente mestra."""

    master: int
    population: int
    x0: int
    tuning: int
    schedules: List[int]
    runs: List[int]

    @classmethod
    def derive(cls, master: int, replications: int) -> "SeedPlan":
        return cls(
            master=int(master),
            population=derive_seed(master, "population"),
            x0=derive_seed(master, "x0"),
            tuning=derive_seed(master, "tuning"),
            schedules=[derive_seed(master, f"schedule:{r}") for r in range(replications)],
            runs=[derive_seed(master, f"run:{r}") for r in range(replications)],
        )

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "master": self.master, "rule": DERIVATION_RULE, "population": self.population,
            "x0": self.x0, "tuning": self.tuning,
        }
        for r, (sched, seed) in enumerate(zip(self.schedules, self.runs)):
            data[f"schedule_{r}"] = sched
            data[f"run_{r}"] = seed
        return data


# =============================================================================
# Construção
# =============================================================================


def build_population(config: ExperimentConfig, seed: int) -> Population:
    section = config.population
    if section.kind is PopulationKind.LOGISTIC:
        return build_logistic(
            section.clients, section.dimension, section.samples_per_client,
            section.regularization, seed, label_skew=section.label_skew,
            batch_size=section.batch_size,
        )
    pop = build_quadratic(
        section.clients, section.dimension, section.smoothness, section.spread, seed,
        condition_number=section.condition_number,
        groups=section.groups,
        group_jitter=section.group_jitter,
        curvature=section.curvature.value,
        curvature_jitter=section.curvature_jitter,
    )
    return pop.scaled(section.scale) if section.scale != 1.0 else pop


def schedule_rounds(config: ExperimentConfig) -> int:
    return config.run.rounds + config.run.warmup_rounds


def build_schedule(config: ExperimentConfig, N: int, seed: int) -> WeightSchedule:
    """Cronograma com T + warmup_rounds rodadas (ou lido de CSV)."""
    T = schedule_rounds(config)
    if config.pattern.kind is PatternChoice.FILE:
        schedule = WeightSchedule.from_csv(config.pattern.path, N=N)
        if schedule.T < T:
            raise ConfigError(f"cronograma em {config.pattern.path} tem {schedule.T} rodadas, "
                              f"a execução precisa de {T}")
        return schedule
    return generate_schedule(config.pattern.to_pattern_spec(), N, T, seed)


def run_config(config: ExperimentConfig, plan: LRPlan, x0: np.ndarray,
               workers: int = 1) -> RunConfig:
    settings = get_settings()
    section = config.run
    return RunConfig(
        gamma=plan.gamma,
        eta=plan.eta,
        I=section.local_steps,
        P=section.interval,
        T=section.rounds,
        x0=x0,
        eval_every=section.eval_every,
        mode=section.mode,
        simulate_all=section.simulate_all,
        workers=workers,
        divergence_threshold=settings.divergence_threshold,
    )


def _formula_plan(directive: PlanDirective, L: float, F: float, sigma: float, rho: float,
                  I: int, P: int, T: int, eta: float) -> LRPlan:
    if directive is PlanDirective.COR3_2:
        return lr_corollary1(L, F, sigma, rho, I, P, T)
    if directive is PlanDirective.COR3_3:
        return lr_corollary2(L, F, sigma, rho, I, P, T)
    return lr_fixed_eta(L, F, sigma, rho, I, P, T, eta=eta)


def plan_learning_rates(config: ExperimentConfig, pop: Population, noise: NoiseModel,
                        schedule: WeightSchedule, x0: np.ndarray, seeds: SeedPlan) -> LRPlan:
    """γ e η conforme planner.directive; ℱ exato a partir de x₀ salvo se f_value for dado."""
    run_section = config.run
    L, I, P, T = pop.L, run_section.local_steps, run_section.interval, run_section.rounds
    directive = config.planner.directive
    if directive is PlanDirective.MANUAL:
        if run_section.gamma is None:
            raise ConfigError("run.gamma é obrigatório com planner.directive = manual")
        plan = manual_plan(run_section.gamma, run_section.eta, L, I, P, T)
    else:
        F = config.planner.f_value or initial_gap(pop, x0)
        rho = rho_bound(schedule)
        sigma = noise.sigma if not noise.is_null else 0.0
        if directive is PlanDirective.GRID:
            base = _formula_plan(config.planner.grid_base, L, F, sigma, rho, I, P, T,
                                 run_section.eta)
            plan = grid_search_gamma(config, pop, noise, schedule, x0, base, seeds.tuning)
        else:
            plan = _formula_plan(directive, L, F, sigma, rho, I, P, T, run_section.eta)
        if not plan.valid:
            raise ConfigError(f"plano {plan.source.value} inválido: {'; '.join(plan.notes)}")
    AUDIT_LOGGER.info("Plano de taxas", plan.to_dict())
    return plan


def grid_search_gamma(config: ExperimentConfig, pop: Population, noise: NoiseModel,
                      schedule: WeightSchedule, x0: np.ndarray, base: LRPlan,
                      seed: int) -> LRPlan:
    """Escolhe γ = base·multiplicador com menor min‖∇f‖² final numa execução de ajuste."""
    if not base.valid:
        raise ConfigError(f"plano base da busca inválido: {'; '.join(base.notes)}")
    best_gamma, best_value = None, math.inf
    results: Dict[str, float] = {}
    for multiplier in config.planner.grid_multipliers:
        gamma = base.gamma * multiplier
        candidate = make_plan(gamma, base.eta, PlanSource.GRID, pop.L, config.run.local_steps,
                              config.run.interval, config.run.rounds, [], {})
        try:
            trace = run(pop, noise, schedule, run_config(config, candidate, x0), seed)
            value = trace.final_min
        except DivergenceError:
            value = math.inf
        results[repr(multiplier)] = value
        if value < best_value:
            best_gamma, best_value = gamma, value
    if best_gamma is None:
        raise ConfigError("busca em grade: todos os candidatos divergiram")
    AUDIT_LOGGER.info("Busca em grade de γ", {"base_gamma": base.gamma, "results": results,
                                              "chosen": best_gamma})
    inputs = {**base.inputs, "base_gamma": base.gamma, "tuned_min_grad_norm_sq": best_value}
    return make_plan(best_gamma, base.eta, PlanSource.GRID, pop.L, config.run.local_steps,
                     config.run.interval, config.run.rounds, [], inputs)


# =============================================================================
# Execução
# =============================================================================


@dataclass
class RunOutcome:
    run_id: str
    seed: int
    trace: Optional[Trace] = None
    diverged_round: Optional[int] = None
    diverged_norm: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.trace is not None

    @property
    def status(self) -> str:
        if self.ok:
            return "ok"
        return f"diverged at round {self.diverged_round} (norm {self.diverged_norm:.6g})"


def execute_replication(config: ExperimentConfig, pop: Population, noise: NoiseModel,
                        schedule: WeightSchedule, plan: LRPlan, x0: np.ndarray, seed: int,
                        run_id: str, workers: int = 1) -> RunOutcome:
    """Uma execução (com aquecimento opcional); divergência vira RunOutcome sem trace."""
    try:
        trace = run_with_warmup(
            pop, noise, schedule, run_config(config, plan, x0, workers), seed,
            warmup_rounds=config.run.warmup_rounds, warmup_gamma=config.run.warmup_gamma,
        )
    except DivergenceError as exc:
        logger.warning("execução divergiu", {"run_id": run_id, "round": exc.round})
        return RunOutcome(run_id, seed, diverged_round=exc.round, diverged_norm=exc.norm)
    return RunOutcome(run_id, seed, trace=trace)


def map_ordered(func: Callable[[int], _T], count: int, workers: int) -> List[_T]:
    """func(0..count−1) em threads; o resultado segue a ordem dos índices."""
    if workers <= 1 or count < 2:
        return [func(i) for i in range(count)]
    return list(Parallel(n_jobs=workers, backend="threading")(
        delayed(func)(i) for i in range(count)
    ))


@dataclass
class ReplicationSet:
    plan: LRPlan
    seeds: SeedPlan
    schedules: List[WeightSchedule]
    outcomes: List[RunOutcome]
    population: Population
    F: float

    @property
    def finals(self) -> List[Optional[float]]:
        return [o.trace.final_min if o.ok else None for o in self.outcomes]


def run_replications(config: ExperimentConfig, workers: int = 1) -> ReplicationSet:
    """Todas as replicações de uma configuração; o plano usa o cronograma da replicação 0."""
    replications = config.seeds.replications
    seeds = SeedPlan.derive(config.seeds.master, replications)
    pop = build_population(config, seeds.population)
    noise = config.population.noise_model()
    x0 = initial_point(pop, config.population.x0_radius, seeds.x0)
    schedules = [build_schedule(config, pop.N, s) for s in seeds.schedules]
    plan = plan_learning_rates(config, pop, noise, schedules[0], x0, seeds)

    # com várias replicações as threads ficam nas replicações, não nos clientes
    inner = workers if replications == 1 else 1

    def one(r: int) -> RunOutcome:
        return execute_replication(config, pop, noise, schedules[r], plan, x0, seeds.runs[r],
                                   f"r{r}", inner)

    outcomes = map_ordered(one, replications, workers)
    return ReplicationSet(plan, seeds, schedules, outcomes, pop, initial_gap(pop, x0))


# =============================================================================
# Saída
# =============================================================================


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_meta(path: Path, sections: Mapping[str, Mapping[str, Any]]) -> Path:
    """Arquivo INI de metadados; valores formatados como no arquivo de configuração."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment]
    for name, values in sections.items():
        parser.add_section(name)
        for key, value in values.items():
            if any(delimiter in str(key) for delimiter in META_KEY_DELIMITERS):
                raise ValueError(f"chave de metadados com delimitador INI: {key!r}")
            parser.set(name, str(key), format_value(value))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def _flatten_config(config: ExperimentConfig) -> Dict[str, str]:
    flat: Dict[str, str] = {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(config.to_ini())
    for name in parser.sections():
        for key, value in parser.items(name):
            flat[f"{name}.{key}"] = value
    return flat


def metrics_frame(outcomes: Sequence[RunOutcome]) -> pd.DataFrame:
    frames = []
    for outcome in outcomes:
        if not outcome.ok:
            continue
        frame = outcome.trace.to_frame()
        frame.insert(0, "seed", np.uint64(outcome.seed))
        frame.insert(0, "run_id", outcome.run_id)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["run_id", "seed", "t", "f", "grad_norm_sq",
                                     "min_grad_norm_sq", "is_boundary"])
    return pd.concat(frames, ignore_index=True)


def resolve_output(config: ExperimentConfig, out: Optional[Path]) -> Path:
    return Path(out or config.output.directory or get_settings().output_dir)


@track_time(job_duration, job="run")
def run_experiment(config: ExperimentConfig, out_dir: Optional[Path] = None,
                   workers: Optional[int] = None) -> int:
    """Job `run`: 0 se todas as execuções terminam, 2 se alguma diverge."""
    settings = get_settings()
    workers = workers or config.run.workers or settings.workers
    out = resolve_output(config, out_dir)
    AUDIT_LOGGER.info("Início do experimento", {"out": str(out), "workers": workers,
                                                 "replications": config.seeds.replications})
    result = run_replications(config, workers)
    write_csv(metrics_frame(result.outcomes), out / "metrics.csv")

    schedule = result.schedules[0]
    write_meta(out / "meta.txt", {
        "config": _flatten_config(config),
        "seeds": result.seeds.to_dict(),
        "schedule": {
            "descriptor": schedule.descriptor,
            "rho": rho_bound(schedule),
            "fallback_count": sum(s.fallback_count for s in result.schedules),
            "rounds": schedule.T,
        },
        "plan": {**result.plan.to_dict(), "F_exact": result.F},
        "runs": {o.run_id: o.status for o in result.outcomes},
    })
    if config.output.chart and any(o.ok for o in result.outcomes):
        from fedamp.jobs.charts import render_chart

        render_chart({o.run_id: (o.trace.t, o.trace.grad_norm_sq)
                      for o in result.outcomes if o.ok}, out / "metrics.svg")

    failed = [o for o in result.outcomes if not o.ok]
    AUDIT_LOGGER.info("Fim do experimento", {
        "ok": len(result.outcomes) - len(failed), "diverged": len(failed),
        "finals": result.finals,
    })
    if failed:
        for outcome in failed:
            logger.error("execução divergiu", {"run_id": outcome.run_id,
                                               "round": outcome.diverged_round})
        return EXIT_FAILED
    return EXIT_OK


# =============================================================================
# Varredura
# =============================================================================


SWEEP_COLUMNS = ["axis", "value", "T", "S", "P", "runs_ok", "runs_failed",
                 "mean_min_grad_norm_sq", "std_min_grad_norm_sq", "median_min_grad_norm_sq"]


def sweep_point_config(config: ExperimentConfig, value: int) -> ExperimentConfig:
    """Configuração de um ponto da varredura."""
    sweep = config.sweep
    if sweep.axis == "T":
        return config.with_updates(run={"rounds": value})
    if sweep.axis == "P":
        return config.with_updates(run={"interval": value})
    run_changes: Dict[str, Any] = {}
    if sweep.fixed_product is not None:
        run_changes["rounds"] = sweep.fixed_product // value
    if sweep.align_interval:
        run_changes["interval"] = max(1, config.population.clients // value)
    return config.with_updates(pattern={"participants": value}, run=run_changes)


@dataclass
class SweepPoint:
    value: int
    config: ExperimentConfig
    finals: List[Optional[float]] = field(default_factory=list)
    rho: float = float("nan")
    appearances: int = 0
    error: Optional[str] = None

    @property
    def ok_values(self) -> np.ndarray:
        return np.array([v for v in self.finals if v is not None], dtype=np.float64)

    def row(self, axis: str) -> Dict[str, Any]:
        values = self.ok_values
        run_section = self.config.run
        return {
            "axis": axis,
            "value": self.value,
            "T": run_section.rounds,
            "S": self.config.pattern.participants or self.config.population.clients,
            "P": run_section.interval,
            "runs_ok": int(values.size),
            "runs_failed": len(self.finals) - int(values.size) if self.error is None
            else self.config.seeds.replications,
            "mean_min_grad_norm_sq": float(values.mean()) if values.size else float("nan"),
            "std_min_grad_norm_sq": float(values.std()) if values.size else float("nan"),
            "median_min_grad_norm_sq": float(np.median(values)) if values.size else float("nan"),
        }


def min_appearances(schedule: WeightSchedule, P: int) -> int:
    """M: menor número de aparições de um cliente numa janela alinhada de P rodadas."""
    K = schedule.T // P
    if K == 0:
        return 0
    active = schedule.weights[: K * P].reshape(K, P, schedule.N) > 0.0
    return int(active.sum(axis=1).min())


@track_time(job_duration, job="sweep")
def run_sweep(config: ExperimentConfig, out_dir: Optional[Path] = None,
              workers: Optional[int] = None) -> int:
    """Job `sweep`: pontos que falham são registrados; 2 só se todos falharem."""
    if config.sweep is None:
        raise ConfigError("seção [sweep] ausente")
    if not config.sweep.values:
        raise ConfigError("sweep.values vazio")
    settings = get_settings()
    workers = workers or config.run.workers or settings.workers
    out = resolve_output(config, out_dir)
    axis = config.sweep.axis

    values = [int(value) for value in config.sweep.values]
    # com vários pontos as threads ficam nos pontos, não nas replicações
    inner = workers if len(values) == 1 else 1
    progress = tqdm(total=len(values), desc="pontos", disable=not settings.progress)

    def one(i: int) -> SweepPoint:
        point_config = sweep_point_config(config, values[i])
        point = SweepPoint(values[i], point_config)
        try:
            result = run_replications(point_config, inner)
            point.finals = result.finals
            point.rho = rho_bound(result.schedules[0])
            point.appearances = min_appearances(result.schedules[0], point_config.run.interval)
        except FedAmpError as exc:
            point.error = str(exc)
            logger.error("ponto da varredura falhou", {"axis": axis, "value": values[i],
                                                       "error": str(exc)})
        status = "ok" if point.error is None and point.ok_values.size else "failed"
        sweep_points_total.labels(status=status).inc()
        progress.update(1)
        return point

    points = map_ordered(one, len(values), workers)
    progress.close()

    rows = [point.row(axis) for point in points]
    write_csv(pd.DataFrame(rows, columns=SWEEP_COLUMNS), out / "sweep.csv")
    _write_sweep_summary(out / "sweep_summary.txt", config, points, rows)

    if all(row["runs_ok"] == 0 for row in rows):
        logger.error("todos os pontos da varredura falharam", {"axis": axis})
        return EXIT_FAILED
    return EXIT_OK


def _write_sweep_summary(path: Path, config: ExperimentConfig, points: Sequence[SweepPoint],
                         rows: Sequence[Dict[str, Any]]) -> None:
    axis = config.sweep.axis
    x = [row[axis] if axis in ("T", "P") else row["value"] for row in rows]
    medians = [row["median_min_grad_norm_sq"] for row in rows]
    fit_section: Dict[str, Any]
    try:
        fit = fit_power_law(x, medians)
        fit_section = {"axis": axis, "statistic": "median", "slope": fit.slope,
                       "intercept": fit.intercept, "stderr": fit.stderr,
                       "n_points": fit.n_points,
                       "excluded": [points[i].value for i in fit.excluded] or "none"}
    except FedAmpError as exc:
        fit_section = {"axis": axis, "statistic": "median", "error": str(exc)}

    finite = [m for m in medians if np.isfinite(m) and m > 0]
    speedup: Dict[str, Any] = {
        "max_over_min_median": max(finite) / min(finite) if finite else float("nan"),
    }
    sigma = config.population.sigma
    for point, row in zip(points, rows):
        if np.isfinite(point.rho) and point.rho > 0:
            speedup[f"speedup_factor_{point.value}"] = speedup_factor(point.rho)
        if sigma > 0 and point.appearances > 0:
            speedup[f"wait_rate_prediction_{point.value}"] = wait_rate_prediction(
                sigma, row["P"], point.appearances, config.population.clients, row["T"]
            )
    errors = {str(p.value): p.error for p in points if p.error is not None}
    sections = {"fit": fit_section, "speedup": speedup}
    if errors:
        sections["errors"] = errors
    write_meta(path, sections)
    AUDIT_LOGGER.info("Resumo da varredura", {**fit_section, **speedup})
