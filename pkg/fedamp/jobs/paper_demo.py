#!/usr/bin/env python3
# fedamp/jobs/paper_demo.py
"""
Job `paperdemo`: comparação em escala de bancada com disponibilidade periódica por grupos.

Quatro braços sobre o mesmo cronograma, a mesma população e a mesma semente de execução:

- amplified:        FedAvg generalizado com P = ciclo e η > 1 (plano cor3.2);
- no_amplification: FedAvg padrão, η = 1 (γ pelo plano de η fixo com P = 1);
- wait_minibatch:   espera um ciclo inteiro e dá um passo com os gradientes médios;
- wait_full:        idem, com gradientes exatos.

A ordenação esperada do min‖∇f‖² final é
amplified < {wait_minibatch, wait_full} < no_amplification.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from fedamp.api.schemas import ExperimentConfig, PatternChoice, load_config
from fedamp.config import get_settings
from fedamp.exceptions import ConfigError, DivergenceError
from fedamp.jobs.experiment import (
    EXIT_FAILED,
    EXIT_OK,
    RunOutcome,
    SeedPlan,
    build_population,
    build_schedule,
    execute_replication,
    map_ordered,
    resolve_output,
    run_config,
    write_csv,
    write_meta,
)
from fedamp.logging_config import AUDIT_LOGGER
from fedamp.metrics import job_duration, track_time
from fedamp.services.fedavg_engine import RunMode, run_with_warmup
from fedamp.services.objectives import NoiseModel, Population, initial_gap, initial_point
from fedamp.services.participation import WeightSchedule, rho_bound
from fedamp.services.planner import (
    LRPlan,
    PlanSource,
    lr_corollary1,
    lr_fixed_eta,
    make_plan,
)

logger = logging.getLogger(__name__)

DEMO_DEFAULTS = """
[population]
kind = quadratic
clients = 50
dimension = 10
smoothness = 1.0
condition_number = 4.0
spread = 4.0
groups = 5
group_jitter = 0.2
noise = gaussian
sigma = 1.0
x0_radius = 2.5

[pattern]
kind = periodic_groups
participants = 5
groups = 5
block = 20
offset = random

[run]
local_steps = 5
rounds = 2000

[planner]
directive = cor3.2

[seeds]
master = 0
replications = 5
"""

AMPLIFIED = "amplified"
NO_AMPLIFICATION = "no_amplification"
WAIT_MINIBATCH = "wait_minibatch"
WAIT_FULL = "wait_full"
ARMS = (AMPLIFIED, NO_AMPLIFICATION, WAIT_MINIBATCH, WAIT_FULL)

COMPARISON_COLUMNS = ["arm", "seed", "gamma", "eta", "P", "final_min_grad_norm_sq", "rank"]
LADDER_COLUMNS = ["P", "gamma", "eta", "runs_ok", "median_min_grad_norm_sq",
                  "mean_min_grad_norm_sq"]


def load_demo_config(path: Optional[Union[str, Path]] = None,
                     overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Padrões da demonstração, sobrescritos pelo arquivo (se houver) e pelos overrides."""
    return load_config(path, overrides, defaults=DEMO_DEFAULTS)


# =============================================================================
# Braços
# =============================================================================


@dataclass(frozen=True)
class Arm:
    """Um braço da comparação: configuração de execução e plano de taxas já resolvidos."""

    name: str
    config: ExperimentConfig
    plan: LRPlan
    plan_P: int
    plan_T: int


def demo_cycle(config: ExperimentConfig) -> int:
    if config.pattern.kind is not PatternChoice.PERIODIC_GROUPS:
        raise ConfigError("paperdemo exige pattern.kind = periodic_groups")
    cycle = config.pattern.to_pattern_spec().cycle
    if config.run.rounds // cycle < 2:
        raise ConfigError(
            f"run.rounds={config.run.rounds} deve cobrir ao menos dois ciclos de {cycle} rodadas"
        )
    return cycle


def _checked(plan: LRPlan, arm: str) -> LRPlan:
    if not plan.valid:
        raise ConfigError(f"plano do braço {arm} inválido: {'; '.join(plan.notes)}")
    return plan


def build_arms(config: ExperimentConfig, pop: Population, noise: NoiseModel,
               schedule: WeightSchedule, x0: np.ndarray, cycle: int) -> List[Arm]:
    """Planos por braço; o braço amplificado usa ρ do cronograma, os de espera ρ = 1/√N."""
    L, I, T = pop.L, config.run.local_steps, config.run.rounds
    F = config.planner.f_value or initial_gap(pop, x0)
    sigma = 0.0 if noise.is_null else noise.sigma
    rho = rho_bound(schedule)
    windows = T // cycle

    amplified = _checked(lr_corollary1(L, F, sigma, rho, I, cycle, T), AMPLIFIED)
    standard = _checked(lr_fixed_eta(L, F, sigma, rho, I, 1, T), NO_AMPLIFICATION)
    # um passo global por ciclo: T/ciclo passos com todos os N clientes
    waiting = _checked(lr_fixed_eta(L, F, sigma, 1.0 / math.sqrt(pop.N), I, 1, windows),
                       WAIT_MINIBATCH)

    def arm(name: str, plan: LRPlan, mode: RunMode, plan_P: int, plan_T: int) -> Arm:
        arm_config = config.with_updates(run={"interval": cycle, "mode": mode.value,
                                              "eta": plan.eta, "eval_every": None})
        return Arm(name, arm_config, plan, plan_P, plan_T)

    return [
        arm(AMPLIFIED, amplified, RunMode.GENERALIZED, cycle, T),
        arm(NO_AMPLIFICATION, standard, RunMode.GENERALIZED, 1, T),
        arm(WAIT_MINIBATCH, waiting, RunMode.WAIT_MINIBATCH, 1, windows),
        arm(WAIT_FULL, waiting, RunMode.WAIT_FULL, 1, windows),
    ]


def tune_arm(arm: Arm, pop: Population, noise: NoiseModel, schedule: WeightSchedule,
             x0: np.ndarray, seed: int) -> Arm:
    """γ·multiplicador com menor min‖∇f‖² numa execução de ajuste; η do braço mantido."""
    best_gamma, best_value = None, math.inf
    results: Dict[str, float] = {}
    for multiplier in arm.config.planner.grid_multipliers:
        gamma = arm.plan.gamma * multiplier
        candidate = make_plan(gamma, arm.plan.eta, PlanSource.GRID, pop.L,
                              arm.config.run.local_steps, arm.plan_P, arm.plan_T, [], {})
        try:
            trace = run_with_warmup(pop, noise, schedule, run_config(arm.config, candidate, x0),
                                    seed, warmup_rounds=arm.config.run.warmup_rounds,
                                    warmup_gamma=arm.config.run.warmup_gamma)
            value = trace.final_min
        except DivergenceError:
            value = math.inf
        results[repr(multiplier)] = value
        if value < best_value:
            best_gamma, best_value = gamma, value
    if best_gamma is None:
        raise ConfigError(f"busca em grade do braço {arm.name}: todos os candidatos divergiram")
    AUDIT_LOGGER.info("Busca em grade de γ", {"arm": arm.name, "base_gamma": arm.plan.gamma,
                                              "results": results, "chosen": best_gamma})
    inputs = {**arm.plan.inputs, "base_gamma": arm.plan.gamma,
              "tuned_min_grad_norm_sq": best_value}
    plan = make_plan(best_gamma, arm.plan.eta, PlanSource.GRID, pop.L,
                     arm.config.run.local_steps, arm.plan_P, arm.plan_T, [], inputs)
    return Arm(arm.name, arm.config, plan, arm.plan_P, arm.plan_T)


# =============================================================================
# Classificação
# =============================================================================


def rank_arms(finals: Dict[str, Optional[float]]) -> Dict[str, int]:
    """Posição 1 = menor min‖∇f‖²; braços divergidos ficam por último, na ordem de ARMS."""
    order = sorted(finals, key=lambda name: (
        finals[name] is None or not math.isfinite(finals[name]),
        finals[name] if finals[name] is not None else math.inf,
        ARMS.index(name) if name in ARMS else len(ARMS),
    ))
    return {name: position + 1 for position, name in enumerate(order)}


def ordering_holds(finals: Dict[str, Optional[float]]) -> bool:
    """amplified < {wait_minibatch, wait_full} < no_amplification."""
    values = {name: finals.get(name) for name in ARMS}
    if any(v is None or not math.isfinite(v) for v in values.values()):
        return False
    waits = (values[WAIT_MINIBATCH], values[WAIT_FULL])
    return values[AMPLIFIED] < min(waits) and max(waits) < values[NO_AMPLIFICATION]


def default_ladder(cycle: int, T: int) -> List[int]:
    """1, ciclo/4, ciclo/2, ciclo, 2·ciclo limitados a [1, T/2], sem repetição."""
    upper = max(1, T // 2)
    raw = [1, cycle // 4, cycle // 2, cycle, 2 * cycle]
    return sorted({min(max(int(p), 1), upper) for p in raw})


# =============================================================================
# Job
# =============================================================================


def _run_arms(arms: Sequence[Arm], pop: Population, noise: NoiseModel,
              schedules: Sequence[WeightSchedule], x0: np.ndarray, seeds: SeedPlan,
              workers: int) -> Dict[str, List[RunOutcome]]:
    replications = len(schedules)

    def one(index: int) -> RunOutcome:
        arm, r = arms[index // replications], index % replications
        return execute_replication(arm.config, pop, noise, schedules[r], arm.plan, x0,
                                   seeds.runs[r], f"{arm.name}:r{r}")

    outcomes = map_ordered(one, len(arms) * replications, workers)
    return {arm.name: outcomes[i * replications:(i + 1) * replications]
            for i, arm in enumerate(arms)}


def _ladder_rows(config: ExperimentConfig, pop: Population, noise: NoiseModel,
                 schedules: Sequence[WeightSchedule], x0: np.ndarray, seeds: SeedPlan,
                 cycle: int, workers: int) -> List[Dict[str, Any]]:
    L, I, T = pop.L, config.run.local_steps, config.run.rounds
    F = config.planner.f_value or initial_gap(pop, x0)
    sigma = 0.0 if noise.is_null else noise.sigma
    rho = rho_bound(schedules[0])
    upper = max(1, T // 2)
    ladder = (sorted({min(max(int(p), 1), upper) for p in config.demo.ladder})
              if config.demo.ladder else default_ladder(cycle, T))

    rows = []
    for P in ladder:
        plan = _checked(lr_corollary1(L, F, sigma, rho, I, P, T), f"{AMPLIFIED}@P={P}")
        arm = Arm(f"{AMPLIFIED}@P={P}",
                  config.with_updates(run={"interval": P, "eta": plan.eta, "eval_every": None,
                                           "mode": RunMode.GENERALIZED.value}),
                  plan, P, T)
        outcomes = _run_arms([arm], pop, noise, schedules, x0, seeds, workers)[arm.name]
        values = np.array([o.trace.final_min for o in outcomes if o.ok], dtype=np.float64)
        rows.append({
            "P": P, "gamma": plan.gamma, "eta": plan.eta, "runs_ok": int(values.size),
            "median_min_grad_norm_sq": float(np.median(values)) if values.size else float("nan"),
            "mean_min_grad_norm_sq": float(values.mean()) if values.size else float("nan"),
        })
        logger.info("escada de P", {"P": P, "runs_ok": int(values.size)})
    return rows


@track_time(job_duration, job="paperdemo")
def run_paper_demo(config: ExperimentConfig, out_dir: Optional[Path] = None,
                   workers: Optional[int] = None) -> int:
    """Escreve comparison.csv, comparison.svg, p_ladder.csv e demo_meta.txt.

    Retorna 2 quando a ordenação esperada vale em menos de ⌈min_agreement·replicações⌉
    sementes.
    """
    settings = get_settings()
    workers = workers or config.run.workers or settings.workers
    out = resolve_output(config, out_dir)
    if config.demo.warmup_rounds:
        config = config.with_updates(run={"warmup_rounds": config.demo.warmup_rounds})
    cycle = demo_cycle(config)
    replications = config.seeds.replications

    seeds = SeedPlan.derive(config.seeds.master, replications)
    pop = build_population(config, seeds.population)
    noise = config.population.noise_model()
    x0 = initial_point(pop, config.population.x0_radius, seeds.x0)
    schedules = [build_schedule(config, pop.N, s) for s in seeds.schedules]
    arms = build_arms(config, pop, noise, schedules[0], x0, cycle)
    if config.demo.tune:
        arms = [tune_arm(arm, pop, noise, schedules[0], x0, seeds.tuning) for arm in arms]
    for arm in arms:
        AUDIT_LOGGER.info("Plano do braço", {"arm": arm.name, **arm.plan.to_dict()})

    results = _run_arms(arms, pop, noise, schedules, x0, seeds, workers)

    rows: List[Dict[str, Any]] = []
    agreements = 0
    rankings: Dict[str, Dict[str, int]] = {}
    for r in range(replications):
        finals = {arm.name: (results[arm.name][r].trace.final_min
                             if results[arm.name][r].ok else None) for arm in arms}
        ranks = rank_arms(finals)
        rankings[f"r{r}"] = ranks
        agreements += ordering_holds(finals)
        for arm in arms:
            rows.append({
                "arm": arm.name,
                "seed": np.uint64(seeds.runs[r]),
                "gamma": arm.plan.gamma,
                "eta": arm.plan.eta,
                "P": arm.config.run.interval,
                "final_min_grad_norm_sq": finals[arm.name] if finals[arm.name] is not None
                else float("nan"),
                "rank": ranks[arm.name],
            })
    write_csv(pd.DataFrame(rows, columns=COMPARISON_COLUMNS), out / "comparison.csv")

    ladder = _ladder_rows(config, pop, noise, schedules, x0, seeds, cycle, workers)
    write_csv(pd.DataFrame(ladder, columns=LADDER_COLUMNS), out / "p_ladder.csv")

    traces = {arm.name: results[arm.name][0].trace for arm in arms if results[arm.name][0].ok}
    if config.output.chart and traces:
        from fedamp.jobs.charts import render_chart

        render_chart({name: (trace.t, trace.grad_norm_sq) for name, trace in traces.items()},
                     out / "comparison.svg", title=f"P = {cycle}, semente r0")

    required = math.ceil(config.demo.min_agreement * replications)
    meta: Dict[str, Dict[str, Any]] = {
        "seeds": seeds.to_dict(),
        "schedule": {"descriptor": schedules[0].descriptor, "cycle": cycle,
                     "rho": rho_bound(schedules[0]), "F_exact": initial_gap(pop, x0)},
        "agreement": {"seeds_in_order": agreements, "required": required,
                      "replications": replications},
    }
    for arm in arms:
        meta[f"plan:{arm.name}"] = {**arm.plan.to_dict(), "run_P": arm.config.run.interval,
                                    "mode": arm.config.run.mode}
    for run_id, ranks in rankings.items():
        meta[f"rank:{run_id}"] = ranks
    write_meta(out / "demo_meta.txt", meta)

    AUDIT_LOGGER.info("Comparação concluída", {"seeds_in_order": agreements,
                                               "required": required, "rankings": rankings})
    if agreements < required:
        logger.error("ordenação esperada não se manteve",
                     {"seeds_in_order": agreements, "required": required,
                      "rankings": rankings})
        return EXIT_FAILED
    return EXIT_OK
