#!/usr/bin/env python3
# fedamp/jobs/diagnostics.py
"""
Jobs `diagnose` (constantes de divergência por P) e `bounds` (verificações de concentração).
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from fedamp.api.schemas import BoundChoice, DivergenceMode, ExperimentConfig
from fedamp.config import get_settings
from fedamp.exceptions import ConfigError, PopulationError
from fedamp.jobs.experiment import (
    EXIT_FAILED,
    EXIT_OK,
    SeedPlan,
    build_population,
    build_schedule,
    execute_replication,
    plan_learning_rates,
    resolve_output,
    write_csv,
    write_meta,
)
from fedamp.logging_config import AUDIT_LOGGER
from fedamp.metrics import job_duration, track_time
from fedamp.services.concentration import (
    chebyshev_mixing_check,
    covariance_cutoff,
    hoeffding_check,
    independent_across_rounds,
    long_run_variance,
)
from fedamp.services.divergence import (
    DivergenceReport,
    SampleSpec,
    divergence_exact,
    divergence_sampled,
)
from fedamp.services.objectives import QuadraticPopulation, initial_point
from fedamp.services.participation import PatternKind, lag_covariances
from fedamp.services.planner import choose_amplification_interval, predicted_delta2
from fedamp.services.substreams import derive_seed

logger = logging.getLogger(__name__)

DIVERGENCE_COLUMNS = ["P", "beta2", "nu2", "delta2", "d2", "exact"]
BOUNDS_COLUMNS = ["bound", "P", "c", "threshold", "trials", "violation_rate", "pass"]

# =============================================================================
# diagnose
# =============================================================================


def _use_exact(config: ExperimentConfig, pop: Any) -> bool:
    mode = config.diagnose.mode
    homogeneous = isinstance(pop, QuadraticPopulation) and pop.homogeneous
    if mode is DivergenceMode.EXACT:
        if not homogeneous:
            raise PopulationError(
                "modo exato exige quadrática homogênea; use diagnose.mode = sampled"
            )
        return True
    if mode is DivergenceMode.SAMPLED:
        return False
    return homogeneous


@track_time(job_duration, job="diagnose")
def run_diagnose(config: ExperimentConfig, out_dir: Optional[Path] = None,
                 workers: Optional[int] = None) -> int:
    """Escreve divergence.csv (uma linha por P da escada) e divergence_meta.txt."""
    out = resolve_output(config, out_dir)
    seeds = SeedPlan.derive(config.seeds.master, 1)
    pop = build_population(config, seeds.population)
    x0 = initial_point(pop, config.population.x0_radius, seeds.x0)
    schedule = build_schedule(config, pop.N, seeds.schedules[0])
    exact = _use_exact(config, pop)

    sample_spec = None
    if not exact:
        iterates = None
        if config.diagnose.include_iterates:
            noise = config.population.noise_model()
            plan = plan_learning_rates(config, pop, noise, schedule, x0, seeds)
            outcome = execute_replication(config, pop, noise, schedule, plan, x0, seeds.runs[0],
                                          "r0", workers or 1)
            iterates = np.stack([x0, outcome.trace.x_final]) if outcome.ok else x0[None, :]
        radius = config.diagnose.sample_radius
        sample_spec = SampleSpec(
            count=config.diagnose.samples,
            radius=config.population.x0_radius if radius is None else radius,
            center=x0,
            seed=derive_seed(config.seeds.master, "montecarlo:samples"),
            iterates=iterates,
        )

    reports: List[DivergenceReport] = []
    for P in config.diagnose.ladder:
        if exact:
            reports.append(divergence_exact(pop, schedule, int(P)))
        else:
            reports.append(divergence_sampled(pop, schedule, int(P), sample_spec))
    write_csv(pd.DataFrame([r.to_row() for r in reports], columns=DIVERGENCE_COLUMNS),
              out / "divergence.csv")

    covariances = lag_covariances(schedule.weights, min(config.bounds.max_lag, schedule.T - 1))
    upsilon2 = max(long_run_variance(covariances, covariance_cutoff(covariances)), 0.0)
    sections: Dict[str, Dict[str, Any]] = {
        "schedule": {"descriptor": schedule.descriptor, "rounds": schedule.T,
                     "upsilon2_estimate": upsilon2},
    }
    for report in reports:
        section = {
            "joint_max": report.joint_max,
            "decomposition_residual": report.decomposition_residual,
            "decomposition_residual_rel": report.decomposition_residual_rel,
            "delta2_variance_bound": report.delta2_variance_bound,
            "lower_bound": report.lower_bound,
            "samples": report.samples,
        }
        if math.isfinite(report.d2):
            prediction = predicted_delta2(upsilon2, pop.N, report.d2, report.P,
                                          config.bounds.mixing_c)
            section["predicted_delta2_chebyshev"] = prediction.chebyshev
            section["predicted_delta2_hoeffding"] = prediction.hoeffding
        sections[f"P={report.P}"] = section
    write_meta(out / "divergence_meta.txt", sections)

    broken = [r.P for r in reports if not r.decomposition_holds]
    AUDIT_LOGGER.info("Diagnóstico de divergência", {
        "exact": exact, "ladder": [r.P for r in reports],
        "delta2": [r.delta2 for r in reports], "decomposition_broken": broken,
    })
    if broken:
        logger.error("β̃²(t)+ν̃²(t) acima de d²", {"P": broken})
        return EXIT_FAILED
    return EXIT_OK


# =============================================================================
# bounds
# =============================================================================


def _resolve_bound(config: ExperimentConfig) -> BoundChoice:
    choice = config.bounds.bound
    if choice is not BoundChoice.AUTO:
        return choice
    spec = config.pattern.to_pattern_spec()
    if independent_across_rounds(spec):
        return BoundChoice.HOEFFDING
    if spec.kind is PatternKind.MARKOV_AVAILABILITY:
        return BoundChoice.CHEBYSHEV
    raise ConfigError(f"nenhuma verificação de concentração para {spec.describe()}")


@track_time(job_duration, job="bounds")
def run_bounds(config: ExperimentConfig, out_dir: Optional[Path] = None,
               workers: Optional[int] = None) -> int:
    """Escreve bounds.csv; 2 se alguma verificação reprovar."""
    out = resolve_output(config, out_dir)
    workers = workers or config.run.workers or get_settings().workers
    spec = config.pattern.to_pattern_spec()
    N = config.population.clients
    bounds = config.bounds
    seed = derive_seed(config.seeds.master, "montecarlo:bounds")
    choice = _resolve_bound(config)

    meta: Dict[str, Dict[str, Any]] = {"pattern": {"descriptor": spec.describe(), "N": N}}
    if choice is BoundChoice.HOEFFDING:
        checks = [hoeffding_check(spec, N, bounds.interval, bounds.c, bounds.trials, seed,
                                  workers)]
    else:
        report = chebyshev_mixing_check(spec, N, bounds.ladder, bounds.mixing_trials, seed,
                                        c=bounds.mixing_c, max_lag=bounds.max_lag)
        checks = report.checks
        suggestion = choose_amplification_interval(report.upsilon2, N, config.run.local_steps,
                                                   config.run.rounds)
        meta["mixing"] = {
            "slope": report.slope, "intercept": report.intercept,
            "slope_stderr": report.slope_stderr, "cov_ratio": report.cov_ratio,
            "upsilon2": report.upsilon2,
            "cutoff_lag": report.cutoff_lag if report.cutoff_lag is not None else "none",
            "converged": report.converged, "rounds": report.rounds,
            "suggested_P": suggestion.P, "suggested_P_raw": suggestion.raw,
            "suggested_P_clamped": suggestion.clamped,
        }
        for P, variance in zip(report.P_values, report.variances):
            meta["mixing"][f"variance_{int(P)}"] = float(variance)

    write_csv(pd.DataFrame([check.to_row() for check in checks], columns=BOUNDS_COLUMNS),
              out / "bounds.csv")
    write_meta(out / "bounds_meta.txt", meta)
    failed = [check for check in checks if not check.passed]
    if failed:
        logger.error("verificações de concentração reprovadas",
                     {"bounds": [(c.bound, c.P, c.violation_rate) for c in failed]})
        return EXIT_FAILED
    return EXIT_OK
