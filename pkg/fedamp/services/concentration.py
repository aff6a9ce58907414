"""
Verificações empíricas de concentração das médias de participação por janela.

- Hoeffding: padrões independentes entre rodadas; limiar ln(2/c)/(2P) para (q̄ − 1/N)².
- Mistura/Chebyshev: padrões estacionários (disponibilidade markoviana); estima Var(q̄) por P,
  a inclinação log-log, υ̂² = Var(q) + 2Σ_p Cov(q_t, q_{t+p}) e as taxas de violação em υ̂²/(cP).

As violações são contadas por evento (janela, cliente); a taxa divide por janelas·N e a folga
de aprovação é 3·√(c(1−c)/janelas).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from fedamp.exceptions import ConfigError
from fedamp.logging_config import AUDIT_LOGGER
from fedamp.metrics import bound_checks_total
from fedamp.services.participation import (
    PatternKind,
    PatternSpec,
    generate_schedule,
    lag_covariances,
    window_averages,
)
from fedamp.services.substreams import derive_seed

logger = logging.getLogger(__name__)

SHARD_WINDOWS = 256
COVARIANCE_CUTOFF = 1e-4
RATIO_LAGS = 5
# abaixo disto um desvio quadrático é arredondamento, não violação
_THRESHOLD_FLOOR = 1e-24


@dataclass(frozen=True)
class BoundCheck:
    """Resultado de uma verificação: taxa empírica de violação contra c mais a folga binomial."""

    bound: str
    P: int
    c: float
    threshold: float
    trials: int
    violations: int
    violation_rate: float
    passed: bool

    @property
    def slack(self) -> float:
        return sampling_slack(self.c, self.trials)

    def to_row(self) -> Dict[str, Any]:
        return {
            "bound": self.bound, "P": self.P, "c": self.c, "threshold": self.threshold,
            "trials": self.trials, "violation_rate": self.violation_rate, "pass": self.passed,
        }


def sampling_slack(c: float, trials: int) -> float:
    """3 erros-padrão binomiais: 3·√(c(1−c)/trials)."""
    return 3.0 * math.sqrt(c * (1.0 - c) / trials)


def hoeffding_threshold(P: int, c: float) -> float:
    """ln(2/c)/(2P)."""
    return math.log(2.0 / c) / (2.0 * P)


def _check_probability(c: float) -> None:
    if not 0.0 < c < 1.0:
        raise ConfigError(f"c deve estar em (0, 1) (recebido {c})")


def _record(check: BoundCheck) -> BoundCheck:
    result = "pass" if check.passed else "fail"
    bound_checks_total.labels(bound=check.bound, result=result).inc()
    AUDIT_LOGGER.info("Verificação de concentração", {
        "bound": check.bound, "P": check.P, "c": check.c, "threshold": check.threshold,
        "trials": check.trials, "violation_rate": check.violation_rate, "result": result,
    })
    return check


def independent_across_rounds(spec: PatternSpec) -> bool:
    if spec.kind in (PatternKind.FULL, PatternKind.INDEPENDENT_UNIFORM):
        return True
    # cadeia de Markov com p_aa + p_uu = 1 não tem memória
    return (spec.kind is PatternKind.MARKOV_AVAILABILITY
            and spec.p_aa is not None and spec.p_uu is not None
            and spec.p_aa + spec.p_uu == 1.0)


# =============================================================================
# Hoeffding
# =============================================================================


def _hoeffding_shard(spec: PatternSpec, N: int, P: int, windows: int, seed: int,
                     threshold: float) -> int:
    schedule = generate_schedule(spec, N, windows * P, seed)
    stats_ = window_averages(schedule, P)
    return int(np.count_nonzero(stats_.deviations > max(threshold, _THRESHOLD_FLOOR)))


def hoeffding_check(spec: PatternSpec, N: int, P: int, c: float, trials: int, seed: int,
                    workers: int = 1) -> BoundCheck:
    """Fração de eventos (janela, cliente) com (q̄ − 1/N)² > ln(2/c)/(2P) em `trials` janelas.

    As janelas são fatiadas em blocos de SHARD_WINDOWS, cada um com semente derivada
    ("montecarlo:hoeffding:<k>"), e somadas em ordem de bloco.
    """
    if not independent_across_rounds(spec):
        raise ConfigError(
            f"Hoeffding exige padrão independente entre rodadas (recebido {spec.describe()})"
        )
    _check_probability(c)
    if P < 1 or trials < 1:
        raise ConfigError(f"P e trials devem ser ≥ 1 (P={P}, trials={trials})")
    spec.validate(N)
    threshold = hoeffding_threshold(P, c)
    sizes = [min(SHARD_WINDOWS, trials - start) for start in range(0, trials, SHARD_WINDOWS)]
    seeds = [derive_seed(seed, f"montecarlo:hoeffding:{k}") for k in range(len(sizes))]
    if workers > 1 and len(sizes) > 1:
        counts = Parallel(n_jobs=workers, backend="threading")(
            delayed(_hoeffding_shard)(spec, N, P, size, s, threshold)
            for size, s in zip(sizes, seeds)
        )
    else:
        counts = [_hoeffding_shard(spec, N, P, size, s, threshold)
                  for size, s in zip(sizes, seeds)]
    violations = int(sum(counts))
    rate = violations / (trials * N)
    return _record(BoundCheck(
        bound="hoeffding", P=int(P), c=float(c), threshold=threshold, trials=int(trials),
        violations=violations, violation_rate=rate, passed=rate <= c + sampling_slack(c, trials),
    ))


# =============================================================================
# Mistura e Chebyshev
# =============================================================================


@dataclass(frozen=True, eq=False)
class MixingReport:
    """Escala da variância de q̄ em P, covariâncias de atraso e verificações de Chebyshev.

    `converged=False` quando nenhum atraso até `max_lag` ficou abaixo do corte; nesse caso
    υ̂² usa todos os atrasos disponíveis.
    """

    P_values: np.ndarray
    variances: np.ndarray
    slope: float
    intercept: float
    slope_stderr: float
    lag_covariances: np.ndarray = field(repr=False)
    cov_ratio: float
    upsilon2: float
    cutoff_lag: Optional[int]
    converged: bool
    checks: List[BoundCheck]
    rounds: int

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_rows(self) -> List[Dict[str, Any]]:
        return [check.to_row() for check in self.checks]


def covariance_cutoff(covariances: np.ndarray,
                      relative: float = COVARIANCE_CUTOFF) -> Optional[int]:
    """Primeiro atraso p ≥ 1 com |Cov(p)| < relative·Var(q); None se não alcançado."""
    var = float(covariances[0])
    if var <= 0.0:
        return 1
    below = np.flatnonzero(np.abs(covariances[1:]) < relative * var)
    return int(below[0]) + 1 if below.size else None


def long_run_variance(covariances: np.ndarray, cutoff: Optional[int]) -> float:
    """υ̂² = Cov(0) + 2Σ_{1≤p<corte} Cov(p)."""
    stop = covariances.size if cutoff is None else cutoff
    return float(covariances[0] + 2.0 * np.sum(covariances[1:stop]))


def covariance_ratio(covariances: np.ndarray, lags: int = RATIO_LAGS) -> float:
    """Razão geométrica por atraso: exp da inclinação de log Cov(p) em p = 1..lags."""
    head = covariances[1: lags + 1]
    if head.size < 2 or np.any(head <= 0.0):
        return float("nan")
    fit = stats.linregress(np.arange(1, head.size + 1), np.log(head))
    return float(math.exp(fit.slope))


def chebyshev_mixing_check(spec: PatternSpec, N: int, P_list: Sequence[int], trials: int,
                           seed: int, c: float = 0.1, max_lag: int = 512) -> MixingReport:
    """Uma cadeia de T = trials·max(P) rodadas; todas as janelas alinhadas de cada P são usadas."""
    if spec.kind not in (PatternKind.MARKOV_AVAILABILITY, PatternKind.FULL,
                         PatternKind.INDEPENDENT_UNIFORM):
        raise ConfigError(
            f"verificação de mistura exige padrão estacionário (recebido {spec.describe()})"
        )
    _check_probability(c)
    P_values = np.array(sorted({int(p) for p in P_list}), dtype=np.int64)
    if P_values.size == 0 or P_values[0] < 1 or trials < 1:
        raise ConfigError("P_list não vazio com P ≥ 1 e trials ≥ 1")
    T = int(trials * P_values[-1])
    schedule = generate_schedule(spec, N, T, derive_seed(seed, "montecarlo:chebyshev"))

    covariances = lag_covariances(schedule.weights, max_lag, 1.0 / N)
    cutoff = covariance_cutoff(covariances)
    converged = cutoff is not None
    upsilon2 = max(long_run_variance(covariances, cutoff), 0.0)
    if not converged:
        logger.warning("série de covariâncias não convergiu", {"max_lag": max_lag})

    variances = np.empty(P_values.size)
    checks: List[BoundCheck] = []
    for i, P in enumerate(P_values):
        window = window_averages(schedule, int(P))
        variances[i] = window.variance
        threshold = upsilon2 / (c * P)
        violations = int(np.count_nonzero(window.deviations > max(threshold, _THRESHOLD_FLOOR)))
        rate = violations / (window.windows * N)
        checks.append(_record(BoundCheck(
            bound="chebyshev", P=int(P), c=float(c), threshold=float(threshold),
            trials=window.windows, violations=violations, violation_rate=rate,
            passed=rate <= c + sampling_slack(c, window.windows),
        )))

    slope = intercept = stderr = float("nan")
    if P_values.size >= 2 and upsilon2 > 0.0 and np.all(variances > 0.0):
        fit = stats.linregress(np.log(P_values), np.log(variances))
        slope, intercept, stderr = float(fit.slope), float(fit.intercept), float(fit.stderr)

    report = MixingReport(
        P_values=P_values,
        variances=variances,
        slope=slope,
        intercept=intercept,
        slope_stderr=stderr,
        lag_covariances=covariances,
        cov_ratio=covariance_ratio(covariances),
        upsilon2=upsilon2,
        cutoff_lag=cutoff,
        converged=converged,
        checks=checks,
        rounds=T,
    )
    AUDIT_LOGGER.info("Escala de variância estimada", {
        "pattern": spec.describe(), "slope": report.slope, "cov_ratio": report.cov_ratio,
        "upsilon2": upsilon2, "cutoff_lag": cutoff, "converged": converged, "rounds": T,
    })
    return report
