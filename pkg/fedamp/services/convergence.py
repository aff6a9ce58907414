"""
Ajuste de inclinações log-log das curvas de convergência.

Usa o mínimo sobre checkpoints de ‖∇f‖² (a grandeza do teorema), não o iterado final.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from fedamp.exceptions import ContractViolation
from fedamp.services.fedavg_engine import Trace

logger = logging.getLogger(__name__)

MIN_SLOPE_TRACES = 3


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    n_points: int
    excluded: Tuple[int, ...] = ()

    def predict(self, x: float) -> float:
        return math.exp(self.intercept + self.slope * math.log(x))


def fit_power_law(x_values: Sequence[float], y_values: Sequence[Optional[float]]) -> SlopeFit:
    """Mínimos quadrados de log y contra log x; pares com y ausente, ≤ 0 ou não finito saem."""
    keep: List[Tuple[float, float]] = []
    excluded: List[int] = []
    for i, (x, y) in enumerate(zip(x_values, y_values)):
        if y is None or not np.isfinite(y) or y <= 0 or x <= 0:
            excluded.append(i)
        else:
            keep.append((math.log(x), math.log(y)))
    if len({lx for lx, _ in keep}) < 2:
        raise ContractViolation(
            f"ajuste exige ao menos 2 valores distintos de x válidos ({len(keep)} pontos)"
        )
    if len(keep) < 3:
        logger.warning("ajuste com menos de 3 pontos", {"points": len(keep)})
    lx, ly = (np.array(col) for col in zip(*keep))
    fit = stats.linregress(lx, ly)
    return SlopeFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        stderr=float(fit.stderr),
        n_points=len(keep),
        excluded=tuple(excluded),
    )


def fit_convergence_slope(traces: Sequence[Optional[Trace]]) -> SlopeFit:
    """Inclinação de log min‖∇f‖² contra log T; traces divergentes (None) são excluídos."""
    T_values: List[float] = []
    finals: List[Optional[float]] = []
    for trace in traces:
        if trace is None:
            T_values.append(1.0)
            finals.append(None)
            continue
        T_values.append(float(trace.metadata.get("T", trace.t[-1])))
        finals.append(trace.final_min)
    fit = fit_power_law(T_values, finals)
    if fit.n_points < MIN_SLOPE_TRACES:
        raise ContractViolation(
            f"inclinação de convergência exige ao menos {MIN_SLOPE_TRACES} traces válidos "
            f"({fit.n_points} restantes)"
        )
    if fit.excluded:
        logger.info("traces excluídos do ajuste", {"excluded": list(fit.excluded)})
    return fit
