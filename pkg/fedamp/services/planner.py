"""
Planejamento de taxas de aprendizado e do intervalo de amplificação.

Hipóteses do teorema de convergência verificadas em todo plano:
    γ ≤ 1/(12·L·I·P),   γ·η ≤ 1/(L·I·P),   P ≤ T/2.
Planos derivados das fórmulas são ajustados para satisfazê-las em aritmética de ponto
flutuante (η recua por nextafter quando γη passa 1/(LIP) por arredondamento).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Tuple

import numpy as np

from fedamp.exceptions import ConfigError
from fedamp.logging_config import AUDIT_LOGGER

logger = logging.getLogger(__name__)


class PlanSource(str, Enum):
    """Origem das taxas (γ, η)"""
    COR3_2 = "cor3.2"
    COR3_3 = "cor3.3"
    FIXED_ETA = "fixed_eta"
    MANUAL = "manual"
    GRID = "grid"


@dataclass(frozen=True)
class LRPlan:
    gamma: float
    eta: float
    source: PlanSource
    valid: bool
    notes: Tuple[str, ...] = ()
    inputs: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gamma": self.gamma, "eta": self.eta, "source": self.source.value,
            "valid": self.valid, "notes": "; ".join(self.notes) or "ok", **self.inputs,
        }


def gamma_cap(L: float, I: int, P: int) -> float:
    """1/(12·L·I·P)."""
    return 1.0 / (12.0 * L * I * P)


def step_cap(L: float, I: int, P: int) -> float:
    """1/(L·I·P), limite de γη."""
    return 1.0 / (L * I * P)


def plan_notes(gamma: float, eta: float, L: float, I: int, P: int, T: int) -> List[str]:
    """Hipóteses violadas por (γ, η); lista vazia quando todas valem."""
    notes = []
    if gamma > gamma_cap(L, I, P):
        notes.append(f"γ={gamma:.6g} > 1/(12LIP)={gamma_cap(L, I, P):.6g}")
    if gamma * eta > step_cap(L, I, P):
        notes.append(f"γη={gamma * eta:.6g} > 1/(LIP)={step_cap(L, I, P):.6g}")
    if P > T / 2:
        notes.append(f"P={P} > T/2={T / 2:g}")
    return notes


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if not (np.isfinite(value) and value > 0):
            raise ConfigError(f"{name} deve ser > 0 (recebido {value})")


def _fit_eta(gamma: float, eta: float, L: float, I: int, P: int) -> float:
    cap = step_cap(L, I, P)
    while eta > 0 and gamma * eta > cap:
        eta = float(np.nextafter(eta, 0.0))
    return eta


def make_plan(gamma: float, eta: float, source: PlanSource, L: float, I: int, P: int, T: int,
              extra_notes: List[str], inputs: Dict[str, float]) -> LRPlan:
    notes = extra_notes + plan_notes(gamma, eta, L, I, P, T)
    plan = LRPlan(gamma=float(gamma), eta=float(eta), source=source, valid=not notes,
                  notes=tuple(notes), inputs=inputs)
    if not plan.valid:
        logger.warning("plano de taxas inválido", {"source": source.value, "notes": notes})
    return plan


def lr_corollary1(L: float, F: float, sigma: float, rho: float, I: int, P: int,
                  T: int) -> LRPlan:
    """γ = 1/(12LIP√T), η = min{12P√(LIℱ)/(σρ), 12√T}; σ = 0 usa o segundo ramo."""
    _check_positive(L=L, F=F, rho=rho, I=I, P=P, T=T)
    if sigma < 0:
        raise ConfigError(f"σ deve ser ≥ 0 (recebido {sigma})")
    gamma = 1.0 / (12.0 * L * I * P * math.sqrt(T))
    eta_cap = 12.0 * math.sqrt(T)
    eta = min(12.0 * P * math.sqrt(L * I * F) / (sigma * rho), eta_cap) if sigma > 0 else eta_cap
    eta = _fit_eta(gamma, eta, L, I, P)
    inputs = {"L": L, "F": F, "sigma": sigma, "rho": rho, "I": I, "P": P, "T": T}
    return make_plan(gamma, eta, PlanSource.COR3_2, L, I, P, T, [], inputs)


def corollary2_ratio(L: float, F: float, rho: float, I: int, P: int, T: int) -> float:
    """(√ℱ/(ρ√(LIT))) / (1/(LIP)); a pré-condição vale quando ≤ 1."""
    return (math.sqrt(F) / (rho * math.sqrt(L * I * T))) / step_cap(L, I, P)


def lr_corollary2(L: float, F: float, sigma: float, rho: float, I: int, P: int,
                  T: int) -> LRPlan:
    """γ = 1/(12LIP√T), η = 12P√(LIℱ)/ρ, sob √ℱ/(ρ√(LIT)) ≤ 1/(LIP)."""
    _check_positive(L=L, F=F, rho=rho, I=I, P=P, T=T)
    gamma = 1.0 / (12.0 * L * I * P * math.sqrt(T))
    eta = 12.0 * P * math.sqrt(L * I * F) / rho
    ratio = corollary2_ratio(L, F, rho, I, P, T)
    notes = []
    if ratio > 1.0:
        notes.append(f"pré-condição √ℱ/(ρ√(LIT)) ≤ 1/(LIP) violada (razão {ratio:.6g})")
    else:
        eta = _fit_eta(gamma, eta, L, I, P)
    inputs = {"L": L, "F": F, "sigma": sigma, "rho": rho, "I": I, "P": P, "T": T,
              "precondition_ratio": ratio}
    return make_plan(gamma, eta, PlanSource.COR3_3, L, I, P, T, notes, inputs)


def lr_fixed_eta(L: float, F: float, sigma: float, rho: float, I: int, P: int, T: int,
                 eta: float = 1.0) -> LRPlan:
    """η fixo: γ = min{√ℱ/(ηρσ√(LIT)), 1/(12LIP), 1/(ηLIP)}; σ = 0 fica só com os tetos."""
    _check_positive(L=L, F=F, rho=rho, I=I, P=P, T=T, eta=eta)
    caps = [gamma_cap(L, I, P), step_cap(L, I, P) / eta]
    if sigma > 0:
        caps.append(math.sqrt(F) / (eta * rho * sigma * math.sqrt(L * I * T)))
    gamma = min(caps)
    while gamma * eta > step_cap(L, I, P):
        gamma = float(np.nextafter(gamma, 0.0))
    inputs = {"L": L, "F": F, "sigma": sigma, "rho": rho, "I": I, "P": P, "T": T}
    return make_plan(gamma, eta, PlanSource.FIXED_ETA, L, I, P, T, [], inputs)


def manual_plan(gamma: float, eta: float, L: float, I: int, P: int, T: int) -> LRPlan:
    """Plano informado pelo usuário; as hipóteses violadas ficam nas notas, sem ajuste."""
    _check_positive(gamma=gamma, eta=eta)
    return make_plan(gamma, eta, PlanSource.MANUAL, L, I, P, T, [],
                     {"L": L, "I": I, "P": P, "T": T})


# =============================================================================
# Intervalo de amplificação
# =============================================================================


@dataclass(frozen=True)
class IntervalChoice:
    P: int
    raw: float
    clamped: bool


def choose_amplification_interval(upsilon2: float, N: int, I: int, T: int) -> IntervalChoice:
    """P = round(υ²·N^{5/2}·√(I·T)) limitado a [1, ⌊T/2⌋]; o corte é reportado."""
    if upsilon2 < 0 or N < 1 or I < 1 or T < 1:
        raise ConfigError("υ² ≥ 0, N ≥ 1, I ≥ 1 e T ≥ 1")
    raw = upsilon2 * N ** 2.5 * math.sqrt(I * T)
    upper = max(1, T // 2)
    P = int(math.floor(raw + 0.5)) if math.isfinite(raw) else upper
    clamped = not 1 <= P <= upper
    P = min(max(P, 1), upper)
    if clamped:
        logger.warning("intervalo de amplificação limitado", {"raw": raw, "P": P, "T": T})
        AUDIT_LOGGER.info("Intervalo de amplificação limitado",
                          {"upsilon2": upsilon2, "N": N, "I": I, "T": T, "raw": raw, "P": P})
    return IntervalChoice(P=P, raw=float(raw), clamped=clamped)


# =============================================================================
# Limite do teorema e previsões
# =============================================================================


@dataclass(frozen=True)
class TheoremBound:
    value: float
    terms: Dict[str, float]
    preconditions_hold: bool


def theorem_bound(L: float, F: float, sigma: float, rho: float, I: int, P: int, T: int,
                  gamma: float, eta: float, nu2: float, beta2: float,
                  delta2: float) -> TheoremBound:
    """Lado direito do limite de convergência para (γ, η) e constantes de divergência dadas."""
    g2L2 = gamma ** 2 * L ** 2
    terms = {
        "initial_gap": 8.0 * F / (gamma * eta * I * T),
        "nu2": 126.0 * g2L2 * I ** 2 * nu2,
        "beta2": 144.0 * g2L2 * I ** 2 * P ** 2 * beta2,
        "delta2": 6.0 * delta2,
        "noise": (21.0 * g2L2 * I + 18.0 * g2L2 * I * P * rho ** 2
                  + 2.0 * gamma * eta * L * rho ** 2) * sigma ** 2,
    }
    return TheoremBound(
        value=float(sum(terms.values())),
        terms=terms,
        preconditions_hold=not plan_notes(gamma, eta, L, I, P, T),
    )


@dataclass(frozen=True)
class DeltaPrediction:
    chebyshev: float
    hoeffding: float


def predicted_delta2(upsilon2: float, N: int, d2: float, P: int, c: float) -> DeltaPrediction:
    """δ̃² com probabilidade ≥ 1−c: N²d²υ̂²/(cP) (mistura) e N²d²·ln(2N/c)/(2P) (independente)."""
    scale = N ** 2 * d2
    return DeltaPrediction(
        chebyshev=scale * upsilon2 / (c * P),
        hoeffding=scale * math.log(2.0 * N / c) / (2.0 * P),
    )


def wait_rate_prediction(sigma: float, P: int, M: int, N: int, T: int) -> float:
    """Taxa da estratégia "esperar por todos": σ√P/√(MNT)."""
    return sigma * math.sqrt(P) / math.sqrt(M * N * T)


def speedup_factor(rho: float) -> float:
    """Aceleração linear generalizada: 1/ρ²."""
    return 1.0 / rho ** 2
