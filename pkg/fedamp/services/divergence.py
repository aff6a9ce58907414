"""
Quantidades de divergência ponderadas pela participação.

Com D_n(x) = ∇F_n(x) − ∇f(x) e w_t = Σ_n q_t^n D_n:
    β̃²(t) = ‖w_t‖²
    ν̃²(t) = Σ_n q_t^n ‖D_n − w_t‖²
    δ̃²(P) = max_{t₀} ‖(1/P) Σ_{t=t₀}^{t₀+P−1} w_t‖²     (janelas alinhadas t₀ = kP)
e a decomposição por rodada Σ_n q_t^n‖D_n‖² = β̃²(t) + ν̃²(t).

Modo exato: quadráticas homogêneas (D_n constante em x). Modo amostrado: máximos sobre
pontos amostrados, marcados como cotas inferiores dos supremos.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from fedamp.exceptions import ConfigError, ContractViolation, PopulationError
from fedamp.services.objectives import Population, QuadraticPopulation, global_grad
from fedamp.services.participation import WeightSchedule
from fedamp.services.substreams import StreamTag, substream

logger = logging.getLogger(__name__)

_CHUNK_ROUNDS = 1024
DECOMPOSITION_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    """β̃², ν̃², δ̃²(P), d² e resíduos da decomposição para um par (população, cronograma).

    `beta2` e `nu2` são os máximos separados sobre t; `joint_max` = max_t(β̃²(t)+ν̃²(t)) é a
    grandeza comparada com d². Em modo amostrado (`exact=False`) todos os valores são cotas
    inferiores dos supremos em x.
    """

    P: int
    d2: float
    beta2: float
    nu2: float
    delta2: float
    joint_max: float
    decomposition_residual: float
    decomposition_residual_rel: float
    delta2_variance_bound: float
    exact: bool
    samples: int = 0
    beta2_series: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    nu2_series: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def lower_bound(self) -> bool:
        return not self.exact

    @property
    def decomposition_holds(self) -> bool:
        return self.joint_max <= self.d2 * (1 + DECOMPOSITION_TOL) + DECOMPOSITION_TOL

    def to_row(self) -> Dict[str, Any]:
        return {
            "P": self.P, "beta2": self.beta2, "nu2": self.nu2, "delta2": self.delta2,
            "d2": self.d2, "exact": self.exact,
        }


@dataclass(frozen=True)
class _RoundQuantities:
    beta2: np.ndarray
    nu2: np.ndarray
    weighted_sq: np.ndarray
    window_delta2: np.ndarray
    window_variance_bound: np.ndarray


def _round_quantities(D: np.ndarray, weights: np.ndarray, P: int, d2: float) -> _RoundQuantities:
    T, N = weights.shape
    W = weights @ D
    beta2 = np.einsum("tm,tm->t", W, W)
    norms = np.einsum("nm,nm->n", D, D)
    weighted_sq = weights @ norms
    nu2 = np.empty(T)
    for start in range(0, T, _CHUNK_ROUNDS):
        stop = min(start + _CHUNK_ROUNDS, T)
        spread = D[None, :, :] - W[start:stop, None, :]
        nu2[start:stop] = np.einsum("tn,tnm,tnm->t", weights[start:stop], spread, spread)
    K = T // P
    if K == 0:
        raise ConfigError(f"P={P} maior que T={T}: nenhuma janela alinhada")
    window_mean = W[: K * P].reshape(K, P, -1).sum(axis=1) / P
    window_delta2 = np.einsum("km,km->k", window_mean, window_mean)
    qbar = weights[: K * P].reshape(K, P, N).sum(axis=1) / P
    variance_bound = N * np.sum((qbar - 1.0 / N) ** 2, axis=1) * d2
    return _RoundQuantities(beta2, nu2, weighted_sq, window_delta2, variance_bound)


def _report(quantities: Sequence[_RoundQuantities], P: int, d2: float, exact: bool,
            samples: int) -> DivergenceReport:
    beta2 = np.max([q.beta2 for q in quantities], axis=0)
    nu2 = np.max([q.nu2 for q in quantities], axis=0)
    residual = 0.0
    residual_rel = 0.0
    joint = 0.0
    for q in quantities:
        diff = np.abs(q.beta2 + q.nu2 - q.weighted_sq)
        residual = max(residual, float(diff.max()))
        scale = np.maximum(q.weighted_sq, np.finfo(float).tiny)
        residual_rel = max(residual_rel, float(np.max(np.where(q.weighted_sq > 0, diff / scale,
                                                                diff))))
        joint = max(joint, float(np.max(q.beta2 + q.nu2)))
    delta2 = max(float(q.window_delta2.max()) for q in quantities)
    variance_bound = max(float(q.window_variance_bound.max()) for q in quantities)
    return DivergenceReport(
        P=int(P),
        d2=float(d2),
        beta2=float(beta2.max()),
        nu2=float(nu2.max()),
        delta2=delta2,
        joint_max=joint,
        decomposition_residual=residual,
        decomposition_residual_rel=residual_rel,
        delta2_variance_bound=variance_bound,
        exact=exact,
        samples=samples,
        beta2_series=beta2,
        nu2_series=nu2,
    )


def divergence_exact(pop: QuadraticPopulation, schedule: WeightSchedule, P: int) -> DivergenceReport:
    """Constantes exatas com g_n = A(c̄ − c_n), independentes de x."""
    if not isinstance(pop, QuadraticPopulation) or not pop.homogeneous:
        raise PopulationError(
            "modo exato exige quadrática com curvatura homogênea; use divergence_sampled"
        )
    if schedule.N != pop.N:
        raise PopulationError(f"cronograma tem N={schedule.N}, população tem N={pop.N}")
    G = pop.gradient_differences()
    quantities = _round_quantities(G, schedule.weights, P, pop.d2)
    return _report([quantities], P, pop.d2, exact=True, samples=0)


# =============================================================================
# Modo amostrado
# =============================================================================


@dataclass(frozen=True, eq=False)
class SampleSpec:
    """Pontos de avaliação: `count` pontos uniformes na bola (center, radius) mais `iterates`."""

    count: int
    radius: float
    center: np.ndarray
    seed: int = 0
    iterates: Optional[np.ndarray] = None

    def points(self) -> np.ndarray:
        center = np.asarray(self.center, dtype=np.float64)
        m = center.shape[0]
        pts: List[np.ndarray] = []
        for k in range(int(self.count)):
            stream = substream(self.seed, StreamTag.SAMPLE_POINT, k)
            direction = stream.standard_normal(m)
            direction /= np.linalg.norm(direction)
            r = self.radius * stream.random() ** (1.0 / m)
            pts.append(center + r * direction)
        if self.iterates is not None:
            pts.extend(np.atleast_2d(np.asarray(self.iterates, dtype=np.float64)))
        return np.asarray(pts, dtype=np.float64).reshape(len(pts), m)


def gradient_differences_at(pop: Population, x: np.ndarray) -> np.ndarray:
    """D_n(x) = ∇F_n(x) − ∇f(x) para todos os clientes (N×m)."""
    full = global_grad(pop, x)
    return np.stack([pop.client_grad(n, x) - full for n in range(pop.N)])


def divergence_sampled(pop: Population, schedule: WeightSchedule, P: int,
                       sample_spec: SampleSpec) -> DivergenceReport:
    """Máximos dos três lados esquerdos sobre os pontos amostrados (cotas inferiores)."""
    if schedule.N != pop.N:
        raise PopulationError(f"cronograma tem N={schedule.N}, população tem N={pop.N}")
    points = sample_spec.points()
    if points.shape[0] == 0:
        raise ContractViolation("conjunto de amostras vazio")
    diffs = [gradient_differences_at(pop, x) for x in points]
    d2 = max(float(np.max(np.einsum("nm,nm->n", D, D))) for D in diffs)
    quantities = [_round_quantities(D, schedule.weights, P, d2) for D in diffs]
    return _report(quantities, P, d2, exact=False, samples=points.shape[0])


# =============================================================================
# Decomposição
# =============================================================================


@dataclass(frozen=True)
class DecompositionReport:
    """Resíduo da identidade Σq‖D_n‖² = Σq‖D_n − w_t‖² + ‖w_t‖² e cota por rodada contra d²."""

    max_residual: float
    max_residual_rel: float
    joint_max: float
    d2: float
    evaluations: int
    holds: bool


def decomposition_check(pop: Population, schedule: WeightSchedule,
                        points: Iterable[np.ndarray]) -> DecompositionReport:
    """Avalia a decomposição em cada (ponto, rodada).

    d² é o exato para quadráticas homogêneas e o máximo observado nos demais casos.
    """
    points = [np.asarray(x, dtype=np.float64) for x in points]
    if not points:
        raise ContractViolation("decomposition_check sem pontos")
    P = schedule.T
    diffs = [gradient_differences_at(pop, x) for x in points]
    if isinstance(pop, QuadraticPopulation) and pop.homogeneous:
        d2 = pop.d2
    else:
        d2 = max(float(np.max(np.einsum("nm,nm->n", D, D))) for D in diffs)
    report = _report([_round_quantities(D, schedule.weights, P, d2) for D in diffs],
                     P, d2, exact=False, samples=len(points))
    holds = (report.decomposition_residual_rel <= DECOMPOSITION_TOL
             and report.joint_max <= d2 * (1 + DECOMPOSITION_TOL) + DECOMPOSITION_TOL)
    return DecompositionReport(
        max_residual=report.decomposition_residual,
        max_residual_rel=report.decomposition_residual_rel,
        joint_max=report.joint_max,
        d2=d2,
        evaluations=len(points) * schedule.T,
        holds=holds,
    )
