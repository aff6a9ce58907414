"""
Populações de objetivos dos clientes com constantes conhecidas.

- QuadraticPopulation: F_n(x) = ½(x−c_n)ᵀA(x−c_n) com A compartilhada (modo homogêneo,
  constantes exatas) ou A_n por cliente (modo heterogêneo, constantes estimadas).
- LogisticPopulation: perda logística regularizada sobre clusters gaussianos com
  desbalanceamento de rótulos por cliente.
- NoiseModel: ruído aditivo do gradiente estocástico.

Todas as reduções sobre clientes seguem a ordem crescente de índice (0-based).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from fedamp.exceptions import ConfigError, PopulationError
from fedamp.services.substreams import StreamTag, substream

logger = logging.getLogger(__name__)

# =============================================================================
# 1. Ruído
# =============================================================================


class NoiseKind(str, Enum):
    """Variantes de ruído do gradiente"""
    NONE = "none"
    GAUSSIAN = "gaussian"
    SPHERE = "sphere"


@dataclass(frozen=True)
class NoiseModel:
    """Ruído aditivo ξ com E[ξ]=0 e E‖ξ‖² = σ².

    GAUSSIAN é isotrópico com variância σ²/m por coordenada; SPHERE é uniforme na
    esfera de raio σ.
    """

    kind: NoiseKind = NoiseKind.NONE
    sigma: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"σ do ruído deve ser finito e ≥ 0 (recebido {self.sigma})")

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(NoiseKind.NONE, 0.0)

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseModel":
        return cls(NoiseKind.GAUSSIAN, float(sigma))

    @classmethod
    def sphere(cls, sigma: float) -> "NoiseModel":
        return cls(NoiseKind.SPHERE, float(sigma))

    @property
    def variance(self) -> float:
        """σ² efetivo (zero quando não há ruído)."""
        return 0.0 if self.is_null else self.sigma ** 2

    @property
    def is_null(self) -> bool:
        return self.kind is NoiseKind.NONE or self.sigma == 0.0

    def sample(self, stream: np.random.Generator, m: int) -> Optional[np.ndarray]:
        """Um vetor ξ ∈ ℝ^m do fluxo (None quando não há ruído, sem consumir o fluxo)."""
        if self.is_null:
            return None
        z = stream.standard_normal(m)
        if self.kind is NoiseKind.GAUSSIAN:
            return z * (self.sigma / np.sqrt(m))
        return z * (self.sigma / np.linalg.norm(z))

    def describe(self) -> str:
        return f"{self.kind.value}(sigma={self.sigma!r})"


# =============================================================================
# 2. População quadrática
# =============================================================================


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def _ordered_mean(rows: np.ndarray) -> np.ndarray:
    acc = np.zeros(rows.shape[1])
    for row in rows:
        acc = acc + row
    return acc / rows.shape[0]


@dataclass(frozen=True, eq=False)
class QuadraticPopulation:
    """N objetivos quadráticos com curvatura compartilhada (ou por cliente).

    Cache derivado: c̄, x*, f*, L e d². No modo heterogêneo d² não é constante em x
    (fica NaN) e L é o maior λ_max(A_n).
    """

    A: np.ndarray
    centers: np.ndarray
    curvatures: Optional[np.ndarray] = None
    c_bar: np.ndarray = field(init=False, repr=False)
    x_star: np.ndarray = field(init=False, repr=False)
    f_star: float = field(init=False)
    L: float = field(init=False)
    d2: float = field(init=False)

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=np.float64)
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1 or centers.shape[1] < 1:
            raise PopulationError(f"centros devem ter forma (N, m) com N, m ≥ 1: {centers.shape}")
        m = centers.shape[1]
        if A.shape != (m, m):
            raise PopulationError(f"A deve ser {m}×{m}, recebido {A.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(centers))):
            raise PopulationError("A e centros devem ser finitos")
        if not np.array_equal(A, A.T):
            raise PopulationError("A deve ser simétrica")
        eig = np.linalg.eigvalsh(A)
        if eig[0] < -1e-12 * max(1.0, abs(eig[-1])):
            raise PopulationError(f"A deve ser semidefinida positiva (λ_min = {eig[0]:.3g})")

        object.__setattr__(self, "A", _readonly(A))
        object.__setattr__(self, "centers", _readonly(centers))
        if self.curvatures is not None:
            curv = np.asarray(self.curvatures, dtype=np.float64)
            if curv.shape != (centers.shape[0], m, m):
                raise PopulationError(f"curvaturas devem ter forma (N, m, m): {curv.shape}")
            if not all(np.array_equal(a, a.T) for a in curv):
                raise PopulationError("toda A_n deve ser simétrica")
            object.__setattr__(self, "curvatures", _readonly(curv))

        c_bar = _ordered_mean(self.centers)
        object.__setattr__(self, "c_bar", _readonly(c_bar))
        if self.homogeneous:
            object.__setattr__(self, "x_star", self.c_bar)
            object.__setattr__(self, "L", float(eig[-1]))
            diffs = [self.A @ (self.c_bar - c) for c in self.centers]
            object.__setattr__(self, "d2", float(max(float(g @ g) for g in diffs)))
        else:
            total = np.zeros((m, m))
            rhs = np.zeros(m)
            for a_n, c_n in zip(self.curvatures, self.centers):
                total = total + a_n
                rhs = rhs + a_n @ c_n
            object.__setattr__(self, "x_star", _readonly(np.linalg.solve(total, rhs)))
            object.__setattr__(
                self, "L", float(max(np.linalg.eigvalsh(a)[-1] for a in self.curvatures))
            )
            object.__setattr__(self, "d2", float("nan"))
        object.__setattr__(self, "f_star", float(self.value_at(self.x_star)))

    # --- forma --------------------------------------------------------------
    @property
    def N(self) -> int:
        return int(self.centers.shape[0])

    @property
    def m(self) -> int:
        return int(self.centers.shape[1])

    @property
    def homogeneous(self) -> bool:
        return self.curvatures is None

    @property
    def constants_exact(self) -> bool:
        return self.homogeneous

    def curvature(self, n: int) -> np.ndarray:
        return self.A if self.curvatures is None else self.curvatures[n]

    # --- avaliação ----------------------------------------------------------
    def client_grad(self, n: int, x: np.ndarray) -> np.ndarray:
        return self.curvature(n) @ (x - self.centers[n])

    def client_value(self, n: int, x: np.ndarray) -> float:
        diff = x - self.centers[n]
        return 0.5 * float(diff @ (self.curvature(n) @ diff))

    def value_at(self, x: np.ndarray) -> float:
        total = 0.0
        for n in range(self.N):
            total += self.client_value(n, x)
        return total / self.N

    def gradient_differences(self) -> np.ndarray:
        """g_n = ∇F_n − ∇f = A(c̄ − c_n), constante em x (só no modo homogêneo)."""
        if not self.homogeneous:
            raise PopulationError(
                "diferenças de gradiente não são constantes com curvatura heterogênea; "
                "use divergence_sampled"
            )
        return np.stack([self.A @ (self.c_bar - c) for c in self.centers])

    def scaled(self, a: float) -> "QuadraticPopulation":
        """População com todos os F_n multiplicados por a > 0."""
        if not (np.isfinite(a) and a > 0):
            raise PopulationError(f"fator de escala deve ser > 0: {a}")
        curv = None if self.curvatures is None else self.curvatures * a
        return QuadraticPopulation(self.A * a, self.centers, curv)

    def describe(self) -> str:
        mode = "homogeneous" if self.homogeneous else "heterogeneous"
        return f"quadratic(N={self.N}, m={self.m}, L={self.L!r}, curvature={mode})"


def build_quadratic(
    N: int,
    m: int,
    L: float,
    spread: float,
    seed: int,
    *,
    condition_number: float = 1.0,
    groups: int = 1,
    group_jitter: float = 0.0,
    curvature: str = "homogeneous",
    curvature_jitter: float = 0.0,
) -> QuadraticPopulation:
    """Constrói uma população quadrática, função pura dos argumentos.

    A = QΛQᵀ com Q ortogonal sorteada e autovalores log-espaçados em [L/κ, L], o maior
    fixado em L. Centros isotrópicos de escala `spread` (ou âncoras por grupo mais um
    desvio `group_jitter`), recentrados pela média.
    """
    for name, value in (("N", N), ("m", m), ("groups", groups)):
        if int(value) != value or value < 1:
            raise PopulationError(f"{name} deve ser inteiro ≥ 1 (recebido {value})")
    for name, value in (("L", L), ("spread", spread), ("condition_number", condition_number),
                        ("group_jitter", group_jitter), ("curvature_jitter", curvature_jitter)):
        if not np.isfinite(value):
            raise PopulationError(f"{name} deve ser finito (recebido {value})")
    if L <= 0:
        raise PopulationError(f"L deve ser > 0 (recebido {L})")
    if spread < 0 or group_jitter < 0 or curvature_jitter < 0:
        raise PopulationError("spread, group_jitter e curvature_jitter devem ser ≥ 0")
    if condition_number < 1:
        raise PopulationError(f"condition_number deve ser ≥ 1 (recebido {condition_number})")
    if groups > N:
        raise PopulationError(f"groups ({groups}) não pode exceder N ({N})")
    if curvature not in ("homogeneous", "heterogeneous"):
        raise PopulationError(f"modo de curvatura desconhecido: {curvature}")

    rng = substream(seed, StreamTag.POPULATION)
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if m == 1:
        eig = np.array([float(L)])
    else:
        eig = np.geomspace(L / condition_number, L, m)
        eig[-1] = L
    A = (q * eig) @ q.T
    A = 0.5 * (A + A.T)

    scale = 1.0 / np.sqrt(m)
    if groups == 1:
        centers = rng.standard_normal((N, m)) * (spread * scale)
    else:
        anchors = rng.standard_normal((groups, m)) * (spread * scale)
        membership = (np.arange(N) * groups) // N
        centers = anchors[membership] + rng.standard_normal((N, m)) * (group_jitter * scale)
    centers = centers - _ordered_mean(centers)

    curvatures = None
    if curvature == "heterogeneous":
        factors = 1.0 + curvature_jitter * rng.random(N)
        curvatures = np.stack([A * f for f in factors])
    return QuadraticPopulation(A, centers, curvatures)


# =============================================================================
# 3. População logística
# =============================================================================


@dataclass(frozen=True, eq=False)
class LogisticPopulation:
    """Perda logística regularizada: F_n(w) = média_j log(1+exp(−y_j wᵀx_j)) + (λ/2)‖w‖².

    Constantes estimadas: L = λ + max_n λ_max(X_nᵀX_n)/(4|D_n|); f* e x* por L-BFGS-B.
    `batch_size` ativa o modo minibatch do gradiente estocástico.
    """

    features: tuple
    labels: tuple
    regularization: float = 0.0
    batch_size: Optional[int] = None
    L: float = field(init=False)
    x_star: np.ndarray = field(init=False, repr=False)
    f_star: float = field(init=False)
    d2: float = field(init=False, default=float("nan"))

    def __post_init__(self) -> None:
        feats = tuple(_readonly(x) for x in self.features)
        labs = tuple(_readonly(y) for y in self.labels)
        if not feats or len(feats) != len(labs):
            raise PopulationError("features e labels devem ter um bloco por cliente")
        m = feats[0].shape[1]
        for x, y in zip(feats, labs):
            if x.ndim != 2 or x.shape[1] != m or x.shape[0] < 1 or y.shape != (x.shape[0],):
                raise PopulationError("bloco de dados de cliente com forma inconsistente")
            if not np.all(np.isin(y, (-1.0, 1.0))):
                raise PopulationError("rótulos devem ser ±1")
        if self.regularization < 0 or not np.isfinite(self.regularization):
            raise PopulationError(f"λ deve ser ≥ 0 (recebido {self.regularization})")
        if self.batch_size is not None and self.batch_size < 1:
            raise PopulationError(f"batch_size deve ser ≥ 1 (recebido {self.batch_size})")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)
        lipschitz = self.regularization + max(
            float(np.linalg.eigvalsh(x.T @ x)[-1]) / (4.0 * x.shape[0]) for x in feats
        )
        object.__setattr__(self, "L", lipschitz)

        result = minimize(
            lambda w: (self.value_at(w), self._global_grad(w)),
            np.zeros(m),
            jac=True,
            method="L-BFGS-B",
            options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 5000},
        )
        object.__setattr__(self, "x_star", _readonly(result.x))
        object.__setattr__(self, "f_star", float(result.fun))

    @property
    def N(self) -> int:
        return len(self.features)

    @property
    def m(self) -> int:
        return int(self.features[0].shape[1])

    @property
    def homogeneous(self) -> bool:
        return False

    @property
    def constants_exact(self) -> bool:
        return False

    def _grad_on(self, n: int, w: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        x, y = self.features[n], self.labels[n]
        if idx is not None:
            x, y = x[idx], y[idx]
        coef = -y * expit(-y * (x @ w))
        return x.T @ coef / x.shape[0] + self.regularization * w

    def client_grad(self, n: int, w: np.ndarray) -> np.ndarray:
        return self._grad_on(n, w)

    def minibatch_grad(self, n: int, w: np.ndarray, stream: np.random.Generator) -> np.ndarray:
        size = self.features[n].shape[0]
        b = min(int(self.batch_size or size), size)
        idx = np.sort(stream.choice(size, size=b, replace=False))
        return self._grad_on(n, w, idx)

    def client_value(self, n: int, w: np.ndarray) -> float:
        x, y = self.features[n], self.labels[n]
        losses = np.logaddexp(0.0, -y * (x @ w))
        return float(np.mean(losses)) + 0.5 * self.regularization * float(w @ w)

    def value_at(self, w: np.ndarray) -> float:
        total = 0.0
        for n in range(self.N):
            total += self.client_value(n, w)
        return total / self.N

    def _global_grad(self, w: np.ndarray) -> np.ndarray:
        acc = np.zeros(self.m)
        for n in range(self.N):
            acc = acc + self.client_grad(n, w)
        return acc / self.N

    def describe(self) -> str:
        return (f"logistic(N={self.N}, m={self.m}, lambda={self.regularization!r}, "
                f"batch={self.batch_size})")


def build_logistic(
    N: int,
    m: int,
    samples_per_client: int,
    regularization: float,
    seed: int,
    *,
    label_skew: float = 0.9,
    separation: float = 2.0,
    client_shift: float = 0.5,
    batch_size: Optional[int] = None,
) -> LogisticPopulation:
    """Dados sintéticos não-IID: cada cliente tem um rótulo majoritário (fração `label_skew`).

    Classe y ∈ {−1, +1} tem média y·separation·u (u direção sorteada) mais um deslocamento
    próprio do cliente; covariância identidade.
    """
    if N < 1 or m < 1 or samples_per_client < 1:
        raise PopulationError("N, m e samples_per_client devem ser ≥ 1")
    if not 0.5 <= label_skew <= 1.0:
        raise PopulationError(f"label_skew deve estar em [0.5, 1] (recebido {label_skew})")
    rng = substream(seed, StreamTag.POPULATION)
    direction = rng.standard_normal(m)
    direction /= np.linalg.norm(direction)
    features, labels = [], []
    for n in range(N):
        majority = 1.0 if n % 2 == 0 else -1.0
        flip = rng.random(samples_per_client) >= label_skew
        y = np.where(flip, -majority, majority)
        shift = rng.standard_normal(m) * client_shift
        x = (y[:, None] * separation * direction[None, :] + shift[None, :]
             + rng.standard_normal((samples_per_client, m)))
        features.append(x)
        labels.append(y)
    return LogisticPopulation(tuple(features), tuple(labels), float(regularization), batch_size)


Population = Union[QuadraticPopulation, LogisticPopulation]

# =============================================================================
# 4. Operações de gradiente
# =============================================================================


def _check_index(pop: Population, n: int) -> int:
    if not 0 <= int(n) < pop.N:
        raise PopulationError(f"índice de cliente fora do intervalo [0, {pop.N}): {n}")
    return int(n)


def _check_point(pop: Population, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (pop.m,):
        raise PopulationError(f"ponto com dimensão {x.shape}, esperado ({pop.m},)")
    if not np.all(np.isfinite(x)):
        raise PopulationError("ponto não finito")
    return x


def grad(pop: Population, n: int, x: np.ndarray) -> np.ndarray:
    """∇F_n(x) exato."""
    n = _check_index(pop, n)
    return pop.client_grad(n, _check_point(pop, x))


def global_grad(pop: Population, x: np.ndarray) -> np.ndarray:
    """∇f(x) = (1/N)Σ_n ∇F_n(x), somado em ordem crescente de cliente."""
    x = _check_point(pop, x)
    acc = np.zeros(pop.m)
    for n in range(pop.N):
        acc = acc + pop.client_grad(n, x)
    return acc / pop.N


def global_value(pop: Population, x: np.ndarray) -> float:
    """f(x) = (1/N)Σ_n F_n(x), somado em ordem crescente de cliente."""
    return pop.value_at(_check_point(pop, x))


def stochastic_grad(pop: Population, noise: NoiseModel, n: int, x: np.ndarray,
                    stream: np.random.Generator) -> np.ndarray:
    """g_n(x) com E[g_n | x] = ∇F_n(x).

    Quadráticas: ∇F_n(x) + ξ. Logística com batch_size: gradiente do minibatch sorteado
    sem reposição (mais ξ, se houver ruído configurado).
    """
    if isinstance(pop, LogisticPopulation) and pop.batch_size is not None:
        g = pop.minibatch_grad(n, x, stream)
    else:
        g = pop.client_grad(n, x)
    xi = noise.sample(stream, pop.m)
    return g if xi is None else g + xi


def initial_point(pop: Population, radius: float, seed: int) -> np.ndarray:
    """x₀ = x* + radius·u com u unitário sorteado."""
    if radius < 0 or not np.isfinite(radius):
        raise PopulationError(f"raio de x₀ deve ser ≥ 0 (recebido {radius})")
    rng = substream(seed, StreamTag.INITIAL_POINT)
    u = rng.standard_normal(pop.m)
    u /= np.linalg.norm(u)
    return np.asarray(pop.x_star, dtype=np.float64) + radius * u


def initial_gap(pop: Population, x0: np.ndarray) -> float:
    """ℱ = f(x₀) − f*."""
    return max(global_value(pop, x0) - pop.f_star, 0.0)
