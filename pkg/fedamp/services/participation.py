"""
Cronogramas de participação 𝒬 = {q_t^n}.

Gera os padrões Full, IndependentUniform, RegularizedPermutation, PeriodicGroups e
MarkovAvailability, calcula ρ, médias em janelas alinhadas t₀ ∈ {0, P, 2P, …} e
verifica a condição de simplex. Clientes são indexados a partir de 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fedamp.exceptions import ConfigError, ScheduleError
from fedamp.logging_config import AUDIT_LOGGER
from fedamp.metrics import schedule_fallback_total
from fedamp.services.substreams import StreamTag, substream

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12

# =============================================================================
# 1. Especificação de padrões
# =============================================================================


class PatternKind(str, Enum):
    """Classes de participação suportadas"""
    FULL = "full"
    INDEPENDENT_UNIFORM = "independent_uniform"
    REGULARIZED_PERMUTATION = "regularized_permutation"
    PERIODIC_GROUPS = "periodic_groups"
    MARKOV_AVAILABILITY = "markov_availability"


@dataclass(frozen=True)
class PatternSpec:
    """Padrão de participação; `offset=None` sorteia o deslocamento periódico da semente."""

    kind: PatternKind
    S: Optional[int] = None
    groups: int = 1
    block: int = 1
    offset: Optional[int] = None
    p_aa: Optional[float] = None
    p_uu: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PatternKind(self.kind))

    @classmethod
    def full(cls) -> "PatternSpec":
        return cls(PatternKind.FULL)

    @classmethod
    def independent_uniform(cls, S: int) -> "PatternSpec":
        return cls(PatternKind.INDEPENDENT_UNIFORM, S=S)

    @classmethod
    def regularized_permutation(cls, S: int) -> "PatternSpec":
        return cls(PatternKind.REGULARIZED_PERMUTATION, S=S)

    @classmethod
    def periodic_groups(cls, groups: int, block: int, S: int,
                        offset: Optional[int] = None) -> "PatternSpec":
        return cls(PatternKind.PERIODIC_GROUPS, S=S, groups=groups, block=block, offset=offset)

    @classmethod
    def markov_availability(cls, p_aa: float, p_uu: float, S: int) -> "PatternSpec":
        return cls(PatternKind.MARKOV_AVAILABILITY, S=S, p_aa=p_aa, p_uu=p_uu)

    @property
    def cycle(self) -> int:
        return self.groups * self.block

    @property
    def stationary_availability(self) -> float:
        """π_avail = (1 − p_uu)/(2 − p_aa − p_uu)."""
        return (1.0 - self.p_uu) / (2.0 - self.p_aa - self.p_uu)

    def validate(self, N: int) -> None:
        """Verifica as invariantes do padrão para N clientes."""
        if N < 1:
            raise ConfigError(f"N deve ser ≥ 1 (recebido {N})")
        if self.kind is PatternKind.FULL:
            return
        if self.S is None or not 1 <= self.S <= N:
            raise ConfigError(f"S deve estar em [1, N={N}] (recebido {self.S})")
        if self.kind is PatternKind.REGULARIZED_PERMUTATION and N % self.S:
            raise ScheduleError(f"permutação regularizada exige S | N (S={self.S}, N={N})")
        if self.kind is PatternKind.PERIODIC_GROUPS:
            if self.groups < 1 or self.block < 1:
                raise ConfigError("groups e block devem ser ≥ 1")
            if N % self.groups:
                raise ConfigError(f"grupos periódicos exigem G | N (G={self.groups}, N={N})")
            if self.S > N // self.groups:
                raise ConfigError(
                    f"S={self.S} excede o tamanho do grupo ({N // self.groups})"
                )
            if self.offset is not None and not 0 <= self.offset < self.cycle:
                raise ConfigError(f"offset deve estar em [0, {self.cycle})")
        if self.kind is PatternKind.MARKOV_AVAILABILITY:
            for name, p in (("p_aa", self.p_aa), ("p_uu", self.p_uu)):
                if p is None or not 0.0 < p < 1.0:
                    raise ConfigError(f"{name} deve estar em (0, 1) (recebido {p})")

    def describe(self, resolved_offset: Optional[int] = None) -> str:
        if self.kind is PatternKind.FULL:
            return "full"
        if self.kind in (PatternKind.INDEPENDENT_UNIFORM, PatternKind.REGULARIZED_PERMUTATION):
            return f"{self.kind.value}(S={self.S})"
        if self.kind is PatternKind.PERIODIC_GROUPS:
            offset = self.offset if resolved_offset is None else resolved_offset
            return (f"periodic_groups(G={self.groups}, B={self.block}, S={self.S}, "
                    f"offset={'random' if offset is None else offset})")
        return f"markov_availability(p_aa={self.p_aa!r}, p_uu={self.p_uu!r}, S={self.S})"


# =============================================================================
# 2. Cronograma
# =============================================================================


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class WeightSchedule:
    """Pesos q_t^n em matriz densa T×N somente leitura.

    Não é validado na construção: `verify_simplex` aplica as invariantes (permite
    rejeitar cronogramas montados à mão).
    """

    weights: np.ndarray
    descriptor: str = "manual"
    seed: Optional[int] = None
    fallback_count: int = 0

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] < 1 or weights.shape[1] < 1:
            raise ScheduleError(f"pesos devem ter forma (T, N) com T, N ≥ 1: {weights.shape}")
        object.__setattr__(self, "weights", _readonly(weights))

    @classmethod
    def from_dense(cls, weights: Union[np.ndarray, Sequence[Sequence[float]]],
                   descriptor: str = "manual") -> "WeightSchedule":
        return cls(np.asarray(weights, dtype=np.float64), descriptor=descriptor)

    @property
    def T(self) -> int:
        return int(self.weights.shape[0])

    @property
    def N(self) -> int:
        return int(self.weights.shape[1])

    def participants(self, t: int) -> np.ndarray:
        """Índices com q_t^n > 0, em ordem crescente."""
        return np.flatnonzero(self.weights[t] > 0.0)

    def row(self, t: int) -> List[Tuple[int, float]]:
        return [(int(n), float(self.weights[t, n])) for n in self.participants(t)]

    def rows(self) -> List[List[Tuple[int, float]]]:
        """Visão esparsa: por rodada, lista de (cliente, peso > 0)."""
        return [self.row(t) for t in range(self.T)]

    def window(self, start: int, stop: int) -> "WeightSchedule":
        """Sub-cronograma das rodadas [start, stop)."""
        if not 0 <= start < stop <= self.T:
            raise ConfigError(f"janela inválida [{start}, {stop}) para T={self.T}")
        return WeightSchedule(self.weights[start:stop], f"{self.descriptor}[{start}:{stop}]",
                              self.seed, self.fallback_count)

    def rho(self) -> float:
        return rho_bound(self)

    # --- CSV ----------------------------------------------------------------
    def to_frame(self) -> pd.DataFrame:
        t_idx, n_idx = np.nonzero(self.weights > 0.0)
        return pd.DataFrame({"t": t_idx, "n": n_idx, "q": self.weights[t_idx, n_idx]})

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], N: Optional[int] = None,
                 T: Optional[int] = None) -> "WeightSchedule":
        """Lê `t,n,q` (pesos podem ser desiguais) e valida o simplex."""
        path = Path(path)
        try:
            frame = pd.read_csv(path)
        except (OSError, ValueError) as exc:
            raise ScheduleError(f"não foi possível ler o cronograma {path}: {exc}") from exc
        if list(frame.columns) != ["t", "n", "q"]:
            raise ScheduleError(f"cabeçalho esperado 't,n,q' em {path}, obtido {list(frame.columns)}")
        if frame.empty:
            raise ScheduleError(f"cronograma vazio: {path}")
        t = pd.to_numeric(frame["t"], errors="coerce")
        n = pd.to_numeric(frame["n"], errors="coerce")
        q = pd.to_numeric(frame["q"], errors="coerce")
        bad = frame.index[t.isna() | n.isna() | q.isna()]
        if len(bad):
            raise ScheduleError(f"valores não numéricos em {path} (linha {int(bad[0]) + 2})")
        t, n = t.astype(np.int64).to_numpy(), n.astype(np.int64).to_numpy()
        if (t < 0).any() or (n < 0).any():
            raise ScheduleError(f"índices negativos em {path}")
        T = int(t.max()) + 1 if T is None else int(T)
        N = int(n.max()) + 1 if N is None else int(N)
        if t.max() >= T or n.max() >= N:
            raise ScheduleError(f"índices fora de (T={T}, N={N}) em {path}")
        weights = np.zeros((T, N))
        np.add.at(weights, (t, n), q.to_numpy(dtype=np.float64))
        schedule = cls(weights, descriptor=f"file({path.name})")
        verify_simplex(schedule)
        return schedule


# =============================================================================
# 3. Geração
# =============================================================================


def _independent_uniform(spec: PatternSpec, N: int, T: int,
                         rng: np.random.Generator) -> np.ndarray:
    weights = np.zeros((T, N))
    chosen = np.argsort(rng.random((T, N)), axis=1, kind="stable")[:, : spec.S]
    np.put_along_axis(weights, chosen, 1.0 / spec.S, axis=1)
    return weights


def _regularized_permutation(spec: PatternSpec, N: int, T: int,
                             rng: np.random.Generator) -> np.ndarray:
    weights = np.zeros((T, N))
    per_block = N // spec.S
    for start in range(0, T, per_block):
        perm = rng.permutation(N)
        for j in range(min(per_block, T - start)):
            weights[start + j, perm[j * spec.S:(j + 1) * spec.S]] = 1.0 / spec.S
    return weights


def _periodic_groups(spec: PatternSpec, N: int, T: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    offset = spec.offset if spec.offset is not None else int(rng.integers(0, spec.cycle))
    size = N // spec.groups
    queues: Dict[int, List[int]] = {g: [] for g in range(spec.groups)}
    weights = np.zeros((T, N))
    for t in range(T):
        g = ((t + offset) // spec.block) % spec.groups
        queue = queues[g]
        if len(queue) < spec.S:
            # resto descartado: nova permutação do grupo
            queue[:] = (g * size + rng.permutation(size)).tolist()
        chosen = queue[: spec.S]
        del queue[: spec.S]
        weights[t, chosen] = 1.0 / spec.S
    return weights, offset


def _markov_availability(spec: PatternSpec, N: int, T: int,
                         rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    weights = np.zeros((T, N))
    available = rng.random(N) < spec.stationary_availability
    fallbacks = 0
    for t in range(T):
        idx = np.flatnonzero(available)
        if idx.size == 0:
            chosen = np.sort(rng.permutation(N)[: spec.S])
            fallbacks += 1
            logger.warning("nenhum cliente disponível na rodada %d; sorteio uniforme", t)
        elif idx.size <= spec.S:
            chosen = idx
        else:
            chosen = np.sort(rng.permutation(idx)[: spec.S])
        weights[t, chosen] = 1.0 / chosen.size
        u = rng.random(N)
        available = np.where(available, u < spec.p_aa, u >= spec.p_uu)
    return weights, fallbacks


def generate_schedule(spec: PatternSpec, N: int, T: int, seed: int) -> WeightSchedule:
    """Gera 𝒬 para o padrão; função pura de (spec, N, T, seed)."""
    spec.validate(N)
    if T < 1:
        raise ConfigError(f"T deve ser ≥ 1 (recebido {T})")
    rng = substream(seed, StreamTag.SCHEDULE)
    fallbacks = 0
    offset = None
    if spec.kind is PatternKind.FULL:
        weights = np.full((T, N), 1.0 / N)
    elif spec.kind is PatternKind.INDEPENDENT_UNIFORM:
        weights = _independent_uniform(spec, N, T, rng)
    elif spec.kind is PatternKind.REGULARIZED_PERMUTATION:
        weights = _regularized_permutation(spec, N, T, rng)
    elif spec.kind is PatternKind.PERIODIC_GROUPS:
        weights, offset = _periodic_groups(spec, N, T, rng)
    else:
        weights, fallbacks = _markov_availability(spec, N, T, rng)

    if fallbacks:
        schedule_fallback_total.labels(pattern=spec.kind.value).inc(fallbacks)
        AUDIT_LOGGER.info(
            "Rodadas sem disponibilidade resolvidas por sorteio uniforme",
            {"pattern": spec.describe(), "fallbacks": fallbacks, "T": T, "seed": seed},
        )
    return WeightSchedule(weights, spec.describe(offset), seed, fallbacks)


# =============================================================================
# 4. Estatísticas
# =============================================================================


def rho_bound(schedule: WeightSchedule) -> float:
    """ρ = √(max_t Σ_n (q_t^n)²)."""
    return float(np.sqrt(np.max(np.sum(schedule.weights ** 2, axis=1))))


@dataclass(frozen=True)
class SimplexReport:
    max_row_error: float
    rho2: float
    min_weight: float
    passed: bool = True


def verify_simplex(schedule: WeightSchedule, tol: float = SIMPLEX_TOL) -> SimplexReport:
    """Verifica Σ_n q_t^n = 1 (±tol), q ≥ 0 e ρ² ≤ 1; levanta ScheduleError com as rodadas."""
    weights = schedule.weights
    row_error = np.abs(weights.sum(axis=1) - 1.0)
    negative = np.flatnonzero((weights < 0.0).any(axis=1))
    off = np.flatnonzero(row_error > tol)
    if negative.size:
        raise ScheduleError("pesos negativos no cronograma", negative)
    if off.size:
        raise ScheduleError(
            f"linhas fora do simplex (erro máximo {row_error.max():.3g} > {tol:g})", off
        )
    rho2 = float(np.max(np.sum(weights ** 2, axis=1)))
    if rho2 > 1.0 + tol:
        raise ScheduleError(f"ρ² = {rho2:.17g} excede 1")
    return SimplexReport(float(row_error.max()), rho2, float(weights.min()))


@dataclass(frozen=True, eq=False)
class WindowStats:
    """Médias q̄^n_{t₀} por janela alinhada e momentos empíricos com μ = 1/N."""

    P: int
    starts: np.ndarray
    qbar: np.ndarray
    mu: float
    deviations: np.ndarray
    variance: float
    lag_covariances: np.ndarray = field(repr=False)
    trailing: int = 0

    @property
    def windows(self) -> int:
        return int(self.starts.size)

    @property
    def round_variance(self) -> float:
        """Var(q_t^n) empírica (covariância de atraso 0)."""
        return float(self.lag_covariances[0]) if self.lag_covariances.size else float("nan")


def lag_covariances(weights: np.ndarray, max_lag: int, mu: Optional[float] = None) -> np.ndarray:
    """Cov(q_t^n, q_{t+p}^n) agregada sobre clientes, p = 0..max_lag, com média fixa μ.

    Calculada por FFT por cliente e somada em ordem crescente de cliente.
    """
    T, N = weights.shape
    max_lag = int(min(max_lag, T - 1))
    mu = 1.0 / N if mu is None else mu
    centered = weights - mu
    if max_lag == 0:
        return np.array([float(np.mean(centered ** 2))])
    size = 1 << int(np.ceil(np.log2(2 * T)))
    total = np.zeros(max_lag + 1)
    for n in range(N):
        spectrum = np.fft.rfft(centered[:, n], size)
        total = total + np.fft.irfft(spectrum * np.conj(spectrum), size)[: max_lag + 1]
    counts = (T - np.arange(max_lag + 1)) * N
    return total / counts


def window_averages(schedule: WeightSchedule, P: int, max_lag: int = 0) -> WindowStats:
    """q̄^n_{t₀} = (1/P)Σ_{t=t₀}^{t₀+P−1} q_t^n para t₀ ∈ {0, P, …}; janela final parcial excluída."""
    if not 1 <= P <= schedule.T:
        raise ConfigError(f"P deve estar em [1, T={schedule.T}] (recebido {P})")
    K = schedule.T // P
    mu = 1.0 / schedule.N
    qbar = schedule.weights[: K * P].reshape(K, P, schedule.N).sum(axis=1) / P
    deviations = (qbar - mu) ** 2
    lags = lag_covariances(schedule.weights, max(int(max_lag), 0), mu)
    return WindowStats(
        P=int(P),
        starts=np.arange(K) * P,
        qbar=qbar,
        mu=mu,
        deviations=deviations,
        variance=float(deviations.mean()),
        lag_covariances=lags,
        trailing=int(schedule.T - K * P),
    )
