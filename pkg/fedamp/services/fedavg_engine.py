"""
Motor do FedAvg generalizado com atualizações amplificadas.

Por rodada t: cada cliente com q_t^n > 0 parte de x_t e faz I passos de SGD local;
Δ_t^n = y_{t,I}^n − x_t; x_{t+1} = x_t + Σ_n q_t^n Δ_t^n; u acumula a mesma soma.
Quando t+1−t₀ = P a atualização do intervalo é amplificada: x_{t+1} += (η−1)u.
Também executa as linhas de base "esperar por todos" (wait_minibatch / wait_full).

A redução Σ_n q_t^n Δ_t^n é sempre feita em ordem crescente de cliente, depois que todas
as atualizações locais terminam; o resultado não depende do número de threads.
"""
from __future__ import annotations

import dataclasses
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from fedamp.config import get_settings
from fedamp.exceptions import ConfigError, ContractViolation, DivergenceError, PopulationError
from fedamp.logging_config import AUDIT_LOGGER
from fedamp.metrics import (
    amplifications_total,
    last_min_grad_norm_sq,
    last_rho,
    rounds_total,
    run_duration,
    runs_total,
    track_time,
)
from fedamp.services.objectives import (
    LogisticPopulation,
    NoiseModel,
    Population,
    global_grad,
    global_value,
    stochastic_grad,
)
from fedamp.services.participation import WeightSchedule, rho_bound
from fedamp.services.substreams import StreamTag, derive_seed, substream

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "f", "grad_norm_sq", "min_grad_norm_sq", "is_boundary"]

# =============================================================================
# 1. Configuração e estado
# =============================================================================


class RunMode(str, Enum):
    """Modos de execução"""
    GENERALIZED = "generalized"
    WAIT_MINIBATCH = "wait_minibatch"
    WAIT_FULL = "wait_full"


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Hiperparâmetros do FedAvg generalizado (γ, η, I, P, T, x₀) e cadência de checkpoints.

    `eval_every` padrão = P, de modo que toda fronteira t₀ = kP é avaliada; as fronteiras
    entram nos checkpoints qualquer que seja `eval_every`.
    """

    gamma: float
    eta: float
    I: int
    P: int
    T: int
    x0: np.ndarray
    eval_every: Optional[int] = None
    mode: RunMode = RunMode.GENERALIZED
    simulate_all: bool = False
    workers: int = 1
    divergence_threshold: float = 1e100

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RunMode(self.mode))
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigError(f"γ deve ser > 0 (recebido {self.gamma})")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigError(f"η deve ser > 0 (recebido {self.eta})")
        if int(self.I) != self.I or self.I < 1:
            raise ConfigError(f"I deve ser inteiro ≥ 1 (recebido {self.I})")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"T deve ser inteiro ≥ 1 (recebido {self.T})")
        if int(self.P) != self.P or not 1 <= self.P <= self.T:
            raise ConfigError(f"P deve estar em [1, T={self.T}] (recebido {self.P})")
        eval_every = self.P if self.eval_every is None else self.eval_every
        if int(eval_every) != eval_every or eval_every < 1:
            raise ConfigError(f"eval_every deve ser ≥ 1 (recebido {eval_every})")
        if self.workers < 1:
            raise ConfigError(f"workers deve ser ≥ 1 (recebido {self.workers})")
        x0 = np.array(self.x0, dtype=np.float64, copy=True)
        if x0.ndim != 1 or not np.all(np.isfinite(x0)):
            raise ConfigError("x₀ deve ser um vetor finito")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "eval_every", int(eval_every))
        object.__setattr__(self, "I", int(self.I))
        object.__setattr__(self, "P", int(self.P))
        object.__setattr__(self, "T", int(self.T))

    def replace(self, **changes: Any) -> "RunConfig":
        if "P" in changes and "eval_every" not in changes and self.eval_every == self.P:
            changes["eval_every"] = None
        return dataclasses.replace(self, **changes)

    def checkpoints(self) -> np.ndarray:
        """{0} ∪ múltiplos de eval_every ∪ fronteiras kP ∪ {T}, em ordem crescente."""
        grid = np.arange(0, self.T + 1, self.eval_every)
        boundaries = np.arange(0, self.T + 1, self.P)
        return np.union1d(np.union1d(grid, boundaries), [self.T]).astype(np.int64)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gamma": self.gamma, "eta": self.eta, "I": self.I, "P": self.P, "T": self.T,
            "eval_every": self.eval_every, "mode": self.mode.value,
            "simulate_all": self.simulate_all, "workers": self.workers,
        }


@dataclass
class RunState:
    """x_t, u acumulado desde a última amplificação, x_{t₀}, t₀ e a rodada t recém-concluída."""

    x: np.ndarray
    u: np.ndarray
    x_t0: np.ndarray
    t0: int
    t: int


def amplify(state: RunState, eta: float, P: int) -> RunState:
    """Amplificação: x_{t+1} ← x_{t+1} + (η−1)u; zera u e avança t₀.

    Exige t+1−t₀ = P (fronteira do intervalo).
    """
    if state.t + 1 - state.t0 != P:
        raise ContractViolation(
            f"amplify fora da fronteira: t+1−t₀ = {state.t + 1 - state.t0}, P = {P}"
        )
    x_new = state.x + (eta - 1.0) * state.u
    return RunState(x=x_new, u=np.zeros_like(state.u), x_t0=x_new, t0=state.t + 1, t=state.t)


def amplification_identity_error(x_new: np.ndarray, x_t0: np.ndarray, u: np.ndarray,
                                 eta: float) -> float:
    """‖x_new − (x_{t₀} + ηu)‖ relativo à escala ‖x_{t₀}‖ + η‖u‖."""
    scale = float(np.linalg.norm(x_t0) + eta * np.linalg.norm(u))
    err = float(np.linalg.norm(x_new - (x_t0 + eta * u)))
    return err / scale if scale > 0 else err


# =============================================================================
# 2. Trace
# =============================================================================


@dataclass(frozen=True, eq=False)
class Trace:
    """Trajetória checkpointada: t, f(x_t), ‖∇f(x_t)‖², mínimo acumulado e flag de fronteira."""

    t: np.ndarray
    f: np.ndarray
    grad_norm_sq: np.ndarray
    min_grad_norm_sq: np.ndarray
    is_boundary: np.ndarray
    x_final: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_min(self) -> float:
        return float(self.min_grad_norm_sq[-1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "t": self.t.astype(np.int64),
            "f": self.f,
            "grad_norm_sq": self.grad_norm_sq,
            "min_grad_norm_sq": self.min_grad_norm_sq,
            "is_boundary": self.is_boundary.astype(np.int64),
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, metadata: Optional[Dict[str, Any]] = None) -> "Trace":
        return cls(
            t=frame["t"].to_numpy(dtype=np.int64),
            f=frame["f"].to_numpy(dtype=np.float64),
            grad_norm_sq=frame["grad_norm_sq"].to_numpy(dtype=np.float64),
            min_grad_norm_sq=frame["min_grad_norm_sq"].to_numpy(dtype=np.float64),
            is_boundary=frame["is_boundary"].to_numpy().astype(bool),
            x_final=np.zeros(0),
            metadata=dict(metadata or {}),
        )

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Trace":
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"))


class _TraceRecorder:
    def __init__(self, pop: Population, config: RunConfig):
        self.pop = pop
        self.config = config
        self.checkpoints = config.checkpoints()
        self.wanted = set(int(t) for t in self.checkpoints)
        self.rows: List[Tuple[int, float, float, float, bool]] = []
        self.running_min = np.inf

    def maybe_record(self, t: int, x: np.ndarray) -> None:
        if t in self.wanted:
            f, g2 = checkpoint_eval(self.pop, x)
            self.running_min = min(self.running_min, g2)
            self.rows.append((t, f, g2, self.running_min, t % self.config.P == 0))

    def build(self, x_final: np.ndarray, metadata: Dict[str, Any]) -> Trace:
        cols = list(zip(*self.rows))
        return Trace(
            t=np.asarray(cols[0], dtype=np.int64),
            f=np.asarray(cols[1], dtype=np.float64),
            grad_norm_sq=np.asarray(cols[2], dtype=np.float64),
            min_grad_norm_sq=np.asarray(cols[3], dtype=np.float64),
            is_boundary=np.asarray(cols[4], dtype=bool),
            x_final=np.array(x_final, copy=True),
            metadata=metadata,
        )


def checkpoint_eval(pop: Population, x: np.ndarray) -> Tuple[float, float]:
    """(f(x), ‖∇f(x)‖²) exatos, full-batch."""
    g = global_grad(pop, x)
    return global_value(pop, x), float(g @ g)


# =============================================================================
# 3. Atualizações locais
# =============================================================================


def local_update(pop: Population, noise: NoiseModel, gamma: float, I: int, x: np.ndarray,
                 seed: int, t: int, n: int) -> np.ndarray:
    """Δ_t^n: I passos y ← y − γ g_n(y) a partir de x com o sub-fluxo (seed, t, n)."""
    stream = substream(seed, StreamTag.LOCAL_STEP, t, n)
    y = x
    for _ in range(I):
        y = y - gamma * stochastic_grad(pop, noise, n, y, stream)
    return y - x


def averaged_stochastic_grad(pop: Population, noise: NoiseModel, n: int, y: np.ndarray,
                             streams: Sequence[np.random.Generator]) -> np.ndarray:
    """Média de M gradientes estocásticos em y, um por fluxo (aparição) do cliente.

    Com ruído aditivo a média dos ruídos tem variância σ²/M.
    """
    if not streams:
        raise ContractViolation("média de gradientes sem nenhuma aparição")
    if isinstance(pop, LogisticPopulation) and pop.batch_size is not None:
        acc = np.zeros(pop.m)
        for stream in streams:
            acc = acc + stochastic_grad(pop, noise, n, y, stream)
        return acc / len(streams)
    g = pop.client_grad(n, y)
    if noise.is_null:
        return g
    acc = np.zeros(pop.m)
    for stream in streams:
        acc = acc + noise.sample(stream, pop.m)
    return g + acc / len(streams)


def _wait_update(pop: Population, noise: NoiseModel, config: RunConfig, x: np.ndarray,
                 seed: int, n: int, times: np.ndarray) -> np.ndarray:
    streams = [substream(seed, StreamTag.LOCAL_STEP, int(t), n) for t in times]
    y = x
    for _ in range(config.I):
        if config.mode is RunMode.WAIT_FULL:
            g = pop.client_grad(n, y)
        else:
            g = averaged_stochastic_grad(pop, noise, n, y, streams)
        y = y - config.gamma * g
    return y - x


@contextmanager
def _client_pool(workers: int) -> Iterator[Optional[Parallel]]:
    if workers <= 1:
        yield None
        return
    with Parallel(n_jobs=workers, backend="threading") as parallel:
        yield parallel


def _map_clients(func: Callable[[int], np.ndarray], clients: Sequence[int],
                 parallel: Optional[Parallel]) -> List[np.ndarray]:
    if parallel is None or len(clients) < 2:
        return [func(int(n)) for n in clients]
    return parallel(delayed(func)(int(n)) for n in clients)


# =============================================================================
# 4. Execução
# =============================================================================


def _validate(pop: Population, schedule: WeightSchedule, config: RunConfig) -> None:
    if schedule.N != pop.N:
        raise PopulationError(f"cronograma tem N={schedule.N}, população tem N={pop.N}")
    if config.x0.shape != (pop.m,):
        raise PopulationError(f"x₀ tem dimensão {config.x0.shape}, população tem m={pop.m}")
    if schedule.T < config.T:
        raise ConfigError(f"cronograma cobre T={schedule.T} rodadas, execução pede {config.T}")


def _check_divergence(x: np.ndarray, t: int, threshold: float) -> None:
    norm = float(np.linalg.norm(x))
    if not np.isfinite(norm) or norm > threshold:
        raise DivergenceError(t, norm)


def _base_metadata(pop: Population, noise: NoiseModel, schedule: WeightSchedule,
                   config: RunConfig, seed: int) -> Dict[str, Any]:
    return {
        **config.to_dict(),
        "seed": int(seed),
        "rho": rho_bound(schedule),
        "pattern": schedule.descriptor,
        "schedule_seed": schedule.seed,
        "fallback_count": schedule.fallback_count,
        "population": pop.describe(),
        "noise": noise.describe(),
    }


def run(pop: Population, noise: NoiseModel, schedule: WeightSchedule, config: RunConfig,
        seed: int) -> Trace:
    """Executa o FedAvg generalizado (ou a linha de base do modo configurado) e devolve o Trace."""
    _validate(pop, schedule, config)
    if config.mode is not RunMode.GENERALIZED:
        return run_wait_baseline(pop, noise, schedule, config, seed)
    try:
        trace = _run_generalized(pop, noise, schedule, config, seed)
    except DivergenceError:
        runs_total.labels(mode=config.mode.value, status="diverged").inc()
        raise
    runs_total.labels(mode=config.mode.value, status="ok").inc()
    last_min_grad_norm_sq.set(trace.final_min)
    return trace


@track_time(run_duration, operation="generalized")
def _run_generalized(pop: Population, noise: NoiseModel, schedule: WeightSchedule,
                     config: RunConfig, seed: int) -> Trace:
    settings = get_settings()
    recorder = _TraceRecorder(pop, config)
    weights = schedule.weights
    gamma, I, P, eta = config.gamma, config.I, config.P, config.eta
    all_clients = np.arange(pop.N)

    state = RunState(x=config.x0.copy(), u=np.zeros(pop.m), x_t0=config.x0.copy(), t0=0, t=0)
    recorder.maybe_record(0, state.x)
    amplifications = 0
    identity_error = 0.0
    rho = rho_bound(schedule)
    last_rho.set(rho)

    def client_delta(t: int, x: np.ndarray) -> Callable[[int], np.ndarray]:
        return lambda n: local_update(pop, noise, gamma, I, x, seed, t, n)

    rounds = tqdm(range(config.T), desc="rodadas", disable=not settings.progress, leave=False)
    with _client_pool(config.workers) as parallel, np.errstate(over="ignore", invalid="ignore"):
        try:
            for t in rounds:
                clients = all_clients if config.simulate_all else schedule.participants(t)
                deltas = _map_clients(client_delta(t, state.x), clients, parallel)
                agg = np.zeros(pop.m)
                for n, delta in zip(clients, deltas):
                    agg = agg + weights[t, n] * delta
                state.x = state.x + agg
                state.u = state.u + agg
                state.t = t
                if t + 1 - state.t0 == P:
                    x_t0, u = state.x_t0, state.u
                    state = amplify(state, eta, P)
                    identity_error = max(
                        identity_error, amplification_identity_error(state.x, x_t0, u, eta)
                    )
                    amplifications += 1
                _check_divergence(state.x, t + 1, config.divergence_threshold)
                recorder.maybe_record(t + 1, state.x)
        except DivergenceError as exc:
            AUDIT_LOGGER.info(
                "Execução divergiu",
                {"round": exc.round, "norm": exc.norm, "mode": config.mode.value, "seed": seed},
            )
            raise

    rounds_total.labels(mode=config.mode.value).inc(config.T)
    amplifications_total.inc(amplifications)
    metadata = _base_metadata(pop, noise, schedule, config, seed)
    metadata.update({
        "rho": rho,
        "amplifications": amplifications,
        "amplification_identity_error": identity_error,
        "trailing_rounds": config.T - amplifications * P,
    })
    trace = recorder.build(state.x, metadata)
    logger.debug("execução concluída", {"min_grad_norm_sq": trace.final_min, "seed": seed})
    return trace


@track_time(run_duration, operation="wait")
def _run_wait(pop: Population, noise: NoiseModel, schedule: WeightSchedule, config: RunConfig,
              seed: int) -> Trace:
    recorder = _TraceRecorder(pop, config)
    weights = schedule.weights
    P = config.P
    x = config.x0.copy()
    recorder.maybe_record(0, x)
    steps = 0

    with _client_pool(config.workers) as parallel, np.errstate(over="ignore", invalid="ignore"):
        for t0 in range(0, config.T, P):
            end = min(t0 + P, config.T)
            for t in range(t0 + 1, end):
                recorder.maybe_record(t, x)
            if end - t0 < P:
                # janela final parcial: modelo congelado, sem passo
                recorder.maybe_record(end, x)
                break
            window = weights[t0:end]
            clients = np.flatnonzero((window > 0.0).any(axis=0))
            if clients.size:
                frozen = x

                def update(n: int) -> np.ndarray:
                    times = t0 + np.flatnonzero(window[:, n] > 0.0)
                    return _wait_update(pop, noise, config, frozen, seed, n, times)

                deltas = _map_clients(update, clients, parallel)
                agg = np.zeros(pop.m)
                share = 1.0 / clients.size
                for delta in deltas:
                    agg = agg + share * delta
                x = x + config.eta * agg
                steps += 1
            _check_divergence(x, end, config.divergence_threshold)
            recorder.maybe_record(end, x)

    rounds_total.labels(mode=config.mode.value).inc(config.T)
    metadata = _base_metadata(pop, noise, schedule, config, seed)
    metadata.update({"global_steps": steps, "amplifications": 0})
    return recorder.build(x, metadata)


def run_wait_baseline(pop: Population, noise: NoiseModel, schedule: WeightSchedule,
                      config: RunConfig, seed: int) -> Trace:
    """Linha de base "esperar por todos": modelo congelado por P rodadas.

    Cada cliente que aparece na janela contribui uma vez: faz I passos locais a partir de
    x_{t₀} com o gradiente médio das suas M aparições (wait_minibatch) ou com o gradiente
    exato (wait_full). Ao fim da janela x ← x_{t₀} + η·média(Δ). Janela final parcial
    não gera passo.
    """
    if config.mode is RunMode.GENERALIZED:
        raise ConfigError("run_wait_baseline exige modo wait_minibatch ou wait_full")
    _validate(pop, schedule, config)
    try:
        trace = _run_wait(pop, noise, schedule, config, seed)
    except DivergenceError:
        runs_total.labels(mode=config.mode.value, status="diverged").inc()
        raise
    runs_total.labels(mode=config.mode.value, status="ok").inc()
    last_min_grad_norm_sq.set(trace.final_min)
    return trace


def run_with_warmup(pop: Population, noise: NoiseModel, schedule: WeightSchedule,
                    config: RunConfig, seed: int, warmup_rounds: int = 0,
                    warmup_gamma: Optional[float] = None) -> Trace:
    """Fase de aquecimento opcional (η=1, P=1) nas primeiras rodadas do cronograma.

    A execução principal começa do ponto aquecido e usa as rodadas seguintes.
    """
    if warmup_rounds <= 0:
        return run(pop, noise, schedule, config, seed)
    if warmup_rounds + config.T > schedule.T:
        raise ConfigError(
            f"aquecimento ({warmup_rounds}) + T ({config.T}) excede o cronograma ({schedule.T})"
        )
    warm_config = config.replace(
        gamma=warmup_gamma or config.gamma, eta=1.0, P=1, T=warmup_rounds,
        eval_every=warmup_rounds, mode=RunMode.GENERALIZED,
    )
    warm = run(pop, noise, schedule.window(0, warmup_rounds), warm_config,
               derive_seed(seed, "warmup"))
    main = run(pop, noise, schedule.window(warmup_rounds, warmup_rounds + config.T),
               config.replace(x0=warm.x_final), seed)
    AUDIT_LOGGER.info("Aquecimento concluído", {
        "warmup_rounds": warmup_rounds, "warmup_gamma": warm_config.gamma,
        "min_grad_norm_sq": warm.final_min,
    })
    metadata = {**main.metadata, "warmup_rounds": warmup_rounds,
                "warmup_gamma": warm_config.gamma}
    return dataclasses.replace(main, metadata=metadata)
