"""
Módulo de métricas Prometheus do fedamp.
Contadores, histogramas e gauges das execuções, cronogramas e verificações de limites.
Nenhum servidor é iniciado; a CLI pode despejar o registro em arquivo (--metrics-out).
"""
import time
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Union

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, generate_latest

# =============================================================================
# CONTADORES - Métricas que só aumentam
# =============================================================================

runs_total = Counter(
    'fedamp_runs_total',
    'Total de execuções do motor FedAvg',
    ['mode', 'status']  # Labels: generalized/wait_*, ok/diverged
)

rounds_total = Counter(
    'fedamp_rounds_total',
    'Total de rodadas globais simuladas',
    ['mode']
)

amplifications_total = Counter(
    'fedamp_amplifications_total',
    'Total de amplificações aplicadas (fronteiras t₀ = kP)'
)

schedule_fallback_total = Counter(
    'fedamp_schedule_fallback_total',
    'Rodadas sem cliente disponível que caíram no sorteio uniforme',
    ['pattern']
)

bound_checks_total = Counter(
    'fedamp_bound_checks_total',
    'Total de verificações de concentração',
    ['bound', 'result']  # Labels: hoeffding/chebyshev, pass/fail
)

sweep_points_total = Counter(
    'fedamp_sweep_points_total',
    'Pontos de varredura executados',
    ['status']  # Labels: ok/failed
)

# =============================================================================
# HISTOGRAMAS - Métricas de duração
# =============================================================================

run_duration = Histogram(
    'fedamp_run_duration_seconds',
    'Tempo de uma execução completa do motor',
    ['operation'],  # Label: generalized/wait
    buckets=(0.01, 0.05, 0.1, 0.5, 1, 2, 5, 10, 30, 60)
)

job_duration = Histogram(
    'fedamp_job_duration_seconds',
    'Tempo dos jobs da CLI',
    ['job'],
    buckets=(0.1, 0.5, 1, 5, 10, 30, 60, 120, 300)
)

# =============================================================================
# GAUGES - Métricas que podem subir ou descer
# =============================================================================

last_rho = Gauge(
    'fedamp_last_rho',
    'ρ do último cronograma usado em uma execução'
)

last_min_grad_norm_sq = Gauge(
    'fedamp_last_min_grad_norm_sq',
    'min ‖∇f‖² da última execução concluída'
)

# =============================================================================
# UTILITÁRIOS
# =============================================================================


def track_time(histogram: Histogram, **labels):
    """Decorador para medir tempo de execução."""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                histogram.labels(**labels).observe(time.perf_counter() - start_time)

        return wrapper

    return decorator


def write_metrics(path: Union[str, Path]) -> Path:
    """Grava o registro global no formato texto do Prometheus."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(generate_latest(REGISTRY))
    return path
