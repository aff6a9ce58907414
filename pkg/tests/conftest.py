"""
Configuração pytest do fedamp.

Fixtures de populações pequenas, cronogramas feitos à mão e fábrica de arquivos INI.
"""
import os
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

# Configurar ambiente de teste antes de qualquer get_settings()
os.environ["FEDAMP_ENVIRONMENT"] = "test"
os.environ["FEDAMP_LOG_JSON"] = "false"
os.environ["FEDAMP_PROGRESS"] = "false"

from fedamp.config import get_settings  # noqa: E402
from fedamp.services.objectives import QuadraticPopulation, build_quadratic  # noqa: E402
from fedamp.services.participation import WeightSchedule  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "unit: testes rápidos de uma função ou classe")
    config.addinivalue_line("markers", "integration: testes que atravessam vários serviços")
    config.addinivalue_line("markers", "slow: critérios de aceitação demorados")
    config.addinivalue_line("markers", "cli: testes da linha de comando")


@pytest.fixture(autouse=True)
def fresh_settings():
    """Settings relidas a cada teste (variáveis de ambiente podem ter mudado)."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def symmetric_pop() -> QuadraticPopulation:
    """N=2, m=1, A=[1], centros −1 e +1: x*=0, f*=0.5, d²=1, L=1."""
    return QuadraticPopulation(np.array([[1.0]]), np.array([[-1.0], [1.0]]))


@pytest.fixture
def alternating_schedule() -> Callable[[int], WeightSchedule]:
    """Cronograma N=2 com um único cliente por rodada, alternando 0, 1, 0, 1, ..."""
    def make(T: int) -> WeightSchedule:
        weights = np.zeros((T, 2))
        weights[np.arange(T), np.arange(T) % 2] = 1.0
        return WeightSchedule.from_dense(weights, descriptor="alternating")
    return make


@pytest.fixture
def seeded_quadratic() -> QuadraticPopulation:
    """Quadrática homogênea N=8, m=4, κ=3, semente 7."""
    return build_quadratic(8, 4, 1.0, 1.0, 7, condition_number=3.0)


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    return tmp_path / "out"


@pytest.fixture
def write_ini(tmp_path: Path) -> Callable[[str, str], Path]:
    """Grava um texto INI em tmp_path e devolve o caminho."""
    def write(text: str, name: str = "experiment.ini") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return write


SMALL_RUN_INI = """
[population]
kind = quadratic
clients = 8
dimension = 4
smoothness = 1.0
spread = 1.0
noise = gaussian
sigma = 0.5
x0_radius = 1.0

[pattern]
kind = regularized_permutation
participants = 2

[run]
local_steps = 2
interval = 4
rounds = 64

[planner]
directive = cor3.2

[seeds]
master = 11
replications = 2
"""


@pytest.fixture
def small_run_ini() -> str:
    return SMALL_RUN_INI
