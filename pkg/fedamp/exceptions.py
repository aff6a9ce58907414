"""
Hierarquia de exceções do fedamp.

Cada exceção carrega um código de saída para a CLI: 1 para erros de configuração
ou de entrada, 2 para falhas de execução (divergência, violação de contrato).
"""
from __future__ import annotations

from typing import Iterable, Optional


class FedAmpError(Exception):
    """Erro base do fedamp."""

    exit_code: int = 2


class ConfigError(FedAmpError, ValueError):
    """Configuração inválida (arquivo INI, overrides ou argumentos de construção)."""

    exit_code = 1


class PopulationError(FedAmpError, ValueError):
    """População de objetivos inválida ou incompatível com a operação pedida."""

    exit_code = 1


class ScheduleError(FedAmpError, ValueError):
    """Cronograma de pesos que viola o simplex ou arquivo de cronograma malformado."""

    exit_code = 1

    def __init__(self, message: str, rounds: Iterable[int] = ()):
        self.rounds = tuple(int(t) for t in rounds)
        if self.rounds:
            shown = ", ".join(str(t) for t in self.rounds[:10])
            extra = "" if len(self.rounds) <= 10 else f" (+{len(self.rounds) - 10})"
            message = f"{message}; rodadas: {shown}{extra}"
        super().__init__(message)


class ContractViolation(FedAmpError, RuntimeError):
    """Uso de API interna fora do contrato (ex.: amplify fora da fronteira)."""


class DivergenceError(FedAmpError, ArithmeticError):
    """Parâmetro global não finito ou acima do limiar de divergência."""

    def __init__(self, round_index: int, norm: float, run_id: Optional[str] = None):
        self.round = int(round_index)
        self.norm = float(norm)
        self.run_id = run_id
        prefix = f"[{run_id}] " if run_id else ""
        super().__init__(f"{prefix}divergência na rodada {self.round}: ‖x‖ = {self.norm:.6g}")


class MalformedCsvError(FedAmpError, ValueError):
    """CSV de métricas malformado; `row` é a linha do arquivo (1 = cabeçalho)."""

    exit_code = 1

    def __init__(self, path: str, row: Optional[int], reason: str):
        self.path = str(path)
        self.row = row
        where = f"{self.path}, linha {row}" if row is not None else self.path
        super().__init__(f"CSV malformado ({where}): {reason}")
