"""
Testes do logging estruturado
"""
import io
import json
import logging

import numpy as np
import pytest

from fedamp.logging_config import AUDIT_LOGGER, JsonFormatter, configure_logging, safe_json_dump

pytestmark = pytest.mark.unit


@pytest.fixture
def captured():
    stream = io.StringIO()
    handler = configure_logging("DEBUG", json_output=True, handler=logging.StreamHandler(stream))
    yield stream
    logging.getLogger().removeHandler(handler)


def _records(stream):
    return [json.loads(line) for line in stream.getvalue().splitlines() if line]


def test_safe_json_dump_converts_numpy():
    """Testa conversão de escalares e arrays numpy"""
    data = safe_json_dump({
        "int": np.int64(3),
        "float": np.float64(0.1),
        "array": np.array([1.0, 2.0]),
        "nested": {"value": np.float32(0.5)},
        "inf": float("inf"),
    })
    assert data == {"int": 3, "float": 0.1, "array": [1.0, 2.0], "nested": {"value": 0.5},
                    "inf": "inf"}
    json.dumps(data)


def test_safe_json_dump_truncates_large_arrays():
    """Testa resumo com checksum para arrays grandes"""
    data = safe_json_dump({"x": np.arange(500.0)}, max_list_size=100)
    assert data["x"]["_truncated"] is True
    assert data["x"]["size"] == 500
    assert data["x"]["sample"] == list(range(10))
    again = safe_json_dump({"x": np.arange(500.0)}, max_list_size=100)
    assert again["x"]["checksum"] == data["x"]["checksum"]


def test_json_formatter_with_context(captured):
    """Testa uma linha JSON por registro com o contexto em dicionário"""
    AUDIT_LOGGER.info("Execução concluída", {"seed": np.int64(5), "rho": 0.5})
    record = _records(captured)[-1]
    assert record["message"] == "Execução concluída"
    assert record["logger"] == "audit.fedamp"
    assert record["level"] == "INFO"
    assert record["context"] == {"seed": 5, "rho": 0.5}


def test_json_formatter_without_context(captured):
    """Testa mensagem formatada com args posicionais"""
    logging.getLogger("fedamp.teste").warning("rodada %d sem clientes", 7)
    record = _records(captured)[-1]
    assert record["message"] == "rodada 7 sem clientes"
    assert record["context"] is None


def test_configure_logging_replaces_its_own_handler():
    """Testa que reconfigurar não duplica handlers"""
    root = logging.getLogger()
    first = configure_logging("INFO", json_output=False)
    second = configure_logging("WARNING", json_output=True)
    try:
        assert first not in root.handlers
        assert second in root.handlers
        assert root.level == logging.WARNING
        assert isinstance(second.formatter, JsonFormatter)
    finally:
        root.removeHandler(second)
