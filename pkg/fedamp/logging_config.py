"""
Logging estruturado do fedamp.

Um registro por linha em JSON; o contexto vai como dicionário único nos args
(`AUDIT_LOGGER.info("mensagem", {...})`).
"""
from __future__ import annotations

import hashlib
import json
import logging
from enum import Enum
from typing import Any, Dict, Mapping, Optional

import numpy as np


def safe_json_dump(data: Mapping[str, Any], max_list_size: int = 100) -> Dict[str, Any]:
    """Converte recursivamente valores numpy em tipos nativos serializáveis em JSON.

    Arrays maiores que `max_list_size` viram um resumo com tamanho, checksum sha1 e amostra.
    Floats são mantidos com precisão total (o log é usado para auditar resultados).
    """
    out: Dict[str, Any] = {}
    for key, value in data.items():
        out[str(key)] = _to_native(value, max_list_size)
    return out


def _to_native(value: Any, max_list_size: int) -> Any:
    if isinstance(value, dict):
        if value.get("_truncated"):
            return value
        return safe_json_dump(value, max_list_size)
    if isinstance(value, np.ndarray):
        flat = value.ravel()
        if flat.size > max_list_size:
            checksum = int(hashlib.sha1(np.ascontiguousarray(value).tobytes()).hexdigest()[:8], 16)
            return {
                "_truncated": True,
                "size": int(flat.size),
                "shape": list(value.shape),
                "checksum": checksum,
                "sample": [_to_native(v, max_list_size) for v in flat[:10].tolist()],
            }
        return [_to_native(v, max_list_size) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (list, tuple)):
        if len(value) > max_list_size:
            return {
                "_truncated": True,
                "size": len(value),
                "sample": [_to_native(v, max_list_size) for v in list(value)[:10]],
            }
        return [_to_native(v, max_list_size) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:  # noqa: D401
        context = record.args if isinstance(record.args, Mapping) else None
        payload = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "context": safe_json_dump(context) if context else None,
        }
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


AUDIT_LOGGER = logging.getLogger("audit.fedamp")

_PLAIN_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: str = "INFO", json_output: bool = True,
                      handler: Optional[logging.Handler] = None) -> logging.Handler:
    """Instala um único handler no logger raiz (JSON ou texto simples)."""
    root = logging.getLogger()
    for old in list(root.handlers):
        if getattr(old, "_fedamp", False):
            root.removeHandler(old)

    handler = handler or logging.StreamHandler()
    handler.setFormatter(JsonFormatter() if json_output else logging.Formatter(_PLAIN_FORMAT))
    handler._fedamp = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(level)
    AUDIT_LOGGER.setLevel(logging.INFO)
    return handler
