#!/usr/bin/env python3
# fedamp/jobs/charts.py
"""
Gráficos SVG das curvas de convergência (‖∇f‖² contra t, eixo y logarítmico).

Saída determinística: hashsalt fixo, fontes como texto e sem data nos metadados, de modo que
a mesma entrada gera bytes idênticos.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from fedamp.api.schemas import METRICS_COLUMNS, MetricsRow  # noqa: E402
from fedamp.exceptions import MalformedCsvError  # noqa: E402

logger = logging.getLogger(__name__)

Series = Tuple[np.ndarray, np.ndarray]

_SVG_PARAMS = {
    "svg.hashsalt": "fedamp",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def load_metrics_csv(path: Union[str, Path], value: str = "grad_norm_sq") -> Dict[str, Series]:
    """Lê metrics.csv validando cada linha; devolve {run_id: (t, valor)} na ordem do arquivo."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise MalformedCsvError(str(path), None, f"não foi possível ler: {exc}") from exc
    missing = [col for col in METRICS_COLUMNS if col not in frame.columns]
    if missing:
        raise MalformedCsvError(str(path), None, f"colunas ausentes: {', '.join(missing)}")
    if frame.empty:
        raise MalformedCsvError(str(path), None, "série vazia")

    rows: List[MetricsRow] = []
    for index, record in enumerate(frame[METRICS_COLUMNS].to_dict("records")):
        try:
            rows.append(MetricsRow.model_validate(record))
        except ValidationError as exc:
            # linha 1 é o cabeçalho
            reason = "; ".join(f"{e['loc'][0]}: {e['msg']}" for e in exc.errors())
            raise MalformedCsvError(str(path), index + 2, reason) from exc

    grouped: Dict[str, List[MetricsRow]] = {}
    for row in rows:
        grouped.setdefault(row.run_id, []).append(row)
    return {
        run_id: (
            np.array([row.t for row in group], dtype=np.int64),
            np.array([getattr(row, value) for row in group], dtype=np.float64),
        )
        for run_id, group in grouped.items()
    }


def render_chart(series: Mapping[str, Series], path: Union[str, Path], *,
                 title: str = "", xlabel: str = "rodada t",
                 ylabel: str = "‖∇f(x_t)‖²", log_y: bool = True) -> Path:
    """Uma linha por série (gid "series-<i>") e legenda; valores ≤ 0 ficam fora do eixo log."""
    if not series:
        raise MalformedCsvError(str(path), None, "nenhuma série para desenhar")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_SVG_PARAMS):
        fig = Figure(figsize=(8, 5))
        ax = fig.add_subplot(1, 1, 1)
        for i, (label, (x, y)) in enumerate(series.items()):
            y = np.asarray(y, dtype=np.float64)
            if log_y:
                y = np.where(y > 0, y, np.nan)
            ax.plot(np.asarray(x), y, label=label, gid=f"series-{i}", linewidth=1.2)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(True, which="major", alpha=0.3)
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    logger.info("gráfico gravado", {"path": str(path), "series": len(series)})
    return path


def cli_plot(csv_paths: Sequence[Union[str, Path]], out_path: Union[str, Path]) -> int:
    """Desenha as séries de um ou mais metrics.csv; com vários arquivos o rótulo leva o nome."""
    if not csv_paths:
        raise MalformedCsvError("-", None, "nenhum CSV informado")
    combined: Dict[str, Series] = {}
    for csv_path in csv_paths:
        loaded = load_metrics_csv(csv_path)
        for run_id, data in loaded.items():
            label = run_id if len(csv_paths) == 1 else f"{Path(csv_path).stem}:{run_id}"
            combined[label] = data
    render_chart(combined, out_path)
    return 0
