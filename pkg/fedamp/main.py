# fedamp/main.py
"""
CLI do fedamp: `fedamp run|sweep|diagnose|bounds|plot|paperdemo`.

Códigos de saída: 0 sucesso, 1 configuração ou entrada inválida, 2 falha de execução
(divergência, decomposição violada, verificação reprovada, ordenação não reproduzida).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from fedamp import __version__
from fedamp.api.schemas import ExperimentConfig, load_config
from fedamp.config import get_settings
from fedamp.exceptions import FedAmpError
from fedamp.jobs.charts import cli_plot
from fedamp.jobs.diagnostics import run_bounds, run_diagnose
from fedamp.jobs.experiment import run_experiment, run_sweep
from fedamp.jobs.paper_demo import load_demo_config, run_paper_demo
from fedamp.logging_config import configure_logging
from fedamp.metrics import write_metrics

logger = logging.getLogger(__name__)

Job = Callable[[ExperimentConfig, Optional[Path], Optional[int]], int]

JOBS: Dict[str, Job] = {
    "run": run_experiment,
    "sweep": run_sweep,
    "diagnose": run_diagnose,
    "bounds": run_bounds,
    "paperdemo": run_paper_demo,
}


def _common_options(parser: argparse.ArgumentParser, config_required: bool) -> None:
    parser.add_argument("--config", type=Path, required=config_required,
                        help="Arquivo INI do experimento.")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECAO.CHAVE=VALOR",
                        help="Sobrescreve um campo da configuração (repetível).")
    parser.add_argument("--out", type=Path, default=None, help="Diretório de saída.")
    parser.add_argument("--seed", type=int, default=None,
                        help="Semente mestra (sobrescreve seeds.master).")
    parser.add_argument("--workers", type=int, default=None,
                        help="Threads para pontos, replicações, clientes e Monte Carlo.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedamp",
        description="Simulador de FedAvg generalizado com atualizações amplificadas.",
    )
    parser.add_argument("--version", action="version", version=f"fedamp {__version__}")
    parser.add_argument("--log-level", default=None,
                        help="Nível de log (padrão: FEDAMP_LOG_LEVEL ou INFO).")
    parser.add_argument("--metrics-out", type=Path, default=None,
                        help="Grava as métricas Prometheus neste arquivo ao final.")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("run", "Executa as replicações e grava metrics.csv e meta.txt."),
        ("sweep", "Varre T, P ou S e ajusta a inclinação log-log."),
        ("diagnose", "Calcula β̃², ν̃², δ̃² e d² por P."),
        ("bounds", "Verificações empíricas de Hoeffding ou de mistura."),
    ):
        _common_options(commands.add_parser(name, help=text), config_required=True)

    demo = commands.add_parser("paperdemo",
                               help="Comparação com disponibilidade periódica por grupos.")
    _common_options(demo, config_required=False)
    demo.add_argument("--replications", type=int, default=None,
                      help="Número de sementes (sobrescreve seeds.replications).")
    demo.add_argument("--tune", action="store_true",
                      help="Busca em grade de γ por braço antes da comparação.")

    plot = commands.add_parser("plot", help="Gráfico SVG de um ou mais metrics.csv.")
    plot.add_argument("csv", nargs="+", type=Path, help="Arquivos metrics.csv.")
    plot.add_argument("--out", type=Path, required=True, help="Arquivo SVG de saída.")
    return parser


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds.master={args.seed}")
    if getattr(args, "replications", None) is not None:
        overrides.append(f"seeds.replications={args.replications}")
    if getattr(args, "tune", False):
        overrides.append("demo.tune=true")
    return overrides


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "plot":
        return cli_plot(args.csv, args.out)
    if args.command == "paperdemo":
        config = load_demo_config(args.config, _overrides(args))
    else:
        config = load_config(args.config, _overrides(args))
    return JOBS[args.command](config, args.out, args.workers)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    configure_logging((args.log_level or settings.log_level).upper(), json_output=settings.log_json)

    try:
        code = _dispatch(args)
    except FedAmpError as exc:
        logger.error("comando falhou", {"command": args.command, "error": str(exc),
                                        "exit_code": exc.exit_code})
        print(f"fedamp {args.command}: {exc}", file=sys.stderr)
        code = exc.exit_code
    finally:
        if args.metrics_out is not None:
            write_metrics(args.metrics_out)
    logger.info("comando concluído", {"command": args.command, "exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())
