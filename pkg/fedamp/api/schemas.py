"""
fedamp/api/schemas.py

Esquemas Pydantic da configuração de experimentos (arquivo INI com seções) e das linhas
de métricas. Chaves desconhecidas são rejeitadas; todo erro vira ConfigError com a chave.
"""
from __future__ import annotations

import configparser
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fedamp.exceptions import ConfigError
from fedamp.services.fedavg_engine import RunMode
from fedamp.services.objectives import NoiseKind, NoiseModel
from fedamp.services.participation import PatternKind, PatternSpec


class PopulationKind(str, Enum):
    """Famílias de objetivos"""
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"


class CurvatureKind(str, Enum):
    """Curvatura das quadráticas"""
    HOMOGENEOUS = "homogeneous"
    HETEROGENEOUS = "heterogeneous"


class PatternChoice(str, Enum):
    """Padrões de participação aceitos no arquivo (inclui cronograma lido de CSV)"""
    FULL = "full"
    INDEPENDENT_UNIFORM = "independent_uniform"
    REGULARIZED_PERMUTATION = "regularized_permutation"
    PERIODIC_GROUPS = "periodic_groups"
    MARKOV_AVAILABILITY = "markov_availability"
    FILE = "file"


class PlanDirective(str, Enum):
    """Como γ e η são escolhidos"""
    MANUAL = "manual"
    COR3_2 = "cor3.2"
    COR3_3 = "cor3.3"
    FIXED_ETA = "fixed_eta"
    GRID = "grid"


class DivergenceMode(str, Enum):
    AUTO = "auto"
    EXACT = "exact"
    SAMPLED = "sampled"


class BoundChoice(str, Enum):
    AUTO = "auto"
    HOEFFDING = "hoeffding"
    CHEBYSHEV = "chebyshev"


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _blank_to_none(cls, data: Any) -> Any:
        # "none" só vira None em campos opcionais; noise = none continua sendo um NoiseKind
        if isinstance(data, dict):
            optional = {name for name, info in cls.model_fields.items() if info.default is None}
            return {
                key: None if isinstance(value, str) and (
                    not value.strip() or (value.strip().lower() == "none" and key in optional)
                ) else value
                for key, value in data.items()
            }
        return data


# =============================================================================
# Seções
# =============================================================================


class PopulationSection(_Section):
    """[population]"""
    kind: PopulationKind = PopulationKind.QUADRATIC
    clients: int = Field(8, ge=1, description="N")
    dimension: int = Field(10, ge=1, description="m")
    smoothness: float = Field(1.0, gt=0, description="L")
    spread: float = Field(1.0, ge=0)
    condition_number: float = Field(1.0, ge=1)
    groups: int = Field(1, ge=1, description="grupos de centros")
    group_jitter: float = Field(0.0, ge=0)
    curvature: CurvatureKind = CurvatureKind.HOMOGENEOUS
    curvature_jitter: float = Field(0.0, ge=0)
    scale: float = Field(1.0, gt=0)
    noise: NoiseKind = NoiseKind.GAUSSIAN
    sigma: float = Field(0.0, ge=0)
    x0_radius: float = Field(1.0, ge=0)
    samples_per_client: int = Field(50, ge=1)
    regularization: float = Field(0.01, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)
    label_skew: float = Field(0.9, ge=0.5, le=1.0)

    def noise_model(self) -> NoiseModel:
        if self.noise is NoiseKind.NONE or self.sigma == 0.0:
            return NoiseModel.none()
        return NoiseModel(self.noise, self.sigma)


class PatternSection(_Section):
    """[pattern]"""
    kind: PatternChoice = PatternChoice.FULL
    participants: Optional[int] = Field(None, ge=1, description="S")
    groups: int = Field(1, ge=1)
    block: int = Field(1, ge=1)
    offset: Union[int, Literal["random"]] = "random"
    p_aa: Optional[float] = Field(None, gt=0, lt=1)
    p_uu: Optional[float] = Field(None, gt=0, lt=1)
    path: Optional[Path] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "PatternSection":
        if self.kind is PatternChoice.FILE and self.path is None:
            raise ValueError("kind = file exige path")
        if self.kind not in (PatternChoice.FULL, PatternChoice.FILE) and self.participants is None:
            raise ValueError(f"kind = {self.kind.value} exige participants")
        if self.kind is PatternChoice.MARKOV_AVAILABILITY and (self.p_aa is None or self.p_uu is None):
            raise ValueError("markov_availability exige p_aa e p_uu")
        return self

    def to_pattern_spec(self) -> PatternSpec:
        if self.kind is PatternChoice.FILE:
            raise ConfigError("cronograma em arquivo não tem PatternSpec")
        return PatternSpec(
            kind=PatternKind(self.kind.value),
            S=self.participants,
            groups=self.groups,
            block=self.block,
            offset=None if self.offset == "random" else int(self.offset),
            p_aa=self.p_aa,
            p_uu=self.p_uu,
        )


class RunSection(_Section):
    """[run]; γ só é obrigatório com planner.directive = manual."""
    gamma: Optional[float] = Field(None, gt=0)
    eta: float = Field(1.0, gt=0)
    local_steps: int = Field(5, ge=1, description="I")
    interval: int = Field(1, ge=1, description="P")
    rounds: int = Field(1000, ge=1, description="T")
    eval_every: Optional[int] = Field(None, ge=1)
    mode: RunMode = RunMode.GENERALIZED
    simulate_all: bool = False
    warmup_rounds: int = Field(0, ge=0)
    warmup_gamma: Optional[float] = Field(None, gt=0)
    workers: Optional[int] = Field(None, ge=1)


class PlannerSection(_Section):
    """[planner]; f_value ausente usa ℱ = f(x₀) − f* exato."""
    directive: PlanDirective = PlanDirective.MANUAL
    f_value: Optional[float] = Field(None, gt=0)
    grid_base: PlanDirective = PlanDirective.COR3_2
    grid_multipliers: List[float] = Field(default_factory=lambda: [1.0, 0.1, 0.01, 0.001, 1e-4])

    @field_validator("grid_multipliers", mode="before")
    @classmethod
    def _split_multipliers(cls, value: Any) -> Any:
        return _split_list(value)

    @model_validator(mode="after")
    def _check_grid(self) -> "PlannerSection":
        if self.grid_base in (PlanDirective.GRID, PlanDirective.MANUAL):
            raise ValueError("grid_base deve ser cor3.2, cor3.3 ou fixed_eta")
        if not self.grid_multipliers or any(g <= 0 for g in self.grid_multipliers):
            raise ValueError("grid_multipliers deve ter valores > 0")
        return self


class SweepSection(_Section):
    """[sweep]; com axis = S e fixed_product, T = fixed_product // S."""
    axis: Literal["T", "P", "S"]
    values: List[int] = Field(..., min_length=1)
    fixed_product: Optional[int] = Field(None, ge=1)
    align_interval: bool = False

    @field_validator("values", mode="before")
    @classmethod
    def _split_values(cls, value: Any) -> Any:
        return _split_list(value)


class SeedsSection(_Section):
    """[seeds]"""
    master: int = Field(0, ge=0, lt=2 ** 64)
    replications: int = Field(1, ge=1)


class OutputSection(_Section):
    """[output]"""
    directory: Optional[Path] = None
    chart: bool = True


class DiagnoseSection(_Section):
    """[diagnose]"""
    ladder: List[int] = Field(default_factory=lambda: [1])
    mode: DivergenceMode = DivergenceMode.AUTO
    samples: int = Field(16, ge=0)
    sample_radius: Optional[float] = Field(None, ge=0)
    include_iterates: bool = False

    @field_validator("ladder", mode="before")
    @classmethod
    def _split_ladder(cls, value: Any) -> Any:
        return _split_list(value)


class BoundsSection(_Section):
    """[bounds]"""
    bound: BoundChoice = BoundChoice.AUTO
    c: float = Field(0.05, gt=0, lt=1)
    interval: int = Field(64, ge=1, description="P da verificação de Hoeffding")
    trials: int = Field(10000, ge=1)
    ladder: List[int] = Field(default_factory=lambda: [16, 32, 64, 128, 256, 512, 1024])
    mixing_trials: int = Field(256, ge=1)
    mixing_c: float = Field(0.1, gt=0, lt=1)
    max_lag: int = Field(512, ge=1)

    @field_validator("ladder", mode="before")
    @classmethod
    def _split_ladder(cls, value: Any) -> Any:
        return _split_list(value)


class DemoSection(_Section):
    """[demo]; ladder vazio usa 1, ciclo/4, ciclo/2, ciclo, 2·ciclo."""
    ladder: List[int] = Field(default_factory=list)
    tune: bool = False
    warmup_rounds: int = Field(0, ge=0)
    min_agreement: float = Field(0.8, gt=0, le=1)

    @field_validator("ladder", mode="before")
    @classmethod
    def _split_ladder(cls, value: Any) -> Any:
        return _split_list(value)


# =============================================================================
# Configuração completa
# =============================================================================


_SECTIONS = {
    "population": PopulationSection,
    "pattern": PatternSection,
    "run": RunSection,
    "planner": PlannerSection,
    "sweep": SweepSection,
    "seeds": SeedsSection,
    "output": OutputSection,
    "diagnose": DiagnoseSection,
    "bounds": BoundsSection,
    "demo": DemoSection,
}


class ExperimentConfig(BaseModel):
    """Plano completo de um experimento, validado antes de qualquer cálculo."""

    model_config = ConfigDict(extra="forbid")

    population: PopulationSection = Field(default_factory=PopulationSection)
    pattern: PatternSection = Field(default_factory=PatternSection)
    run: RunSection = Field(default_factory=RunSection)
    planner: PlannerSection = Field(default_factory=PlannerSection)
    sweep: Optional[SweepSection] = None
    seeds: SeedsSection = Field(default_factory=SeedsSection)
    output: OutputSection = Field(default_factory=OutputSection)
    diagnose: DiagnoseSection = Field(default_factory=DiagnoseSection)
    bounds: BoundsSection = Field(default_factory=BoundsSection)
    demo: DemoSection = Field(default_factory=DemoSection)

    def with_updates(self, **sections: Dict[str, Any]) -> "ExperimentConfig":
        """Cópia revalidada com campos de seções trocados, p.ex. run={"rounds": 256}."""
        data = self.model_dump()
        for name, changes in sections.items():
            data[name] = {**(data.get(name) or {}), **changes}
        return _validate(data)

    def to_ini(self) -> str:
        """Serializa todas as seções presentes; campos None e listas vazias são omitidos."""
        lines: List[str] = []
        for name in _SECTIONS:
            section = getattr(self, name)
            if section is None:
                continue
            lines.append(f"[{name}]")
            for key, value in section.model_dump().items():
                if value is not None and value != []:
                    lines.append(f"{key} = {format_value(value)}")
            lines.append("")
        return "\n".join(lines)


class MetricsRow(BaseModel):
    """Uma linha de metrics.csv."""

    model_config = ConfigDict(extra="forbid")

    run_id: str = Field(..., min_length=1)
    seed: int = Field(..., ge=0)
    t: int = Field(..., ge=0)
    f: float
    grad_norm_sq: float = Field(..., ge=0)
    min_grad_norm_sq: float = Field(..., ge=0)
    is_boundary: bool


METRICS_COLUMNS = list(MetricsRow.model_fields)


# =============================================================================
# Leitura e escrita
# =============================================================================


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(item) for item in value)
    return str(value)


def _error_message(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(item) for item in error["loc"]) or "config"
        parts.append(f"{location}: {error['msg']}")
    return "; ".join(parts)


def _validate(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"configuração inválida: {_error_message(exc)}") from exc


def apply_overrides(data: Dict[str, Dict[str, Any]], overrides: Iterable[str]) -> None:
    """Aplica `secao.chave=valor` sobre o dicionário de seções."""
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not section or not key:
            raise ConfigError(f"override inválido (use secao.chave=valor): {item!r}")
        if section not in _SECTIONS:
            raise ConfigError(f"seção desconhecida em override: {section!r}")
        data.setdefault(section, {})[key.strip()] = value.strip()


def parse_ini(text: str, overrides: Iterable[str] = (), defaults: str = "") -> ExperimentConfig:
    """Valida o texto INI; `defaults` é lido antes e pode ser sobrescrito pelo texto."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(defaults, source="<padrões>")
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"arquivo de configuração mal formado: {exc}") from exc
    data: Dict[str, Dict[str, Any]] = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"seção desconhecida: [{name}]")
        data[name] = dict(parser.items(name))
    apply_overrides(data, overrides)
    return _validate(data)


def load_config(path: Optional[Union[str, Path]], overrides: Iterable[str] = (),
                defaults: str = "") -> ExperimentConfig:
    """Lê o INI (após `defaults`, se dado) e aplica overrides; sem caminho usa só os padrões."""
    text = ""
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"não foi possível ler {path}: {exc}") from exc
    return parse_ini(text, overrides, defaults)
