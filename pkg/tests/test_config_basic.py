"""
Testes básicos para configurações de runtime e arquivos INI de experimento
"""
import ast
import os
from pathlib import Path
from unittest.mock import patch

import pytest

import fedamp

from fedamp.api.schemas import (
    BoundChoice,
    ExperimentConfig,
    PatternChoice,
    PlanDirective,
    load_config,
    parse_ini,
)
from fedamp.config import Settings, get_settings
from fedamp.exceptions import ConfigError
from fedamp.services.objectives import NoiseKind
from fedamp.services.participation import PatternKind

pytestmark = pytest.mark.unit


def test_settings_default_values():
    """Testa valores padrão das configurações"""
    with patch.dict(os.environ, {}, clear=True):
        settings = Settings(_env_file=None)
    assert settings.environment == "development"
    assert settings.log_level == "INFO"
    assert settings.workers == 1
    assert settings.divergence_threshold == 1e100
    assert not settings.is_test


def test_settings_from_env_vars():
    """Testa carregamento de configurações de variáveis de ambiente"""
    with patch.dict(os.environ, {
        "FEDAMP_ENVIRONMENT": "test",
        "FEDAMP_LOG_LEVEL": "debug",
        "FEDAMP_WORKERS": "4",
        "FEDAMP_PROGRESS": "true",
    }):
        settings = Settings()
        assert settings.is_test
        assert settings.log_level == "DEBUG"
        assert settings.workers == 4
        assert settings.progress is True


def test_settings_reject_invalid_values():
    """Testa nível de log desconhecido e workers zero"""
    with patch.dict(os.environ, {"FEDAMP_LOG_LEVEL": "verbose"}):
        with pytest.raises(ValueError):
            Settings()
    with patch.dict(os.environ, {"FEDAMP_WORKERS": "0"}):
        with pytest.raises(ValueError):
            Settings()


def test_get_settings_singleton():
    """Testa que get_settings retorna sempre a mesma instância"""
    settings1 = get_settings()
    settings2 = get_settings()

    assert settings1 is settings2
    assert isinstance(settings1, Settings)
    assert settings1.is_test


MINIMAL = """
[run]
gamma = 0.01
"""


def test_minimal_config_uses_defaults():
    """Testa que só run.gamma é necessário com o planejador manual"""
    config = parse_ini(MINIMAL)
    assert config.run.gamma == 0.01
    assert config.run.local_steps == 5
    assert config.run.interval == 1
    assert config.planner.directive is PlanDirective.MANUAL
    assert config.pattern.kind is PatternChoice.FULL
    assert config.sweep is None
    assert config.seeds.master == 0


def test_gamma_is_optional_at_parse_time():
    """Testa que diagnose e bounds validam sem γ"""
    config = parse_ini("[population]\nclients = 4\n")
    assert config.run.gamma is None
    assert config.planner.directive is PlanDirective.MANUAL


def test_unknown_section_and_key_are_rejected():
    """Testa seção e chave desconhecidas"""
    with pytest.raises(ConfigError, match="seção desconhecida"):
        parse_ini(MINIMAL + "[extras]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="run.bogus"):
        parse_ini(MINIMAL + "bogus = 1\n")


@pytest.mark.parametrize("text", [
    "[run]\ngamma = -1\n",
    "[run]\ngamma = 0.1\nlocal_steps = 0\n",
    "[run]\ngamma = 0.1\n[pattern]\nkind = independent_uniform\n",
    "[run]\ngamma = 0.1\n[pattern]\nkind = markov_availability\nparticipants = 2\n",
    "[run]\ngamma = 0.1\n[pattern]\nkind = file\n",
    "[run]\ngamma = 0.1\n[seeds]\nreplications = 0\n",
    "[run\ngamma = 0.1\n",
])
def test_invalid_values(text):
    """Testa valores fora do domínio e INI mal formado"""
    with pytest.raises(ConfigError):
        parse_ini(text)


def test_overrides_take_precedence():
    """Testa `secao.chave=valor` sobre o arquivo"""
    config = parse_ini(MINIMAL, overrides=["run.rounds=64", "seeds.master = 7",
                                           "pattern.kind=independent_uniform",
                                           "pattern.participants=2"])
    assert config.run.rounds == 64
    assert config.seeds.master == 7
    assert config.pattern.to_pattern_spec().kind is PatternKind.INDEPENDENT_UNIFORM
    with pytest.raises(ConfigError):
        parse_ini(MINIMAL, overrides=["rounds=64"])
    with pytest.raises(ConfigError):
        parse_ini(MINIMAL, overrides=["nowhere.rounds=64"])


def test_none_values():
    """Testa "none" como ausência só em campos opcionais"""
    config = parse_ini(MINIMAL + "eval_every = none\n[population]\nnoise = none\nsigma = 1\n")
    assert config.run.eval_every is None
    assert config.population.noise is NoiseKind.NONE
    assert config.population.noise_model().is_null


def test_list_fields_are_split():
    """Testa listas separadas por vírgula"""
    config = parse_ini(MINIMAL + "[diagnose]\nladder = 1, 5, 25\n[bounds]\nbound = chebyshev\n"
                       "ladder = 4,8\n")
    assert config.diagnose.ladder == [1, 5, 25]
    assert config.bounds.ladder == [4, 8]
    assert config.bounds.bound is BoundChoice.CHEBYSHEV


def test_pattern_spec_from_section():
    """Testa a conversão da seção [pattern]"""
    config = parse_ini(MINIMAL + "[pattern]\nkind = periodic_groups\nparticipants = 1\n"
                       "groups = 2\nblock = 3\noffset = 4\n")
    spec = config.pattern.to_pattern_spec()
    assert spec.kind is PatternKind.PERIODIC_GROUPS
    assert (spec.S, spec.groups, spec.block, spec.offset) == (1, 2, 3, 4)
    random_offset = parse_ini(MINIMAL + "[pattern]\nkind = periodic_groups\nparticipants = 1\n")
    assert random_offset.pattern.to_pattern_spec().offset is None


def test_to_ini_reproduces_the_config():
    """Testa que o INI serializado valida para a mesma configuração"""
    config = parse_ini(MINIMAL + "eta = 2.5\n[sweep]\naxis = T\nvalues = 64, 128\n"
                       "[planner]\ndirective = manual\ngrid_multipliers = 1, 0.5\n")
    again = parse_ini(config.to_ini())
    assert again == config
    assert isinstance(again, ExperimentConfig)


def test_with_updates_revalidates():
    """Testa cópia com campos trocados"""
    config = parse_ini(MINIMAL)
    updated = config.with_updates(run={"rounds": 256})
    assert updated.run.rounds == 256
    assert config.run.rounds == 1000
    with pytest.raises(ConfigError):
        config.with_updates(run={"rounds": 0})


def test_load_config_from_file(write_ini, tmp_path):
    """Testa leitura de arquivo, padrões e arquivo inexistente"""
    path = write_ini("[run]\nrounds = 32\n")
    config = load_config(path, defaults="[run]\ngamma = 0.2\nrounds = 8\n")
    assert config.run.rounds == 32
    assert config.run.gamma == 0.2
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_dataclasses_avoid_keywords_newer_than_python_39():
    """Testa que nenhum @dataclass do pacote usa slots, kw_only ou match_args (Python ≥ 3.10)"""
    package = Path(fedamp.__file__).resolve().parent
    offending = []
    for source in package.rglob("*.py"):
        tree = ast.parse(source.read_text(encoding="utf-8"))
        for node in ast.walk(tree):
            if not isinstance(node, ast.ClassDef):
                continue
            for decorator in node.decorator_list:
                if isinstance(decorator, ast.Call) and any(
                    kw.arg in ("slots", "kw_only", "match_args") for kw in decorator.keywords
                ):
                    offending.append(f"{source.name}:{node.name}")
    assert offending == []
