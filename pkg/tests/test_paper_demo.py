"""
Testes da comparação com disponibilidade periódica por grupos
"""
import configparser
import math

import numpy as np
import pandas as pd
import pytest

from fedamp.exceptions import ConfigError
from fedamp.jobs.experiment import EXIT_OK, SeedPlan, build_population, build_schedule
from fedamp.jobs.paper_demo import (
    AMPLIFIED,
    ARMS,
    COMPARISON_COLUMNS,
    LADDER_COLUMNS,
    NO_AMPLIFICATION,
    WAIT_FULL,
    WAIT_MINIBATCH,
    build_arms,
    default_ladder,
    demo_cycle,
    load_demo_config,
    ordering_holds,
    rank_arms,
    run_paper_demo,
)
from fedamp.services.fedavg_engine import RunMode
from fedamp.services.objectives import initial_point

SMALL_DEMO = [
    "population.clients=8", "population.dimension=3", "population.groups=2",
    "pattern.participants=2", "pattern.groups=2", "pattern.block=5", "pattern.offset=0",
    "run.rounds=40", "run.local_steps=2", "seeds.replications=2", "demo.ladder=1, 10",
]


def test_rank_arms_orders_by_final_value():
    """Testa posição 1 para o menor min‖∇f‖²"""
    ranks = rank_arms({AMPLIFIED: 0.1, NO_AMPLIFICATION: 0.9, WAIT_MINIBATCH: 0.3,
                       WAIT_FULL: 0.2})
    assert ranks == {AMPLIFIED: 1, WAIT_FULL: 2, WAIT_MINIBATCH: 3, NO_AMPLIFICATION: 4}


def test_rank_arms_puts_diverged_last():
    """Testa braços divergidos (None ou NaN) no fim, na ordem dos braços"""
    ranks = rank_arms({AMPLIFIED: None, NO_AMPLIFICATION: 0.5, WAIT_MINIBATCH: float("nan"),
                       WAIT_FULL: 0.7})
    assert ranks[NO_AMPLIFICATION] == 1
    assert ranks[WAIT_FULL] == 2
    assert ranks[AMPLIFIED] == 3
    assert ranks[WAIT_MINIBATCH] == 4


@pytest.mark.parametrize("finals,expected", [
    ({AMPLIFIED: 0.1, WAIT_MINIBATCH: 0.3, WAIT_FULL: 0.2, NO_AMPLIFICATION: 0.9}, True),
    ({AMPLIFIED: 0.25, WAIT_MINIBATCH: 0.3, WAIT_FULL: 0.2, NO_AMPLIFICATION: 0.9}, False),
    ({AMPLIFIED: 0.1, WAIT_MINIBATCH: 0.95, WAIT_FULL: 0.2, NO_AMPLIFICATION: 0.9}, False),
    ({AMPLIFIED: 0.1, WAIT_MINIBATCH: 0.3, WAIT_FULL: None, NO_AMPLIFICATION: 0.9}, False),
    ({AMPLIFIED: 0.1, WAIT_MINIBATCH: 0.3, WAIT_FULL: 0.2}, False),
])
def test_ordering_holds(finals, expected):
    """Testa amplified < esperas < sem amplificação"""
    assert ordering_holds(finals) is expected


def test_default_ladder():
    """Testa a escada padrão e o limite T/2"""
    assert default_ladder(100, 2000) == [1, 25, 50, 100, 200]
    assert default_ladder(100, 60) == [1, 25, 30]
    assert default_ladder(2, 100) == [1, 2, 4]
    assert default_ladder(10, 1) == [1]


def test_load_demo_config_defaults():
    """Testa os padrões da demonstração (N=50, 5 grupos, blocos de 20)"""
    config = load_demo_config()
    assert config.population.clients == 50
    assert config.pattern.participants == 5
    assert config.run.local_steps == 5
    assert config.seeds.replications == 5
    assert demo_cycle(config) == 100


def test_load_demo_config_file_and_overrides(write_ini):
    """Testa arquivo sobre os padrões e overrides sobre o arquivo"""
    path = write_ini("[run]\nrounds = 400\n[seeds]\nreplications = 3\n")
    config = load_demo_config(path, ["seeds.replications=2"])
    assert config.run.rounds == 400
    assert config.seeds.replications == 2
    assert config.population.clients == 50


def test_demo_cycle_errors():
    """Testa padrão não periódico e T menor que dois ciclos"""
    with pytest.raises(ConfigError, match="periodic_groups"):
        demo_cycle(load_demo_config(None, ["pattern.kind=regularized_permutation"]))
    with pytest.raises(ConfigError, match="dois ciclos"):
        demo_cycle(load_demo_config(None, ["run.rounds=150"]))


@pytest.mark.integration
def test_build_arms():
    """Testa os quatro braços: mesmo P de execução, modos e η"""
    config = load_demo_config(None, SMALL_DEMO)
    cycle = demo_cycle(config)
    seeds = SeedPlan.derive(config.seeds.master, 1)
    pop = build_population(config, seeds.population)
    noise = config.population.noise_model()
    x0 = initial_point(pop, config.population.x0_radius, seeds.x0)
    schedule = build_schedule(config, pop.N, seeds.schedules[0])

    arms = build_arms(config, pop, noise, schedule, x0, cycle)
    by_name = {arm.name: arm for arm in arms}
    assert tuple(by_name) == ARMS
    assert all(arm.config.run.interval == cycle == 10 for arm in arms)
    assert by_name[AMPLIFIED].plan.eta > 1.0
    assert by_name[NO_AMPLIFICATION].plan.eta == 1.0
    assert by_name[WAIT_MINIBATCH].config.run.mode is RunMode.WAIT_MINIBATCH
    assert by_name[WAIT_FULL].config.run.mode is RunMode.WAIT_FULL
    assert by_name[WAIT_FULL].plan is by_name[WAIT_MINIBATCH].plan
    assert by_name[WAIT_MINIBATCH].plan_T == 40 // cycle


@pytest.mark.integration
def test_run_paper_demo_small(out_dir):
    """Testa os arquivos da comparação numa configuração pequena"""
    config = load_demo_config(None, SMALL_DEMO)
    code = run_paper_demo(config, out_dir, workers=2)
    assert code in (0, 2)

    comparison = pd.read_csv(out_dir / "comparison.csv")
    assert list(comparison.columns) == COMPARISON_COLUMNS
    assert len(comparison) == len(ARMS) * 2
    for _, group in comparison.groupby("seed"):
        assert sorted(group["rank"]) == [1, 2, 3, 4]

    ladder = pd.read_csv(out_dir / "p_ladder.csv")
    assert list(ladder.columns) == LADDER_COLUMNS
    assert list(ladder["P"]) == [1, 10]

    meta = configparser.ConfigParser(interpolation=None)
    meta.read(out_dir / "demo_meta.txt", encoding="utf-8")
    agreement = meta["agreement"]
    assert int(agreement["required"]) == math.ceil(0.8 * 2)
    expected = EXIT_OK if int(agreement["seeds_in_order"]) >= 2 else 2
    assert code == expected
    assert (out_dir / "comparison.svg").exists()


@pytest.mark.slow
def test_desk_scale_ordering(out_dir):
    """Testa a ordenação em pelo menos 4 de 5 sementes e P = 1 pior que P = ciclo"""
    config = load_demo_config()
    assert run_paper_demo(config, out_dir, workers=4) == EXIT_OK

    comparison = pd.read_csv(out_dir / "comparison.csv")
    best = comparison[comparison["rank"] == 1]["arm"].tolist()
    worst = comparison[comparison["rank"] == 4]["arm"].tolist()
    assert best.count(AMPLIFIED) >= 4
    assert worst.count(NO_AMPLIFICATION) >= 4
    assert np.isfinite(comparison["final_min_grad_norm_sq"]).all()

    ladder = pd.read_csv(out_dir / "p_ladder.csv").set_index("P")
    cycle = demo_cycle(config)
    assert {1, cycle} <= set(ladder.index)
    assert ladder.loc[1, "median_min_grad_norm_sq"] > \
        ladder.loc[cycle, "median_min_grad_norm_sq"]
