"""
Testes dos cronogramas de participação
"""
import numpy as np
import pytest

from fedamp.exceptions import ConfigError, ScheduleError
from fedamp.metrics import schedule_fallback_total
from fedamp.services.participation import (
    PatternKind,
    PatternSpec,
    WeightSchedule,
    generate_schedule,
    lag_covariances,
    rho_bound,
    verify_simplex,
    window_averages,
)

pytestmark = pytest.mark.unit


ALL_PATTERNS = [
    PatternSpec.full(),
    PatternSpec.independent_uniform(3),
    PatternSpec.regularized_permutation(2),
    PatternSpec.periodic_groups(groups=2, block=3, S=2),
    PatternSpec.markov_availability(0.8, 0.6, 3),
]


def test_full_participation_rows():
    """Testa o padrão Full com N=4: toda linha é (0.25, 0.25, 0.25, 0.25)"""
    schedule = generate_schedule(PatternSpec.full(), 4, 3, seed=0)
    assert schedule.weights.tolist() == [[0.25] * 4] * 3
    assert schedule.rho() == pytest.approx(0.5)


@pytest.mark.parametrize("spec", ALL_PATTERNS, ids=lambda s: s.kind.value)
def test_every_pattern_is_on_the_simplex(spec):
    """Testa Σ_n q = 1, q ≥ 0 e ρ ≤ 1 para todos os padrões"""
    schedule = generate_schedule(spec, 8, 200, seed=3)
    report = verify_simplex(schedule)
    assert report.passed
    assert report.max_row_error <= 1e-12
    assert report.min_weight >= 0.0
    assert 0.0 < schedule.rho() <= 1.0


@pytest.mark.parametrize("spec", ALL_PATTERNS, ids=lambda s: s.kind.value)
def test_generation_is_deterministic(spec):
    """Testa que o cronograma é função pura da semente"""
    a = generate_schedule(spec, 8, 100, seed=21)
    b = generate_schedule(spec, 8, 100, seed=21)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.descriptor == b.descriptor


def test_independent_uniform_has_exactly_s_participants():
    """Testa S participantes por rodada com peso 1/S e ρ = 1/√S"""
    schedule = generate_schedule(PatternSpec.independent_uniform(10), 100, 50, seed=1)
    counts = (schedule.weights > 0).sum(axis=1)
    assert set(counts.tolist()) == {10}
    assert schedule.rho() == pytest.approx(0.31623, abs=1e-5)


def test_rho_of_hand_built_row():
    """Testa ρ de uma linha (0.5, 0.5, 0, 0)"""
    schedule = WeightSchedule.from_dense([[0.5, 0.5, 0.0, 0.0]])
    assert rho_bound(schedule) == pytest.approx(0.70711, abs=1e-5)
    assert schedule.row(0) == [(0, 0.5), (1, 0.5)]


def test_regularized_permutation_covers_everyone_per_block():
    """Testa N=2, S=1: cada par de rodadas (2k, 2k+1) tem cada cliente uma vez"""
    schedule = generate_schedule(PatternSpec.regularized_permutation(1), 2, 40, seed=5)
    pairs = schedule.weights.reshape(20, 2, 2).sum(axis=1)
    assert pairs.tolist() == [[1.0, 1.0]] * 20


def test_regularized_permutation_requires_divisibility():
    """Testa S ∤ N"""
    with pytest.raises(ScheduleError):
        generate_schedule(PatternSpec.regularized_permutation(3), 8, 10, seed=0)


def test_periodic_groups_follow_the_cycle():
    """Testa que na rodada t só participa o grupo ((t + offset) // B) mod G"""
    spec = PatternSpec.periodic_groups(groups=5, block=2, S=1, offset=0)
    schedule = generate_schedule(spec, 10, 40, seed=2)
    for t in range(40):
        group = (t // 2) % 5
        assert schedule.participants(t).tolist()[0] // 2 == group
    assert "offset=0" in schedule.descriptor


def test_periodic_groups_random_offset_is_recorded():
    """Testa que offset=None é sorteado da semente e gravado no descritor"""
    spec = PatternSpec.periodic_groups(groups=2, block=3, S=1)
    schedule = generate_schedule(spec, 4, 12, seed=9)
    assert "offset=random" not in schedule.descriptor
    assert "offset=" in schedule.descriptor


@pytest.mark.parametrize("spec,N", [
    (PatternSpec.independent_uniform(0), 4),
    (PatternSpec.independent_uniform(5), 4),
    (PatternSpec.periodic_groups(groups=3, block=1, S=1), 4),
    (PatternSpec.periodic_groups(groups=2, block=1, S=3), 4),
    (PatternSpec.periodic_groups(groups=2, block=2, S=1, offset=4), 4),
    (PatternSpec.markov_availability(1.0, 0.5, 1), 4),
])
def test_invalid_patterns(spec, N):
    """Testa invariantes de construção dos padrões"""
    with pytest.raises(ConfigError):
        spec.validate(N)


def test_markov_stationary_availability():
    """Testa que a fração de clientes disponíveis tende a (1−p_uu)/(2−p_aa−p_uu) = 2/3"""
    spec = PatternSpec.markov_availability(0.9, 0.8, 20)
    assert spec.stationary_availability == pytest.approx(2.0 / 3.0)
    schedule = generate_schedule(spec, 20, 5000, seed=4)
    assert (schedule.weights > 0).mean() == pytest.approx(2.0 / 3.0, abs=0.02)


def test_markov_fallback_is_counted():
    """Testa que rodadas sem ninguém disponível recebem sorteio uniforme e são contadas"""
    spec = PatternSpec.markov_availability(0.05, 0.95, 1)
    before = schedule_fallback_total.labels(pattern=PatternKind.MARKOV_AVAILABILITY.value)._value.get()
    schedule = generate_schedule(spec, 2, 200, seed=0)
    after = schedule_fallback_total.labels(pattern=PatternKind.MARKOV_AVAILABILITY.value)._value.get()
    assert schedule.fallback_count > 0
    assert after - before == schedule.fallback_count
    verify_simplex(schedule)


def test_verify_simplex_rejects_bad_rows():
    """Testa linha somando 0.9 e pesos negativos"""
    bad_sum = WeightSchedule.from_dense([[0.5, 0.5], [1.0, 0.0], [0.45, 0.45]])
    with pytest.raises(ScheduleError) as exc:
        verify_simplex(bad_sum)
    assert exc.value.rounds == (2,)
    assert exc.value.exit_code == 1

    negative = WeightSchedule.from_dense([[1.5, -0.5]])
    with pytest.raises(ScheduleError):
        verify_simplex(negative)


def test_window_averages_of_permutation_are_uniform():
    """Testa q̄ = 1/N exato para permutação regularizada com P = N/S"""
    schedule = generate_schedule(PatternSpec.regularized_permutation(2), 4, 21, seed=8)
    stats = window_averages(schedule, 2)
    assert stats.windows == 10
    assert stats.trailing == 1
    assert stats.starts.tolist() == list(range(0, 20, 2))
    assert np.all(stats.qbar == 0.25)
    assert stats.variance == 0.0


def test_window_averages_rejects_bad_interval(alternating_schedule):
    """Testa P fora de [1, T]"""
    schedule = alternating_schedule(4)
    with pytest.raises(ConfigError):
        window_averages(schedule, 0)
    with pytest.raises(ConfigError):
        window_averages(schedule, 5)


def test_lag_covariances_of_alternating_schedule(alternating_schedule):
    """Testa Cov(q_t, q_{t+p}) = ±1/4 alternando com o atraso"""
    schedule = alternating_schedule(64)
    lags = lag_covariances(schedule.weights, 3)
    np.testing.assert_allclose(lags, [0.25, -0.25, 0.25, -0.25], atol=1e-12)
    stats = window_averages(schedule, 1, max_lag=2)
    assert stats.round_variance == pytest.approx(0.25)
    assert stats.variance == pytest.approx(0.25)


def test_schedule_csv_roundtrip(tmp_path):
    """Testa gravação `t,n,q` e leitura com N explícito"""
    schedule = WeightSchedule.from_dense([[0.25, 0.75, 0.0], [0.0, 0.0, 1.0]])
    path = schedule.to_csv(tmp_path / "schedule.csv")
    assert path.read_text().splitlines()[0] == "t,n,q"
    loaded = WeightSchedule.from_csv(path)
    np.testing.assert_array_equal(loaded.weights, schedule.weights)
    wider = WeightSchedule.from_csv(path, N=5)
    assert wider.N == 5


@pytest.mark.parametrize("content", [
    "a,b,c\n0,0,1\n",
    "t,n,q\n",
    "t,n,q\n0,x,1\n",
    "t,n,q\n0,0,0.5\n",
    "t,n,q\n-1,0,1\n",
])
def test_schedule_csv_rejects_malformed(tmp_path, content):
    """Testa cabeçalho errado, arquivo vazio, valor não numérico, simplex e índice negativo"""
    path = tmp_path / "schedule.csv"
    path.write_text(content)
    with pytest.raises(ScheduleError):
        WeightSchedule.from_csv(path)


def test_window_slice(alternating_schedule):
    """Testa o sub-cronograma de uma janela"""
    schedule = alternating_schedule(6)
    part = schedule.window(2, 5)
    assert part.T == 3
    assert part.participants(0).tolist() == [0]
    with pytest.raises(ConfigError):
        schedule.window(4, 4)


def test_markov_schedule_is_stationary():
    """Testa frequências de participação por cliente na 1ª e 2ª metade dentro de 3 erros-padrão"""
    p_aa, p_uu, T = 0.9, 0.8, 20_000
    spec = PatternSpec.markov_availability(p_aa, p_uu, 4)
    schedule = generate_schedule(spec, 4, T, seed=12)
    active = schedule.weights > 0
    half = T // 2
    first, second = active[:half].mean(axis=0), active[half:].mean(axis=0)

    pi = spec.stationary_availability
    lam = p_aa + p_uu - 1.0
    # variância da média de uma cadeia de 2 estados com autocorrelação λ^k
    se = np.sqrt(2.0 * pi * (1.0 - pi) * (1.0 + lam) / (1.0 - lam) / half)
    assert np.all(np.abs(first - second) <= 3.0 * se)
