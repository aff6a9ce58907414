"""
Testes do motor do FedAvg generalizado e das linhas de base
"""
import numpy as np
import pytest

from fedamp.exceptions import ConfigError, ContractViolation, DivergenceError, PopulationError
from fedamp.metrics import runs_total
from fedamp.services.fedavg_engine import (
    RunConfig,
    RunMode,
    RunState,
    Trace,
    amplification_identity_error,
    amplify,
    averaged_stochastic_grad,
    local_update,
    run,
    run_wait_baseline,
    run_with_warmup,
)
from fedamp.services.objectives import NoiseModel, QuadraticPopulation, initial_point
from fedamp.services.participation import PatternSpec, WeightSchedule, generate_schedule
from fedamp.services.substreams import StreamTag, substream


def _full(N: int, T: int) -> WeightSchedule:
    return generate_schedule(PatternSpec.full(), N, T, seed=0)


@pytest.fixture
def noisy_setup(seeded_quadratic):
    schedule = generate_schedule(PatternSpec.independent_uniform(3), 8, 60, seed=4)
    x0 = initial_point(seeded_quadratic, 2.0, 1)
    return seeded_quadratic, NoiseModel.gaussian(0.3), schedule, x0


# =============================================================================
# Configuração
# =============================================================================


@pytest.mark.unit
@pytest.mark.parametrize("changes", [
    {"gamma": -1.0},
    {"gamma": float("inf")},
    {"eta": 0.0},
    {"I": 0},
    {"P": 11},
    {"T": 0, "P": 1},
    {"eval_every": 0},
    {"workers": 0},
])
def test_run_config_rejects_invalid(changes):
    """Testa validação de γ, η, I, P, T, eval_every e workers"""
    base = {"gamma": 0.1, "eta": 1.0, "I": 1, "P": 2, "T": 10, "x0": np.zeros(1)}
    base.update(changes)
    with pytest.raises(ConfigError):
        RunConfig(**base)


@pytest.mark.unit
def test_checkpoints_include_boundaries():
    """Testa {0} ∪ múltiplos de eval_every ∪ fronteiras ∪ {T}"""
    config = RunConfig(gamma=0.1, eta=1.0, I=1, P=4, T=10, x0=np.zeros(1), eval_every=3)
    assert config.checkpoints().tolist() == [0, 3, 4, 6, 8, 9, 10]
    default = RunConfig(gamma=0.1, eta=1.0, I=1, P=4, T=10, x0=np.zeros(1))
    assert default.eval_every == 4
    assert default.replace(P=5).eval_every == 5


# =============================================================================
# Amplificação
# =============================================================================


@pytest.mark.unit
def test_amplify_on_boundary():
    """Testa x_{t₀} + ηu: x=0.5, u=0.5, x_{t₀}=0, η=10 → 5.0"""
    state = RunState(x=np.array([0.5]), u=np.array([0.5]), x_t0=np.zeros(1), t0=0, t=3)
    after = amplify(state, 10.0, 4)
    assert after.x.tolist() == [5.0]
    assert after.u.tolist() == [0.0]
    assert after.t0 == 4
    assert after.x_t0.tolist() == [5.0]


@pytest.mark.unit
def test_amplify_off_boundary_is_a_contract_violation():
    """Testa amplify com t+1−t₀ ≠ P"""
    state = RunState(x=np.zeros(1), u=np.zeros(1), x_t0=np.zeros(1), t0=0, t=0)
    with pytest.raises(ContractViolation):
        amplify(state, 2.0, 2)


@pytest.mark.unit
def test_amplification_identity_error():
    """Testa o erro relativo da identidade x = x_{t₀} + ηu"""
    assert amplification_identity_error(np.array([5.0]), np.zeros(1), np.array([0.5]), 10.0) == 0.0
    assert amplification_identity_error(np.zeros(1), np.zeros(1), np.zeros(1), 2.0) == 0.0
    err = amplification_identity_error(np.array([6.0]), np.zeros(1), np.array([0.5]), 10.0)
    assert err == pytest.approx(0.2)


# =============================================================================
# Execução generalizada
# =============================================================================


@pytest.mark.unit
def test_single_client_gradient_descent():
    """Testa GD com N=1, c=0, A=1, γ=0.1, I=1: x₁ = 1.8, x₂ = 1.62"""
    pop = QuadraticPopulation(np.array([[1.0]]), np.array([[0.0]]))
    config = RunConfig(gamma=0.1, eta=1.0, I=1, P=1, T=2, x0=np.array([2.0]))
    trace = run(pop, NoiseModel.none(), _full(1, 2), config, seed=0)
    assert trace.t.tolist() == [0, 1, 2]
    assert trace.grad_norm_sq == pytest.approx([4.0, 1.8 ** 2, 1.62 ** 2])
    assert trace.x_final[0] == pytest.approx(1.62)
    assert trace.min_grad_norm_sq.tolist() == sorted(trace.grad_norm_sq.tolist(), reverse=True)


@pytest.mark.unit
def test_matches_straight_line_oracle(symmetric_pop, alternating_schedule):
    """Testa a execução contra a recursão escrita à mão (γ=0.05, I=2, P=2, η=3, T=2)"""
    gamma, I, eta = 0.05, 2, 3.0
    centers = symmetric_pop.centers
    x = np.array([2.0])
    u = np.zeros(1)
    for t in range(2):
        c = centers[t % 2]
        y = x
        for _ in range(I):
            y = y - gamma * (symmetric_pop.A @ (y - c))
        agg = np.zeros(1) + 1.0 * (y - x)
        x = x + agg
        u = u + agg
    x = x + (eta - 1.0) * u

    config = RunConfig(gamma=gamma, eta=eta, I=I, P=2, T=2, x0=np.array([2.0]))
    trace = run(symmetric_pop, NoiseModel.none(), alternating_schedule(2), config, seed=0)
    assert trace.x_final.tolist() == x.tolist()
    assert trace.x_final[0] == pytest.approx(0.91555625, rel=1e-12)
    assert trace.t.tolist() == [0, 2]
    assert trace.is_boundary.tolist() == [True, True]
    assert trace.metadata["amplifications"] == 1


@pytest.mark.unit
def test_eta_one_does_not_depend_on_interval(noisy_setup):
    """Testa que η=1 produz trajetórias idênticas bit a bit para qualquer P"""
    pop, noise, schedule, x0 = noisy_setup
    traces = [
        run(pop, noise, schedule,
            RunConfig(gamma=0.05, eta=1.0, I=3, P=P, T=60, x0=x0, eval_every=1), seed=9)
        for P in (1, 4, 7)
    ]
    for other in traces[1:]:
        np.testing.assert_array_equal(other.x_final, traces[0].x_final)
        np.testing.assert_array_equal(other.grad_norm_sq, traces[0].grad_norm_sq)


@pytest.mark.unit
def test_simulate_all_gives_same_trajectory(noisy_setup):
    """Testa que simular clientes de peso zero não altera x"""
    pop, noise, schedule, x0 = noisy_setup
    config = RunConfig(gamma=0.05, eta=2.0, I=2, P=5, T=60, x0=x0)
    a = run(pop, noise, schedule, config, seed=3)
    b = run(pop, noise, schedule, config.replace(simulate_all=True), seed=3)
    np.testing.assert_array_equal(a.x_final, b.x_final)
    np.testing.assert_array_equal(a.min_grad_norm_sq, b.min_grad_norm_sq)


@pytest.mark.unit
def test_worker_count_does_not_change_results(noisy_setup):
    """Testa determinismo com 1 ou 4 threads"""
    pop, noise, schedule, x0 = noisy_setup
    config = RunConfig(gamma=0.05, eta=2.0, I=2, P=5, T=60, x0=x0)
    a = run(pop, noise, schedule, config, seed=5)
    b = run(pop, noise, schedule, config.replace(workers=4), seed=5)
    np.testing.assert_array_equal(a.x_final, b.x_final)
    np.testing.assert_array_equal(a.f, b.f)


@pytest.mark.unit
def test_amplification_bookkeeping(noisy_setup):
    """Testa contagem de amplificações, rodadas finais e erro da identidade"""
    pop, noise, schedule, x0 = noisy_setup
    config = RunConfig(gamma=0.02, eta=4.0, I=2, P=7, T=60, x0=x0)
    trace = run(pop, noise, schedule, config, seed=1)
    assert trace.metadata["amplifications"] == 8
    assert trace.metadata["trailing_rounds"] == 4
    assert trace.metadata["amplification_identity_error"] <= 1e-12
    assert trace.t[-1] == 60
    assert not trace.is_boundary[-1]
    assert np.all(np.diff(trace.min_grad_norm_sq) <= 0)


@pytest.mark.unit
def test_divergence_raises_and_is_counted(symmetric_pop):
    """Testa γ = 10/L: x ← −9x até passar o limiar"""
    before = runs_total.labels(mode="generalized", status="diverged")._value.get()
    config = RunConfig(gamma=10.0, eta=1.0, I=1, P=1, T=500, x0=np.array([1.0]),
                       divergence_threshold=1e6)
    with pytest.raises(DivergenceError) as exc:
        run(symmetric_pop, NoiseModel.none(), _full(2, 500), config, seed=0)
    assert exc.value.round == 7
    assert exc.value.exit_code == 2
    assert runs_total.labels(mode="generalized", status="diverged")._value.get() == before + 1


@pytest.mark.unit
def test_run_rejects_mismatched_inputs(symmetric_pop):
    """Testa N do cronograma, dimensão de x₀ e T maior que o cronograma"""
    config = RunConfig(gamma=0.1, eta=1.0, I=1, P=1, T=4, x0=np.zeros(1))
    with pytest.raises(PopulationError):
        run(symmetric_pop, NoiseModel.none(), _full(3, 4), config, seed=0)
    with pytest.raises(PopulationError):
        run(symmetric_pop, NoiseModel.none(), _full(2, 4), config.replace(x0=np.zeros(2)), seed=0)
    with pytest.raises(ConfigError):
        run(symmetric_pop, NoiseModel.none(), _full(2, 3), config, seed=0)


@pytest.mark.unit
def test_local_update_uses_its_own_substream(seeded_quadratic):
    """Testa que Δ_t^n depende só de (seed, t, n)"""
    noise = NoiseModel.gaussian(1.0)
    x = np.ones(4)
    a = local_update(seeded_quadratic, noise, 0.1, 3, x, 7, 2, 5)
    b = local_update(seeded_quadratic, noise, 0.1, 3, x, 7, 2, 5)
    c = local_update(seeded_quadratic, noise, 0.1, 3, x, 7, 2, 6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# =============================================================================
# Linhas de base
# =============================================================================


@pytest.mark.unit
def test_wait_full_with_one_client_is_gradient_descent():
    """Testa que wait_full com N=1 e P=1 coincide com GD"""
    pop = QuadraticPopulation(np.array([[2.0]]), np.array([[1.0]]))
    config = RunConfig(gamma=0.1, eta=1.0, I=1, P=1, T=20, x0=np.array([3.0]), eval_every=1)
    gd = run(pop, NoiseModel.none(), _full(1, 20), config, seed=0)
    wait = run(pop, NoiseModel.none(), _full(1, 20), config.replace(mode=RunMode.WAIT_FULL), seed=0)
    np.testing.assert_array_equal(wait.x_final, gd.x_final)
    np.testing.assert_array_equal(wait.grad_norm_sq, gd.grad_norm_sq)
    assert wait.metadata["global_steps"] == 20


@pytest.mark.unit
def test_wait_baseline_freezes_model_inside_window(noisy_setup):
    """Testa x constante dentro da janela e janela final parcial sem passo"""
    pop, noise, schedule, x0 = noisy_setup
    config = RunConfig(gamma=0.05, eta=1.0, I=2, P=8, T=60, x0=x0, eval_every=1,
                       mode=RunMode.WAIT_MINIBATCH)
    trace = run_wait_baseline(pop, noise, schedule, config, seed=2)
    assert trace.metadata["global_steps"] == 7
    assert np.all(trace.f[1:8] == trace.f[0])
    assert np.all(trace.f[57:] == trace.f[56])


@pytest.mark.unit
def test_wait_baseline_rejects_generalized_mode(noisy_setup):
    """Testa modo errado para a linha de base"""
    pop, noise, schedule, x0 = noisy_setup
    config = RunConfig(gamma=0.05, eta=1.0, I=1, P=4, T=60, x0=x0)
    with pytest.raises(ConfigError):
        run_wait_baseline(pop, noise, schedule, config, seed=0)


@pytest.mark.unit
def test_averaged_gradient_reduces_noise_variance():
    """Testa que a média de M aparições tem variância σ²/M"""
    pop = QuadraticPopulation(np.eye(3), np.zeros((1, 3)))
    noise = NoiseModel.gaussian(2.0)
    y = np.array([1.0, 0.0, -1.0])
    samples = []
    for k in range(4000):
        streams = [substream(11, StreamTag.LOCAL_STEP, k, j) for j in range(4)]
        samples.append(averaged_stochastic_grad(pop, noise, 0, y, streams) - y)
    energy = np.mean(np.sum(np.asarray(samples) ** 2, axis=1))
    assert energy == pytest.approx(4.0 / 4, rel=0.08)
    with pytest.raises(ContractViolation):
        averaged_stochastic_grad(pop, noise, 0, y, [])


# =============================================================================
# Aquecimento e Trace
# =============================================================================


@pytest.mark.unit
def test_warmup_then_main_run(noisy_setup):
    """Testa aquecimento η=1 seguido da execução principal nas rodadas restantes"""
    pop, noise, schedule, x0 = noisy_setup
    config = RunConfig(gamma=0.05, eta=2.0, I=2, P=5, T=50, x0=x0)
    trace = run_with_warmup(pop, noise, schedule, config, seed=1, warmup_rounds=10,
                            warmup_gamma=0.01)
    assert trace.metadata["warmup_rounds"] == 10
    assert trace.metadata["warmup_gamma"] == 0.01
    assert trace.t[-1] == 50
    with pytest.raises(ConfigError):
        run_with_warmup(pop, noise, schedule, config, seed=1, warmup_rounds=11)


@pytest.mark.unit
def test_trace_csv(tmp_path, symmetric_pop, alternating_schedule):
    """Testa a gravação do trace com precisão de ida e volta"""
    config = RunConfig(gamma=0.05, eta=3.0, I=2, P=2, T=6, x0=np.array([2.0]))
    trace = run(symmetric_pop, NoiseModel.none(), alternating_schedule(6), config, seed=0)
    path = trace.to_csv(tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == "t,f,grad_norm_sq,min_grad_norm_sq,is_boundary"
    loaded = Trace.from_csv(path)
    np.testing.assert_array_equal(loaded.min_grad_norm_sq, trace.min_grad_norm_sq)
    assert loaded.is_boundary.tolist() == [True, True, True, True]


def _transcribe(pop, schedule, gamma, eta, I, P, T, x0):
    x = np.array(x0, dtype=np.float64)
    u = np.zeros_like(x)
    for t in range(T):
        agg = np.zeros_like(x)
        for n in schedule.participants(t):
            y = x
            for _ in range(I):
                y = y - gamma * (pop.A @ (y - pop.centers[n]))
            agg = agg + schedule.weights[t, n] * (y - x)
        x = x + agg
        u = u + agg
        if (t + 1) % P == 0:
            x = x + (eta - 1.0) * u
            u = np.zeros_like(x)
    return x


@pytest.mark.unit
def test_amplification_identity_over_random_runs(seeded_quadratic):
    """Testa x_{t₀+P} = x_{t₀} + ηu em 100 execuções com P, η, I, T e cronograma sorteados"""
    pop = seeded_quadratic
    rng = np.random.default_rng(2024)
    for k in range(100):
        P = int(rng.integers(1, 8))
        I = int(rng.integers(1, 4))
        T = int(rng.integers(P, 6 * P + 1))
        eta = float(rng.uniform(1.0, 4.0))
        gamma = 1.0 / (12.0 * pop.L * I * P)
        schedule = generate_schedule(PatternSpec.independent_uniform(int(rng.integers(1, 9))),
                                     pop.N, T, seed=k)
        x0 = initial_point(pop, 2.0, k)
        trace = run(pop, NoiseModel.none(), schedule,
                    RunConfig(gamma=gamma, eta=eta, I=I, P=P, T=T, x0=x0), seed=k)
        assert trace.metadata["amplifications"] == T // P
        assert trace.metadata["amplification_identity_error"] <= 1e-12
        expected = _transcribe(pop, schedule, gamma, eta, I, P, T, x0)
        scale = max(1.0, float(np.linalg.norm(expected)))
        assert np.linalg.norm(trace.x_final - expected) <= 1e-12 * scale


@pytest.mark.unit
def test_full_participation_descends_without_noise(seeded_quadratic):
    """Testa f(x_{t+1}) ≤ f(x_t) com σ=0, participação plena, η=1 e γ = 1/(12·L·I·P)"""
    pop = seeded_quadratic
    I, P, T = 3, 4, 80
    config = RunConfig(gamma=1.0 / (12.0 * pop.L * I * P), eta=1.0, I=I, P=P, T=T,
                       x0=initial_point(pop, 5.0, 3), eval_every=1)
    trace = run(pop, NoiseModel.none(), _full(pop.N, T), config, seed=0)
    assert trace.t.tolist() == list(range(T + 1))
    assert np.all(np.diff(trace.f) <= 1e-12 * np.abs(trace.f[:-1]))
    assert trace.f[-1] < trace.f[0]
