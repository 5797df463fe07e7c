import numpy as np
import pytest

from sre.oracle import GaussianMixture, OracleDenoiser, Prediction, posterior
from sre.paradigm import Paradigm, coefficients
from sre.sampler import (
    AdaptivePolicy,
    NoiseSource,
    SamplerError,
    StepMethod,
    denoise_step,
    initial_noise,
    run_chains,
    run_inference,
)
from sre.schedule import ScheduleSpec, build_schedule
from sre.tasks import correlated_gaussian, sequence_task
from sre.variables import DependencyGraph, make_state

RF = Paradigm("rectified-flow")
COS = Paradigm("cosine-flow")
DDPM = Paradigm("ddpm-discrete", d_steps=20)


def _pred(x0, var=None):
    x0 = np.asarray(x0, dtype=np.float64)
    return Prediction(x0, np.zeros(x0.shape[0]) if var is None else var)


def test_noop_step_returns_state_unchanged():
    st = make_state([[0.3], [-1.2]], [0.4, 0.7])
    out = denoise_step(st, _pred([[0.1], [0.2]]), st.levels, COS, StepMethod("ddim"))
    assert np.array_equal(out.values, st.values)
    assert np.array_equal(out.levels, st.levels)


def test_ddim_to_zero_returns_x0_exactly():
    st = make_state([[0.3], [-1.2]], [0.4, 0.9])
    x0 = np.array([[0.123], [-0.456]])
    for p in (RF, COS):
        out = denoise_step(st, _pred(x0), [0.0, 0.0], p, StepMethod("ddim"))
        assert np.array_equal(out.values, x0)


def test_rectified_euler_single_step_lands_on_prediction():
    st = make_state([[1.7], [-0.4]], [1.0, 1.0])
    c = np.array([[0.25], [0.25]])
    out = denoise_step(st, _pred(c), [0.0, 0.0], RF, StepMethod("euler-flow"))
    np.testing.assert_allclose(out.values, c, atol=1e-15)


@pytest.mark.parametrize("method", [StepMethod("ddim"), StepMethod("ddim", eta=0.7), StepMethod("euler-flow")])
def test_untouched_variable_is_bit_identical(method):
    st = make_state([[0.3], [-1.2]], [0.5, 1.0])
    out = denoise_step(st, _pred([[0.1], [0.2]]), [0.25, 1.0], COS, method, noise=NoiseSource(3))
    assert out.values[1, 0] == st.values[1, 0]
    assert out.levels[1] == 1.0


def test_conditioned_variable_never_changes():
    st = make_state([[0.3], [0.8]], [0.5, 0.0], conditioned=[False, True])
    out = denoise_step(st, _pred([[0.1], [0.5]]), [0.25, 0.0], COS, StepMethod("ddim"))
    assert out.values[1, 0] == 0.8
    with pytest.raises(SamplerError):
        denoise_step(st, _pred([[0.1], [0.5]]), [0.3, 0.0], COS, StepMethod("ddim", eta=1.0))


def test_step_errors():
    st = make_state([[0.3]], [0.5])
    with pytest.raises(SamplerError, match="above"):
        denoise_step(st, _pred([[0.0]]), [0.6], COS, StepMethod("ddim"))
    with pytest.raises(SamplerError, match="ddpm-discrete"):
        denoise_step(st, _pred([[0.0]]), [0.4], COS, StepMethod("ddpm-ancestral"), noise=NoiseSource(0))
    with pytest.raises(SamplerError, match="velocity"):
        denoise_step(make_state([[0.3]], [0.5]), _pred([[0.0]]), [0.45], DDPM, StepMethod("euler-flow"))
    with pytest.raises(SamplerError, match="adjacent|one grid level"):
        denoise_step(st, _pred([[0.0]]), [0.4], DDPM, StepMethod("ddpm-ancestral"), noise=NoiseSource(0))
    with pytest.raises(SamplerError, match="noise"):
        denoise_step(st, _pred([[0.0]]), [0.4], COS, StepMethod("ddim", eta=0.5))
    with pytest.raises(SamplerError):
        StepMethod("ddim", eta=-0.1)
    with pytest.raises(SamplerError):
        StepMethod("ddim", learned_variance=True)


def test_ddim_eta_one_matches_ancestral_on_ddpm_grid():
    rng = np.random.default_rng(0)
    n = 6
    for i in range(2, DDPM.d_steps + 1):
        t, t_new = i / DDPM.d_steps, (i - 1) / DDPM.d_steps
        st = make_state(rng.standard_normal((n, 2)), np.full(n, t))
        pred = _pred(rng.standard_normal((n, 2)))
        a = denoise_step(st, pred, np.full(n, t_new), DDPM, StepMethod("ddim", eta=1.0), NoiseSource(5), column=i)
        b = denoise_step(st, pred, np.full(n, t_new), DDPM, StepMethod("ddpm-ancestral"), NoiseSource(5), column=i)
        np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-12)


def test_ancestral_last_step_is_noise_free():
    st = make_state([[0.4]], [1 / DDPM.d_steps])
    out = denoise_step(st, _pred([[0.1]]), [0.0], DDPM, StepMethod("ddpm-ancestral"), NoiseSource(1))
    np.testing.assert_allclose(out.values, [[0.1]], atol=1e-12)


def test_learned_variance_interpolates_between_bounds():
    n = 1
    i = 10
    t, t_new = i / DDPM.d_steps, (i - 1) / DDPM.d_steps
    st = make_state([[0.4]], [t])
    log_beta, log_tilde = DDPM.posterior_variances()
    z = NoiseSource(2).block(1, n, 1, 1)[0]
    base = denoise_step(st, _pred([[0.1]]), [t_new], DDPM, StepMethod("ddpm-ancestral"), NoiseSource(2)).values
    mean = base - np.exp(0.5 * log_tilde[i - 1]) * z
    for h, lv in ((0.0, log_tilde[i - 1]), (1.0, log_beta[i - 1])):
        pred = Prediction(np.array([[0.1]]), np.zeros(1), None, np.array([h]))
        out = denoise_step(st, pred, [t_new], DDPM, StepMethod("ddpm-ancestral", learned_variance=True), NoiseSource(2))
        np.testing.assert_allclose(out.values, mean + np.exp(0.5 * lv) * z, atol=1e-14)


class _RecordingNoise(NoiseSource):
    def __init__(self, seed, poison):
        super().__init__(seed)
        self.poison = poison

    def draw(self, column, variable, chains, dim, offset=0, tag=0):
        out = super().draw(column, variable, chains, dim, offset, tag)
        return out + 100.0 if variable == self.poison else out


def test_noise_substreams_are_isolated_per_variable():
    st = make_state([[0.3], [-1.2], [0.5]], [0.6, 0.6, 0.6])
    pred = _pred([[0.1], [0.2], [0.3]])
    method = StepMethod("ddim", eta=1.0)
    ref = denoise_step(st, pred, [0.3] * 3, COS, method, NoiseSource(4))
    alt = denoise_step(st, pred, [0.3] * 3, COS, method, _RecordingNoise(4, poison=1))
    assert alt.values[1, 0] != ref.values[1, 0]
    assert np.array_equal(alt.values[[0, 2]], ref.values[[0, 2]])


def test_noise_rows_independent_of_batch_split():
    src = NoiseSource(11)
    full = src.block(3, 4, 10, 2)
    parts = np.concatenate([src.block(3, 4, 4, 2), src.block(3, 4, 6, 2, offset=4)])
    assert np.array_equal(full, parts)


def _gauss():
    gmm, _ = correlated_gaussian((0.5, -0.5), 0.8)
    return gmm


def test_single_step_collapses_to_posterior_mean():
    gmm = GaussianMixture([1.0], [[0.7]], [[[0.5]]])
    st = make_state([[1.3]], [1.0])
    den = OracleDenoiser(gmm, RF, n=1)
    T = build_schedule(ScheduleSpec("parallel", 1), 1)
    out = run_inference(den, st, T, RF, StepMethod("ddim"))
    want = posterior(gmm, RF, st.values[None], st.levels).x0_mean[0]
    np.testing.assert_allclose(out.values, want, atol=1e-15)
    # at t=1 the observation carries no signal, so this is the prior mean
    np.testing.assert_allclose(out.values, [[0.7]], atol=1e-12)


@pytest.mark.parametrize("kind", ["parallel", "sequential"])
def test_trajectory_follows_schedule(kind):
    gmm = _gauss()
    den = OracleDenoiser(gmm, COS, n=2)
    T = build_schedule(ScheduleSpec(kind, 8, overlap=0.5), 2)
    st = make_state(initial_noise(0, 1, 2, 1)[0], T.levels[:, 0])
    final, traj = run_inference(den, st, T, COS, StepMethod("ddim", eta=0.5), seed=1, record=True)
    assert traj.columns == list(range(9))
    for col, lv in zip(traj.columns, traj.levels):
        assert np.array_equal(lv[0], T.levels[:, col])
    assert np.all(final.levels == 0)


def test_inference_is_deterministic_and_seed_dependent():
    den = OracleDenoiser(_gauss(), COS, n=2)
    T = build_schedule(ScheduleSpec("parallel", 10), 2)
    x = initial_noise(0, 50, 2, 1)
    runs = [run_chains(den, x, np.zeros(2, bool), T, COS, StepMethod("ddim", eta=1.0), seed=s).values for s in (3, 3, 4)]
    assert np.array_equal(runs[0], runs[1])
    assert not np.array_equal(runs[0], runs[2])


def test_chain_blocks_match_single_batch():
    den = OracleDenoiser(_gauss(), COS, n=2)
    T = build_schedule(ScheduleSpec("sequential", 10), 2)
    cond = np.zeros(2, bool)
    m = StepMethod("ddim", eta=1.0)
    full = run_chains(den, initial_noise(7, 12, 2, 1), cond, T, COS, m, seed=7).values
    a = run_chains(den, initial_noise(7, 5, 2, 1), cond, T, COS, m, seed=7).values
    b = run_chains(den, initial_noise(7, 7, 2, 1, offset=5), cond, T, COS, m, seed=7, chain_offset=5).values
    np.testing.assert_allclose(np.concatenate([a, b]), full, rtol=0, atol=1e-13)


def test_initial_levels_must_match_schedule():
    den = OracleDenoiser(_gauss(), COS, n=2)
    T = build_schedule(ScheduleSpec("parallel", 4), 2)
    with pytest.raises(SamplerError, match="column 0"):
        run_inference(den, make_state([[0.0], [0.0]], [0.5, 1.0]), T, COS, StepMethod("ddim"))


@pytest.mark.parametrize(
    "paradigm,method,kind,d",
    [
        (RF, StepMethod("euler-flow"), "parallel", 256),
        (COS, StepMethod("ddim"), "sequential", 256),
        (COS, StepMethod("heun-flow"), "parallel", 64),
        (COS, StepMethod("ddim", eta=1.0), "next-k", 256),
        (Paradigm("ddpm-discrete", d_steps=200), StepMethod("ddpm-ancestral"), "parallel", 200),
    ],
)
def test_moments_match_target(paradigm, method, kind, d):
    gmm = _gauss()
    den = OracleDenoiser(gmm, paradigm, n=2)
    T = build_schedule(ScheduleSpec(kind, d, k=1), 2)
    B = 4000
    out = run_chains(den, initial_noise(1, B, 2, 1), np.zeros(2, bool), T, paradigm, method, seed=2).values[..., 0]
    assert np.max(np.abs(out.mean(axis=0) - gmm.mean())) < 0.06
    assert np.max(np.abs(np.cov(out, rowvar=False) - gmm.covariance())) < 0.08


def test_sequential_conditional_mean():
    gmm = _gauss()
    v = 1.2
    den = OracleDenoiser(gmm, COS, n=2)
    cond = np.array([True, False])
    T = build_schedule(ScheduleSpec("sequential", 128), 2, conditioned=cond)
    x = initial_noise(3, 3000, 2, 1)
    x[:, 0, 0] = v
    out = run_chains(den, x, cond, T, COS, StepMethod("ddim", eta=1.0), seed=3).values[:, :, 0]
    assert np.all(out[:, 0] == v)
    want = -0.5 + 0.8 * (v - 0.5)
    se = out[:, 1].std(ddof=1) / np.sqrt(out.shape[0])
    assert abs(out[:, 1].mean() - want) < 3 * se
    # conditional variance 1 - rho^2
    assert abs(out[:, 1].var() - 0.36) < 0.04


def test_ddim_and_euler_converge_with_more_steps():
    gmm = GaussianMixture([0.5, 0.5], [[-1.0, 0.5], [1.0, -0.3]], [np.eye(2) * 0.2, [[0.3, 0.1], [0.1, 0.2]]])
    den = OracleDenoiser(gmm, COS, n=2)
    x = initial_noise(0, 200, 2, 1)
    cond = np.zeros(2, bool)
    gaps = []
    for d in (32, 64, 128, 256):
        T = build_schedule(ScheduleSpec("parallel", d), 2)
        a = run_chains(den, x, cond, T, COS, StepMethod("ddim")).values
        b = run_chains(den, x, cond, T, COS, StepMethod("euler-flow")).values
        gaps.append(np.mean(np.abs(a - b)))
    assert all(g1 < g0 for g0, g1 in zip(gaps, gaps[1:]))
    order = np.log2(gaps[0] / gaps[-1]) / 3
    assert order >= 0.9


def test_heun_beats_euler_at_equal_steps():
    gmm = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[0.1]], [[0.1]]])
    den = OracleDenoiser(gmm, COS, n=1)
    x = initial_noise(0, 100, 1, 1)
    cond = np.zeros(1, bool)
    ref = run_chains(den, x, cond, build_schedule(ScheduleSpec("parallel", 2048), 1), COS, StepMethod("ddim")).values
    T = build_schedule(ScheduleSpec("parallel", 16), 1)
    e = run_chains(den, x, cond, T, COS, StepMethod("euler-flow")).values
    h = run_chains(den, x, cond, T, COS, StepMethod("heun-flow")).values
    assert np.mean(np.abs(h - ref)) < np.mean(np.abs(e - ref))


def test_adaptive_run_terminates_deterministically():
    gmm, _ = correlated_gaussian((0.0, 0.0), 0.5, (0.3, 1.0))
    den = OracleDenoiser(gmm, COS, n=2)
    policy = AdaptivePolicy(k=1, d=20)
    x = initial_noise(0, 30, 2, 1)
    r1 = run_chains(den, x, np.zeros(2, bool), policy, COS, StepMethod("ddim"), record=True)
    r2 = run_chains(den, x, np.zeros(2, bool), policy, COS, StepMethod("ddim"))
    assert np.array_equal(r1.values, r2.values)
    assert np.all(r1.levels == 0)
    # the narrower variable 0 is always started first and finishes before 1 starts
    lv = np.stack(r1.trajectory.levels)  # (rounds, B, n)
    first_move_0 = np.argmax(lv[:, :, 0] < 1, axis=0)
    first_move_1 = np.argmax(lv[:, :, 1] < 1, axis=0)
    done_0 = np.argmax(lv[:, :, 0] == 0, axis=0)
    assert np.all(first_move_0 < first_move_1)
    assert np.all(done_0 <= first_move_1)
    assert len(r1.trajectory.columns) - 1 == 20


def test_adaptive_respects_graph():
    gmm, task = sequence_task(4, 0.5)
    den = OracleDenoiser(gmm, COS, n=4)
    # reversed chain: 3 -> 2 -> 1 -> 0, so 3 must go first whatever the uncertainties
    graph = DependencyGraph(4, [(3, 2), (2, 1), (1, 0)])
    st = make_state(initial_noise(0, 1, 4, 1)[0], np.ones(4))
    _, traj = run_inference(den, st, AdaptivePolicy(1, 8, graph), COS, StepMethod("ddim"), record=True)
    lv = np.stack(traj.levels)[:, 0]
    starts = [int(np.argmax(lv[:, i] < 1)) for i in range(4)]
    assert starts == sorted(starts, reverse=True)


def test_adaptive_with_ancestral_off_grid_raises():
    den = OracleDenoiser(_gauss(), DDPM, n=2)
    with pytest.raises(SamplerError):
        run_chains(den, initial_noise(0, 2, 2, 1), np.zeros(2, bool), AdaptivePolicy(1, 30), DDPM,
                   StepMethod("ddpm-ancestral"))


def test_velocity_update_uses_u_definition():
    # one Euler step equals x + dt * (da x0 + db eps_hat)
    st = make_state([[0.9]], [0.6])
    x0 = np.array([[0.2]])
    c = coefficients(COS, 0.6)
    eps = (0.9 - c.a * 0.2) / c.b
    out = denoise_step(st, _pred(x0), [0.5], COS, StepMethod("euler-flow"))
    np.testing.assert_allclose(out.values[0, 0], 0.9 - 0.1 * (c.da * 0.2 + c.db * eps), atol=1e-15)
