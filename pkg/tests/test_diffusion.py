import numpy as np
import pytest

from pressfit.diffusion import (NoiseSchedule, ddim_sample, ddim_times,
                                ddpm_loss, ddpm_sample, make_schedule, q_sample)
from pressfit.errors import BadConfig, ShapeMismatch
from pressfit.tensor import Tensor


class StubDenoiser:
    """Denoiser stand-in computing eps_hat from a plain function."""

    def __init__(self, fn, chunk_shape=(4, 2), dtype=np.float64):
        self.fn = fn
        self.chunk_shape = chunk_shape
        self.dtype = dtype

    def __call__(self, noisy, obs, k):
        return Tensor(np.asarray(self.fn(noisy.data, obs, k), dtype=self.dtype))


def zero_stub(chunk_shape=(4, 2)):
    return StubDenoiser(lambda x, obs, k: np.zeros_like(x), chunk_shape)


def affine_stub(chunk_shape=(4, 2)):
    # depends on x, obs and k so sampler equivalences are exercised honestly
    def fn(x, obs, k):
        bias = obs.sum(axis=1, dtype=np.float64) * 0.05 + k * 0.003
        return 0.3 * x + bias[:, None, None]
    return StubDenoiser(fn, chunk_shape)


def point_stub(sched, x0_star=0.37, chunk_shape=(4, 2)):
    # exact denoiser for data concentrated at x0_star: its implied x0
    # estimate is x0_star at every step, so the envelope clamp never bites
    # and both reverse-update forms must coincide to float precision
    def fn(x, obs, k):
        abar = sched.alpha_bar(k)[:, None, None]
        return (x - np.sqrt(abar) * x0_star) / np.sqrt(1.0 - abar)
    return StubDenoiser(fn, chunk_shape)


def test_schedule_invariants_and_defaults():
    for kind, sizes in (("cosine", (100, 150, 250)), ("linear", (100, 250))):
        for K in sizes:
            s = make_schedule(K, kind)
            assert s.K == K
            assert s.alphas.shape == (K,)
            assert np.all(np.diff(s.alpha_bars) < 0)
            assert s.alpha_bars[0] >= 0.999
            assert s.alpha_bars[-1] < 0.01
            assert np.max(np.abs(np.cumprod(s.alphas) - s.alpha_bars)) < 1e-12
    s = make_schedule()
    assert s.K == 100
    assert float(s.alpha_bar(0)) == 1.0
    assert float(s.sigma(1)) == 0.0  # first reverse step is noiseless


def test_schedule_rejects_bad_input():
    with pytest.raises(BadConfig):
        make_schedule(0)
    with pytest.raises(BadConfig):
        make_schedule(100, "geometric")
    with pytest.raises(BadConfig):
        NoiseSchedule(np.array([1.5, 0.5]))
    with pytest.raises(BadConfig):
        NoiseSchedule(np.array([0.9, 1.0]))  # alpha_bar not strictly decreasing
    with pytest.raises(BadConfig):
        NoiseSchedule(np.array([0.5, 0.001]))  # first step too noisy
    with pytest.raises(BadConfig):
        make_schedule(10, "linear")  # scaled betas leave the (0, 1] range
    with pytest.raises(BadConfig):
        NoiseSchedule(np.array([1.0, 0.9]))  # keeps too much signal


def test_q_sample_exact_values():
    # alpha_bar_1 = 1 keeps the data; alpha_bar_2 = 0.25 mixes exactly
    sched = NoiseSchedule(np.array([1.0, 0.25, 0.02]))
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    assert np.array_equal(q_sample(x0, 1, eps, sched), x0 + 0.0 * eps)
    xk = q_sample(x0, 2, eps, sched)
    assert np.allclose(xk, 0.5 * x0 + np.sqrt(0.75) * eps, atol=1e-15)
    # per-sample steps broadcast along the batch axis
    ks = np.array([1, 2, 2, 1, 2])
    mixed = q_sample(x0, ks, eps, sched)
    assert np.array_equal(mixed[0], x0[0])
    assert np.allclose(mixed[1], 0.5 * x0[1] + np.sqrt(0.75) * eps[1])


def test_q_sample_errors():
    sched = make_schedule(100)
    with pytest.raises(ShapeMismatch):
        q_sample(np.zeros((2, 3)), 1, np.zeros((2, 4)), sched)
    with pytest.raises(BadConfig):
        q_sample(np.zeros(3), 0, np.zeros(3), sched)
    with pytest.raises(BadConfig):
        q_sample(np.zeros(3), 101, np.zeros(3), sched)


def test_q_sample_variance_matches_schedule():
    sched = make_schedule(100)
    rng = np.random.default_rng(1)
    x0 = np.full((10000, 1), 0.37)
    for k in (5, 50, 95):
        eps = rng.standard_normal(x0.shape)
        xk = q_sample(x0, k, eps, sched)
        want = 1.0 - float(sched.alpha_bar(k))
        assert abs(np.var(xk) - want) < 0.05 * want + 1e-4
        assert abs(np.mean(xk) - np.sqrt(float(sched.alpha_bar(k))) * 0.37) < 0.02


def test_ddpm_loss_oracle_stub_recovers_noise():
    sched = make_schedule(100)
    rng = np.random.default_rng(2)
    chunks = rng.uniform(-1, 1, size=(16, 4, 2))
    obs = rng.uniform(-1, 1, size=(16, 3))

    def invert(xk, _obs, k):
        abar = sched.alpha_bar(k)[:, None, None]
        return (xk - np.sqrt(abar) * chunks) / np.sqrt(1.0 - abar)

    loss = ddpm_loss(StubDenoiser(invert), obs, chunks, sched, np.random.default_rng(3))
    assert float(loss.data) < 1e-24


def test_ddpm_loss_zero_stub_is_unit_mse():
    sched = make_schedule(100)
    rng = np.random.default_rng(4)
    chunks = rng.uniform(-1, 1, size=(256, 8, 4))
    obs = rng.uniform(-1, 1, size=(256, 3))
    loss = float(ddpm_loss(zero_stub(), obs, chunks, sched, rng).data)
    assert 0.95 < loss < 1.05
    assert loss >= 0.0


def test_ddpm_loss_shape_errors():
    sched = make_schedule(100)
    with pytest.raises(ShapeMismatch):
        ddpm_loss(zero_stub(), np.zeros((4, 3)), np.zeros((5, 4, 2)), sched,
                  np.random.default_rng(0))


def test_ddpm_sample_zero_stub_closed_form():
    # sigma forced to zero: each reverse step multiplies by 1/sqrt(alpha_k),
    # so the whole chain scales x_K by 1/sqrt(alpha_bar_K)
    sched = NoiseSchedule(np.array([1.0, 0.25, 0.039]))
    sched.sigmas = np.zeros(3)
    x_init = np.random.default_rng(5).uniform(-0.05, 0.05, size=(2, 4, 2))
    out = ddpm_sample(zero_stub(), np.zeros((2, 3)), sched,
                      np.random.default_rng(6), x_init=x_init)
    want = x_init / np.sqrt(float(sched.alpha_bar(3)))
    assert np.allclose(out, want, atol=1e-12)


def test_ddpm_sample_matches_textbook_update():
    # oracle: the literal posterior-mean update, same z draw order.  The
    # point stub keeps the implied x0 estimate inside [-1, 1], where the
    # x0-form step and the textbook step are algebraically identical.
    sched = make_schedule(100)
    model = point_stub(sched)
    rng_oracle = np.random.default_rng(7)
    rng_impl = np.random.default_rng(7)
    obs = np.random.default_rng(8).uniform(-1, 1, size=(3, 5))

    x = rng_oracle.standard_normal((3, 4, 2))
    for k in range(sched.K, 0, -1):
        z = rng_oracle.standard_normal(x.shape)
        eps_hat = model(Tensor(x), obs, np.full(3, k)).data
        alpha = float(sched.alpha(k))
        abar = float(sched.alpha_bar(k))
        x = (x - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        x = x + float(sched.sigma(k)) * z
    oracle = np.clip(x, -1.0, 1.0)

    got = ddpm_sample(model, obs, sched, rng_impl)
    assert np.max(np.abs(got - oracle)) < 1e-10
    assert np.array_equal(rng_impl.bit_generator.state, rng_oracle.bit_generator.state)
    # the exact denoiser pulls every sample onto the data point
    assert np.max(np.abs(got - 0.37)) < 1e-6


def test_ddpm_sample_deterministic_and_clipped():
    sched = make_schedule(100)
    model = affine_stub()
    obs = np.random.default_rng(9).uniform(-1, 1, size=(4, 5))
    a = ddpm_sample(model, obs, sched, np.random.default_rng(10))
    b = ddpm_sample(model, obs, sched, np.random.default_rng(10))
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)
    # a denoiser that always reports large negative noise implies an x0
    # estimate far above 1; the envelope clamp must pin every entry at the
    # boundary exactly
    wild = StubDenoiser(lambda x, obs, k: np.full_like(x, -100.0))
    big = ddpm_sample(wild, obs[:, :3], make_schedule(100),
                      np.random.default_rng(11))
    assert np.all(big == 1.0)
    # the zero stub keeps x0_hat = x_k / sqrt(abar_k); iterates stay finite
    # instead of running off the data envelope
    calm = ddpm_sample(zero_stub(), obs[:, :3], make_schedule(100),
                       np.random.default_rng(11))
    assert np.all(np.abs(calm) <= 1.0)


def test_ddim_times_sub_schedules():
    assert ddim_times(100, 8) == [100, 88, 75, 62, 50, 38, 25, 12]
    assert ddim_times(100, 4) == [100, 75, 50, 25]
    assert ddim_times(100, 2) == [100, 50]
    assert ddim_times(100, 1) == [100]
    assert ddim_times(100, 100) == list(range(100, 0, -1))
    assert ddim_times(8, 3) == [8, 5, 3]
    with pytest.raises(BadConfig):
        ddim_times(100, 0)
    with pytest.raises(BadConfig):
        ddim_times(100, 101)


def test_ddim_full_steps_equals_noiseless_ddpm():
    sched = make_schedule(100)
    model = affine_stub()
    obs = np.random.default_rng(12).uniform(-1, 1, size=(3, 5))
    x_init = np.random.default_rng(13).standard_normal((3, 4, 2))
    silent = NoiseSchedule(sched.alphas)
    silent.sigmas = np.zeros(sched.K)
    via_ddpm = ddpm_sample(model, obs, silent, np.random.default_rng(0), x_init=x_init)
    via_ddim = ddim_sample(model, obs, sched, n_steps=sched.K, x_init=x_init)
    assert np.max(np.abs(via_ddpm - via_ddim)) < 1e-5


def test_ddim_deterministic_given_x_init():
    sched = make_schedule(100)
    model = affine_stub()
    obs = np.random.default_rng(14).uniform(-1, 1, size=(2, 5))
    x_init = np.random.default_rng(15).standard_normal((2, 4, 2))
    a = ddim_sample(model, obs, sched, 8, x_init=x_init)
    b = ddim_sample(model, obs, sched, 8, x_init=x_init)
    assert np.array_equal(a, b)
    c = ddim_sample(model, obs, sched, 8, rng=np.random.default_rng(16))
    d = ddim_sample(model, obs, sched, 8, rng=np.random.default_rng(16))
    assert np.array_equal(c, d)
    with pytest.raises(BadConfig):
        ddim_sample(model, obs, sched, 8)
    with pytest.raises(BadConfig):
        ddim_sample(model, obs, sched, 101, rng=np.random.default_rng(0))


# ------------------------------------------------------- learned samplers

def train_two_mode_denoiser(chunk_T: int, steps: int = 1200):
    """Tiny MLP denoiser fit to chunks that are constant +/-0.6."""
    from pressfit.models import DenoiserParams, DiffusionDenoiser
    from pressfit.training import AdamW
    rng = np.random.default_rng(7)
    sched = make_schedule(100)
    params = DenoiserParams(arch="mlp", step_emb_dim=16, obs_emb_dim=8,
                            mlp_hidden=(64, 64))
    model = DiffusionDenoiser(1, (chunk_T, 1), params, np.random.default_rng(0))
    opt = AdamW(model.parameters(), weight_decay=0.0)
    obs = np.zeros((256, 1))
    for _ in range(steps):
        mode = rng.choice([-0.6, 0.6], size=(256, 1, 1))
        chunks = np.broadcast_to(mode, (256, chunk_T, 1)).copy()
        model.zero_grad()
        loss = ddpm_loss(model, obs, chunks, sched, rng)
        loss.backward()
        opt.step(2e-3)
    return model, sched


def test_trained_sampler_recovers_both_modes():
    model, sched = train_two_mode_denoiser(chunk_T=1)
    out = ddpm_sample(model, np.zeros((1000, 1)), sched, np.random.default_rng(99))
    means = out.mean(axis=(1, 2))
    assert np.mean(means > 0) >= 0.30
    assert np.mean(means < 0) >= 0.30
    assert np.abs(means).mean() > 0.3          # mass near the modes, not at zero


def test_chunked_samples_commit_to_one_mode():
    # two demonstrated sequences -> sampled chunks must not mix them per step
    model, sched = train_two_mode_denoiser(chunk_T=8)
    out = ddpm_sample(model, np.zeros((1000, 1)), sched, np.random.default_rng(99))
    signs = np.sign(out[:, :, 0])
    consistent = np.mean(np.all(signs == signs[:, :1], axis=1))
    assert consistent >= 0.9
    means = out.mean(axis=(1, 2))
    assert np.mean(means > 0) >= 0.30 and np.mean(means < 0) >= 0.30
    assert np.abs(means).mean() > 0.4
