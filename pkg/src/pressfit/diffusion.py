"""DDPM forward process, training loss, and DDPM/DDIM reverse samplers.

Conventions:
  * diffusion steps are 1-indexed: k runs over 1..K, with alpha_bar(0) = 1;
  * a denoiser is any callable ``model(noisy, obs, k) -> eps_hat`` where
    ``noisy`` is a (B, T, A) Tensor, ``obs`` a (B, D) float array, ``k`` a
    (B,) int array of diffusion steps, and the result a (B, T, A) Tensor;
    it also exposes ``chunk_shape`` = (T, A) and ``dtype``;
  * samplers treat data as normalized to [-1, 1]; the x0 estimate inside
    every reverse step is clamped to that envelope, and so is the final
    output.

The reverse update is computed in x0 form,

    x_{k-1} = sqrt(abar_{k-1}) x0_hat
              + sqrt(1 - abar_{k-1} - sigma_k^2) eps_hat + sigma_k z,

which for the stochastic sampler (sigma_k = sqrt(beta_tilde_k)) is
algebraically the textbook posterior step

    x_{k-1} = (x_k - (1-alpha_k)/sqrt(1-abar_k) eps_hat)/sqrt(alpha_k)
              + sigma_k z,

and for sigma_k = 0 is exactly the deterministic DDIM update, so the two
samplers agree step for step when run on the same sub-schedule.

The x0 clamp is load-bearing, not cosmetic: the cosine schedule ends at
alpha_bar_K ~ 1e-6, so x0_hat divides the model's residual by
sqrt(alpha_bar_K) ~ 1e-3.  Unclamped, one first-step residual of 0.1
becomes an x0 estimate of ~100, the chain leaves the data envelope for
inputs the model never saw, and every sample collapses onto the clip
boundary regardless of the observation.
"""

from __future__ import annotations

import numpy as np

from .errors import BadConfig, ShapeMismatch
from .tensor import Tensor, mse, no_grad

DEFAULT_STEPS = 100
COSINE_OFFSET = 0.008


class NoiseSchedule:
    """Per-step alpha/alpha_bar/sigma tables for a K-step diffusion."""

    def __init__(self, alphas: np.ndarray):
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size < 1:
            raise BadConfig("schedule needs a 1-D list of per-step alphas")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise BadConfig("per-step alphas must lie in (0, 1]")
        self.K = int(alphas.size)
        self.alphas = alphas
        self.alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise BadConfig("alpha_bar must be strictly decreasing")
        if self.alpha_bars[0] < 0.999:
            raise BadConfig(f"alpha_bar_1 = {self.alpha_bars[0]:.6f} adds too much "
                            "noise at the first step (need >= 0.999)")
        if self.alpha_bars[-1] >= 0.01:
            raise BadConfig(f"alpha_bar_K = {self.alpha_bars[-1]:.6f} keeps too much "
                            "signal at the last step (need < 0.01)")
        # posterior std: sigma_k^2 = (1 - abar_{k-1})/(1 - abar_k) * beta_k,
        # zero whenever the step adds no noise (alpha_k = 1)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        denom = np.where(self.alpha_bars < 1.0, 1.0 - self.alpha_bars, 1.0)
        self.sigmas = np.sqrt((1.0 - prev) / denom * (1.0 - alphas))

    def alpha(self, k):
        return self.alphas[np.asarray(k) - 1]

    def alpha_bar(self, k):
        """alpha_bar at step k, with alpha_bar(0) = 1 by convention."""
        k = np.asarray(k)
        return np.where(k == 0, 1.0, self.alpha_bars[np.maximum(k, 1) - 1])

    def sigma(self, k):
        return self.sigmas[np.asarray(k) - 1]


def make_schedule(K: int = DEFAULT_STEPS, kind: str = "cosine") -> NoiseSchedule:
    if K < 1:
        raise BadConfig("schedule needs at least one step")
    ks = np.arange(0, K + 1, dtype=np.float64)
    if kind == "cosine":
        f = np.cos((ks / K + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        abar = f[1:] / f[0]
        prev = np.concatenate([[1.0], abar[:-1]])
        alphas = np.clip(abar / prev, 1e-3, 1.0)
    elif kind == "linear":
        # betas spaced linearly, scaled so total noise is K-independent
        scale = 1000.0 / K
        alphas = 1.0 - np.linspace(1e-4 * scale, 0.02 * scale, K)
    else:
        raise BadConfig(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(alphas)


def q_sample(x0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noised sample x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.

    ``k`` is a scalar step or a per-sample array aligned with the leading
    axis of x0; either way it broadcasts over the trailing axes.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and eps {eps.shape} must match")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise BadConfig(f"diffusion step out of range [1, {sched.K}]")
    abar = sched.alpha_bar(k).reshape(k.shape + (1,) * (x0.ndim - k.ndim))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def ddpm_loss(model, obs: np.ndarray, chunks: np.ndarray, sched: NoiseSchedule,
              rng: np.random.Generator) -> Tensor:
    """Noise-prediction objective: MSE(eps, model(q_sample(x0, k, eps), obs, k)).

    Steps k are drawn uniformly from 1..K per sample, eps from N(0, I).
    """
    obs = np.asarray(obs)
    chunks = np.asarray(chunks)
    if obs.ndim != 2 or chunks.ndim != 3 or obs.shape[0] != chunks.shape[0]:
        raise ShapeMismatch(f"need obs (B, D) and chunks (B, T, A), got "
                            f"{obs.shape} and {chunks.shape}")
    dtype = getattr(model, "dtype", np.float32)
    B = obs.shape[0]
    k = rng.integers(1, sched.K + 1, size=B)
    eps = rng.standard_normal(chunks.shape)
    noisy = q_sample(chunks, k, eps, sched)
    pred = model(Tensor(noisy.astype(dtype)), obs.astype(dtype), k)
    return mse(pred, eps.astype(dtype))


def _predict(model, x: np.ndarray, obs: np.ndarray, k: int):
    B = x.shape[0]
    with no_grad():
        out = model(Tensor(x), obs, np.full(B, k, dtype=np.int64))
    return np.asarray(out.data, dtype=np.float64)


def _reverse_step(x, eps_hat, abar_k, abar_prev, sigma, z):
    x0_hat = (x - np.sqrt(1.0 - abar_k) * eps_hat) / np.sqrt(abar_k)
    np.clip(x0_hat, -1.0, 1.0, out=x0_hat)
    dir_term = np.sqrt(np.maximum(1.0 - abar_prev - sigma ** 2, 0.0)) * eps_hat
    return np.sqrt(abar_prev) * x0_hat + dir_term + sigma * z


def _init_noise(model, obs, rng, x_init):
    obs = np.asarray(obs, dtype=getattr(model, "dtype", np.float32))
    if obs.ndim != 2:
        raise ShapeMismatch(f"sampler needs a batch of observations, got {obs.shape}")
    shape = (obs.shape[0],) + tuple(model.chunk_shape)
    if x_init is not None:
        x = np.asarray(x_init, dtype=np.float64)
        if x.shape != shape:
            raise ShapeMismatch(f"x_init must have shape {shape}, got {x.shape}")
        return obs, x.copy()
    return obs, rng.standard_normal(shape)


def ddpm_sample(model, obs: np.ndarray, sched: NoiseSchedule,
                rng: np.random.Generator, x_init=None) -> np.ndarray:
    """Full K-step stochastic reverse process; returns actions in [-1, 1].

    Draws one z per step in a fixed order, so two runs from identical rng
    states coincide exactly.
    """
    obs, x = _init_noise(model, obs, rng, x_init)
    for k in range(sched.K, 0, -1):
        z = rng.standard_normal(x.shape)
        eps_hat = _predict(model, x.astype(getattr(model, "dtype", np.float32)), obs, k)
        x = _reverse_step(x, eps_hat, float(sched.alpha_bar(k)),
                          float(sched.alpha_bar(k - 1)), float(sched.sigma(k)), z)
    return np.clip(x, -1.0, 1.0)


def ddim_times(K: int, n_steps: int) -> list:
    """Evenly spaced sub-schedule, highest step first: round(i*K/n) for i=n..1."""
    if not 1 <= n_steps <= K:
        raise BadConfig(f"need 1 <= n_steps <= {K}, got {n_steps}")
    times = [int(round(i * K / n_steps)) for i in range(n_steps, 0, -1)]
    if len(set(times)) != len(times) or times[0] != K or min(times) < 1:
        raise BadConfig(f"degenerate sub-schedule {times} for K={K}, n={n_steps}")
    return times


def ddim_sample(model, obs: np.ndarray, sched: NoiseSchedule, n_steps: int = 8,
                rng: np.random.Generator | None = None, x_init=None) -> np.ndarray:
    """Deterministic few-step sampler (eta = 0) on an evenly spaced sub-schedule.

    The rng seeds only the initial noise; everything after is a pure
    function of it, so repeated calls with the same x_K agree bit for bit.
    """
    if x_init is None and rng is None:
        raise BadConfig("ddim_sample needs an rng or an explicit x_init")
    obs, x = _init_noise(model, obs, rng, x_init)
    times = ddim_times(sched.K, n_steps)
    for i, k in enumerate(times):
        k_prev = times[i + 1] if i + 1 < len(times) else 0
        eps_hat = _predict(model, x.astype(getattr(model, "dtype", np.float32)), obs, k)
        x = _reverse_step(x, eps_hat, float(sched.alpha_bar(k)),
                          float(sched.alpha_bar(k_prev)), 0.0, 0.0)
    return np.clip(x, -1.0, 1.0)


def kde_mode(samples: np.ndarray, bandwidth: float) -> int:
    """Index of the sample maximizing summed Gaussian kernels; ties -> lowest."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise BadConfig("samples must be a non-empty (N, d) array")
    if not (bandwidth > 0):
        raise BadConfig("bandwidth must be positive")
    n = x.shape[0]
    dens = np.zeros(n)
    scale = -0.5 / (bandwidth * bandwidth)
    for lo in range(0, n, 256):
        hi = min(lo + 256, n)
        d2 = ((x[lo:hi, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        dens[lo:hi] = np.exp(scale * d2).sum(axis=1)
    best = 0
    for i in range(1, n):
        if dens[i] > dens[best]:
            best = i
    return best
