"""Denoiser architectures and the chunked diffusion policy.

Two interchangeable denoisers sit behind one call protocol
``model(noisy, obs, k) -> eps_hat``:

  * a 1-D temporal U-Net over the action chunk, conditioned through FiLM
    (per-channel scale and shift computed from the conditioning vector) in
    every residual block, with skip connections across resolutions;
  * a flat MLP that concatenates the flattened chunk with the conditioning
    vector, for ablations.

The conditioning vector is the concatenation of an observation embedding
(2-layer MLP to 128 dims) and a sinusoidal embedding of the diffusion
step passed through a small MLP.

DiffusionPolicy bundles a denoiser with its noise schedule, normalization
statistics and chunking configuration, and handles checkpointing; it acts
through the deterministic few-step sampler by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import (ChunkingConfig, NormStats, StateNoiseConfig,
                   inject_proprio_noise)
from .diffusion import (ddim_sample, ddpm_loss, ddpm_sample, kde_mode,
                        make_schedule)
from .errors import BadConfig, SchemaViolation, ShapeMismatch
from .tensor import Tensor

DESK_DOWN_DIMS = (64, 128, 256)
PAPER_DOWN_DIMS = (256, 512, 1024)
GROUPNORM_GROUPS = 8


@dataclass(frozen=True)
class DenoiserParams:
    arch: str = "unet1d"                       # "unet1d" or "mlp"
    down_dims: tuple = DESK_DOWN_DIMS
    step_emb_dim: int = 64
    obs_emb_dim: int = 128
    mlp_hidden: tuple = (512, 512)

    def __post_init__(self):
        if self.arch not in ("unet1d", "mlp"):
            raise BadConfig(f"unknown denoiser architecture {self.arch!r}")
        dims = tuple(int(d) for d in self.down_dims)
        if not dims or any(b <= a for a, b in zip(dims, dims[1:])):
            raise BadConfig("down_dims must be non-empty and strictly increasing")
        object.__setattr__(self, "down_dims", dims)
        if self.step_emb_dim % 2 or self.step_emb_dim < 2:
            raise BadConfig("step_emb_dim must be even and positive")

    def to_dict(self) -> dict:
        return {"arch": self.arch, "down_dims": list(self.down_dims),
                "step_emb_dim": self.step_emb_dim, "obs_emb_dim": self.obs_emb_dim,
                "mlp_hidden": list(self.mlp_hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserParams":
        try:
            return cls(arch=d["arch"], down_dims=tuple(d["down_dims"]),
                       step_emb_dim=int(d["step_emb_dim"]),
                       obs_emb_dim=int(d["obs_emb_dim"]),
                       mlp_hidden=tuple(d["mlp_hidden"]))
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"malformed denoiser params: {e}") from e


def sinusoidal_embedding(k, dim: int) -> np.ndarray:
    """(B,) integer steps -> (B, dim) sin/cos features, geometric frequencies."""
    if dim % 2 or dim < 2:
        raise BadConfig("sinusoidal embedding dim must be even and positive")
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ObsEncoder(nn.Module):
    """2-layer MLP projecting a raw (normalized) observation to an embedding."""

    def __init__(self, obs_dim: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(obs_dim, out_dim, rng)
        self.fc2 = nn.Linear(out_dim, out_dim, rng)

    def __call__(self, obs: Tensor) -> Tensor:
        return self.fc2(T.mish(self.fc1(obs)))


class StepEncoder(nn.Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim * 2, rng)
        self.fc2 = nn.Linear(dim * 2, dim, rng)

    def __call__(self, k, dtype) -> Tensor:
        emb = Tensor(sinusoidal_embedding(k, self.dim).astype(dtype))
        return self.fc2(T.mish(self.fc1(emb)))


class FiLMBlock(nn.Module):
    """Temporal residual block with FiLM conditioning between its convs."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int, rng: np.random.Generator):
        self.c_out = c_out
        self.conv1 = nn.Conv1d(c_in, c_out, 3, rng, padding=1)
        self.norm1 = nn.GroupNorm(c_out, GROUPNORM_GROUPS)
        self.film = nn.Linear(cond_dim, 2 * c_out, rng)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, rng, padding=1)
        self.norm2 = nn.GroupNorm(c_out, GROUPNORM_GROUPS)
        self.skip = nn.Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = T.mish(self.norm1(self.conv1(x)))
        B = cond.data.shape[0]
        scale_shift = T.reshape(self.film(cond), (B, 1, 2 * self.c_out))
        scale = scale_shift[:, :, :self.c_out]
        shift = scale_shift[:, :, self.c_out:]
        h = T.add(T.mul(h, T.add(scale, 1.0)), shift)
        h = T.mish(self.norm2(self.conv2(h)))
        return T.add(h, self.skip(x) if self.skip is not None else x)


class Downsample(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = nn.Conv1d(channels, channels, 3, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = nn.Conv1d(channels, channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))


class ConditionalUnet1D(nn.Module):
    """U-Net over (B, T, A) chunks; every block is FiLM-conditioned."""

    def __init__(self, action_dim: int, cond_dim: int, down_dims,
                 rng: np.random.Generator):
        dims = tuple(down_dims)
        self.levels = len(dims)
        ins = (action_dim,) + dims[:-1]
        self.down_blocks = [FiLMBlock(i, o, cond_dim, rng) for i, o in zip(ins, dims)]
        self.downsamples = [Downsample(c, rng) for c in dims[:-1]]
        self.mid = FiLMBlock(dims[-1], dims[-1], cond_dim, rng)
        self.up_convs = [Upsample(c, rng) for c in dims[1:]]
        self.up_blocks = [FiLMBlock(above + c, c, cond_dim, rng)
                          for c, above in zip(dims[:-1], dims[1:])]
        self.final_norm = nn.GroupNorm(dims[0], GROUPNORM_GROUPS)
        self.final = nn.Conv1d(dims[0], action_dim, 1, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        L = x.data.shape[1]
        need = 2 ** (self.levels - 1)
        if L % need:
            raise ShapeMismatch(f"chunk length {L} not divisible by {need}")
        skips = []
        h = x
        for i in range(self.levels):
            h = self.down_blocks[i](h, cond)
            if i < self.levels - 1:
                skips.append(h)
                h = self.downsamples[i](h)
        h = self.mid(h, cond)
        for j in reversed(range(self.levels - 1)):
            h = self.up_convs[j](h)
            h = T.concat([h, skips[j]], axis=2)
            h = self.up_blocks[j](h, cond)
        return self.final(T.mish(self.final_norm(h)))


class MlpDenoiser(nn.Module):
    """Flat denoiser: [flattened chunk, conditioning] -> flattened noise."""

    def __init__(self, chunk_shape, cond_dim: int, hidden, rng: np.random.Generator):
        self.chunk_shape = tuple(chunk_shape)
        flat = int(np.prod(self.chunk_shape))
        widths = (flat + cond_dim,) + tuple(hidden)
        self.layers = [nn.Linear(a, b, rng) for a, b in zip(widths, widths[1:])]
        self.out = nn.Linear(widths[-1], flat, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        B = x.data.shape[0]
        h = T.concat([T.reshape(x, (B, -1)), cond], axis=1)
        for layer in self.layers:
            h = T.mish(layer(h))
        return T.reshape(self.out(h), (B,) + self.chunk_shape)


class DiffusionDenoiser(nn.Module):
    """Full eps-prediction model: encoders plus the chosen denoiser core."""

    def __init__(self, obs_dim: int, chunk_shape, params: DenoiserParams,
                 rng: np.random.Generator, dtype=np.float32):
        self.obs_dim = obs_dim
        self.chunk_shape = tuple(chunk_shape)
        self.params = params
        self.obs_enc = ObsEncoder(obs_dim, params.obs_emb_dim, rng)
        self.step_enc = StepEncoder(params.step_emb_dim, rng)
        cond_dim = params.obs_emb_dim + params.step_emb_dim
        if params.arch == "unet1d":
            self.core = ConditionalUnet1D(self.chunk_shape[1], cond_dim,
                                          params.down_dims, rng)
        else:
            self.core = MlpDenoiser(self.chunk_shape, cond_dim, params.mlp_hidden, rng)
        self.dtype = np.dtype(dtype).type
        self.astype(self.dtype)

    def astype(self, dtype) -> "DiffusionDenoiser":
        self.dtype = np.dtype(dtype).type
        return super().astype(dtype)

    def __call__(self, noisy: Tensor, obs, k) -> Tensor:
        B = noisy.data.shape[0]
        if noisy.data.shape != (B,) + self.chunk_shape:
            raise ShapeMismatch(f"noisy chunk must be (B, {self.chunk_shape[0]}, "
                                f"{self.chunk_shape[1]}), got {noisy.data.shape}")
        obs = np.asarray(obs, dtype=self.dtype)
        if obs.shape != (B, self.obs_dim):
            raise ShapeMismatch(f"obs must be ({B}, {self.obs_dim}), got {obs.shape}")
        cond = T.concat([self.obs_enc(Tensor(obs)), self.step_enc(k, self.dtype)], axis=1)
        return self.core(noisy, cond)


@dataclass
class PolicySpec:
    """Everything needed to rebuild a policy object from a checkpoint."""
    obs_dim: int
    action_dim: int
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    params: DenoiserParams = field(default_factory=DenoiserParams)
    diffusion_steps: int = 100
    schedule_kind: str = "cosine"
    ddim_steps: int = 8
    init_seed: int = 0
    # train-time proprio jitter; the state-space analogue of the image
    # augmentations applied to the camera-based policy's inputs
    noise: StateNoiseConfig = field(default_factory=lambda: StateNoiseConfig(0.0))

    def to_dict(self) -> dict:
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "chunking": {"obs_horizon": self.chunking.obs_horizon,
                             "pred_horizon": self.chunking.pred_horizon,
                             "act_horizon": self.chunking.act_horizon},
                "params": self.params.to_dict(),
                "diffusion_steps": self.diffusion_steps,
                "schedule_kind": self.schedule_kind,
                "ddim_steps": self.ddim_steps, "init_seed": self.init_seed,
                "noise_sigma": self.noise.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        try:
            c = d["chunking"]
            return cls(obs_dim=int(d["obs_dim"]), action_dim=int(d["action_dim"]),
                       chunking=ChunkingConfig(int(c["obs_horizon"]),
                                               int(c["pred_horizon"]),
                                               int(c["act_horizon"])),
                       params=DenoiserParams.from_dict(d["params"]),
                       diffusion_steps=int(d["diffusion_steps"]),
                       schedule_kind=d["schedule_kind"],
                       ddim_steps=int(d["ddim_steps"]),
                       init_seed=int(d["init_seed"]),
                       noise=StateNoiseConfig(float(d.get("noise_sigma", 0.0))))
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"malformed policy spec: {e}") from e


class DiffusionPolicy:
    """Chunked action policy sampling from a trained denoiser."""

    kind = "diffusion"

    def __init__(self, spec: PolicySpec, stats: NormStats, dtype=np.float32):
        self.spec = spec
        self.stats = stats
        self.sched = make_schedule(spec.diffusion_steps, spec.schedule_kind)
        chunk_shape = (spec.chunking.pred_horizon, spec.action_dim)
        self.model = DiffusionDenoiser(spec.obs_dim, chunk_shape, spec.params,
                                       np.random.default_rng(spec.init_seed),
                                       dtype=dtype)

    def loss(self, obs_norm: np.ndarray, chunks_norm: np.ndarray,
             rng: np.random.Generator) -> Tensor:
        obs = inject_proprio_noise(obs_norm, self.spec.noise, rng)
        return ddpm_loss(self.model, obs, chunks_norm, self.sched, rng)

    def act_batch(self, raw_obs: np.ndarray, rng: np.random.Generator,
                  n_steps: int | None = None, sampler: str = "ddim",
                  mode_samples: int = 1,
                  mode_bandwidth: float = 1.0) -> np.ndarray:
        """Raw observations (B, D) -> raw action chunks (B, T_p, A).

        mode_samples > 1 draws that many chunks per observation and returns,
        for each, the drawn chunk of highest kernel density among its
        siblings.  The result is always one of the actual samples, never an
        average, so within-chunk consistency survives while stray
        low-density draws (the occasional wrong-sign gripper flip) are
        discarded.
        """
        obs2 = np.atleast_2d(raw_obs)
        if mode_samples < 1:
            raise BadConfig("mode_samples must be at least 1")
        if mode_samples > 1:
            obs2 = np.repeat(obs2, mode_samples, axis=0)
        obs_n = self.stats.normalize_obs(obs2)
        if sampler == "ddim":
            out = ddim_sample(self.model, obs_n, self.sched,
                              n_steps=n_steps or self.spec.ddim_steps, rng=rng)
        elif sampler == "ddpm":
            out = ddpm_sample(self.model, obs_n, self.sched, rng)
        else:
            raise BadConfig(f"unknown sampler {sampler!r}")
        if mode_samples > 1:
            groups = out.reshape(-1, mode_samples, *out.shape[1:])
            picks = [kde_mode(g.reshape(mode_samples, -1), mode_bandwidth)
                     for g in groups]
            out = groups[np.arange(len(groups)), picks]
        return self.stats.denormalize_act(out)

    def act(self, raw_obs: np.ndarray, rng: np.random.Generator, **kw) -> np.ndarray:
        return self.act_batch(raw_obs[None, :], rng, **kw)[0]

    def save(self, path):
        nn.save_checkpoint(path, self.model,
                           meta={"policy": "diffusion", "spec": self.spec.to_dict(),
                                 "stats": self.stats.to_dict()})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "DiffusionPolicy":
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("policy") != "diffusion":
            raise SchemaViolation(f"checkpoint holds a {meta.get('policy')!r} policy, "
                                  "expected diffusion")
        policy = cls(PolicySpec.from_dict(meta["spec"]),
                     NormStats.from_dict(meta["stats"]), dtype=dtype)
        policy.model.load_state_dict(arrays)
        policy.model.astype(dtype)
        return policy
