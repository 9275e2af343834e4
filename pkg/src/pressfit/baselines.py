"""MLP regression baselines against the diffusion policy.

Two variants share one body: the chunked MLP predicts the same 32-step
action chunk the diffusion policy does, the non-chunked one regresses a
single next action (T_p = T_a = 1).  Both receive the identical encoded
observation and squash their output through tanh so predictions stay in
the normalized action box.

The optional state-noise variant perturbs only the 16 proprioception
dimensions during training; the part blocks pass through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import (ChunkingConfig, NormStats, StateNoiseConfig,
                   inject_proprio_noise)
from .env.world import PROPRIO_DIM
from .errors import BadConfig, SchemaViolation, ShapeMismatch
from .models import ObsEncoder
from .tensor import Tensor

DESK_WIDTH = 256          # paper-scale residual block width is 1024


@dataclass(frozen=True)
class MlpPolicyConfig:
    blocks: int = 5
    width: int = DESK_WIDTH
    chunked: bool = True

    def __post_init__(self):
        if self.blocks < 1:
            raise BadConfig("need at least one residual block")
        if self.width < 1:
            raise BadConfig("width must be positive")

    def chunking(self) -> ChunkingConfig:
        if self.chunked:
            return ChunkingConfig()
        return ChunkingConfig(obs_horizon=1, pred_horizon=1, act_horizon=1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(width, width, rng)
        self.fc2 = nn.Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.fc2(T.mish(self.fc1(x))))


class ResidualMlp(nn.Module):
    """Shared obs encoder -> residual trunk -> tanh-squashed action chunk."""

    def __init__(self, obs_dim: int, chunk_shape, cfg: MlpPolicyConfig,
                 obs_emb_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.chunk_shape = tuple(chunk_shape)
        self.dtype = dtype
        self.encoder = ObsEncoder(obs_dim, obs_emb_dim, rng)
        self.inp = nn.Linear(obs_emb_dim, cfg.width, rng)
        self.blocks = [ResidualBlock(cfg.width, rng) for _ in range(cfg.blocks)]
        out = int(np.prod(self.chunk_shape))
        self.head = nn.Linear(cfg.width, out, rng)
        self.astype(dtype)

    def __call__(self, obs) -> Tensor:
        x = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=self.dtype))
        if x.data.ndim != 2:
            raise ShapeMismatch(f"need (B, D) observations, got {x.data.shape}")
        h = T.mish(self.inp(self.encoder(x)))
        for block in self.blocks:
            h = block(h)
        out = T.tanh(self.head(h))
        B = x.data.shape[0]
        return T.reshape(out, (B,) + self.chunk_shape)


def mse_bc_loss(model, obs_batch: np.ndarray, chunk_batch: np.ndarray) -> Tensor:
    obs = np.asarray(obs_batch)
    chunks = np.asarray(chunk_batch)
    if obs.ndim != 2 or chunks.ndim != 3 or obs.shape[0] != chunks.shape[0]:
        raise ShapeMismatch(f"need obs (B, D) and chunks (B, T, A), got "
                            f"{obs.shape} and {chunks.shape}")
    dtype = getattr(model, "dtype", np.float32)
    pred = model(Tensor(obs.astype(dtype)))
    return T.mse(pred, chunks.astype(dtype))


@dataclass(frozen=True)
class MlpSpec:
    obs_dim: int
    action_dim: int
    config: MlpPolicyConfig = field(default_factory=MlpPolicyConfig)
    obs_emb_dim: int = 128
    noise: StateNoiseConfig = field(default_factory=lambda: StateNoiseConfig(0.0))
    init_seed: int = 0

    def to_dict(self) -> dict:
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "blocks": self.config.blocks, "width": self.config.width,
                "chunked": self.config.chunked, "obs_emb_dim": self.obs_emb_dim,
                "noise_sigma": self.noise.sigma, "init_seed": self.init_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        try:
            return cls(obs_dim=int(d["obs_dim"]), action_dim=int(d["action_dim"]),
                       config=MlpPolicyConfig(blocks=int(d["blocks"]),
                                              width=int(d["width"]),
                                              chunked=bool(d["chunked"])),
                       obs_emb_dim=int(d["obs_emb_dim"]),
                       noise=StateNoiseConfig(float(d["noise_sigma"])),
                       init_seed=int(d["init_seed"]))
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"malformed mlp policy spec: {e}") from e


class MlpPolicy:
    """Deterministic regression policy with the diffusion policy's interface."""

    kind = "mlp"

    def __init__(self, spec: MlpSpec, stats: NormStats, dtype=np.float32):
        self.spec = spec
        self.stats = stats
        chunking = spec.config.chunking()
        chunk_shape = (chunking.pred_horizon, spec.action_dim)
        self.model = ResidualMlp(spec.obs_dim, chunk_shape, spec.config,
                                 spec.obs_emb_dim, np.random.default_rng(spec.init_seed),
                                 dtype=dtype)

    @property
    def chunking(self) -> ChunkingConfig:
        return self.spec.config.chunking()

    def loss(self, obs_norm: np.ndarray, chunks_norm: np.ndarray,
             rng: np.random.Generator) -> Tensor:
        obs = inject_proprio_noise(obs_norm, self.spec.noise, rng)
        return mse_bc_loss(self.model, obs, chunks_norm)

    def act_batch(self, raw_obs: np.ndarray, rng=None, **_ignored) -> np.ndarray:
        obs_n = self.stats.normalize_obs(np.atleast_2d(raw_obs))
        with T.no_grad():
            out = self.model(obs_n).data
        return self.stats.denormalize_act(np.asarray(out, dtype=np.float64))

    def act(self, raw_obs: np.ndarray, rng=None, **kw) -> np.ndarray:
        return self.act_batch(raw_obs[None, :], rng, **kw)[0]

    def save(self, path):
        nn.save_checkpoint(path, self.model,
                           meta={"policy": "mlp", "spec": self.spec.to_dict(),
                                 "stats": self.stats.to_dict()})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "MlpPolicy":
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("policy") != "mlp":
            raise SchemaViolation(f"checkpoint holds a {meta.get('policy')!r} policy, "
                                  "expected mlp")
        policy = cls(MlpSpec.from_dict(meta["spec"]),
                     NormStats.from_dict(meta["stats"]), dtype=dtype)
        policy.model.load_state_dict(arrays)
        policy.model.astype(dtype)
        return policy
