"""Parameter containers and checkpoint I/O on top of the tensor library.

Modules are plain objects; named_parameters() walks attributes recursively
so checkpoint names mirror the attribute path ("mid.conv1.w"). Checkpoints
are .npz archives (named float arrays) with a JSON metadata entry.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

from .errors import SchemaViolation
from .tensor import Parameter, Tensor

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


class Module:
    """Base class: any attribute that is a Parameter, Module, or list of
    those participates in named_parameters()."""

    def named_parameters(self, prefix: str = ""):
        for key in sorted(vars(self)):
            val = vars(self)[key]
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise SchemaViolation(f"parameter names do not match: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise SchemaViolation(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.data.shape}",
                                      path=name)
            p.data = arr.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place; returns self for chaining."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _walk(val, path):
    if isinstance(val, Parameter):
        yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=path + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{path}.{i}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        k = 1.0 / np.sqrt(n_in)
        self.w = Parameter(rng.uniform(-k, k, size=(n_in, n_out)), "w")
        self.b = Parameter(rng.uniform(-k, k, size=(n_out,)), "b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        from . import tensor as T
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Conv1d(Module):
    """Channels-last temporal convolution module."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        k = 1.0 / np.sqrt(c_in * kernel)
        self.w = Parameter(rng.uniform(-k, k, size=(kernel, c_in, c_out)), "w")
        self.b = Parameter(rng.uniform(-k, k, size=(c_out,)), "b")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        from . import tensor as T
        return T.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels), "gamma")
        self.beta = Parameter(np.zeros(channels), "beta")
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        from . import tensor as T
        return T.group_norm(x, self.gamma, self.beta, self.groups, eps=self.eps)


def save_checkpoint(path, model: Module, meta: dict | None = None):
    """Write named parameter arrays plus a JSON metadata blob."""
    payload = {name: p.data for name, p in model.named_parameters()}
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    payload[_META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (arrays, meta). Corrupt files raise SchemaViolation."""
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, KeyError) as e:
        raise SchemaViolation(f"unreadable checkpoint {path}: {e}") from e
    raw = arrays.pop(_META_KEY, None)
    if raw is None:
        raise SchemaViolation("checkpoint missing metadata entry", path=_META_KEY)
    try:
        header = json.loads(raw.tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaViolation(f"checkpoint metadata is not valid JSON: {e}", path=_META_KEY) from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise SchemaViolation(f"unsupported checkpoint version {header.get('version')}")
    return arrays, header.get("meta", {})


def load_into(model: Module, path) -> dict:
    arrays, meta = load_checkpoint(path)
    model.load_state_dict(arrays)
    return meta
