"""Shared test utilities: finite-difference gradient checking.

Checks run in float64; central differences with step 1e-4 against tape
gradients, elementwise relative error bounded by 1e-4.
"""

import numpy as np

from pressfit.tensor import Tensor


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=requires_grad, dtype=np.float64)


def scalarize(out, rng):
    """Reduce an op output to a scalar with fixed random weights so the
    backward pass sees a non-uniform incoming gradient."""
    from pressfit import tensor as T
    w = Tensor(rng.uniform(-1, 1, size=out.shape), dtype=np.float64)
    return T.tsum(T.mul(out, w))


def fd_gradients(build_loss, tensors, h=1e-4):
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def check_gradients(build_loss, tensors, h=1e-4, tol=1e-4):
    """Returns the worst relative error across all checked tensors."""
    for t in tensors:
        t.grad = None
    loss = build_loss()
    loss.backward()
    numeric = fd_gradients(build_loss, tensors, h=h)
    worst = 0.0
    for t, fd in zip(tensors, numeric):
        assert t.grad is not None, "tensor got no gradient"
        err = np.abs(t.grad - fd) / (np.maximum(np.abs(t.grad), np.abs(fd)) + 1e-6)
        worst = max(worst, float(err.max()))
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def toy_trajectories(n=6, length=24, seed=0):
    """Small synthetic demo corpus with one shared smooth action pattern."""
    from pressfit.data import Trajectory
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    pattern = 0.5 * np.sin(t[:, None] / 3.0 + np.linspace(0, 3, 10)[None, :])
    out = []
    for i in range(n):
        obs = rng.uniform(-1.0, 1.0, size=(length, 38))
        acts = pattern + 0.01 * rng.standard_normal((length, 10))
        out.append(Trajectory(task="one_peg", source="scripted", seed=i,
                              success=True, randomness="low",
                              observations=obs, actions=acts))
    return out
