"""Conditional flow matching on straight-line paths and the fixed-step Euler sampler.

Arrays are frame-rows (frames, dim). Time runs from noise (t=0) to data (t=1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Sample, _cond_rows
from .nnkernel import ShapeError, TrainingError
from .schedule import ConfigError


class SamplingError(RuntimeError):
    pass


@dataclass
class CfmBatch:
    x1: np.ndarray  # data (M, d)
    x0: np.ndarray  # N(0, I) draw
    t: np.ndarray  # (M,)
    eps: np.ndarray  # path jitter
    sigma: float = 0.01
    speaker: np.ndarray | None = None
    p: np.ndarray | None = None


def sample_path_point(x0, x1, t, sigma, eps):
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError("path endpoints differ in shape")
    if sigma:
        eps = np.asarray(eps)
        if eps.shape != x0.shape:
            raise ShapeError("jitter shape differs from path endpoints")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t[:, None]
    x = t * x1 + (1.0 - t) * x0
    return x + sigma * eps if sigma else x


def cfm_target(x0, x1):
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError("x0 and x1 shapes differ")
    return x1 - x0


def make_cfm_batch(x1, rng, sigma=0.01, speaker=None, p=None, groups=None):
    """Draw t ~ U(0,1) (one per group of rows, default per row), x0 and eps ~ N(0, I)."""
    m = x1.shape[0]
    if groups is None:
        t = rng.random(m)
    else:
        t = rng.random(int(groups.max()) + 1)[groups]
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    eps = rng.standard_normal(x1.shape).astype(x1.dtype)
    return CfmBatch(x1, x0, t, eps, sigma, speaker, p)


def cfm_train_loss(net, batch: CfmBatch, with_grad=False):
    """Mean absolute error between v(x_t, t, s, p) and x1 - x0."""
    x_t = sample_path_point(batch.x0, batch.x1, batch.t, batch.sigma, batch.eps).astype(batch.x1.dtype)
    target = cfm_target(batch.x0, batch.x1)
    if with_grad:
        pred, cache = net.forward_cache(x_t, batch.t, batch.speaker, batch.p)
    else:
        pred = net.forward(x_t, batch.t, batch.speaker, batch.p)
    if pred.shape != target.shape:
        raise ShapeError(f"net output {pred.shape} != data {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.abs(diff), dtype=np.float64))
    if not np.isfinite(loss):
        raise TrainingError("non-finite flow-matching loss")
    if not with_grad:
        return loss
    grads, _ = net.backward(cache, np.sign(diff) / diff.size)
    return loss, grads


def noise_mix(x, r: float, eps):
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"noise fraction must lie in [0, 1], got {r}")
    return (1.0 - r) * np.asarray(x) + r * np.asarray(eps)


def euler_integrate(net, x_init, L: int, cond, keep_trajectory=False) -> Sample:
    """x <- x + v(x, l/L) / L for l = 1..L."""
    if L < 1:
        raise ValueError("step count must be >= 1")
    speaker, p = _cond_rows(cond)
    x = np.array(x_init, copy=True)
    traj = [x.copy()] if keep_trajectory else []
    h = 1.0 / L
    for l in range(1, L + 1):
        v = net.forward(x, l / L, speaker, p)
        x = (x + h * v).astype(x_init.dtype, copy=False)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at Euler step {l}")
        if keep_trajectory:
            traj.append(x.copy())
    return Sample(x, L, traj)
