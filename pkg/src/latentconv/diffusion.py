"""Noise-prediction training loss and reverse-diffusion sampling.

Arrays are frame-rows: shape (frames, dim). ``net`` is anything exposing
``forward(x, t, speaker, p)``; training additionally needs ``forward_cache``
and ``backward`` (see ConditionedNet).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnkernel import ShapeError, TrainingError
from .schedule import NoiseSchedule


@dataclass
class DpmBatch:
    x0: np.ndarray  # (M, d)
    l: np.ndarray  # (M,) timesteps in [1, L]
    eps: np.ndarray  # (M, d)
    speaker: np.ndarray | None = None  # (M,)
    p: np.ndarray | None = None  # (M, Dp)


@dataclass
class Sample:
    x: np.ndarray
    nfe: int
    trajectory: list = field(default_factory=list)


def _cond_rows(cond):
    if cond is None:
        return None, None
    return cond.speaker, cond.p.T


def forward_diffuse(x0, l, eps, sched: NoiseSchedule):
    """x_l = sqrt(abar_l) x0 + sqrt(1 - abar_l) eps; l scalar or per-row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError("x0 and eps shapes differ")
    l = np.asarray(l)
    if np.any((l < 1) | (l > sched.L)):
        raise IndexError(f"timestep outside [1, {sched.L}]")
    abar = sched.alpha_bar[l - 1]
    if abar.ndim == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def make_dpm_batch(x0, sched: NoiseSchedule, rng, speaker=None, p=None, groups=None):
    """Draw l ~ U[1..L] (one per group of rows, default per row) and eps ~ N(0, I)."""
    m = x0.shape[0]
    if groups is None:
        l = rng.integers(1, sched.L + 1, size=m)
    else:
        l = rng.integers(1, sched.L + 1, size=int(groups.max()) + 1)[groups]
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    return DpmBatch(x0, l, eps, speaker, p)


def dpm_train_loss(net, batch: DpmBatch, sched: NoiseSchedule, with_grad=False):
    """Mean absolute error between predicted and injected noise."""
    x_l = forward_diffuse(batch.x0, batch.l, batch.eps, sched).astype(batch.x0.dtype)
    t = batch.l / sched.L
    if with_grad:
        pred, cache = net.forward_cache(x_l, t, batch.speaker, batch.p)
    else:
        pred = net.forward(x_l, t, batch.speaker, batch.p)
    if pred.shape != batch.eps.shape:
        raise ShapeError(f"net output {pred.shape} != data {batch.eps.shape}")
    diff = pred - batch.eps
    loss = float(np.mean(np.abs(diff), dtype=np.float64))
    if not np.isfinite(loss):
        raise TrainingError("non-finite diffusion loss")
    if not with_grad:
        return loss
    grads, _ = net.backward(cache, np.sign(diff) / diff.size)
    return loss, grads


def reverse_step(net, x_l, l: int, cond, sched: NoiseSchedule, eps=None):
    """One ancestral step x_l -> x_{l-1} with the reparametrized mean."""
    alpha, abar, nu = sched.at(l)
    speaker, p = _cond_rows(cond)
    eps_hat = net.forward(x_l, l / sched.L, speaker, p)
    if eps_hat.shape != x_l.shape:
        raise ShapeError("net output shape differs from state")
    mean = (x_l - ((1.0 - alpha) / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
    if eps is None:
        return mean
    return mean + nu * eps


def reverse_sample(
    net, x_init, L_start: int, cond, sched: NoiseSchedule, rng, final_noise=False, keep_trajectory=False
) -> Sample:
    """Run reverse steps l = L_start .. 1 from x_init.

    Conversion passes the clean source as x_init; generation passes N(0, I).
    Noise is skipped at l = 1 unless ``final_noise``.
    """
    if not 1 <= L_start <= sched.L:
        raise ValueError(f"L_start must lie in [1, {sched.L}], got {L_start}")
    x = np.array(x_init, copy=True)
    traj = [x.copy()] if keep_trajectory else []
    nfe = 0
    for l in range(L_start, 0, -1):
        eps = rng.standard_normal(x.shape).astype(x.dtype)
        if l == 1 and not final_noise:
            eps = None
        x = reverse_step(net, x, l, cond, sched, eps).astype(x_init.dtype, copy=False)
        nfe += 1
        if keep_trajectory:
            traj.append(x.copy())
    return Sample(x, nfe, traj)
