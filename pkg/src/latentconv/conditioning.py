"""Speaker, content and time conditioning, and the conditioned field network.

Sequences are (dim, frames) like feature matrices; the networks see frames as rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnkernel import DenseNet, ShapeError
from .schedule import ConfigError

CONTENT_KERNEL = (0.15, 0.7, 0.15)


@dataclass(frozen=True)
class ConditioningBundle:
    speaker: int
    s: np.ndarray  # (Ds,)
    p: np.ndarray  # (Dp, N)

    @property
    def frames(self) -> int:
        return self.p.shape[1]


class SpeakerTable:
    """Learned lookup standing in for a pretrained speaker encoder."""

    def __init__(self, count: int, dim: int = 16, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.table = (rng.standard_normal((count, dim)) * 0.5).astype(dtype)

    @property
    def count(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def params(self):
        return [self.table]


def speaker_embed(table: SpeakerTable, speaker_id: int) -> np.ndarray:
    if not (0 <= int(speaker_id) < table.count) or int(speaker_id) != speaker_id:
        raise KeyError(f"unknown speaker id {speaker_id}")
    return table.table[int(speaker_id)].copy()


def content_embed(codes, alphabet_size: int = 8) -> np.ndarray:
    """One-hot codes smoothed over +-1 frame; returns (alphabet_size, N)."""
    codes = np.asarray(codes)
    if codes.ndim != 1:
        raise ShapeError("codes must be a 1-D sequence")
    if codes.size and (codes.min() < 0 or codes.max() >= alphabet_size):
        bad = codes[(codes < 0) | (codes >= alphabet_size)][0]
        raise KeyError(f"unknown content code {int(bad)}")
    n = len(codes)
    onehot = np.zeros((alphabet_size, n))
    onehot[codes, np.arange(n)] = 1.0
    if n < 2:
        return onehot
    padded = np.pad(onehot, ((0, 0), (1, 1)), mode="edge")
    a, b, c = CONTENT_KERNEL
    return a * padded[:, :-2] + b * padded[:, 1:-1] + c * padded[:, 2:]


def sinusoidal(t, dim: int = 32, scale: float = 100.0) -> np.ndarray:
    """Raw sinusoidal encoding of t (scalar or 1-D array) -> (len(t), dim)."""
    if dim % 2:
        raise ConfigError("time embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = (t * scale)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimeEmbedding:
    """Sinusoidal encoding followed by three dense layers with two Mish activations."""

    def __init__(self, dim=32, hidden=64, scale=100.0, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.scale = dim, scale
        self.mlp = DenseNet.build([dim, hidden, hidden, dim], ["mish", "mish", "identity"], rng, dtype)

    def params(self):
        return self.mlp.params()

    def __call__(self, t):
        return self.mlp.forward(sinusoidal(t, self.dim, self.scale).astype(self.mlp.dtype))


def time_embed(t: float, dim: int = 32, mlp: TimeEmbedding | None = None) -> np.ndarray:
    if mlp is None:
        return sinusoidal(t, dim)[0]
    return mlp(t)[0]


class ConditionedNet:
    """Frame-wise field/score network: [x, s, p, time(t)] -> output of x's dim.

    ``n_speakers=0`` or ``content_dim=0`` drop that conditioning input.
    """

    def __init__(
        self,
        data_dim: int,
        n_speakers: int = 4,
        speaker_dim: int = 16,
        content_dim: int = 8,
        time_dim: int = 32,
        time_hidden: int = 64,
        hidden: int = 128,
        depth: int = 3,
        time_scale: float = 100.0,
        rng=None,
        dtype=np.float64,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.data_dim = data_dim
        self.content_dim = content_dim
        self.speakers = SpeakerTable(n_speakers, speaker_dim, rng, dtype) if n_speakers else None
        self.speaker_dim = speaker_dim if n_speakers else 0
        self.time = TimeEmbedding(time_dim, time_hidden, time_scale, rng, dtype)
        in_dim = data_dim + self.speaker_dim + content_dim + time_dim
        self.net = DenseNet.mlp(in_dim, data_dim, hidden, depth, "leaky_relu", rng, dtype)

    @property
    def dtype(self):
        return self.net.dtype

    def params(self):
        out = self.net.params() + self.time.params()
        if self.speakers is not None:
            out += self.speakers.params()
        return out

    def param_names(self):
        names = [f"net.layer{i // 2}.{'w' if i % 2 == 0 else 'b'}" for i in range(len(self.net.params()))]
        names += [f"time.layer{i // 2}.{'w' if i % 2 == 0 else 'b'}" for i in range(len(self.time.params()))]
        if self.speakers is not None:
            names.append("speakers.table")
        return names

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def _inputs(self, x, t, speaker, p):
        m = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ShapeError(f"expected (*, {self.data_dim}) frames, got {x.shape}")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (m,))
        t_unique, t_inv = np.unique(t_arr, return_inverse=True)
        enc = sinusoidal(t_unique, self.time.dim, self.time.scale).astype(self.dtype)
        temb_u, tcache = self.time.mlp.forward_cache(enc)
        parts = [x]
        spk = None
        if self.speakers is not None:
            spk = np.broadcast_to(np.asarray(speaker, dtype=np.int64), (m,))
            if spk.size and (spk.min() < 0 or spk.max() >= self.speakers.count):
                raise KeyError("unknown speaker id")
            parts.append(self.speakers.table[spk])
        if self.content_dim:
            p = np.asarray(p, dtype=self.dtype)
            if p.shape != (m, self.content_dim):
                raise ShapeError(f"content rows {p.shape} != ({m}, {self.content_dim})")
            parts.append(p)
        parts.append(temb_u[t_inv.reshape(-1)])
        return np.concatenate(parts, axis=1), (t_inv.reshape(-1), len(t_unique), tcache, spk)

    def forward(self, x, t, speaker=None, p=None):
        """x (M, d) frames; t scalar or (M,); speaker int or (M,); p (M, Dp)."""
        inp, _ = self._inputs(x, t, speaker, p)
        return self.net.forward(inp)

    def forward_cache(self, x, t, speaker=None, p=None):
        inp, extra = self._inputs(x, t, speaker, p)
        out, cache = self.net.forward_cache(inp)
        return out, (cache, extra)

    def backward(self, cache, grad_out):
        """Parameter grads (aligned with params()) and the grad w.r.t. x."""
        net_cache, (t_inv, n_unique, tcache, spk) = cache
        net_grads, g_in = self.net.backward(net_cache, grad_out)
        d = self.data_dim
        g_x = g_in[:, :d]
        off = d
        g_spk = None
        if self.speakers is not None:
            g_rows = g_in[:, off : off + self.speaker_dim]
            g_spk = np.zeros_like(self.speakers.table)
            np.add.at(g_spk, spk, g_rows)
            off += self.speaker_dim
        off += self.content_dim
        g_t_rows = g_in[:, off:]
        g_t = np.zeros((n_unique, g_t_rows.shape[1]), dtype=g_t_rows.dtype)
        np.add.at(g_t, t_inv, g_t_rows)
        time_grads, _ = self.time.mlp.backward(tcache, g_t)
        grads = net_grads + time_grads
        if g_spk is not None:
            grads.append(g_spk)
        return grads, g_x

    def bundle(self, speaker: int, codes, alphabet_size: int | None = None) -> ConditioningBundle:
        s = speaker_embed(self.speakers, speaker) if self.speakers is not None else np.zeros(0)
        p = content_embed(codes, alphabet_size or self.content_dim)
        return ConditioningBundle(int(speaker), s, p)
