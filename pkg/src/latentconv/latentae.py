"""Bottleneck autoencoder trained through a fixed render transform.

The render transform is a desk-scale stand-in for vocoder synthesis: each frame is
projected by a fixed matrix to a short windowed segment, segments are overlap-added
into a 1-D signal and squashed by tanh. A small dense discriminator scores
frame-length windows of that signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnkernel import Adam, DenseNet, ShapeError, TrainingError

LAMBDA = 45.0


# -- render / analysis ----------------------------------------------------


class Renderer:
    """Fixed overlap-add projection: (D, N) features -> 1-D signal of hop * (N + 1)."""

    def __init__(self, dim: int = 80, hop: int = 16, gain: float = 1.0, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.dim, self.hop, self.win = dim, hop, 2 * hop
        self.gain = gain
        self.proj = rng.standard_normal((self.win, dim)) / np.sqrt(dim)
        self.window = np.sin(np.pi * (np.arange(self.win) + 0.5) / self.win)
        # least-squares map from one windowed segment back to feature space
        self.analysis = np.linalg.pinv(self.window[:, None] * self.proj)

    def signal_length(self, frames: int) -> int:
        return self.hop * (frames + 1)

    def _segments(self, x):
        if x.ndim != 2 or x.shape[0] != self.dim:
            raise ShapeError(f"expected ({self.dim}, N) features, got {x.shape}")
        return (self.window[:, None] * (self.proj @ x)).T  # (N, win)

    def linear(self, x):
        seg = self._segments(x)
        n = seg.shape[0]
        out = np.zeros(self.signal_length(n))
        out[: n * self.hop] += seg[:, : self.hop].ravel()
        out[self.hop :] += seg[:, self.hop :].ravel()
        return out

    def render(self, x):
        return np.tanh(self.gain * self.linear(x))

    def render_backward(self, y, g_y):
        """Grad w.r.t. features given rendered output y and upstream g_y."""
        g_lin = g_y * (1.0 - y * y) * self.gain
        n = len(y) // self.hop - 1
        g_seg = np.concatenate([g_lin[: n * self.hop].reshape(n, self.hop), g_lin[self.hop :].reshape(n, self.hop)], axis=1)
        return self.proj.T @ (g_seg * self.window).T

    def windows(self, y):
        """Frame-aligned windows of length 2 * hop -> (N, win)."""
        n = len(y) // self.hop - 1
        return np.concatenate([y[: n * self.hop].reshape(n, self.hop), y[self.hop :].reshape(n, self.hop)], axis=1)

    def windows_backward(self, g_w):
        n = g_w.shape[0]
        g = np.zeros(self.signal_length(n))
        g[: n * self.hop] += g_w[:, : self.hop].ravel()
        g[self.hop :] += g_w[:, self.hop :].ravel()
        return g

    def analyze(self, y):
        """Fixed analysis transform of a rendered signal -> (D, N)."""
        return self.analysis @ self.windows(y).T

    def analyze_backward(self, g_a):
        return self.windows_backward((self.analysis.T @ g_a).T)


def render(x_hat, renderer: Renderer | None = None):
    renderer = renderer or Renderer(dim=np.asarray(x_hat).shape[0])
    return renderer.render(np.asarray(x_hat, dtype=np.float64))


# -- networks ---------------------------------------------------------------


def stack_context(x, context: int = 2):
    """(D, N) -> (N, D * (2 * context + 1)) with edge padding."""
    d, n = x.shape
    padded = np.pad(x, ((0, 0), (context, context)), mode="edge")
    cols = [padded[:, i : i + n] for i in range(2 * context + 1)]
    return np.concatenate(cols, axis=0).T


class Autoencoder:
    def __init__(self, dim=80, latent_dim=32, hidden=128, depth=3, context=2, rng=None, dtype=np.float64):
        if latent_dim >= dim:
            raise ValueError("bottleneck must be smaller than the feature dim")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.latent_dim, self.context = dim, latent_dim, context
        self.encoder = DenseNet.mlp(dim * (2 * context + 1), latent_dim, hidden, depth, rng=rng, dtype=dtype)
        self.decoder = DenseNet.mlp(latent_dim, dim, hidden, depth, rng=rng, dtype=dtype)

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def param_count(self):
        return sum(p.size for p in self.params())


def encode(ae: Autoencoder, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != ae.dim:
        raise ShapeError(f"expected ({ae.dim}, N) features, got {x.shape}")
    return ae.encoder.forward(stack_context(x.astype(ae.encoder.dtype), ae.context)).T


def decode(ae: Autoencoder, z):
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] != ae.latent_dim:
        raise ShapeError(f"expected ({ae.latent_dim}, N) latents, got {z.shape}")
    return ae.decoder.forward(z.T.astype(ae.decoder.dtype)).T


def recon_loss(ae: Autoencoder, x) -> float:
    return float(np.mean(np.abs(decode(ae, encode(ae, x)) - x)))


class Discriminator:
    """Scores render windows; hidden activations serve as feature-matching taps."""

    def __init__(self, win=32, hidden=64, depth=2, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = DenseNet.mlp(win, 1, hidden, depth, rng=rng, dtype=dtype)

    @property
    def n_taps(self):
        return len(self.net.layers) - 1

    def params(self):
        return self.net.params()

    def scores(self, windows):
        return self.net.forward(windows)[:, 0]

    def features(self, windows):
        _, cache = self.net.forward_cache(windows)
        return cache.post[:-1]


# -- losses -----------------------------------------------------------------


def kl_loss(z, per_dim=False, with_grad=False):
    """0.5 (var + mean^2 - 1 - log var) with moments over all elements of z (or per row)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two latent elements for a variance")
    if per_dim:
        mu = z.mean(axis=1, keepdims=True)
        var = z.var(axis=1, keepdims=True)
        n = z.shape[1]
        rows = z.shape[0]
    else:
        mu, var, n, rows = z.mean(), z.var(), z.size, 1
    if np.any(var <= 0):
        raise ValueError("degenerate latent: zero variance")
    loss = float(np.mean(0.5 * (var + mu**2 - 1.0 - np.log(var))))
    if not with_grad:
        return loss
    grad = (0.5 * (1.0 - 1.0 / var) * 2.0 * (z - mu) / n + mu / n) / rows
    return loss, grad


def lsgan_losses(d_real, d_fake) -> dict:
    """Least-squares adversarial terms from discriminator scores."""
    d_real, d_fake = np.asarray(d_real), np.asarray(d_fake)
    return {
        "adv_gen": float(np.mean((d_fake - 1.0) ** 2)),
        "adv_disc": float(np.mean((d_real - 1.0) ** 2) + np.mean(d_fake**2)),
    }


def feature_matching_loss(feats_real, feats_fake) -> float:
    """sum over layers of mean |f_fake - f_real| (mean = 1/N_i normalization)."""
    return float(sum(np.mean(np.abs(a - b)) for a, b in zip(feats_fake, feats_real)))


def disc_lsgan_losses(disc: Discriminator, real_windows, fake_windows) -> dict:
    return lsgan_losses(disc.scores(real_windows), disc.scores(fake_windows))


def disc_feature_matching(disc: Discriminator, real_windows, fake_windows) -> float:
    return feature_matching_loss(disc.features(real_windows), disc.features(fake_windows))


# -- training ---------------------------------------------------------------


@dataclass
class AeOptim:
    ae: Adam
    disc: Adam | None


def make_optim(ae: Autoencoder, disc: Discriminator | None, lr=2e-4, clip_norm=10.0) -> AeOptim:
    names = [f"encoder[{i}]" for i in range(len(ae.encoder.params()))]
    names += [f"decoder[{i}]" for i in range(len(ae.decoder.params()))]
    opt_ae = Adam(ae.params(), lr=lr, clip_norm=clip_norm, names=names)
    opt_d = Adam(disc.params(), lr=lr, clip_norm=clip_norm) if disc is not None else None
    return AeOptim(opt_ae, opt_d)


def _check_finite(parts: dict):
    for k, v in parts.items():
        if not np.isfinite(v):
            raise TrainingError(f"non-finite loss component {k}")


def ae_objective(ae, disc, batch, renderer, lam=LAMBDA, objective="adversarial", per_dim_kl=False):
    """Autoencoder loss breakdown and parameter grads (aligned with ae.params())."""
    adversarial = objective == "adversarial"
    dtype = ae.encoder.dtype
    enc_in = np.concatenate([stack_context(x.astype(dtype), ae.context) for x in batch])
    sizes = [x.shape[1] for x in batch]
    bounds = np.cumsum([0] + sizes)
    z, enc_cache = ae.encoder.forward_cache(enc_in)
    x_hat, dec_cache = ae.decoder.forward_cache(z)
    x_all = np.concatenate([x.T for x in batch]).astype(dtype)
    total = x_all.size

    diff = x_hat - x_all
    parts = {"rec": float(np.mean(np.abs(diff)))}
    g_xhat = lam * np.sign(diff) / total

    g_z = np.zeros_like(z, dtype=np.float64)
    kl_total = 0.0
    for i in range(len(batch)):
        zi = z[bounds[i] : bounds[i + 1]].T
        kl, gk = kl_loss(zi, per_dim=per_dim_kl, with_grad=True)
        kl_total += kl / len(batch)
        g_z[bounds[i] : bounds[i + 1]] += lam * gk.T / len(batch)
    parts["kl"] = kl_total

    if adversarial:
        g_xhat = g_xhat.astype(np.float64)
        fake_sig, real_sig, fake_win, real_win = [], [], [], []
        for i, x in enumerate(batch):
            xh = x_hat[bounds[i] : bounds[i + 1]].T.astype(np.float64)
            fs, rs = renderer.render(xh), renderer.render(x.astype(np.float64))
            fake_sig.append(fs)
            real_sig.append(rs)
            fake_win.append(renderer.windows(fs))
            real_win.append(renderer.windows(rs))
        # mel-analysis analog: fixed analysis of fake vs real renders
        n_mel = sum(x.size for x in batch)
        mel = 0.0
        g_sig = []
        for fs, rs in zip(fake_sig, real_sig):
            d = renderer.analyze(fs) - renderer.analyze(rs)
            mel += np.sum(np.abs(d)) / n_mel
            g_sig.append(renderer.analyze_backward(lam * np.sign(d) / n_mel))
        parts["mel"] = float(mel)

        fw = np.concatenate(fake_win).astype(disc.net.dtype)
        rw = np.concatenate(real_win).astype(disc.net.dtype)
        real_feats = disc.features(rw)
        d_fake, dcache = disc.net.forward_cache(fw)
        d_fake = d_fake[:, 0]
        parts["adv"] = float(np.mean((d_fake - 1.0) ** 2))
        fake_feats = dcache.post[:-1]
        parts["feat"] = feature_matching_loss(real_feats, fake_feats)
        g_out = (2.0 * (d_fake - 1.0) / len(d_fake))[:, None]
        taps = {i: np.sign(f - r) / f.size for i, (f, r) in enumerate(zip(fake_feats, real_feats))}
        _, g_win = disc.net.backward(dcache, g_out, taps)
        start = 0
        for i, fs in enumerate(fake_sig):
            n = sizes[i]
            g_total = g_sig[i] + renderer.windows_backward(g_win[start : start + n])
            start += n
            g_xhat[bounds[i] : bounds[i + 1]] += renderer.render_backward(fs, g_total).T

    parts["total"] = lam * (parts["rec"] + parts.get("mel", 0.0) + parts["kl"]) + parts.get("adv", 0.0) + parts.get("feat", 0.0)
    _check_finite(parts)
    dec_grads, g_zdec = ae.decoder.backward(dec_cache, g_xhat.astype(dtype))
    enc_grads, _ = ae.encoder.backward(enc_cache, (g_zdec + g_z).astype(dtype))
    return parts, enc_grads + dec_grads


def disc_objective(ae, disc, batch, renderer):
    """J_dis on real vs current (detached) reconstructions; returns (loss, grads)."""
    real_w, fake_w = [], []
    for x in batch:
        x_hat = decode(ae, encode(ae, x)).astype(np.float64)
        real_w.append(renderer.windows(renderer.render(x.astype(np.float64))))
        fake_w.append(renderer.windows(renderer.render(x_hat)))
    rw = np.concatenate(real_w).astype(disc.net.dtype)
    fw = np.concatenate(fake_w).astype(disc.net.dtype)
    both = np.concatenate([rw, fw])
    out, cache = disc.net.forward_cache(both)
    out = out[:, 0]
    n_r = len(rw)
    d_r, d_f = out[:n_r], out[n_r:]
    loss = float(np.mean((d_r - 1.0) ** 2) + np.mean(d_f**2))
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss component adv_disc")
    g = np.concatenate([2.0 * (d_r - 1.0) / n_r, 2.0 * d_f / len(d_f)])[:, None].astype(out.dtype)
    grads, _ = disc.net.backward(cache, g)
    return loss, grads


def ae_train_step(ae, disc, batch, optim: AeOptim, renderer, lam=LAMBDA, objective="adversarial", per_dim_kl=False):
    """One alternating update: discriminator first, then the autoencoder."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if objective not in ("adversarial", "regular"):
        raise ValueError(f"unknown objective {objective!r}")
    out = {}
    if objective == "adversarial":
        d_loss, d_grads = disc_objective(ae, disc, batch, renderer)
        optim.disc.step(d_grads)
        out["disc"] = d_loss
    parts, grads = ae_objective(ae, disc, batch, renderer, lam, objective, per_dim_kl)
    optim.ae.step(grads)
    out.update(parts)
    return out


def fooling_rate(judge: Discriminator, renderer, ae, utterances) -> float:
    """Fraction of reconstructed-render windows the judge scores as real (> 0.5)."""
    fake = [renderer.windows(renderer.render(decode(ae, encode(ae, u)).astype(np.float64))) for u in utterances]
    scores = judge.scores(np.concatenate(fake).astype(judge.net.dtype))
    return float(np.mean(scores > 0.5))


def train_judge(renderer, ae, utterances, steps=300, batch=8, lr=1e-3, seed=0, hidden=64):
    """Fresh discriminator fit on real vs reconstructed renders (same protocol for any AE)."""
    rng = np.random.default_rng(seed)
    judge = Discriminator(renderer.win, hidden, rng=rng)
    opt = Adam(judge.params(), lr=lr, clip_norm=10.0)
    real = [renderer.windows(renderer.render(u.astype(np.float64))) for u in utterances]
    fake = [renderer.windows(renderer.render(decode(ae, encode(ae, u)).astype(np.float64))) for u in utterances]
    for _ in range(steps):
        idx = rng.choice(len(utterances), size=min(batch, len(utterances)), replace=False)
        rw = np.concatenate([real[i] for i in idx])
        fw = np.concatenate([fake[i] for i in idx])
        out, cache = judge.net.forward_cache(np.concatenate([rw, fw]))
        out = out[:, 0]
        d_r, d_f = out[: len(rw)], out[len(rw) :]
        g = np.concatenate([2.0 * (d_r - 1.0) / len(rw), 2.0 * d_f / len(fw)])[:, None]
        grads, _ = judge.net.backward(cache, g)
        opt.step(grads)
    return judge
