"""Synthetic speakers-by-content corpus with exact Bayes oracles.

Each frame of speaker k saying code c is drawn from N(mu[k, c], diag(std[k, c]^2)).
Features are standardized with one scalar mean/std taken from the training split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

MAGIC = b"LVGU"
VERSION = 1
_HEADER = struct.Struct("<4sHIIH")


class SpecError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 4
    alphabet: int = 8
    dim: int = 80
    content_scale: float = 1.0
    speaker_scale: float = 0.7
    interaction_scale: float = 0.3
    noise_scale: float = 0.5
    noise_spread: float = 0.3  # per-(k, c, dim) std in noise_scale * [1 - spread, 1 + spread]
    min_frames: int = 40
    max_frames: int = 80
    min_dwell: int = 5
    max_dwell: int = 12
    n_train: int = 200
    n_heldout: int = 40
    template_seed: int = 1234

    def validate(self):
        if self.n_speakers < 2:
            raise SpecError("need at least 2 speakers")
        if self.alphabet < 2:
            raise SpecError("need at least 2 content codes")
        if self.alphabet > 256 or self.n_speakers > 65535:
            raise SpecError("codes must fit u8 and speakers u16")
        if not 1 <= self.min_dwell <= self.max_dwell:
            raise SpecError("bad dwell range")
        if not self.min_dwell <= self.min_frames <= self.max_frames:
            raise SpecError("bad length range")
        if not 0 <= self.noise_spread < 1 or self.noise_scale <= 0:
            raise SpecError("bad noise parameters")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown corpus keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Law:
    """Template bank in standardized units: mean/std arrays of shape (K, C, D)."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def n_speakers(self) -> int:
        return self.mean.shape[0]

    @property
    def alphabet(self) -> int:
        return self.mean.shape[1]

    @property
    def dim(self) -> int:
        return self.mean.shape[2]


def template_bank(spec: CorpusSpec):
    """Raw (unstandardized) template means and stds, fully determined by the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.template_seed)
    K, C, D = spec.n_speakers, spec.alphabet, spec.dim
    content = rng.standard_normal((1, C, D)) * spec.content_scale
    speaker = rng.standard_normal((K, 1, D)) * spec.speaker_scale
    inter = rng.standard_normal((K, C, D)) * spec.interaction_scale
    mean = content + speaker + inter
    std = spec.noise_scale * rng.uniform(1 - spec.noise_spread, 1 + spec.noise_spread, size=(K, C, D))
    sep = min(
        np.linalg.norm(mean[k, c] - mean[j, c])
        for c in range(C)
        for k in range(K)
        for j in range(K)
        if k != j
    )
    if sep < 4 * spec.noise_scale:
        raise SpecError(f"speaker templates separated by {sep:.3f} < 4 x noise scale")
    return mean, std


@dataclass
class Utterance:
    features: np.ndarray  # (D, N) float32, standardized
    speaker: int
    codes: np.ndarray  # (N,) uint8
    name: str = ""

    @property
    def frames(self) -> int:
        return self.features.shape[1]


@dataclass
class Corpus:
    spec: CorpusSpec
    seed: int
    norm_mean: float
    norm_std: float
    train: list[Utterance] = field(default_factory=list)
    heldout: list[Utterance] = field(default_factory=list)

    @property
    def law(self) -> Law:
        mean, std = template_bank(self.spec)
        return Law((mean - self.norm_mean) / self.norm_std, std / self.norm_std)


def _codes(spec: CorpusSpec, rng) -> np.ndarray:
    target = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    out = []
    prev = -1
    while len(out) < target:
        c = int(rng.integers(spec.alphabet - (prev >= 0)))
        if prev >= 0 and c >= prev:
            c += 1
        out += [c] * int(rng.integers(spec.min_dwell, spec.max_dwell + 1))
        prev = c
    return np.asarray(out, dtype=np.uint8)


def _raw_utterance(spec, mean, std, speaker, rng):
    codes = _codes(spec, rng)
    noise = rng.standard_normal((len(codes), spec.dim))
    frames = mean[speaker, codes] + std[speaker, codes] * noise
    return frames.T, codes


def sample_raw(spec: CorpusSpec, n: int, rng, mean=None, std=None):
    if mean is None:
        mean, std = template_bank(spec)
    out = []
    for i in range(n):
        spk = i % spec.n_speakers
        out.append((spk,) + _raw_utterance(spec, mean, std, spk, rng))
    return out


def gen_corpus(spec: CorpusSpec, seed: int = 0) -> Corpus:
    """Deterministic train/held-out split; speakers are cycled so each is balanced."""
    mean, std = template_bank(spec)
    rng = np.random.default_rng(seed)
    raw_train = sample_raw(spec, spec.n_train, rng, mean, std)
    raw_held = sample_raw(spec, spec.n_heldout, rng, mean, std)
    all_train = np.concatenate([f.ravel() for _, f, _ in raw_train])
    m, s = float(all_train.mean()), float(all_train.std())

    def wrap(raw, prefix):
        return [
            Utterance(((f - m) / s).astype(np.float32), spk, codes, f"{prefix}_{i:04d}")
            for i, (spk, f, codes) in enumerate(raw)
        ]

    return Corpus(spec, seed, m, s, wrap(raw_train, "train"), wrap(raw_held, "heldout"))


def fresh_utterances(corpus: Corpus, n: int, seed: int) -> list[Utterance]:
    """New utterances from the same law, standardized with the corpus statistics."""
    raw = sample_raw(corpus.spec, n, np.random.default_rng(seed))
    return [
        Utterance(((f - corpus.norm_mean) / corpus.norm_std).astype(np.float32), spk, codes, f"fresh_{i:04d}")
        for i, (spk, f, codes) in enumerate(raw)
    ]


# -- oracles ---------------------------------------------------------------


def frame_loglik(x, law: Law) -> np.ndarray:
    """log N(x_n; mu[k,c], diag std[k,c]^2) for every frame -> (N, K, C)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != law.dim:
        raise ValueError(f"expected ({law.dim}, N) features, got {x.shape}")
    frames = x.T  # (N, D)
    inv_var = 1.0 / law.std**2  # (K, C, D)
    log_norm = -0.5 * np.sum(np.log(2 * np.pi * law.std**2), axis=-1)  # (K, C)
    # sum_d (x - mu)^2 / var expanded to keep memory at (N, K, C)
    quad = (
        (frames**2) @ inv_var.reshape(-1, law.dim).T
        - 2 * frames @ (law.mean * inv_var).reshape(-1, law.dim).T
        + np.sum(law.mean**2 * inv_var, axis=-1).reshape(1, -1)
    )
    return log_norm[None] - 0.5 * quad.reshape(len(frames), law.n_speakers, law.alphabet)


def oracle_speaker_classify(x, law: Law):
    """Bayes speaker decision under uniform priors, codes marginalized per frame.

    Returns (speaker_id, log_posterior (K,)).
    """
    ll = frame_loglik(x, law)
    per_speaker = np.sum(logsumexp(ll, axis=2) - np.log(law.alphabet), axis=0)
    log_post = per_speaker - logsumexp(per_speaker)
    return int(np.argmax(log_post)), log_post


def speaker_margin(log_post, target: int) -> float:
    others = np.delete(log_post, target)
    return float(log_post[target] - others.max())


def majority_smooth(codes, alphabet: int, width: int = 5) -> np.ndarray:
    codes = np.asarray(codes)
    n = len(codes)
    half = width // 2
    onehot = np.zeros((n + 2 * half, alphabet))
    onehot[np.arange(n) + half, codes] = 1.0
    csum = np.cumsum(np.vstack([np.zeros((1, alphabet)), onehot]), axis=0)
    counts = csum[width:] - csum[:-width]
    return np.argmax(counts, axis=1).astype(np.uint8)


def oracle_content_decode(x, law: Law, smooth_width: int = 5) -> np.ndarray:
    """Per-frame ML code (speakers marginalized), then majority smoothing."""
    ll = frame_loglik(x, law)
    per_code = logsumexp(ll, axis=1)  # (N, C)
    raw = np.argmax(per_code, axis=1)
    return majority_smooth(raw, law.alphabet, smooth_width)


# -- serialization ---------------------------------------------------------


def write_utterance(utt: Utterance, path) -> None:
    feats = np.ascontiguousarray(utt.features, dtype="<f4")
    d, n = feats.shape
    codes = np.asarray(utt.codes, dtype=np.uint8)
    if codes.shape != (n,):
        raise CorpusFormatError("codes length must equal frame count")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, d, n, utt.speaker))
        f.write(codes.tobytes())
        f.write(feats.tobytes())


def read_utterance(path) -> Utterance:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorpusFormatError(f"{path}: truncated header")
    magic, version, d, n, speaker = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n + 4 * d * n
    if len(data) != expected:
        raise CorpusFormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    codes = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size).copy()
    feats = np.frombuffer(data, dtype="<f4", count=d * n, offset=_HEADER.size + n)
    return Utterance(feats.reshape(d, n).astype(np.float32), int(speaker), codes, Path(path).stem)


def save_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "spec": asdict(corpus.spec),
        "seed": corpus.seed,
        "norm": {"mean": corpus.norm_mean, "std": corpus.norm_std},
        "train": [u.name for u in corpus.train],
        "heldout": [u.name for u in corpus.heldout],
    }
    for utt in corpus.train + corpus.heldout:
        write_utterance(utt, directory / f"{utt.name}.lvgu")
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    meta = json.loads((directory / "spec.json").read_text())
    spec = CorpusSpec.from_dict(meta["spec"])
    train = [read_utterance(directory / f"{n}.lvgu") for n in meta["train"]]
    held = [read_utterance(directory / f"{n}.lvgu") for n in meta["heldout"]]
    return Corpus(spec, meta["seed"], meta["norm"]["mean"], meta["norm"]["std"], train, held)
