"""Oracle-based conversion metrics, r / L sweeps, timing benchmarks, PGM dumps.

Metric names are proxies (speaker hit rate, content frame accuracy, log-posterior
margin); they are not perceptual scores.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .config import PipelineKind, SamplerConfig
from .pipeline import Models, convert
from .schedule import ConfigError
from .synthcorpus import (
    Law,
    Utterance,
    frame_loglik,
    oracle_content_decode,
    oracle_speaker_classify,
    speaker_margin,
)

R_GRID = tuple(round(0.1 * i, 1) for i in range(11))
L_GRID = (1, 2, 3, 5, 10, 20)


@dataclass
class ConvertedItem:
    features: np.ndarray  # (D, N)
    source_codes: np.ndarray
    target: int
    name: str = ""


@dataclass
class UtteranceScore:
    name: str
    target: int
    hit: bool
    margin: float  # per-frame log-posterior margin of the target speaker
    content_acc: float
    frame_hit: float = float("nan")  # fraction of frames individually assigned to the target
    content_raw: float = float("nan")  # frame code accuracy before majority smoothing


@dataclass
class ConversionReport:
    rows: list = field(default_factory=list)

    @property
    def similarity_acc(self) -> float:
        return float(np.mean([r.hit for r in self.rows])) if self.rows else float("nan")

    @property
    def content_acc(self) -> float:
        return float(np.mean([r.content_acc for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_margin(self) -> float:
        return float(np.mean([r.margin for r in self.rows])) if self.rows else float("nan")

    @property
    def frame_similarity(self) -> float:
        """Graded similarity: mean fraction of frames the oracle gives to the target."""
        return float(np.mean([r.frame_hit for r in self.rows])) if self.rows else float("nan")

    @property
    def content_raw(self) -> float:
        return float(np.mean([r.content_raw for r in self.rows])) if self.rows else float("nan")


def eval_conversion(items, law: Law) -> ConversionReport:
    report = ConversionReport()
    for it in items:
        x = np.asarray(it.features)
        if x.shape[0] != law.dim:
            raise ValueError(f"converted features have dim {x.shape[0]}, corpus dim is {law.dim}")
        spk, log_post = oracle_speaker_classify(x, law)
        codes = oracle_content_decode(x, law)
        src = np.asarray(it.source_codes)
        ll = frame_loglik(x, law)
        frame_spk = np.argmax(logsumexp(ll, axis=2), axis=1)
        frame_code = np.argmax(logsumexp(ll, axis=1), axis=1)
        report.rows.append(
            UtteranceScore(
                it.name,
                it.target,
                spk == it.target,
                speaker_margin(log_post, it.target) / x.shape[1],
                float(np.mean(codes == src)),
                float(np.mean(frame_spk == it.target)),
                float(np.mean(frame_code == src)),
            )
        )
    return report


def conversion_pairs(utterances: list[Utterance], n_speakers: int, targets_per_utt: int | None = None):
    """Each utterance to every other speaker (or the first few in cyclic order)."""
    k = n_speakers - 1 if targets_per_utt is None else targets_per_utt
    return [(u, (u.speaker + j) % n_speakers) for u in utterances for j in range(1, k + 1)]


def run_conversions(kind, models: Models, pairs, sampler: SamplerConfig, seed=0):
    items, nfe = [], []
    for utt, target in pairs:
        out = convert(kind, models, utt, target, sampler, seed)
        items.append(ConvertedItem(out.features, utt.codes, target, f"{utt.name}->{target}"))
        nfe.append(out.nfe)
    return items, nfe


SWEEP_FIELDS = ("kind", "r", "L", "similarity_acc", "content_acc", "mean_margin")


@dataclass
class SweepRow:
    kind: str
    r: float
    L: int
    report: ConversionReport

    def as_dict(self):
        return {
            "kind": self.kind,
            "r": f"{self.r:.1f}",
            "L": self.L,
            "similarity_acc": f"{self.report.similarity_acc:.6f}",
            "content_acc": f"{self.report.content_acc:.6f}",
            "mean_margin": f"{self.report.mean_margin:.6f}",
        }


def _fm_only(kind):
    kind = PipelineKind.parse(kind) if isinstance(kind, str) else kind
    if kind.model != "fm":
        raise ConfigError("sweeps over r / L apply to flow-matching kinds only")
    return kind


def sweep_r(kind, models, pairs, law, r_grid=R_GRID, L=10, seed=0):
    kind = _fm_only(kind)
    rows = []
    for r in r_grid:
        items, _ = run_conversions(kind, models, pairs, SamplerConfig(noise_frac=r, steps=L), seed)
        rows.append(SweepRow(kind.name, r, L, eval_conversion(items, law)))
    return rows


def sweep_L(kind, models, pairs, law, L_grid=L_GRID, r=0.7, seed=0):
    kind = _fm_only(kind)
    rows = []
    for L in L_grid:
        items, _ = run_conversions(kind, models, pairs, SamplerConfig(noise_frac=r, steps=L), seed)
        rows.append(SweepRow(kind.name, r, L, eval_conversion(items, law)))
    return rows


def rows_to_csv(rows, fields, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_dict() if hasattr(r, "as_dict") else r)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


BENCH_FIELDS = ("kind", "Lprime_or_L", "nfe", "ms_per_100_frames", "param_count")


@dataclass
class BenchRecord:
    kind: str
    steps: int
    nfe: int
    ms_per_100_frames: float
    param_count: int

    def as_dict(self):
        return {
            "kind": self.kind,
            "Lprime_or_L": self.steps,
            "nfe": self.nfe,
            "ms_per_100_frames": f"{self.ms_per_100_frames:.4f}",
            "param_count": self.param_count,
        }


def pipeline_param_count(kind, models: Models) -> int:
    """Generator parameters (time MLP and speaker table included)."""
    return models.generators[PipelineKind.parse(kind).name if isinstance(kind, str) else kind.name].param_count()


def bench(configs, models: Models, utterances, repetitions=5, warmup=1, seed=0):
    """Median wall-clock per configuration; ``configs`` is [(kind, SamplerConfig)]."""
    frames = sum(u.frames for u in utterances)
    records = []
    for kind, sampler in configs:
        k = PipelineKind.parse(kind)
        times, nfe = [], None
        for rep in range(warmup + repetitions):
            t0 = time.perf_counter()
            for u in utterances:
                out = convert(k, models, u, (u.speaker + 1) % models.generators[k.name].speakers.count, sampler, seed)
            dt = time.perf_counter() - t0
            nfe = out.nfe
            if rep >= warmup:
                times.append(dt)
        steps = sampler.lprime if k.model == "dpm" else sampler.steps
        ms = 1000.0 * float(np.median(times)) * 100.0 / frames
        records.append(BenchRecord(k.name, steps, nfe, ms, pipeline_param_count(k, models)))
    return records


def default_bench_configs(base: SamplerConfig | None = None):
    base = base or SamplerConfig()
    return [
        ("vg-dpm", base),
        ("lvg-dpm", base),
        ("vg-fm", base),
        ("lvg-fm", base),
    ]


def to_pgm_bytes(matrix) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("PGM needs a finite 2-D matrix")
    lo, hi = m.min(), m.max()
    if hi > lo:
        pix = np.floor((m - lo) / (hi - lo) * 255.0 + 0.5)
    else:
        pix = np.full(m.shape, 127.0)
    rows, cols = m.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + pix.astype(np.uint8).tobytes()


def dump_pgm(matrix, path) -> None:
    Path(path).write_bytes(to_pgm_bytes(matrix))


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows = map(int, parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    return pix.reshape(rows, cols)


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def with_sampler(base: SamplerConfig, **kw) -> SamplerConfig:
    return replace(base, **kw)
