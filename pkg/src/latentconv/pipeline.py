"""Training orchestration, the four conversion pipelines, and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditionedNet, content_embed
from .config import PipelineKind, RunConfig, SamplerConfig
from .diffusion import dpm_train_loss, make_dpm_batch, reverse_sample
from .flowmatch import cfm_train_loss, euler_integrate, make_cfm_batch, noise_mix
from .latentae import (
    Autoencoder,
    Discriminator,
    Renderer,
    ae_train_step,
    decode,
    encode,
    make_optim,
)
from .nnkernel import Adam, TrainingError
from .schedule import ConfigError, NoiseSchedule, build_schedule
from .synthcorpus import Corpus, Utterance

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LVGC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")

# RNG stream ids, combined with (seed, epoch) so every epoch is reproducible on resume
_INIT, _EPOCH, _CONVERT = 11, 23, 37


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# -- checkpoints ------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    role: str  # ae | disc | score | vfield | speaker-table
    arch: dict
    params: list
    config_hash: str = ""
    seed: int = 0
    epoch: int = 0
    opt_step: int | None = None
    opt_m: list = field(default_factory=list)
    opt_v: list = field(default_factory=list)
    version: int = CKPT_VERSION

    def __post_init__(self):
        self.params = [np.asarray(p, dtype=np.float32) for p in self.params]
        self.opt_m = [np.asarray(p, dtype=np.float32) for p in self.opt_m]
        self.opt_v = [np.asarray(p, dtype=np.float32) for p in self.opt_v]

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def to_bytes(c: ModelCheckpoint) -> bytes:
    arrays = c.params + c.opt_m + c.opt_v
    header = {
        "role": c.role,
        "arch": c.arch,
        "shapes": [list(p.shape) for p in c.params],
        "config_hash": c.config_hash,
        "seed": c.seed,
        "epoch": c.epoch,
        "opt_step": c.opt_step,
        "has_opt": bool(c.opt_m),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = _CKPT_HEAD.pack(CKPT_MAGIC, c.version, len(hb)) + hb
    body += b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> ModelCheckpoint:
    if len(data) < _CKPT_HEAD.size + 4:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format v{version} is not readable by v{CKPT_VERSION}; re-save it with a matching release"
        )
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("CRC mismatch (corrupt or truncated checkpoint)")
    off = _CKPT_HEAD.size
    try:
        header = json.loads(data[off : off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"bad header: {e}") from e
    off += hlen
    shapes = [tuple(s) for s in header["shapes"]]
    groups = 3 if header["has_opt"] else 1
    total = sum(int(np.prod(s)) for s in shapes) * groups
    if len(data) - 4 - off != 4 * total:
        raise CheckpointError("parameter blob length mismatch")
    flat = np.frombuffer(data, dtype="<f4", count=total, offset=off)
    arrays, pos = [], 0
    for _ in range(groups):
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(flat[pos : pos + n].reshape(s).astype(np.float32))
            pos += n
    k = len(shapes)
    return ModelCheckpoint(
        header["role"],
        header["arch"],
        arrays[:k],
        header["config_hash"],
        header["seed"],
        header["epoch"],
        header["opt_step"],
        arrays[k : 2 * k] if groups == 3 else [],
        arrays[2 * k :] if groups == 3 else [],
    )


def save_checkpoint(c: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(to_bytes(c))


def load_checkpoint(path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())


def _assign(params, ckpt: ModelCheckpoint):
    if len(params) != len(ckpt.params) or any(p.shape != q.shape for p, q in zip(params, ckpt.params)):
        raise CheckpointError("architecture mismatch between checkpoint and model")
    for p, q in zip(params, ckpt.params):
        p[...] = q


def _restore_opt(opt: Adam, ckpts):
    m = [a for c in ckpts for a in c.opt_m]
    v = [a for c in ckpts for a in c.opt_v]
    if len(m) != len(opt.params):
        raise CheckpointError("checkpoint carries no optimizer state for resume")
    for dst, src in zip(opt.m + opt.v, m + v):
        dst[...] = src
    opt.step_count = ckpts[0].opt_step


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.model.dtype == "float32" else np.float64


def ae_arch(ae: Autoencoder) -> dict:
    return {"dim": ae.dim, "latent_dim": ae.latent_dim, "hidden": ae.encoder.layers[0].weight.shape[1],
            "depth": len(ae.encoder.layers) - 1, "context": ae.context}


def disc_arch(disc: Discriminator) -> dict:
    return {"win": disc.net.input_dim, "hidden": disc.net.layers[0].weight.shape[1], "depth": len(disc.net.layers) - 1}


def net_arch(net: ConditionedNet) -> dict:
    return {
        "data_dim": net.data_dim,
        "n_speakers": net.speakers.count if net.speakers is not None else 0,
        "speaker_dim": net.speaker_dim,
        "content_dim": net.content_dim,
        "time_dim": net.time.dim,
        "time_hidden": net.time.mlp.layers[0].weight.shape[1],
        "time_scale": net.time.scale,
        "hidden": net.net.layers[0].weight.shape[1],
        "depth": len(net.net.layers) - 1,
    }


def ae_from_checkpoint(c: ModelCheckpoint, expected_arch: dict | None = None) -> Autoencoder:
    if c.role != "ae":
        raise CheckpointError(f"expected an ae checkpoint, got {c.role!r}")
    if expected_arch is not None and expected_arch != c.arch:
        raise CheckpointError(f"architecture descriptor mismatch: {c.arch} != {expected_arch}")
    a = c.arch
    ae = Autoencoder(a["dim"], a["latent_dim"], a["hidden"], a["depth"], a["context"], dtype=np.float32)
    _assign(ae.params(), c)
    return ae


def disc_from_checkpoint(c: ModelCheckpoint) -> Discriminator:
    if c.role != "disc":
        raise CheckpointError(f"expected a disc checkpoint, got {c.role!r}")
    a = c.arch
    disc = Discriminator(a["win"], a["hidden"], a["depth"], dtype=np.float32)
    _assign(disc.params(), c)
    return disc


def net_from_checkpoints(c: ModelCheckpoint, table: ModelCheckpoint | None, expected_arch=None) -> ConditionedNet:
    if c.role not in ("score", "vfield"):
        raise CheckpointError(f"expected a score/vfield checkpoint, got {c.role!r}")
    if expected_arch is not None and expected_arch != c.arch:
        raise CheckpointError(f"architecture descriptor mismatch: {c.arch} != {expected_arch}")
    a = c.arch
    net = ConditionedNet(
        a["data_dim"], a["n_speakers"], a["speaker_dim"], a["content_dim"], a["time_dim"],
        a["time_hidden"], a["hidden"], a["depth"], a["time_scale"], dtype=np.float32,
    )
    k = len(net.net.params()) + len(net.time.params())
    _assign(net.params()[:k], c)
    if net.speakers is not None:
        if table is None or table.role != "speaker-table":
            raise CheckpointError("speaker-table checkpoint required")
        _assign(net.speakers.params(), table)
    return net


def _split_ckpt(role, arch, params, opt: Adam | None, idx, cfg, epoch):
    kw = {}
    if opt is not None:
        kw = {"opt_step": opt.step_count, "opt_m": [opt.m[i] for i in idx], "opt_v": [opt.v[i] for i in idx]}
    return ModelCheckpoint(role, arch, [params[i] for i in idx], cfg.hash(), cfg.seed, epoch, **kw)


# -- training ---------------------------------------------------------------


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def write_loss_rows(rows, path):
    lines = ["epoch,component,value"] + [f"{e},{c},{v:.10g}" for e, c, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class AeRun:
    ae: Autoencoder
    disc: Discriminator
    optim: object
    epoch: int
    rows: list
    renderer: Renderer

    def checkpoints(self, cfg: RunConfig):
        ae_ck = _split_ckpt("ae", ae_arch(self.ae), self.ae.params(), self.optim.ae,
                            range(len(self.ae.params())), cfg, self.epoch)
        d_ck = _split_ckpt("disc", disc_arch(self.disc), self.disc.params(), self.optim.disc,
                           range(len(self.disc.params())), cfg, self.epoch)
        return {"ae": ae_ck, "disc": d_ck}


def make_renderer(cfg: RunConfig) -> Renderer:
    return Renderer(cfg.corpus.dim, cfg.model.render_hop, seed=7)


def train_autoencoder(cfg: RunConfig, corpus: Corpus, epochs=None, resume=None, loss_csv=None) -> AeRun:
    """Alternating discriminator / autoencoder updates; 'regular' skips the discriminator."""
    dtype = _dtype(cfg)
    m, t = cfg.model, cfg.train
    rng = np.random.default_rng([cfg.seed, _INIT, 0])
    ae = Autoencoder(cfg.corpus.dim, m.latent_dim, m.ae_hidden, m.depth, m.ae_context, rng=rng, dtype=dtype)
    renderer = make_renderer(cfg)
    disc = Discriminator(renderer.win, m.disc_hidden, rng=rng, dtype=dtype)
    optim = make_optim(ae, disc, t.ae_lr, t.clip_norm)
    for o in (optim.ae, optim.disc):
        o.beta1, o.beta2 = t.beta1, t.beta2
    start = 0
    if resume is not None:
        _assign(ae.params(), resume["ae"])
        _assign(disc.params(), resume["disc"])
        _restore_opt(optim.ae, [resume["ae"]])
        _restore_opt(optim.disc, [resume["disc"]])
        start = resume["ae"].epoch
    epochs = t.ae_epochs if epochs is None else epochs
    data = [u.features for u in corpus.train]
    rows = []
    for epoch in range(start + 1, start + epochs + 1):
        erng = np.random.default_rng([cfg.seed, _EPOCH, epoch])
        acc: dict[str, list] = {}
        for idx in _batches(len(data), t.batch_size, erng):
            try:
                parts = ae_train_step(ae, disc, [data[i] for i in idx], optim, renderer, t.lam,
                                      t.ae_objective, t.per_dim_kl)
            except TrainingError as e:
                raise TrainingError(f"autoencoder epoch {epoch}: {e}") from e
            for k, v in parts.items():
                acc.setdefault(k, []).append(v)
        for k in sorted(acc):
            rows.append((epoch, k, float(np.mean(acc[k]))))
        log.debug("ae epoch %d %s", epoch, {k: round(float(np.mean(v)), 4) for k, v in acc.items()})
    if loss_csv:
        write_loss_rows(rows, loss_csv)
    return AeRun(ae, disc, optim, start + epochs, rows, renderer)


@dataclass
class GenRun:
    kind: PipelineKind
    net: ConditionedNet
    opt: Adam
    epoch: int
    rows: list

    def checkpoints(self, cfg: RunConfig):
        params = self.net.params()
        k = len(self.net.net.params()) + len(self.net.time.params())
        out = {self.kind.role: _split_ckpt(self.kind.role, net_arch(self.net), params, self.opt, range(k), cfg, self.epoch)}
        if self.net.speakers is not None:
            out["speaker-table"] = _split_ckpt(
                "speaker-table", {"count": self.net.speakers.count, "dim": self.net.speakers.dim},
                params, self.opt, range(k, len(params)), cfg, self.epoch,
            )
        return out


def training_frames(cfg: RunConfig, corpus: Corpus, kind: PipelineKind, ae: Autoencoder | None):
    """Per-utterance (frames, dim) data for the generator of this kind."""
    dtype = _dtype(cfg)
    if kind.space == "latent":
        if ae is None:
            raise ConfigError(f"{kind.name} needs a trained autoencoder")
        return [encode(ae, u.features).T.astype(dtype) for u in corpus.train]
    return [u.features.T.astype(dtype) for u in corpus.train]


def build_generator(cfg: RunConfig, kind: PipelineKind, rng) -> ConditionedNet:
    m = cfg.model
    latent = kind.space == "latent"
    return ConditionedNet(
        m.latent_dim if latent else cfg.corpus.dim,
        cfg.corpus.n_speakers, m.speaker_dim, cfg.corpus.alphabet, m.time_dim, m.time_hidden,
        m.latent_hidden if latent else m.hidden, m.depth, m.time_scale, rng=rng, dtype=_dtype(cfg),
    )


def train_generator(cfg: RunConfig, corpus: Corpus, kind, ae=None, epochs=None, resume=None, loss_csv=None) -> GenRun:
    """Fit the noise predictor (dpm) or vector field (fm) on features or latents."""
    kind = PipelineKind.parse(kind) if isinstance(kind, str) else kind
    data = training_frames(cfg, corpus, kind, ae)
    t = cfg.train
    sched = build_schedule(cfg.schedule.L, cfg.schedule.beta_min, cfg.schedule.beta_max)
    rng = np.random.default_rng([cfg.seed, _INIT, 1 + ("lvg-dpm", "vg-dpm", "lvg-fm", "vg-fm").index(kind.name)])
    net = build_generator(cfg, kind, rng)
    opt = Adam(net.params(), t.lr, t.beta1, t.beta2, clip_norm=t.clip_norm, names=net.param_names())
    start = 0
    if resume is not None:
        k = len(net.net.params()) + len(net.time.params())
        _assign(net.params()[:k], resume[kind.role])
        parts = [resume[kind.role]]
        if net.speakers is not None:
            _assign(net.speakers.params(), resume["speaker-table"])
            parts.append(resume["speaker-table"])
        _restore_opt(opt, parts)
        start = resume[kind.role].epoch
    speakers = [np.full(u.frames, u.speaker) for u in corpus.train]
    content = [content_embed(u.codes, cfg.corpus.alphabet).T.astype(net.dtype) for u in corpus.train]
    epochs = t.gen_epochs if epochs is None else epochs
    rows = []
    for epoch in range(start + 1, start + epochs + 1):
        erng = np.random.default_rng([cfg.seed, _EPOCH, epoch])
        losses = []
        for idx in _batches(len(data), t.batch_size, erng):
            x = np.concatenate([data[i] for i in idx])
            spk = np.concatenate([speakers[i] for i in idx])
            p = np.concatenate([content[i] for i in idx])
            groups = np.concatenate([np.full(len(data[i]), j) for j, i in enumerate(idx)])
            try:
                if kind.model == "dpm":
                    batch = make_dpm_batch(x, sched, erng, spk, p, groups)
                    loss, grads = dpm_train_loss(net, batch, sched, with_grad=True)
                else:
                    batch = make_cfm_batch(x, erng, t.sigma, spk, p, groups)
                    loss, grads = cfm_train_loss(net, batch, with_grad=True)
                opt.step(grads)
            except TrainingError as e:
                raise TrainingError(f"{kind.name} epoch {epoch}: {e}") from e
            losses.append(loss)
        rows.append((epoch, "loss", float(np.mean(losses))))
        log.debug("%s epoch %d loss %.4f", kind.name, epoch, rows[-1][2])
    if loss_csv:
        write_loss_rows(rows, loss_csv)
    return GenRun(kind, net, opt, start + epochs, rows)


# -- conversion -------------------------------------------------------------


@dataclass
class Models:
    schedule: NoiseSchedule
    alphabet: int
    ae: Autoencoder | None = None
    generators: dict = field(default_factory=dict)  # kind name -> ConditionedNet


@dataclass
class Conversion:
    features: np.ndarray  # (D, N)
    nfe: int
    trajectory: list = field(default_factory=list)


def utterance_seed(seed: int, name: str, target: int) -> list[int]:
    return [seed, _CONVERT, zlib.crc32(name.encode()), int(target)]


def convert(kind, models: Models, utt: Utterance, target: int, sampler: SamplerConfig, seed: int = 0,
            keep_trajectory=False) -> Conversion:
    """Convert one utterance to ``target``'s voice with the selected pipeline."""
    kind = PipelineKind.parse(kind) if isinstance(kind, str) else kind
    net = models.generators.get(kind.name)
    if net is None:
        raise ConfigError(f"no trained generator for {kind.name}")
    if kind.space == "latent" and models.ae is None:
        raise ConfigError(f"{kind.name} needs an autoencoder")
    cond = net.bundle(target, utt.codes, models.alphabet)
    cond = type(cond)(cond.speaker, cond.s, cond.p.astype(net.dtype))
    rng = np.random.default_rng(utterance_seed(seed, utt.name, target))
    x = utt.features
    if kind.space == "latent":
        x = encode(models.ae, x)
    x = np.asarray(x.T, dtype=net.dtype)
    if kind.model == "dpm":
        out = reverse_sample(net, x, sampler.lprime, cond, models.schedule, rng, sampler.final_noise, keep_trajectory)
    else:
        eps = rng.standard_normal(x.shape).astype(x.dtype)
        x = noise_mix(x, sampler.noise_frac, eps).astype(x.dtype)
        out = euler_integrate(net, x, sampler.steps, cond, keep_trajectory)
    y = out.x.T
    traj = [t.T for t in out.trajectory]
    if kind.space == "latent":
        y = decode(models.ae, y)
        traj = [decode(models.ae, t) for t in traj]
    return Conversion(np.asarray(y, dtype=np.float32), out.nfe, traj)


# -- whole runs -------------------------------------------------------------


@dataclass
class TrainedSystem:
    cfg: RunConfig
    models: Models
    ae_run: AeRun | None
    gen_runs: dict

    def checkpoints(self) -> dict:
        out = {}
        if self.ae_run is not None:
            for role, c in self.ae_run.checkpoints(self.cfg).items():
                out[role] = c
        for name, run in self.gen_runs.items():
            for role, c in run.checkpoints(self.cfg).items():
                out[f"{name}.{role}"] = c
        return out


def train_all(cfg: RunConfig, corpus: Corpus, kinds=("vg-dpm", "lvg-dpm", "vg-fm", "lvg-fm"), ae_epochs=None,
              gen_epochs=None) -> TrainedSystem:
    sched = build_schedule(cfg.schedule.L, cfg.schedule.beta_min, cfg.schedule.beta_max)
    ae_run = None
    if any(PipelineKind.parse(k).space == "latent" for k in kinds):
        ae_run = train_autoencoder(cfg, corpus, ae_epochs)
    models = Models(sched, cfg.corpus.alphabet, ae_run.ae if ae_run else None)
    runs = {}
    for k in kinds:
        runs[k] = train_generator(cfg, corpus, k, models.ae, gen_epochs)
        models.generators[k] = runs[k].net
    return TrainedSystem(cfg, models, ae_run, runs)


def save_system(system: TrainedSystem, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, c in system.checkpoints().items():
        paths[name] = directory / f"{name}.ckpt"
        save_checkpoint(c, paths[name])
    return paths


def load_models(cfg: RunConfig, directory, kinds) -> Models:
    directory = Path(directory)
    sched = build_schedule(cfg.schedule.L, cfg.schedule.beta_min, cfg.schedule.beta_max)
    models = Models(sched, cfg.corpus.alphabet)
    if (directory / "ae.ckpt").exists():
        models.ae = ae_from_checkpoint(load_checkpoint(directory / "ae.ckpt"))
    for k in kinds:
        kind = PipelineKind.parse(k)
        main = directory / f"{k}.{kind.role}.ckpt"
        if not main.exists():
            raise ConfigError(f"missing checkpoint {main}")
        table = directory / f"{k}.speaker-table.ckpt"
        models.generators[k] = net_from_checkpoints(load_checkpoint(main), load_checkpoint(table) if table.exists() else None)
    return models
