"""Command-line entry point: ``latentconv <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flag, config, path or id),
2 runtime failure (training divergence, corrupt checkpoint, I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from .config import KINDS, PipelineKind, RunConfig
from .evalbench import (
    BENCH_FIELDS,
    L_GRID,
    R_GRID,
    SWEEP_FIELDS,
    bench,
    conversion_pairs,
    dump_pgm,
    eval_conversion,
    rows_to_csv,
    run_conversions,
    sweep_L,
    sweep_r,
)
from .nnkernel import TrainingError
from .pipeline import (
    CheckpointError,
    Models,
    ae_from_checkpoint,
    convert,
    load_checkpoint,
    load_models,
    save_checkpoint,
    train_autoencoder,
    train_generator,
    write_loss_rows,
)
from .schedule import ConfigError
from .synthcorpus import (
    CorpusFormatError,
    SpecError,
    Utterance,
    gen_corpus,
    load_corpus,
    read_utterance,
    save_corpus,
    write_utterance,
)

log = logging.getLogger("latentconv")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- output helpers -----------------------------------------------------------


@contextmanager
def staged_dir(target):
    """Write into a sibling temp dir, then move the files into ``target`` on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
        target.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, target / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def write_file(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


# -- config / inputs ------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over: dict = {}
    sampler = {}
    if getattr(args, "steps", None) is not None:
        sampler["steps"] = args.steps
    if getattr(args, "noise_frac", None) is not None:
        sampler["noise_frac"] = args.noise_frac
    if getattr(args, "lprime", None) is not None:
        sampler["lprime"] = args.lprime
    if sampler:
        over["sampler"] = sampler
    if getattr(args, "ae_objective", None):
        over["train"] = {"ae_objective": args.ae_objective}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "kind", None):
        over["kind"] = args.kind
    return cfg.override(**over) if over else cfg.validate()


def need_dir(path, what):
    if path is None or not Path(path).is_dir():
        raise ValidationError(f"{what} directory not found: {path}")
    return Path(path)


def need_out(args):
    if not args.out:
        raise ValidationError("--out is required")
    return Path(args.out)


def find_utterance(corpus, name):
    for u in corpus.heldout + corpus.train:
        if u.name == name:
            return u
    raise ValidationError(f"no utterance named {name!r} in the corpus")


def check_target(cfg, target):
    if target is None:
        raise ValidationError("--target is required")
    if not 0 <= target < cfg.corpus.n_speakers:
        raise ValidationError(f"unknown target speaker {target}; corpus has {cfg.corpus.n_speakers}")


def epochs_arg(args):
    if args.epochs is not None and args.epochs < 0:
        raise ValidationError("--epochs must be >= 0")
    return args.epochs


def models_for(cfg, models_dir, kinds) -> Models:
    return load_models(cfg, need_dir(models_dir, "models"), kinds)


def check_models(models_dir, kinds):
    d = need_dir(models_dir, "models")
    for k in kinds:
        kind = PipelineKind.parse(k)
        if not (d / f"{k}.{kind.role}.ckpt").exists():
            raise ValidationError(f"missing checkpoint {k}.{kind.role}.ckpt in {d}")
        if kind.space == "latent" and not (d / "ae.ckpt").exists():
            raise ValidationError(f"{k} needs ae.ckpt in {d}")
    return d


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = need_out(args)
    corpus = gen_corpus(cfg.corpus, cfg.seed)
    with staged_dir(out) as tmp:
        save_corpus(corpus, tmp)
    log.info("wrote %d train + %d held-out utterances to %s", len(corpus.train), len(corpus.heldout), out)


def cmd_train_ae(args, cfg):
    data = need_dir(args.data, "data")
    out = need_out(args)
    epochs = epochs_arg(args)
    corpus = load_corpus(data)
    cfg = cfg.override(corpus=corpus.spec)
    run = train_autoencoder(cfg, corpus, epochs)
    with staged_dir(out) as tmp:
        for role, c in run.checkpoints(cfg).items():
            save_checkpoint(c, tmp / f"{role}.ckpt")
        write_loss_rows(run.rows, tmp / "ae_loss.csv")
        (tmp / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_train_gen(args, cfg):
    data = need_dir(args.data, "data")
    out = need_out(args)
    epochs = epochs_arg(args)
    kind = PipelineKind.parse(cfg.kind)
    ae = None
    if kind.space == "latent":
        ae_path = Path(args.ae) if args.ae else out / "ae.ckpt"
        if ae_path.is_dir():
            ae_path = ae_path / "ae.ckpt"
        if not ae_path.exists():
            raise ValidationError(f"{kind.name} needs an autoencoder checkpoint (--ae); not found: {ae_path}")
        ae = ae_from_checkpoint(load_checkpoint(ae_path))
    corpus = load_corpus(data)
    cfg = cfg.override(corpus=corpus.spec)
    run = train_generator(cfg, corpus, kind, ae, epochs)
    with staged_dir(out) as tmp:
        for role, c in run.checkpoints(cfg).items():
            save_checkpoint(c, tmp / f"{kind.name}.{role}.ckpt")
        write_loss_rows(run.rows, tmp / f"{kind.name}_loss.csv")


def _source(args, cfg):
    if args.input:
        if not Path(args.input).is_file():
            raise ValidationError(f"input file not found: {args.input}")
        return read_utterance(args.input)
    corpus = load_corpus(need_dir(args.data, "data"))
    if not args.utt:
        raise ValidationError("give --input FILE or --data DIR with --utt NAME")
    return find_utterance(corpus, args.utt)


def cmd_convert(args, cfg):
    out = need_out(args)
    check_target(cfg, args.target)
    check_models(args.models, [cfg.kind])
    utt = _source(args, cfg)
    models = models_for(cfg, args.models, [cfg.kind])
    res = convert(cfg.kind, models, utt, args.target, cfg.sampler, cfg.seed)
    converted = Utterance(res.features, args.target, utt.codes, f"{utt.name}_to_{args.target}")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    write_utterance(converted, tmp)
    os.replace(tmp, out)
    log.info("%s: %s -> speaker %d, nfe=%d", cfg.kind, utt.name, args.target, res.nfe)


def cmd_eval(args, cfg):
    out = need_out(args)
    data = need_dir(args.data, "data")
    check_models(args.models, [cfg.kind])
    corpus = load_corpus(data)
    cfg = cfg.override(corpus=corpus.spec)
    models = models_for(cfg, args.models, [cfg.kind])
    pairs = conversion_pairs(corpus.heldout, cfg.corpus.n_speakers)
    items, _ = run_conversions(cfg.kind, models, pairs, cfg.sampler, cfg.seed)
    report = eval_conversion(items, corpus.law)
    lines = ["name,target,hit,margin,content_acc"]
    lines += [f"{r.name},{r.target},{int(r.hit)},{r.margin:.6f},{r.content_acc:.6f}" for r in report.rows]
    lines.append(f"ALL,-,{report.similarity_acc:.6f},{report.mean_margin:.6f},{report.content_acc:.6f}")
    write_file(out, "\n".join(lines) + "\n")
    print(f"{cfg.kind}: similarity_acc={report.similarity_acc:.4f} content_acc={report.content_acc:.4f} "
          f"mean_margin={report.mean_margin:.3f}")


def cmd_sweep(args, cfg):
    out = need_out(args)
    kind = PipelineKind.parse(cfg.kind)
    if kind.model != "fm":
        raise ValidationError("sweep applies to flow-matching kinds (vg-fm, lvg-fm)")
    data = need_dir(args.data, "data")
    check_models(args.models, [cfg.kind])
    corpus = load_corpus(data)
    cfg = cfg.override(corpus=corpus.spec)
    models = models_for(cfg, args.models, [cfg.kind])
    pairs = conversion_pairs(corpus.heldout, cfg.corpus.n_speakers)
    if args.axis == "r":
        rows = sweep_r(kind, models, pairs, corpus.law, R_GRID, cfg.sampler.steps, cfg.seed)
    else:
        rows = sweep_L(kind, models, pairs, corpus.law, L_GRID, cfg.sampler.noise_frac, cfg.seed)
    write_file(out, rows_to_csv(rows, SWEEP_FIELDS))


def cmd_bench(args, cfg):
    out = need_out(args)
    data = need_dir(args.data, "data")
    kinds = args.kinds.split(",") if args.kinds else list(KINDS)
    for k in kinds:
        PipelineKind.parse(k)
    if args.repetitions < 1:
        raise ValidationError("--repetitions must be >= 1")
    check_models(args.models, kinds)
    corpus = load_corpus(data)
    cfg = cfg.override(corpus=corpus.spec)
    models = models_for(cfg, args.models, kinds)
    utts = corpus.heldout[: args.utterances]
    recs = bench([(k, cfg.sampler) for k in kinds], models, utts, args.repetitions, seed=cfg.seed)
    write_file(out, rows_to_csv(recs, BENCH_FIELDS))


def cmd_snapshot(args, cfg):
    out = need_out(args)
    check_target(cfg, args.target)
    check_models(args.models, [cfg.kind])
    utt = _source(args, cfg)
    models = models_for(cfg, args.models, [cfg.kind])
    res = convert(cfg.kind, models, utt, args.target, cfg.sampler, cfg.seed, keep_trajectory=True)
    with staged_dir(out) as tmp:
        dump_pgm(utt.features, tmp / "source.pgm")
        for i, x in enumerate(res.trajectory):
            dump_pgm(np.asarray(x, dtype=np.float64), tmp / f"step_{i:03d}.pgm")
        dump_pgm(res.features, tmp / "converted.pgm")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-gen": cmd_train_gen,
    "convert": cmd_convert,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "snapshot": cmd_snapshot,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentconv", description="Feature- and latent-space diffusion / flow-matching conversion.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (flags override it)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--threads", type=int, help="cap BLAS worker threads")

    def sampler(sp):
        sp.add_argument("--kind", choices=KINDS)
        sp.add_argument("--steps", type=int, help="Euler steps L (fm kinds)")
        sp.add_argument("--noise-frac", type=float, help="noise fraction r (fm kinds)")
        sp.add_argument("--lprime", type=int, help="reverse-diffusion start step (dpm kinds)")

    def source(sp):
        sp.add_argument("--models", help="directory with checkpoints")
        sp.add_argument("--data", help="corpus directory")
        sp.add_argument("--utt", help="utterance name inside --data")
        sp.add_argument("--input", help="single .lvgu utterance file")
        sp.add_argument("--target", type=int, help="target speaker id")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp)

    sp = sub.add_parser("train-ae", help="train the bottleneck autoencoder")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--ae-objective", choices=("regular", "adversarial"))

    sp = sub.add_parser("train-gen", help="train a score / vector-field network")
    common(sp)
    sp.add_argument("--kind", choices=KINDS)
    sp.add_argument("--data")
    sp.add_argument("--ae", help="autoencoder checkpoint (file or directory); defaults to OUT/ae.ckpt")
    sp.add_argument("--epochs", type=int)

    for name, helptext in (("convert", "convert one utterance"), ("snapshot", "dump per-step PGM images")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sampler(sp)
        source(sp)

    sp = sub.add_parser("eval", help="oracle metrics over held-out conversions")
    common(sp)
    sampler(sp)
    sp.add_argument("--models")
    sp.add_argument("--data")

    sp = sub.add_parser("sweep", help="r or L sweep for an fm kind")
    common(sp)
    sampler(sp)
    sp.add_argument("--models")
    sp.add_argument("--data")
    sp.add_argument("--axis", choices=("r", "L"), default="r")

    sp = sub.add_parser("bench", help="NFE / wall-clock benchmark")
    common(sp)
    sampler(sp)
    sp.add_argument("--models")
    sp.add_argument("--data")
    sp.add_argument("--kinds", help="comma-separated kinds (default: all four)")
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--utterances", type=int, default=8)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValidationError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LVG_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        with _thread_limit(args.threads):
            COMMANDS[args.command](args, cfg)
    except (ValidationError, ConfigError, SpecError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, CheckpointError, CorpusFormatError, OSError, RuntimeError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
