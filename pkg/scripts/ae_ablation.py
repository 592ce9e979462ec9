"""Full (adversarial) vs reconstruction-plus-KL autoencoder at equal epochs.

Trains both autoencoders and an LVG-DPM generator on each, then reports
downstream conversion similarity and the fooling rate of fresh judges.
Usage: python3 scripts/ae_ablation.py [SEED]   (about 8 min on one core)
"""

import sys

import numpy as np

from latentconv.config import RunConfig, SamplerConfig
from latentconv.evalbench import conversion_pairs, eval_conversion, run_conversions
from latentconv.latentae import fooling_rate, train_judge
from latentconv.pipeline import Models, make_renderer, train_autoencoder, train_generator
from latentconv.schedule import build_schedule
from latentconv.synthcorpus import gen_corpus


def main(seed=0):
    cfg = RunConfig(seed=seed)
    corpus = gen_corpus(cfg.corpus, seed)
    renderer = make_renderer(cfg)
    sched = build_schedule(cfg.schedule.L, cfg.schedule.beta_min, cfg.schedule.beta_max)
    pairs = conversion_pairs(corpus.heldout, cfg.corpus.n_speakers)
    train_x = [u.features for u in corpus.train]
    held_x = [u.features for u in corpus.heldout]
    for objective in ("adversarial", "regular"):
        c = cfg.override(train=dict(ae_objective=objective))
        ae = train_autoencoder(c, corpus).ae
        gen = train_generator(c, corpus, "lvg-dpm", ae)
        models = Models(sched, cfg.corpus.alphabet, ae, {"lvg-dpm": gen.net})
        fool = [fooling_rate(train_judge(renderer, ae, train_x, seed=s), renderer, ae, held_x) for s in range(3)]
        items, _ = run_conversions("lvg-dpm", models, pairs, SamplerConfig())
        rep = eval_conversion(items, corpus.law)
        print(f"{objective:12s} fooling {np.mean(fool):.3f} {np.round(fool, 3)} similarity_acc {rep.similarity_acc:.3f} "
              f"frame_similarity {rep.frame_similarity:.4f} content_acc {rep.content_acc:.4f}", flush=True)


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
