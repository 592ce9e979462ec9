"""r-sweep trends for flow-matching generators trained with different path sigma.

Usage: python3 scripts/sigma_sweep.py [SIGMAS]   e.g. 0,0.01,0.05   (about 4 min per sigma)
"""

import sys

from latentconv.config import RunConfig
from latentconv.evalbench import conversion_pairs, spearman, sweep_r
from latentconv.pipeline import Models, train_autoencoder, train_generator
from latentconv.schedule import build_schedule
from latentconv.synthcorpus import gen_corpus

KINDS = ("vg-fm", "lvg-fm")


def trend(x, y):
    return 0.0 if max(y) == min(y) else spearman(x, y)


def main(sigmas=(0.0, 0.01, 0.05)):
    cfg = RunConfig()
    corpus = gen_corpus(cfg.corpus, cfg.seed)
    sched = build_schedule(cfg.schedule.L, cfg.schedule.beta_min, cfg.schedule.beta_max)
    ae = train_autoencoder(cfg, corpus).ae
    pairs = conversion_pairs(corpus.heldout, cfg.corpus.n_speakers)
    print("sigma,kind,rho_similarity,rho_content,content_r0,content_r1")
    for sigma in sigmas:
        c = cfg.override(train=dict(sigma=sigma))
        models = Models(sched, cfg.corpus.alphabet, ae)
        for kind in KINDS:
            models.generators[kind] = train_generator(c, corpus, kind, ae).net
            rows = sweep_r(kind, models, pairs, corpus.law)
            r = [row.r for row in rows]
            sim = trend(r, [row.report.frame_similarity for row in rows])
            con = trend(r, [row.report.content_acc for row in rows])
            print(f"{sigma},{kind},{sim:+.3f},{con:+.3f},{rows[0].report.content_acc:.4f},"
                  f"{rows[-1].report.content_acc:.4f}", flush=True)


if __name__ == "__main__":
    main(tuple(float(s) for s in sys.argv[1].split(",")) if len(sys.argv) > 1 else (0.0, 0.01, 0.05))
