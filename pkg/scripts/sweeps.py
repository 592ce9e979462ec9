"""r and L sweeps with utterance-level and frame-level oracle metrics.

Usage: python3 scripts/sweeps.py DATA_DIR MODELS_DIR [OUT_CSV]
Reads the layout written by scripts/full_run.sh.
"""

import csv
import sys

from latentconv.config import RunConfig
from latentconv.evalbench import L_GRID, R_GRID, conversion_pairs, spearman, sweep_L, sweep_r
from latentconv.pipeline import load_models
from latentconv.synthcorpus import load_corpus

FIELDS = ("kind", "axis", "r", "L", "similarity_acc", "frame_similarity", "content_acc", "content_raw", "mean_margin")


def main(data_dir, models_dir, out=None):
    corpus = load_corpus(data_dir)
    cfg = RunConfig().override(corpus=corpus.spec)
    kinds = ("vg-fm", "lvg-fm")
    models = load_models(cfg, models_dir, kinds)
    pairs = conversion_pairs(corpus.heldout, cfg.corpus.n_speakers)
    records = []
    for kind in kinds:
        for axis, rows in (("r", sweep_r(kind, models, pairs, corpus.law, R_GRID)),
                           ("L", sweep_L(kind, models, pairs, corpus.law, L_GRID))):
            for row in rows:
                rep = row.report
                records.append(dict(kind=kind, axis=axis, r=row.r, L=row.L, similarity_acc=rep.similarity_acc,
                                    frame_similarity=rep.frame_similarity, content_acc=rep.content_acc,
                                    content_raw=rep.content_raw, mean_margin=rep.mean_margin))
            x = [row.r if axis == "r" else row.L for row in rows]
            sims = [row.report.frame_similarity for row in rows]
            print(f"{kind} {axis}: frame_similarity {['%.4f' % s for s in sims]} spearman {spearman(x, sims):+.3f}")
    w = csv.DictWriter(open(out, "w", newline="") if out else sys.stdout, FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(records)


if __name__ == "__main__":
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    main(*sys.argv[1:4])
