"""Irreducible L1 training loss of the DPM and CFM objectives on the default corpus.

Each frame is a Gaussian mixture; treating the per-element noise as the only
unresolvable part (code and speaker are given by the conditioning), the best
predictor of the regression target is Gaussian with a closed-form spread, and
its mean absolute error is sqrt(2/pi) times that spread.
Usage: python3 scripts/loss_floor.py
"""

import numpy as np

from latentconv.config import RunConfig
from latentconv.schedule import build_schedule
from latentconv.synthcorpus import gen_corpus

K = np.sqrt(2 / np.pi)


def dpm_floor(var, alpha_bar):
    # eps | x_l is Gaussian with variance a s2 / (a s2 + 1 - a)
    return float(np.mean([np.mean(K * np.sqrt(a * var / (a * var + 1 - a))) for a in alpha_bar]))


def cfm_floor(var, sigma=0.01, n=2000):
    # target x1 - x0 given x_t, with x1 ~ N(mu, s2), x0 ~ N(0, 1)
    t = (np.arange(n) + 0.5) / n
    out = []
    for ti in t:
        var_xt = ti**2 * var + (1 - ti) ** 2 + sigma**2
        cov = ti * var - (1 - ti)
        out.append(np.mean(K * np.sqrt(var + 1 - cov**2 / var_xt)))
    return float(np.mean(out))


def main():
    cfg = RunConfig()
    corpus = gen_corpus(cfg.corpus, cfg.seed)
    var = (corpus.law.std**2).ravel()
    sched = build_schedule(cfg.schedule.L, cfg.schedule.beta_min, cfg.schedule.beta_max)
    print(f"DPM L1 floor {dpm_floor(var, sched.alpha_bar):.3f}")
    print(f"CFM L1 floor {cfm_floor(var, cfg.train.sigma):.3f}")


if __name__ == "__main__":
    main()
