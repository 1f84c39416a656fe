"""Divergent transitions on Neal's funnel, centered vs non-centered, across seeds.

    python scripts/funnel_divergences.py --seeds 10
"""

from __future__ import annotations

import argparse

import numpy as np

from hiermig.benchmarks import funnel
from hiermig.sampler import SamplerConfig, nuts_sample


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--dim", type=int, default=10)
    ap.add_argument("--chains", type=int, default=4)
    ap.add_argument("--warmup", type=int, default=250)
    ap.add_argument("--draws", type=int, default=1000)
    args = ap.parse_args(argv)

    print("| SEED | CENTERED WARM-UP | CENTERED SAMPLING | NON-CENTERED WARM-UP | NON-CENTERED SAMPLING |")
    print("|---|---|---|---|---|")
    totals = np.zeros(4, int)
    for seed in range(args.seeds):
        cfg = SamplerConfig(n_chains=args.chains, n_warmup=args.warmup, n_draws=args.draws, seed=seed)
        row = []
        for centered in (True, False):
            out = nuts_sample(funnel(args.dim, centered=centered), cfg, np.zeros(args.dim))
            row += [int(out.divergent_warmup.sum()), int(out.divergent.sum())]
        totals += row
        print(f"| {seed} | " + " | ".join(map(str, row)) + " |", flush=True)
    print("| total | " + " | ".join(map(str, totals)) + " |")


if __name__ == "__main__":
    main()
