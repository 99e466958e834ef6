"""Baseline vs split fine-tuning accuracy, and the effect of the split layer (a few minutes)."""

import sys

import numpy as np

from splitft import ModelConfig
from splitft.decompose import SplitPlan
from splitft.experiments import Protocol, compare, split_layer_sweep, sweep_means, write_sweep_csv

cfg = ModelConfig()
seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
proto = Protocol()

res = compare(cfg, SplitPlan(cfg.n_blocks - 1, 8), seeds, proto)
print("baseline:", np.round(res.baseline, 4))
print("SFT     :", np.round(res.sft, 4), f"gap {res.gap_points:+.2f} points")

known = {(cfg.n_blocks - 1, s): a for s, a in zip(res.seeds, res.sft)}
rows = split_layer_sweep(cfg, 8, seeds, proto, known=known)
for l, m in sweep_means(rows).items():
    print(f"split after block {l}: {100 * m:.2f}%")
write_sweep_csv(rows, "split_layer_sweep.csv", float(np.mean(res.baseline)))
