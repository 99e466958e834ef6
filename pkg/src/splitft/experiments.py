"""Convergence experiments on the synthetic task.

Accuracy is measured on a held-out split after training, so runs are
compared on the same test sequences regardless of batch order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, gen_majority_task
from .decompose import ResidualMode, SplitPlan
from .nn import LayerStack, ModelConfig, build_model
from .optim import Adam
from .splitnet import run_local, run_split_loopback


@dataclass(frozen=True)
class Protocol:
    iters: int = 300
    batch_size: int = 16
    train_size: int = 4096
    test_size: int = 1024
    data_seed: int = 1
    lr: float = 3e-4


@dataclass
class Comparison:
    seeds: list[int]
    baseline: list[float] = field(default_factory=list)
    sft: list[float] = field(default_factory=list)

    @property
    def gap_points(self) -> float:
        """Baseline minus SFT mean accuracy, in percentage points."""
        return 100 * (float(np.mean(self.baseline)) - float(np.mean(self.sft)))


def datasets(cfg: ModelConfig, proto: Protocol) -> tuple[Dataset, Dataset]:
    train = gen_majority_task(proto.train_size, cfg, proto.data_seed)
    test = gen_majority_task(proto.test_size, cfg, proto.data_seed + 10_000)
    return train, test


def evaluate(stack: LayerStack, ds: Dataset, batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(ds), batch_size):
        logits = stack.forward(ds.sequences[start : start + batch_size])
        hits += int(np.sum(np.argmax(logits, axis=1) == ds.labels[start : start + batch_size]))
    return hits / len(ds)


def train_and_score(cfg: ModelConfig, plan: SplitPlan | None, seed: int, proto: Protocol,
                    train: Dataset, test: Dataset) -> float:
    """Held-out accuracy after training; ``plan=None`` is the undecomposed baseline.

    The split model is trained through the loopback edge/cloud runtime, then
    its two halves are chained for evaluation.
    """
    stack = build_model(cfg, seed)
    opt = Adam(lr=proto.lr)
    if plan is None:
        run_local(stack, train, proto.iters, opt, proto.batch_size, seed)
        return evaluate(stack, test)
    _, _, part = run_split_loopback(stack, plan, train, proto.iters, opt, proto.batch_size, seed)
    return evaluate(LayerStack(part.net1.layers + part.net2.layers), test)


def compare(cfg: ModelConfig, plan: SplitPlan, seeds, proto: Protocol = Protocol()) -> Comparison:
    train, test = datasets(cfg, proto)
    out = Comparison(list(seeds))
    for s in out.seeds:
        out.baseline.append(train_and_score(cfg, None, s, proto, train, test))
        out.sft.append(train_and_score(cfg, plan, s, proto, train, test))
    return out


def split_layer_sweep(cfg: ModelConfig, rank: int, seeds, proto: Protocol = Protocol(),
                      mode: ResidualMode = ResidualMode.ELIMINATED,
                      known: dict[tuple[int, int], float] | None = None) -> list[tuple[int, int, float]]:
    """Rows ``(split_layer, seed, accuracy)`` for every block.

    ``known`` maps ``(split_layer, seed)`` to accuracies already measured
    with the same protocol, which are reused instead of retrained.
    """
    train, test = datasets(cfg, proto)
    known = known or {}
    rows = []
    for l in range(1, cfg.n_blocks + 1):
        for s in seeds:
            acc = known.get((l, s))
            if acc is None:
                acc = train_and_score(cfg, SplitPlan(l, rank, mode), s, proto, train, test)
            rows.append((l, s, acc))
    return rows


def sweep_means(rows) -> dict[int, float]:
    by_layer: dict[int, list[float]] = {}
    for l, _, acc in rows:
        by_layer.setdefault(l, []).append(acc)
    return {l: float(np.mean(v)) for l, v in sorted(by_layer.items())}


def write_sweep_csv(rows, path, baseline_mean: float | None = None) -> None:
    means = sweep_means(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split_layer", "seed", "accuracy", "layer_mean", "baseline_mean"])
        for l, s, acc in rows:
            w.writerow([l, s, f"{acc:.4f}", f"{means[l]:.4f}",
                        "" if baseline_mean is None else f"{baseline_mean:.4f}"])
