"""Rewrite one block's FFN down-projection as three smaller layers.

The down-projection ``W`` (``H x d``, bias ``b``) of block ``l`` becomes

    ffn1.l : x @ u            (H -> R, no bias)      lives on the edge
    ffn2.l : x * sigma        (R -> R, diagonal)     lives on the cloud
    ffn3.l : x @ v + b        (R -> d)               lives on the cloud

so the tensor crossing the edge/cloud boundary is ``(B*S) x R`` instead of
``(B*S) x d``.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

from .nn import Diagonal, Linear, LayerStack, ModelConfig, ResidualAdd, Tap
from .svd import svd, truncate


class ResidualMode(enum.Enum):
    ELIMINATED = "eliminated"
    KEPT_LOCAL = "kept_local"
    KEPT_WITH_TRANSFER = "kept_with_transfer"

    @classmethod
    def parse(cls, text: str) -> "ResidualMode":
        key = str(text).strip().lower().replace("-", "_")
        aliases = {"keptlocal": "kept_local", "keptwithtransfer": "kept_with_transfer"}
        key = aliases.get(key, key)
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown residual mode {text!r}")


@dataclass(frozen=True)
class SplitPlan:
    split_layer: int
    rank: int
    residual_mode: ResidualMode = ResidualMode.ELIMINATED

    def validate(self, cfg: ModelConfig) -> None:
        if not 1 <= self.split_layer <= cfg.n_blocks:
            raise ValueError(f"split_layer must be in [1, {cfg.n_blocks}], got {self.split_layer}")
        limit = min(cfg.d_model, cfg.ffn_dim)
        if not 1 <= self.rank <= limit:
            raise ValueError(f"rank must be in [1, {limit}], got {self.rank}")
        if not isinstance(self.residual_mode, ResidualMode):
            raise ValueError(f"bad residual mode {self.residual_mode!r}")


def ffn_names(l: int) -> tuple[str, str, str]:
    return f"ffn1.{l}", f"ffn2.{l}", f"ffn3.{l}"


def decompose_ffn(stack: LayerStack, plan: SplitPlan) -> LayerStack:
    """Return a copy of ``stack`` with block ``plan.split_layer`` rewritten."""
    l = plan.split_layer
    try:
        idx = stack.index(f"blk{l}.down")
    except KeyError:
        raise ValueError(f"block {l} has no down-projection to decompose") from None
    down = stack.layers[idx]
    w, b = down.params["w"], down.params["b"]
    if not 1 <= plan.rank <= min(w.shape):
        raise ValueError(f"rank must be in [1, {min(w.shape)}], got {plan.rank}")
    parts = truncate(svd(w, dtype=w.dtype), plan.rank)
    n1, n2, n3 = ffn_names(l)
    new = [
        Linear(n1, parts.u, None, kind="FFN1"),
        Diagonal(n2, parts.sigma),
        Linear(n3, parts.v, b.copy(), kind="FFN3"),
    ]
    layers = copy.deepcopy(stack.layers)
    layers[idx : idx + 1] = new
    if plan.residual_mode is ResidualMode.ELIMINATED:
        key = f"blk{l}.ffn"
        layers = [x for x in layers if not (isinstance(x, (Tap, ResidualAdd)) and x.key == key)]
    for layer in layers:
        layer._cache = None
    return LayerStack(layers)


def build_decomposed(cfg: ModelConfig, plan: SplitPlan, seed: int = 0) -> LayerStack:
    """Architecture of a decomposed model (weights to be loaded afterwards)."""
    from .nn import build_model

    plan.validate(cfg)
    return decompose_ffn(build_model(cfg, seed), plan)
