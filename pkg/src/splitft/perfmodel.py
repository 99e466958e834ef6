"""Analytic per-iteration time model for local, split, and split fine-tuning.

    naive : t_edge_layer * (n_edge + n_cloud)          (or a measured t_naive)
    sl/sft: t_edge_layer * n_edge + t_cloud_layer * n_cloud + t_comm
    t_comm: override if given, else volume_bytes * 8 / bandwidth
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

MODES = ("naive", "sl", "sft")


@dataclass(frozen=True)
class PerfParams:
    t_edge_layer_ms: float
    t_cloud_layer_ms: float
    n_edge_layers: int
    n_cloud_layers: int
    volume_bytes: float = 0.0
    bandwidth_bps: float = 0.0
    t_comm_override_ms: float | None = None
    # measured whole-model edge time; when set it replaces the per-layer product
    t_naive_ms: float | None = None

    def __post_init__(self):
        for name in ("t_edge_layer_ms", "t_cloud_layer_ms", "n_edge_layers", "n_cloud_layers",
                     "volume_bytes", "bandwidth_bps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("t_comm_override_ms", "t_naive_ms"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative")


def comm_volume(batch: int, rows: int, width: int, bytes_per_elem: int = 4) -> int:
    """Bytes of one ``batch x rows x width`` tensor."""
    if min(batch, rows, width, bytes_per_elem) < 0:
        raise ValueError("counts must be non-negative")
    return batch * rows * width * bytes_per_elem


def comm_time_ms(p: PerfParams) -> float:
    if p.t_comm_override_ms is not None:
        return float(p.t_comm_override_ms)
    if p.bandwidth_bps == 0:
        raise ValueError("bandwidth is 0 and no communication time override is set")
    if math.isinf(p.bandwidth_bps):
        return 0.0
    return p.volume_bytes * 8 / p.bandwidth_bps * 1e3


def compute_time_ms(mode: str, p: PerfParams) -> float:
    if mode == "naive":
        if p.t_naive_ms is not None:
            return float(p.t_naive_ms)
        return p.t_edge_layer_ms * (p.n_edge_layers + p.n_cloud_layers)
    if mode in ("sl", "sft"):
        return p.t_edge_layer_ms * p.n_edge_layers + p.t_cloud_layer_ms * p.n_cloud_layers
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def estimate(mode: str, p: PerfParams) -> float:
    """Estimated iteration time in milliseconds."""
    compute = compute_time_ms(mode, p)
    if mode == "naive":
        return compute
    return compute + comm_time_ms(p)


def breakeven_bandwidth(p: PerfParams, t_naive_ms: float) -> float:
    """Smallest link rate (bit/s) at which split fine-tuning ties local training.

    Returns ``math.inf`` when the compute terms alone already reach
    ``t_naive_ms`` (split training is never faster).
    """
    if p.t_comm_override_ms is not None:
        raise ValueError("communication time is overridden; bandwidth has no effect")
    slack_ms = t_naive_ms - compute_time_ms("sft", p)
    if slack_ms <= 0:
        return math.inf
    return p.volume_bytes * 8 / (slack_ms / 1e3)


def format_bytes(n: float) -> str:
    return f"{n:,.0f} B ({n / 1e6:.1f} MB, {n / 2**20:.1f} MiB)"


BERT_BASE_CONFIG = {
    "t_edge_layer_ms": "60.3",
    "t_cloud_layer_ms": "10.3",
    "n_edge_layers": "10",
    "n_cloud_layers": "2",
    "t_naive_ms": "744",
    "batch": "32",
    "rows": "3076",
    "hidden": "768",
    "rank": "8",
    "bandwidth_bps": "1e9",
    "sl_comm_ms": "2300",
    "sft_comm_ms": "24",
}


def params_from_config(cfg: dict[str, str]) -> dict[str, PerfParams]:
    """Build per-mode parameters from flat ``key=value`` settings.

    ``hidden`` is the unsplit activation width (SL) and ``rank`` the
    decomposed width (SFT).  ``sl_comm_ms`` / ``sft_comm_ms`` override the
    bandwidth-derived communication time of that mode.
    """

    def num(key, default=None, cast=float):
        if key not in cfg or cfg[key] in ("", "none", "None"):
            if default is None:
                raise KeyError(f"missing setting {key!r}")
            return default
        return cast(cfg[key])

    def opt(key):
        return None if cfg.get(key) in (None, "", "none", "None") else float(cfg[key])

    base = PerfParams(
        t_edge_layer_ms=num("t_edge_layer_ms"),
        t_cloud_layer_ms=num("t_cloud_layer_ms"),
        n_edge_layers=num("n_edge_layers", cast=int),
        n_cloud_layers=num("n_cloud_layers", cast=int),
        bandwidth_bps=num("bandwidth_bps", 0.0),
        t_naive_ms=opt("t_naive_ms"),
    )
    batch, rows = num("batch", 0, int), num("rows", 0, int)
    per_elem = num("bytes_per_elem", 4, int)
    return {
        "naive": base,
        "sl": replace(base, volume_bytes=comm_volume(batch, rows, num("hidden", 0, int), per_elem),
                      t_comm_override_ms=opt("sl_comm_ms")),
        "sft": replace(base, volume_bytes=comm_volume(batch, rows, num("rank", 0, int), per_elem),
                       t_comm_override_ms=opt("sft_comm_ms")),
    }


def estimate_table(params: dict[str, PerfParams]) -> list[tuple[str, float, float, float]]:
    """Rows ``(mode, compute_ms, comm_ms, total_ms)``."""
    rows = []
    for mode in MODES:
        p = params[mode]
        compute = compute_time_ms(mode, p)
        comm = 0.0 if mode == "naive" else comm_time_ms(p)
        rows.append((mode, compute, comm, compute + comm))
    return rows


def rank_sweep(params: PerfParams, batch: int, rows: int, ranks, bytes_per_elem: int = 4):
    """Total SFT time per rank, communication derived from bandwidth."""
    out = []
    for r in ranks:
        p = replace(params, volume_bytes=comm_volume(batch, rows, r, bytes_per_elem), t_comm_override_ms=None)
        out.append((r, p.volume_bytes, comm_time_ms(p), estimate("sft", p)))
    return out


def bert_base_params() -> dict[str, PerfParams]:
    """Per-mode inputs of the BERT-base scenario (XAVIER-NX edge, V100 cloud, 1 Gbit/s)."""
    return params_from_config(BERT_BASE_CONFIG)
