"""Command-line entry point: ``splitft {train,decompose,estimate,gendata}``.

Every subcommand reads an optional flat ``key=value`` config file
(``--config``); each key can also be given as ``--key value``, which wins.

Exit codes: 0 ok, 2 bad configuration, 3 connection failure, 4 training error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import perfmodel
from .checkpoint import load_checkpoint, save_checkpoint
from .data import gen_majority_task, load_csv, save_csv
from .decompose import ResidualMode, SplitPlan, build_decomposed, decompose_ffn
from .nn import ModelConfig, build_model
from .optim import SGD, Adam
from .splitnet import (
    partition,
    partition_plain,
    run_cloud,
    run_edge,
    run_local,
    run_split_loopback,
    session_config,
    write_metrics_csv,
)
from .svd import reconstruction_error
from .wire import DEFAULT_PORT, Channel, HandshakeError, Session, WireError, accept, connect, listen

EXIT_CONFIG, EXIT_CONNECT, EXIT_TRAIN = 2, 3, 4

log = logging.getLogger("splitft")

MODEL_KEYS = {
    "vocab_size": "64",
    "seq_len": "16",
    "d_model": "32",
    "ffn_dim": "128",
    "n_blocks": "4",
    "n_heads": "2",
    "n_classes": "2",
}

PLAN_KEYS = {"split_layer": "3", "rank": "8", "residual_mode": "eliminated"}

TRAIN_KEYS = {
    **MODEL_KEYS,
    **PLAN_KEYS,
    "role": "local",
    "decompose": "true",
    "iters": "300",
    "batch_size": "32",
    "seed": "0",
    "data_seed": "1",
    "dataset": "synthetic",
    "dataset_size": "4096",
    "optimizer": "adam",
    "lr": "3e-4",
    "beta1": "0.9",
    "beta2": "0.999",
    "eps": "1e-8",
    "momentum": "0.0",
    "peer": f"127.0.0.1:{DEFAULT_PORT}",
    "listen": f"127.0.0.1:{DEFAULT_PORT}",
    "bandwidth_bps": "",
    "connect_timeout": "10",
    "checkpoint_in": "",
    "metrics_out": "metrics.csv",
    "checkpoint_out": "",
}

DECOMPOSE_KEYS = {**MODEL_KEYS, **PLAN_KEYS, "seed": "0", "checkpoint_in": "", "checkpoint_out": ""}

ESTIMATE_KEYS = {
    **perfmodel.BERT_BASE_CONFIG,
    "bytes_per_elem": "4",
    "sweep_min": "1",
    "sweep_max": "64",
    "out": "",
}

GENDATA_KEYS = {**MODEL_KEYS, "size": "1000", "seed": "0", "out": "data.csv"}


class ConfigError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(args: argparse.Namespace, defaults: dict[str, str]) -> dict[str, str]:
    cfg = dict(defaults)
    if args.config:
        from_file = read_config_file(args.config)
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(from_file)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from None


def _float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {cfg[key]!r}") from None


def _bool(cfg, key):
    value = cfg[key].strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"{key} must be true/false, got {cfg[key]!r}")


def model_config(cfg) -> ModelConfig:
    try:
        return ModelConfig(**{k: _int(cfg, k) for k in MODEL_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def split_plan(cfg, model: ModelConfig) -> SplitPlan:
    try:
        plan = SplitPlan(_int(cfg, "split_layer"), _int(cfg, "rank"), ResidualMode.parse(cfg["residual_mode"]))
        plan.validate(model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return plan


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text, DEFAULT_PORT
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}") from None


def _optimizer(cfg):
    name = cfg["optimizer"].lower()
    if name == "adam":
        return Adam(_float(cfg, "lr"), _float(cfg, "beta1"), _float(cfg, "beta2"), _float(cfg, "eps"))
    if name == "sgd":
        return SGD(_float(cfg, "lr"), _float(cfg, "momentum"))
    raise ConfigError(f"optimizer must be adam or sgd, got {cfg['optimizer']!r}")


def _initial_model(cfg, model: ModelConfig, plan: SplitPlan | None):
    """Fresh or checkpointed model, decomposed when ``plan`` is given."""
    seed = _int(cfg, "seed")
    state = load_checkpoint(cfg["checkpoint_in"]) if cfg["checkpoint_in"] else None
    if state is not None and plan is not None and f"ffn1.{plan.split_layer}.w" in state:
        stack = build_decomposed(model, plan, seed)
        stack.load_state(state)
        return stack
    stack = build_model(model, seed)
    if state is not None:
        stack.load_state(state)
    return decompose_ffn(stack, plan) if plan is not None else stack


def _dataset(cfg, model: ModelConfig):
    if cfg["dataset"] in ("", "synthetic"):
        return gen_majority_task(_int(cfg, "dataset_size"), model, _int(cfg, "data_seed"))
    ds = load_csv(cfg["dataset"])
    ds.validate(model)
    return ds


def _connect_with_retry(host, port, timeout):
    deadline = time.monotonic() + timeout
    while True:
        try:
            return connect(host, port, timeout=max(0.1, deadline - time.monotonic()))
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)


def cmd_train(cfg: dict[str, str]) -> int:
    model = model_config(cfg)
    role = cfg["role"]
    if role not in ("local", "edge", "cloud", "loopback"):
        raise ConfigError(f"role must be local, edge, cloud or loopback, got {role!r}")
    decompose = _bool(cfg, "decompose")
    plan = split_plan(cfg, model) if decompose else None
    if role != "local" and plan is not None and plan.residual_mode is ResidualMode.KEPT_LOCAL:
        raise ConfigError("residual_mode=kept_local is only valid with role=local")
    opt = _optimizer(cfg)
    iters, batch, seed = _int(cfg, "iters"), _int(cfg, "batch_size"), _int(cfg, "data_seed")
    bandwidth = _float(cfg, "bandwidth_bps") if cfg["bandwidth_bps"] else None
    try:
        stack = _initial_model(cfg, model, plan)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot build model: {exc}") from exc
    split_layer = _int(cfg, "split_layer")
    model_hash = model.config_hash()

    if role == "local":
        metrics = run_local(stack, _dataset(cfg, model), iters, opt, batch, seed)
        state = stack.state_dict()
    elif role == "loopback":
        edge_m, _, part = run_split_loopback(stack, plan, _dataset(cfg, model), iters, opt, batch, seed,
                                             bandwidth, split_layer=split_layer, model_hash=model_hash)
        metrics = edge_m
        state = {**part.net1.state_dict(), **part.net2.state_dict()}
    else:
        part = partition(stack, plan) if plan is not None else partition_plain(stack, split_layer)
        scfg = session_config(part, model_hash, batch, model.seq_len)
        try:
            if role == "edge":
                host, port = _address(cfg["peer"])
                transport = _connect_with_retry(host, port, _float(cfg, "connect_timeout"))
            else:
                host, port = _address(cfg["listen"])
                srv = listen(host, port)
                try:
                    transport = accept(srv, _float(cfg, "connect_timeout"))
                finally:
                    srv.close()
        except OSError as exc:
            log.error("connection failed: %s", exc)
            return EXIT_CONNECT
        session = Session(role, Channel(transport, bandwidth))
        try:
            session.handshake(scfg)
            if role == "edge":
                metrics = run_edge(part, session, _dataset(cfg, model), iters, opt, batch, seed)
                state = part.net1.state_dict()
            else:
                metrics = run_cloud(part, session, opt)
                state = part.net2.state_dict()
        except HandshakeError as exc:
            log.error("%s", exc)
            return EXIT_CONNECT
        finally:
            transport.close()

    if cfg["metrics_out"]:
        write_metrics_csv(metrics, cfg["metrics_out"])
    if cfg["checkpoint_out"]:
        save_checkpoint(cfg["checkpoint_out"], state)
    if metrics:
        last = metrics[-1]
        print(f"{role}: {len(metrics)} iterations, final loss {last.loss:.4f}, batch acc {last.batch_accuracy:.3f}")
    return 0


def cmd_decompose(cfg: dict[str, str]) -> int:
    model = model_config(cfg)
    plan = split_plan(cfg, model)
    try:
        stack = build_model(model, _int(cfg, "seed"))
        if cfg["checkpoint_in"]:
            stack.load_state(load_checkpoint(cfg["checkpoint_in"]))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from exc
    w = stack.layer(f"blk{plan.split_layer}.down").params["w"]
    print(f"block {plan.split_layer} down-projection {w.shape[0]}x{w.shape[1]}")
    print("rank,relative_error")
    for r in range(1, min(w.shape) + 1):
        mark = "  <- selected" if r == plan.rank else ""
        print(f"{r},{reconstruction_error(w, r):.3e}{mark}")
    out = decompose_ffn(stack, plan)
    if cfg["checkpoint_out"]:
        save_checkpoint(cfg["checkpoint_out"], out.state_dict())
        print(f"wrote {cfg['checkpoint_out']}")
    return 0


def cmd_estimate(cfg: dict[str, str], sweep: bool = False) -> int:
    try:
        params = perfmodel.params_from_config(cfg)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = open(cfg["out"], "w", newline="") if cfg["out"] else sys.stdout
    try:
        if sweep:
            lo, hi = _int(cfg, "sweep_min"), _int(cfg, "sweep_max")
            try:
                rows = perfmodel.rank_sweep(params["sft"], _int(cfg, "batch"), _int(cfg, "rows"),
                                            range(lo, hi + 1), _int(cfg, "bytes_per_elem"))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            w = csv.writer(out)
            w.writerow(["rank", "volume_bytes", "comm_ms", "total_ms"])
            for r, vol, comm, total in rows:
                w.writerow([r, int(vol), f"{comm:.3f}", f"{total:.3f}"])
        else:
            try:
                table = perfmodel.estimate_table(params)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            out.write(f"{'mode':<6} {'compute_ms':>11} {'comm_ms':>10} {'total_ms':>10}\n")
            for mode, compute, comm, total in table:
                out.write(f"{mode:<6} {compute:>11.1f} {comm:>10.1f} {total:>10.1f}\n")
            for mode in ("sl", "sft"):
                out.write(f"# {mode} volume {perfmodel.format_bytes(params[mode].volume_bytes)}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_gendata(cfg: dict[str, str]) -> int:
    model = model_config(cfg)
    try:
        ds = gen_majority_task(_int(cfg, "size"), model, _int(cfg, "seed"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_csv(ds, cfg["out"])
    print(f"wrote {len(ds)} rows to {cfg['out']} ({np.mean(ds.labels):.3f} positive)")
    return 0


COMMANDS = {
    "train": (cmd_train, TRAIN_KEYS, "train locally, over loopback, or as edge/cloud"),
    "decompose": (cmd_decompose, DECOMPOSE_KEYS, "SVD-decompose one FFN of a checkpoint"),
    "estimate": (cmd_estimate, ESTIMATE_KEYS, "analytic iteration-time table"),
    "gendata": (cmd_gendata, GENDATA_KEYS, "write the synthetic majority task as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value settings file")
        if name == "estimate":
            p.add_argument("--sweep", action="store_true", help="CSV of SFT totals for ranks sweep_min..sweep_max")
        for key, default in keys.items():
            p.add_argument(f"--{key}", default=None, metavar="V", help=f"(default: {default!r})")
    return parser


def _setup_logging():
    level = os.environ.get("SFT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    func, keys, _ = COMMANDS[args.command]
    try:
        cfg = resolve(args, keys)
        if args.command == "estimate":
            return func(cfg, sweep=args.sweep)
        return func(cfg)
    except ConfigError as exc:
        print(f"splitft {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WireError, ConnectionError) as exc:
        print(f"splitft {args.command}: connection error: {exc}", file=sys.stderr)
        return EXIT_CONNECT
    except Exception as exc:  # noqa: BLE001 - mapped to the training-error exit code
        log.debug("training failed", exc_info=True)
        print(f"splitft {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
