"""Partitioning a decomposed model and the edge/cloud training loops."""

from __future__ import annotations

import copy
import csv
import logging
import threading
import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, batches
from .decompose import ResidualMode, SplitPlan, decompose_ffn, ffn_names
from .nn import LayerStack, ResidualAdd, Tap, cross_entropy
from .optim import Adam, OptimState, SGD, optimizer_step
from .wire import (
    Channel,
    ConnectionClosed,
    ProtocolError,
    Session,
    SessionConfig,
    duplex_pipe,
)

log = logging.getLogger(__name__)


@dataclass
class TrainMetrics:
    iteration: int
    loss: float
    batch_accuracy: float
    bytes_up: int = 0
    bytes_down: int = 0
    t_edge_ms: float = 0.0
    t_cloud_ms: float = 0.0
    t_comm_ms: float = 0.0


CSV_HEADER = ["iter", "loss", "acc", "bytes_up", "bytes_down", "t_edge_ms", "t_cloud_ms", "t_comm_ms"]


def write_metrics_csv(metrics: list[TrainMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for m in metrics:
            w.writerow([m.iteration, repr(m.loss), repr(m.batch_accuracy), m.bytes_up, m.bytes_down,
                        f"{m.t_edge_ms:.3f}", f"{m.t_cloud_ms:.3f}", f"{m.t_comm_ms:.3f}"])


def read_metrics_csv(path) -> list[TrainMetrics]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrainMetrics(int(row["iter"]), float(row["loss"]), float(row["acc"]),
                                    int(row["bytes_up"]), int(row["bytes_down"]), float(row["t_edge_ms"]),
                                    float(row["t_cloud_ms"]), float(row["t_comm_ms"])))
    return out


@dataclass
class PartitionedModel:
    net1: LayerStack
    net2: LayerStack
    plan: SplitPlan | None
    # key of the residual whose input crosses the boundary, if any
    residual_key: str | None = None

    @property
    def width(self) -> int:
        """Feature width of the activation sent edge -> cloud."""
        if self.plan is not None:
            return self.plan.rank
        ln = self.net1.layers[-1]
        return ln.params["gamma"].shape[0]


def partition(stack: LayerStack, plan: SplitPlan) -> PartitionedModel:
    """Cut a decomposed model right after ``ffn1.l``.

    Parameters are copied, so the two halves share nothing with ``stack`` or
    with each other.
    """
    if plan.residual_mode is ResidualMode.KEPT_LOCAL:
        raise ValueError("kept_local residual mode is for local simulation only and cannot be split")
    n1, n2, _ = ffn_names(plan.split_layer)
    try:
        idx = stack.index(n1)
    except KeyError:
        raise ValueError(f"stack is not decomposed at block {plan.split_layer}") from None
    rank = stack.layers[idx].params["w"].shape[1]
    if rank != plan.rank:
        raise ValueError(f"stack decomposed with rank {rank}, plan says {plan.rank}")
    if stack.layers[idx + 1].name != n2:
        raise ValueError(f"expected {n2} right after {n1}")
    key = f"blk{plan.split_layer}.ffn"
    has_residual = any(isinstance(x, (Tap, ResidualAdd)) and x.key == key for x in stack.layers)
    if has_residual != (plan.residual_mode is ResidualMode.KEPT_WITH_TRANSFER):
        raise ValueError(f"residual layout of block {plan.split_layer} does not match {plan.residual_mode}")
    layers = copy.deepcopy(stack.layers)
    return PartitionedModel(
        LayerStack(layers[: idx + 1]),
        LayerStack(layers[idx + 1 :]),
        plan,
        key if has_residual else None,
    )


def partition_plain(stack: LayerStack, split_layer: int) -> PartitionedModel:
    """Classic split learning: cut an undecomposed model after block ``split_layer``."""
    idx = stack.index(f"blk{split_layer}.ln2")
    layers = copy.deepcopy(stack.layers)
    return PartitionedModel(LayerStack(layers[: idx + 1]), LayerStack(layers[idx + 1 :]), None)


def session_config(part: PartitionedModel, model_hash: int, batch: int, seq: int) -> SessionConfig:
    if part.plan is None:
        return SessionConfig(model_hash, 0, part.width, ResidualMode.ELIMINATED, batch, seq)
    p = part.plan
    return SessionConfig(model_hash, p.split_layer, p.rank, p.residual_mode, batch, seq)


def _ms(t0, t1):
    return (t1 - t0) * 1e3


def edge_iteration(net1: LayerStack, opt: OptimState, batch, session: Session,
                   residual_key: str | None = None) -> TrainMetrics:
    """Forward ``net1``, ship the activation, wait for its gradient, update ``net1``."""
    x, y = batch
    it = session.iteration + 1
    up0, down0 = session.channel.bytes_sent, session.channel.bytes_received
    t0 = time.perf_counter()
    act = net1.forward(x)
    residual = net1.side_outputs.get(residual_key) if residual_key else None
    t1 = time.perf_counter()
    session.send_forward(it, act, y, residual)
    grad, res_grad, (loss, acc, t_cloud) = session.recv_backward(it)
    t2 = time.perf_counter()
    if grad.shape != act.shape:
        raise ProtocolError(f"gradient shape {grad.shape} != activation shape {act.shape}")
    side = {}
    if residual_key:
        if res_grad is None or res_grad.shape != residual.shape:
            raise ProtocolError("missing or misshapen residual gradient")
        side[residual_key] = res_grad
    net1.backward(grad, side)
    optimizer_step(net1, opt)
    t3 = time.perf_counter()
    return TrainMetrics(
        iteration=it,
        loss=loss,
        batch_accuracy=acc,
        bytes_up=session.channel.bytes_sent - up0,
        bytes_down=session.channel.bytes_received - down0,
        t_edge_ms=_ms(t0, t1) + _ms(t2, t3),
        t_cloud_ms=t_cloud,
        t_comm_ms=max(_ms(t1, t2) - t_cloud, 0.0),
    )


def cloud_iteration(net2: LayerStack, opt: OptimState, session: Session,
                    residual_key: str | None = None) -> TrainMetrics | None:
    """Serve one iteration; returns None once the edge shuts the session down."""
    up0, down0 = session.channel.bytes_received, session.channel.bytes_sent
    msg = session.recv_forward()
    if msg is None:
        return None
    it, act, residual, labels = msg
    t0 = time.perf_counter()
    cfg = session.config
    want = (cfg.batch * cfg.seq, cfg.rank)
    if act.shape != want:
        raise ProtocolError(f"activation shape {act.shape}, negotiated {want}")
    side = {residual_key: residual} if residual_key else None
    logits = net2.forward(act, side)
    loss, dlogits = cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    grad = net2.backward(dlogits)
    res_grad = net2.side_input_grads.get(residual_key) if residual_key else None
    optimizer_step(net2, opt)
    t_cloud = _ms(t0, time.perf_counter())
    session.send_backward(it, grad, (loss, acc, t_cloud), res_grad)
    return TrainMetrics(
        iteration=it,
        loss=loss,
        batch_accuracy=acc,
        bytes_up=session.channel.bytes_received - up0,
        bytes_down=session.channel.bytes_sent - down0,
        t_cloud_ms=t_cloud,
    )


def _opt_state(opt) -> OptimState:
    if isinstance(opt, OptimState):
        return copy.deepcopy(opt)
    if isinstance(opt, (Adam, SGD)):
        return OptimState(opt)
    if opt is None:
        return OptimState(Adam())
    raise TypeError(f"expected an optimizer config, got {opt!r}")


def run_local(stack: LayerStack, dataset: Dataset, iters: int, opt=None,
              batch_size: int = 32, seed: int = 0) -> list[TrainMetrics]:
    """Plain single-process training; trains ``stack`` in place."""
    state = _opt_state(opt)
    out = []
    if iters <= 0:
        return out
    feed = batches(dataset, batch_size, seed)
    for it in range(1, iters + 1):
        x, y = next(feed)
        t0 = time.perf_counter()
        logits = stack.forward(x)
        loss, dlogits = cross_entropy(logits, y)
        stack.backward(dlogits)
        optimizer_step(stack, state)
        acc = float(np.mean(np.argmax(logits, axis=1) == y))
        out.append(TrainMetrics(it, loss, acc, t_edge_ms=_ms(t0, time.perf_counter())))
    return out


def run_edge(part: PartitionedModel, session: Session, dataset: Dataset, iters: int, opt=None,
             batch_size: int = 32, seed: int = 0) -> list[TrainMetrics]:
    """Edge training loop; sends SHUTDOWN when done."""
    state = _opt_state(opt)
    feed = batches(dataset, batch_size, seed)
    out = []
    try:
        for _ in range(iters):
            out.append(edge_iteration(part.net1, state, next(feed), session, part.residual_key))
            m = out[-1]
            log.debug("edge it=%d loss=%.5f acc=%.3f up=%d down=%d", m.iteration, m.loss,
                      m.batch_accuracy, m.bytes_up, m.bytes_down)
    finally:
        try:
            session.shutdown()
        except (ConnectionClosed, OSError):
            pass
    return out


def run_cloud(part: PartitionedModel, session: Session, opt=None) -> list[TrainMetrics]:
    """Serve iterations until the edge shuts down or disconnects."""
    state = _opt_state(opt)
    out = []
    while True:
        try:
            m = cloud_iteration(part.net2, state, session, part.residual_key)
        except ConnectionClosed:
            break
        if m is None:
            break
        out.append(m)
    return out


def _prepare(stack: LayerStack, plan: SplitPlan | None, split_layer: int | None = None) -> PartitionedModel:
    if plan is None:
        return partition_plain(stack, split_layer)
    if any(layer.name == f"blk{plan.split_layer}.down" for layer in stack.layers):
        stack = decompose_ffn(stack, plan)
    return partition(stack, plan)


def run_split_loopback(stack: LayerStack, plan: SplitPlan | None, dataset: Dataset, iters: int, opt=None,
                       batch_size: int = 32, seed: int = 0, bandwidth_bps: float | None = None,
                       split_layer: int | None = None, model_hash: int = 0):
    """Run edge and cloud in two threads over an in-memory pipe.

    ``stack`` may be undecomposed (it is decomposed here) or already
    decomposed with ``plan``.  ``plan=None`` runs classic split learning cut
    after block ``split_layer``.  Returns ``(edge_metrics, cloud_metrics, part)``.
    """
    part = _prepare(stack, plan, split_layer)
    seq = dataset.sequences.shape[1]
    cfg = session_config(part, model_hash, batch_size, seq)
    edge_t, cloud_t = duplex_pipe()
    edge = Session("edge", Channel(edge_t, bandwidth_bps))
    cloud = Session("cloud", Channel(cloud_t, bandwidth_bps))
    result: dict = {}

    def serve():
        try:
            cloud.handshake(cfg)
            result["cloud"] = run_cloud(part, cloud, opt)
        except BaseException as exc:  # surfaced in the caller thread
            result["error"] = exc
            cloud_t.close()

    worker = threading.Thread(target=serve, name="sft-cloud", daemon=True)
    worker.start()
    try:
        edge.handshake(cfg)
        edge_metrics = run_edge(part, edge, dataset, iters, opt, batch_size, seed)
    except Exception:
        if "error" in result:
            raise result["error"]
        raise
    finally:
        worker.join(timeout=60)
        edge_t.close()
    if "error" in result:
        raise result["error"]
    return edge_metrics, result.get("cloud", []), part


def final_accuracy(metrics: list[TrainMetrics], window: int = 20) -> float:
    tail = metrics[-window:]
    return float(np.mean([m.batch_accuracy for m in tail])) if tail else float("nan")


def make_step(stack: LayerStack, opt=None):
    """Local training step ``step(x, y) -> TrainMetrics`` for a training script."""
    state = _opt_state(opt)
    counter = [0]

    def step(x, y):
        counter[0] += 1
        logits = stack.forward(x)
        loss, d = cross_entropy(logits, y)
        stack.backward(d)
        optimizer_step(stack, state)
        return TrainMetrics(counter[0], loss, float(np.mean(np.argmax(logits, axis=1) == y)))

    return step


class SplitFineTuning:
    """Turn a local training script into the edge (or cloud) half of a split run.

    Typical edge-side use adds two lines to an existing script::

        sft = SplitFineTuning(plan, role="edge", session=session)
        step = sft.wrap(stack, Adam())          # replaces make_step(stack, Adam())
        for x, y in feed:
            metrics = step(x, y)

    The cloud side wraps the same model and calls :meth:`serve`.
    """

    def __init__(self, plan: SplitPlan, role: str, session: Session):
        self.plan = plan
        self.role = role
        self.session = session
        self.part: PartitionedModel | None = None

    def wrap(self, stack: LayerStack, opt=None):
        self.part = _prepare(stack, self.plan)
        self._state = _opt_state(opt)
        if self.role != "edge":
            return self.serve
        part, session, state = self.part, self.session, self._state

        def step(x, y):
            return edge_iteration(part.net1, state, (x, y), session, part.residual_key)

        return step

    def serve(self) -> list[TrainMetrics]:
        if self.part is None:
            raise RuntimeError("call wrap() first")
        return run_cloud(self.part, self.session, self._state)

    def close(self):
        if self.role == "edge":
            self.session.shutdown()


__all__ = [
    "TrainMetrics", "PartitionedModel", "partition", "partition_plain", "edge_iteration",
    "cloud_iteration", "run_local", "run_edge", "run_cloud", "run_split_loopback",
    "write_metrics_csv", "read_metrics_csv", "final_accuracy", "make_step", "SplitFineTuning",
    "session_config",
]
