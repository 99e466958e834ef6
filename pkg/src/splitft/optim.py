"""SGD and Adam over a :class:`~splitft.nn.LayerStack`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SGD:
    lr: float = 0.01
    momentum: float = 0.0


@dataclass(frozen=True)
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimState:
    algorithm: SGD | Adam = field(default_factory=Adam)
    step_count: int = 0
    buffers: dict[str, tuple[np.ndarray, ...]] = field(default_factory=dict)


def optimizer_step(stack, opt: OptimState) -> None:
    """Apply one update to every parameter of ``stack`` and zero its grads."""
    if not stack.grads_ready:
        raise RuntimeError("optimizer_step: no gradients (call backward first)")
    algo = opt.algorithm
    opt.step_count += 1
    t = opt.step_count
    for layer in stack.layers:
        for key, p in layer.params.items():
            name = f"{layer.name}.{key}"
            g = layer.grads.get(key)
            if g is None or g.shape != p.shape:
                raise RuntimeError(f"optimizer_step: missing gradient for {name}")
            if isinstance(algo, Adam):
                if name not in opt.buffers:
                    opt.buffers[name] = (np.zeros_like(p), np.zeros_like(p))
                m, v = opt.buffers[name]
                m *= algo.beta1
                m += (1 - algo.beta1) * g
                v *= algo.beta2
                v += (1 - algo.beta2) * (g * g)
                mhat = m / (1 - algo.beta1**t)
                vhat = v / (1 - algo.beta2**t)
                p -= algo.lr * mhat / (np.sqrt(vhat) + algo.eps)
            elif isinstance(algo, SGD):
                if algo.momentum:
                    if name not in opt.buffers:
                        opt.buffers[name] = (np.zeros_like(p),)
                    (buf,) = opt.buffers[name]
                    buf *= algo.momentum
                    buf += g
                    p -= algo.lr * buf
                else:
                    p -= algo.lr * g
            else:
                raise TypeError(f"unknown optimizer {algo!r}")
    stack.zero_grad()
