"""Toy post-norm transformer with hand-written forward and backward passes.

A model is a flat :class:`LayerStack`.  Skip connections are expressed with a
:class:`Tap` (remembers its input under a key) and a later
:class:`ResidualAdd` (adds the remembered value back).  When a stack is cut
in two, a tap can end up on one side and its residual on the other; the
stack then exposes the value through ``side_outputs`` / ``side_inputs`` so
the caller can ship it across.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import DTYPE, Normal, Rng, ShapeError, bmatmul, matmul, seeded_fill, transpose

LN_EPS = 1e-5
GELU_C = 0.7978845608
GELU_A = 0.044715


class CacheError(RuntimeError):
    """backward called without a matching forward."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    seq_len: int = 16
    d_model: int = 32
    ffn_dim: int = 128
    n_blocks: int = 4
    n_heads: int = 2
    n_classes: int = 2

    def __post_init__(self):
        for key, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"ModelConfig.{key} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_dim < self.d_model:
            raise ValueError(f"ffn_dim={self.ffn_dim} must be >= d_model={self.d_model}")

    def config_hash(self) -> int:
        """Stable 64-bit digest of the hyperparameters."""
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


class Layer:
    kind = "Layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __repr__(self):
        shapes = {k: v.shape for k, v in self.params.items()}
        return f"{self.kind}({self.name!r}, {shapes})"


class Embedding(Layer):
    """Token plus learned position embedding; ids ``(B, S)`` -> ``(B*S, d)``."""

    kind = "Embedding"

    def __init__(self, name, vocab_size, seq_len, d_model, rng: Rng):
        super().__init__(name)
        self.params = {
            "tok": seeded_fill(vocab_size, d_model, Normal(0.0, 1.0), rng),
            "pos": seeded_fill(seq_len, d_model, Normal(0.0, 1.0), rng),
        }
        self._init_grads()

    def forward(self, ids):
        ids = np.asarray(ids)
        tok, pos = self.params["tok"], self.params["pos"]
        if ids.ndim != 2 or ids.shape[1] != pos.shape[0]:
            raise ShapeError(f"Embedding expects ids of shape (B, {pos.shape[0]}), got {ids.shape}")
        if ids.min() < 0 or ids.max() >= tok.shape[0]:
            raise ValueError(f"token id outside [0, {tok.shape[0]})")
        self._cache = ids
        out = tok[ids] + pos[None, :, :]
        return out.reshape(-1, tok.shape[1])

    def backward(self, dy):
        ids = self._cache
        b, s = ids.shape
        d = self.params["tok"].shape[1]
        np.add.at(self.grads["tok"], ids.reshape(-1), dy)
        self.grads["pos"] += dy.reshape(b, s, d).sum(axis=0)
        return None


class Linear(Layer):
    """``y = x W + b``; ``kind`` only labels the role inside a block."""

    def __init__(self, name, w: np.ndarray, b: np.ndarray | None = None, kind: str = "Linear"):
        super().__init__(name)
        self.kind = kind
        self.params = {"w": w}
        if b is not None:
            self.params["b"] = b
        self._init_grads()

    def forward(self, x):
        w = self.params["w"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"{self.name}: input {x.shape} does not match weight {w.shape}")
        self._cache = x
        y = matmul(x, w)
        if "b" in self.params:
            y += self.params["b"]
        return y

    def backward(self, dy):
        x = self._cache
        self.grads["w"] += matmul(transpose(x), dy)
        if "b" in self.params:
            self.grads["b"] += dy.sum(axis=0)
        return matmul(dy, transpose(self.params["w"]))


class Diagonal(Layer):
    """Per-feature scaling ``y = x * s`` (a diagonal matrix kept as a vector)."""

    kind = "Diagonal"

    def __init__(self, name, s: np.ndarray):
        super().__init__(name)
        self.params = {"s": s}
        self._init_grads()

    def forward(self, x):
        s = self.params["s"]
        if x.ndim != 2 or x.shape[1] != s.shape[0]:
            raise ShapeError(f"{self.name}: input {x.shape} does not match scale {s.shape}")
        self._cache = x
        return x * s

    def backward(self, dy):
        self.grads["s"] += (self._cache * dy).sum(axis=0)
        return dy * self.params["s"]


class Gelu(Layer):
    kind = "Gelu"

    def forward(self, x):
        inner = GELU_C * (x + GELU_A * x * x * x)
        t = np.tanh(inner)
        self._cache = (x, t)
        return 0.5 * x * (1 + t)

    def backward(self, dy):
        x, t = self._cache
        dinner = GELU_C * (1 + 3 * GELU_A * x * x)
        return dy * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner)


class LayerNorm(Layer):
    kind = "LayerNorm"

    def __init__(self, name, d_model, dtype=DTYPE):
        super().__init__(name)
        self.params = {"gamma": np.ones(d_model, dtype=dtype), "beta": np.zeros(d_model, dtype=dtype)}
        self._init_grads()

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.params["gamma"].shape[0]:
            raise ShapeError(f"{self.name}: bad input shape {x.shape}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        rstd = 1 / np.sqrt(var + LN_EPS)
        xhat = xc * rstd
        self._cache = (xhat, rstd)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy):
        xhat, rstd = self._cache
        self.grads["gamma"] += (dy * xhat).sum(axis=0)
        self.grads["beta"] += dy.sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return rstd * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Attention(Layer):
    """Multi-head self-attention over ``(B*S, d)`` rows, ``S`` fixed."""

    kind = "Attention"

    def __init__(self, name, d_model, n_heads, seq_len, rng: Rng):
        super().__init__(name)
        self.n_heads = n_heads
        self.seq_len = seq_len
        std = 1.0 / math.sqrt(d_model)
        for p in "qkvo":
            self.params[f"w{p}"] = seeded_fill(d_model, d_model, Normal(0.0, std), rng)
            self.params[f"b{p}"] = np.zeros(d_model, dtype=DTYPE)
        self._init_grads()

    def _split(self, t, b):
        s, h = self.seq_len, self.n_heads
        dh = t.shape[1] // h
        return t.reshape(b, s, h, dh).transpose(0, 2, 1, 3).reshape(b * h, s, dh)

    def _merge(self, t, b):
        s, h = self.seq_len, self.n_heads
        dh = t.shape[2]
        return t.reshape(b, h, s, dh).transpose(0, 2, 1, 3).reshape(b * s, h * dh)

    def forward(self, x):
        p = self.params
        d = p["wq"].shape[0]
        if x.ndim != 2 or x.shape[1] != d or x.shape[0] % self.seq_len:
            raise ShapeError(f"{self.name}: bad input shape {x.shape}")
        b = x.shape[0] // self.seq_len
        scale = x.dtype.type(1.0 / math.sqrt(d // self.n_heads))
        q = self._split(matmul(x, p["wq"]) + p["bq"], b)
        k = self._split(matmul(x, p["wk"]) + p["bk"], b)
        v = self._split(matmul(x, p["wv"]) + p["bv"], b)
        probs = softmax_rows(bmatmul(q, k.transpose(0, 2, 1)) * scale)
        ctx = self._merge(bmatmul(probs, v), b)
        self._cache = (x, q, k, v, probs, ctx, scale, b)
        return matmul(ctx, p["wo"]) + p["bo"]

    def backward(self, dy):
        x, q, k, v, probs, ctx, scale, b = self._cache
        p, g = self.params, self.grads
        g["wo"] += matmul(transpose(ctx), dy)
        g["bo"] += dy.sum(axis=0)
        dctx = self._split(matmul(dy, transpose(p["wo"])), b)
        dprobs = bmatmul(dctx, v.transpose(0, 2, 1))
        dv = bmatmul(probs.transpose(0, 2, 1), dctx)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dq = self._merge(bmatmul(dscores, k), b)
        dk = self._merge(bmatmul(dscores.transpose(0, 2, 1), q), b)
        dv = self._merge(dv, b)
        xt = transpose(x)
        dx = None
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            g[f"w{name}"] += matmul(xt, dproj)
            g[f"b{name}"] += dproj.sum(axis=0)
            term = matmul(dproj, transpose(p[f"w{name}"]))
            dx = term if dx is None else dx + term
        return dx


class Tap(Layer):
    """Identity that remembers its input for a later :class:`ResidualAdd`."""

    kind = "Tap"

    def __init__(self, name, key: str):
        super().__init__(name)
        self.key = key


class ResidualAdd(Layer):
    kind = "ResidualAdd"

    def __init__(self, name, key: str):
        super().__init__(name)
        self.key = key


class Classifier(Layer):
    """Mean-pool over the sequence, then a linear map to class logits."""

    kind = "Classifier"

    def __init__(self, name, d_model, n_classes, seq_len, rng: Rng):
        super().__init__(name)
        self.seq_len = seq_len
        self.params = {
            "w": seeded_fill(d_model, n_classes, Normal(0.0, 0.02), rng),
            "b": np.zeros(n_classes, dtype=DTYPE),
        }
        self._init_grads()

    def forward(self, x):
        w = self.params["w"]
        if x.ndim != 2 or x.shape[1] != w.shape[0] or x.shape[0] % self.seq_len:
            raise ShapeError(f"{self.name}: bad input shape {x.shape}")
        b = x.shape[0] // self.seq_len
        pooled = x.reshape(b, self.seq_len, -1).mean(axis=1)
        self._cache = pooled
        return matmul(pooled, w) + self.params["b"]

    def backward(self, dy):
        pooled = self._cache
        self.grads["w"] += matmul(transpose(pooled), dy)
        self.grads["b"] += dy.sum(axis=0)
        dpooled = matmul(dy, transpose(self.params["w"])) / pooled.dtype.type(self.seq_len)
        return np.repeat(dpooled, self.seq_len, axis=0)


class LayerStack:
    """Ordered layers run front to back; backward runs them in reverse."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)
        self.side_outputs: dict[str, np.ndarray] = {}
        self.side_input_grads: dict[str, np.ndarray] = {}
        self._forwards = 0
        self._backwards = 0
        self.grads_ready = False

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def layer(self, name: str) -> Layer:
        return self.layers[self.index(name)]

    def forward(self, x, side_inputs: dict[str, np.ndarray] | None = None):
        """Run every layer; residuals whose tap is absent read ``side_inputs``."""
        tap_keys = {l.key for l in self.layers if isinstance(l, Tap)}
        res_keys = {l.key for l in self.layers if isinstance(l, ResidualAdd)}
        saved = dict(side_inputs or {})
        self.side_outputs = {}
        for layer in self.layers:
            if isinstance(layer, Tap):
                saved[layer.key] = x
                if layer.key not in res_keys:
                    self.side_outputs[layer.key] = x
            elif isinstance(layer, ResidualAdd):
                if layer.key not in saved:
                    raise ShapeError(f"{layer.name}: no value for residual {layer.key!r}")
                skip = saved[layer.key]
                if skip.shape != x.shape:
                    raise ShapeError(f"{layer.name}: residual {skip.shape} vs input {x.shape}")
                x = x + skip
            else:
                x = layer.forward(x)
        self._forwards = self._backwards + 1
        self._external = {k for k in res_keys if k not in tap_keys}
        return x

    def backward(self, dy, side_grads: dict[str, np.ndarray] | None = None):
        """Backpropagate ``dy``; returns the gradient w.r.t. the stack input.

        ``side_grads`` carries gradients for taps whose residual lives in
        another stack.  Gradients for residual inputs that came from outside
        are left in ``side_input_grads``.
        """
        if self._forwards != self._backwards + 1:
            raise CacheError("backward called without a matching forward")
        pending = dict(side_grads or {})
        self.side_input_grads = {}
        for layer in reversed(self.layers):
            if isinstance(layer, ResidualAdd):
                if layer.key in self._external:
                    self.side_input_grads[layer.key] = dy
                else:
                    pending[layer.key] = dy
            elif isinstance(layer, Tap):
                if layer.key in pending:
                    dy = dy + pending.pop(layer.key)
            else:
                dy = layer.backward(dy)
        self._backwards = self._forwards
        self.grads_ready = True
        return dy

    def named_params(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", value

    def named_grads(self):
        for layer in self.layers:
            for key, value in layer.grads.items():
                yield f"{layer.name}.{key}", value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]):
        own = dict(self.named_params())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for layer in self.layers:
            for key, value in layer.params.items():
                src = np.asarray(state[f"{layer.name}.{key}"])
                if src.size != value.size:
                    raise ShapeError(f"{layer.name}.{key}: {src.shape} vs {value.shape}")
                layer.params[key] = src.reshape(value.shape).astype(value.dtype, copy=True)
            layer._init_grads()

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()
        self.grads_ready = False

    def astype(self, dtype) -> "LayerStack":
        """Deep copy with every parameter cast to ``dtype``."""
        out = copy.deepcopy(self)
        for layer in out.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            layer._init_grads()
            layer._cache = None
        return out


def build_block(i: int, cfg: ModelConfig, rng: Rng) -> list[Layer]:
    """Layers of transformer block ``i`` (1-based), post-norm."""
    d, h = cfg.d_model, cfg.ffn_dim
    p = f"blk{i}"
    return [
        Tap(f"{p}.tap_attn", f"{p}.attn"),
        Attention(f"{p}.attn", d, cfg.n_heads, cfg.seq_len, rng),
        ResidualAdd(f"{p}.res_attn", f"{p}.attn"),
        LayerNorm(f"{p}.ln1", d),
        Tap(f"{p}.tap_ffn", f"{p}.ffn"),
        Linear(f"{p}.up", seeded_fill(d, h, Normal(0.0, 1 / math.sqrt(d)), rng),
               np.zeros(h, dtype=DTYPE), kind="LinearUp"),
        Gelu(f"{p}.gelu"),
        Linear(f"{p}.down", seeded_fill(h, d, Normal(0.0, 1 / math.sqrt(h)), rng),
               np.zeros(d, dtype=DTYPE), kind="LinearDown"),
        ResidualAdd(f"{p}.res_ffn", f"{p}.ffn"),
        LayerNorm(f"{p}.ln2", d),
    ]


def build_model(cfg: ModelConfig, seed: int = 0) -> LayerStack:
    rng = Rng(seed)
    layers: list[Layer] = [Embedding("embed", cfg.vocab_size, cfg.seq_len, cfg.d_model, rng)]
    for i in range(1, cfg.n_blocks + 1):
        layers += build_block(i, cfg, rng)
    layers.append(Classifier("head", cfg.d_model, cfg.n_classes, cfg.seq_len, rng))
    return LayerStack(layers)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float((lse - z[rows, labels]).mean())
    d = softmax_rows(logits)
    d[rows, labels] -= 1
    return loss, d / logits.dtype.type(b)
