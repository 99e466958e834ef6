import math

import numpy as np
import pytest

from gradcheck_util import TOL, check_stack, layer_cases
from splitft.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from splitft.data import batches, gen_majority_task
from splitft.nn import (
    Attention, CacheError, LayerNorm, LayerStack, Linear, ModelConfig, build_model, cross_entropy, softmax_rows,
)
from splitft.optim import SGD, Adam, OptimState, optimizer_step
from splitft.tensor import Rng, ShapeError, matmul, transpose


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(ffn_dim=16)
    with pytest.raises(ValueError):
        ModelConfig(n_blocks=0)
    assert ModelConfig().config_hash() == ModelConfig().config_hash()
    assert ModelConfig().config_hash() != ModelConfig(n_blocks=3).config_hash()


def test_layernorm_constant_row_is_zero():
    ln = LayerNorm("ln", 5)
    out = ln.forward(np.full((2, 5), 3.25, dtype=np.float32))
    assert np.array_equal(out, np.zeros((2, 5), np.float32))


def test_attention_single_position():
    attn = Attention("a", 4, 2, 1, Rng(0))
    for k in ("bq", "bk", "bv", "bo"):
        attn.params[k] = np.random.default_rng(1).standard_normal(4).astype(np.float32)
    x = np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32)
    out = attn.forward(x)
    p = attn.params
    v = x.astype(np.float64) @ p["wv"] + p["bv"]
    expect = v @ p["wo"] + p["bo"]
    np.testing.assert_allclose(out, expect, rtol=1e-5, atol=1e-5)
    probs = attn._cache[4]
    assert np.all(probs == 1.0)


def test_attention_softmax_rows_sum_to_one(rng):
    attn = Attention("a", 8, 2, 5, Rng(3))
    attn.forward(rng.standard_normal((10, 8)).astype(np.float32) * 3)
    probs = attn._cache[4]
    assert np.all(np.abs(probs.sum(axis=-1) - 1) < 1e-5)


def _oracle_forward(state, cfg, ids):
    """Straight-line float64 re-implementation of the post-norm transformer."""

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(0.7978845608 * (x + 0.044715 * x**3)))

    P = {k: v.astype(np.float64) for k, v in state.items()}
    b, s = ids.shape
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    x = P["embed.tok"][ids] + P["embed.pos"][None]  # (b, s, d)
    for i in range(1, cfg.n_blocks + 1):
        a = f"blk{i}.attn."
        q = x @ P[a + "wq"] + P[a + "bq"]
        k = x @ P[a + "wk"] + P[a + "bk"]
        v = x @ P[a + "wv"] + P[a + "bv"]
        heads = []
        for j in range(h):
            sl = slice(j * dh, (j + 1) * dh)
            sc = q[..., sl] @ np.swapaxes(k[..., sl], 1, 2) / math.sqrt(dh)
            sc = np.exp(sc - sc.max(-1, keepdims=True))
            sc /= sc.sum(-1, keepdims=True)
            heads.append(sc @ v[..., sl])
        att = np.concatenate(heads, -1) @ P[a + "wo"] + P[a + "bo"]
        x = ln(x + att, P[f"blk{i}.ln1.gamma"], P[f"blk{i}.ln1.beta"])
        f = gelu(x @ P[f"blk{i}.up.w"] + P[f"blk{i}.up.b"]) @ P[f"blk{i}.down.w"] + P[f"blk{i}.down.b"]
        x = ln(x + f, P[f"blk{i}.ln2.gamma"], P[f"blk{i}.ln2.beta"])
    return x.mean(1) @ P["head.w"] + P["head.b"]


def test_two_block_model_matches_straight_line_oracle():
    cfg = ModelConfig(n_blocks=2)
    stack = build_model(cfg, seed=11)
    ids = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(4, cfg.seq_len))
    out = stack.forward(ids)
    expect = _oracle_forward(stack.state_dict(), cfg, ids)
    assert np.linalg.norm(out - expect) / np.linalg.norm(expect) < 1e-4


def test_forward_is_deterministic(small_cfg):
    ids = np.random.default_rng(0).integers(0, small_cfg.vocab_size, size=(3, small_cfg.seq_len))
    a = build_model(small_cfg, 5).forward(ids)
    b = build_model(small_cfg, 5).forward(ids)
    assert np.array_equal(a, b)


def test_zero_upstream_gradient(small_cfg):
    stack = build_model(small_cfg, 0)
    ids = np.random.default_rng(0).integers(0, small_cfg.vocab_size, size=(2, small_cfg.seq_len))
    out = stack.forward(ids)
    stack.backward(np.zeros_like(out))
    for name, g in stack.named_grads():
        assert not g.any(), name
    # continuous input: input gradient is zero as well
    tail = LayerStack(stack.layers[1:])
    x = np.random.default_rng(1).standard_normal((2 * small_cfg.seq_len, small_cfg.d_model)).astype(np.float32)
    out = tail.forward(x)
    assert not tail.backward(np.zeros_like(out)).any()


def test_backward_requires_forward(small_cfg):
    stack = build_model(small_cfg, 0)
    with pytest.raises(CacheError):
        stack.backward(np.zeros((2, small_cfg.n_classes), np.float32))
    ids = np.zeros((2, small_cfg.seq_len), dtype=np.int64)
    out = stack.forward(ids)
    stack.backward(np.zeros_like(out))
    with pytest.raises(CacheError):
        stack.backward(np.zeros_like(out))


def test_shape_errors(small_cfg):
    stack = build_model(small_cfg, 0)
    with pytest.raises(ShapeError):
        stack.forward(np.zeros((2, small_cfg.seq_len + 1), dtype=np.int64))
    lin = Linear("l", np.zeros((3, 2), np.float32))
    with pytest.raises(ShapeError):
        lin.forward(np.zeros((4, 5), np.float32))


def test_linear_down_input_grad_closed_form(rng):
    w = rng.standard_normal((16, 8)).astype(np.float32)
    lin = Linear("down", w, np.zeros(8, np.float32), kind="LinearDown")
    lin.forward(rng.standard_normal((6, 16)).astype(np.float32))
    dy = rng.standard_normal((6, 8)).astype(np.float32)
    assert np.array_equal(lin.backward(dy), matmul(dy, transpose(w)))


KINDS = ["Embedding", "LinearUp", "LinearDown", "FFN1", "FFN2", "FFN3", "Gelu", "LayerNorm",
         "Attention", "ResidualAdd", "Classifier"]


@pytest.mark.parametrize("kind", KINDS)
def test_layer_gradients_match_finite_differences(kind):
    for seed in range(10):
        stack, x = layer_cases(seed)[kind]
        worst = check_stack(stack, x, seed)
        assert max(worst.values()) < TOL, (seed, worst)


def test_small_model_gradients(small_cfg):
    stack = build_model(small_cfg, 3)
    tail = LayerStack(stack.layers[1:])
    x = np.random.default_rng(3).standard_normal((2 * small_cfg.seq_len, small_cfg.d_model))
    # deep stacks compound curvature; a smaller step keeps the FD error down
    worst = check_stack(tail, x, 3, eps=1e-5)
    assert max(worst.values()) < TOL, worst


def test_cross_entropy_uniform():
    loss, d = cross_entropy(np.zeros((4, 2), np.float32), [0, 1, 1, 0])
    assert loss == pytest.approx(math.log(2), abs=1e-6)
    np.testing.assert_allclose(d.sum(axis=1), 0, atol=1e-7)


def test_cross_entropy_saturates():
    logits = np.zeros((3, 4), np.float32)
    labels = [2, 0, 3]
    logits[np.arange(3), labels] = 30
    loss, _ = cross_entropy(logits, labels)
    assert loss < 1e-9


def test_cross_entropy_gradient_finite_differences(rng):
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, 5)
    _, d = cross_entropy(logits, labels)
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += 1e-5
        down[idx] -= 1e-5
        fd[idx] = (cross_entropy(up, labels)[0] - cross_entropy(down, labels)[0]) / 2e-5
    np.testing.assert_allclose(d, fd, rtol=1e-5, atol=1e-8)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2), np.float32), [0, 2])


def _stepped(small_cfg, algo, zero_grads=True):
    stack = build_model(small_cfg, 0)
    before = stack.state_dict()
    ids = np.zeros((2, small_cfg.seq_len), dtype=np.int64)
    out = stack.forward(ids)
    stack.backward(np.zeros_like(out) if zero_grads else np.ones_like(out))
    opt = OptimState(algo)
    optimizer_step(stack, opt)
    return before, stack, opt


def test_adam_zero_gradient_is_noop(small_cfg):
    before, stack, opt = _stepped(small_cfg, Adam())
    for k, v in stack.named_params():
        assert np.array_equal(v, before[k]), k
    assert opt.step_count == 1
    for name, p in stack.named_params():
        assert all(buf.shape == p.shape for buf in opt.buffers[name])


def test_sgd_zero_lr_is_noop(small_cfg):
    before, stack, _ = _stepped(small_cfg, SGD(lr=0.0), zero_grads=False)
    for k, v in stack.named_params():
        assert np.array_equal(v, before[k]), k


def test_step_without_backward_fails(small_cfg):
    with pytest.raises(RuntimeError):
        optimizer_step(build_model(small_cfg, 0), OptimState(Adam()))


def test_single_adam_step_hand_evaluated():
    lin = Linear("p", np.array([[1.0]], np.float32))
    stack = LayerStack([lin])
    stack.forward(np.array([[1.0]], np.float32))
    stack.backward(np.array([[0.5]], np.float32))  # dL/dw = x * dy = 0.5
    optimizer_step(stack, OptimState(Adam(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)))
    m = (1 - 0.9) * 0.5
    v = (1 - 0.999) * 0.25
    mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
    expect = 1.0 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
    assert lin.params["w"][0, 0] == pytest.approx(expect, abs=1e-7)
    assert not lin.grads["w"].any()


def test_sgd_momentum_two_steps():
    lin = Linear("p", np.array([[2.0]], np.float32))
    stack = LayerStack([lin])
    opt = OptimState(SGD(lr=0.1, momentum=0.9))
    for _ in range(2):
        stack.forward(np.array([[1.0]], np.float32))
        stack.backward(np.array([[1.0]], np.float32))
        optimizer_step(stack, opt)
    # buf1 = 1, w = 1.9; buf2 = 0.9 + 1 = 1.9, w = 1.71
    assert lin.params["w"][0, 0] == pytest.approx(1.71, abs=1e-6)
    assert opt.step_count == 2


def test_checkpoint_round_trip(tmp_path, small_cfg):
    stack = build_model(small_cfg, 4)
    path = tmp_path / "w.sftw"
    save_checkpoint(path, stack.state_dict())
    raw = path.read_bytes()
    assert raw[:4] == b"SFTW" and raw[4:6] == b"\x01\x00"
    other = build_model(small_cfg, 5)
    other.load_state(load_checkpoint(path))
    ids = np.random.default_rng(0).integers(0, small_cfg.vocab_size, size=(2, small_cfg.seq_len))
    assert np.array_equal(stack.forward(ids), other.forward(ids))


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE\x01\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc"
    save_checkpoint(trunc, {"a": np.ones((2, 2), np.float32)})
    trunc.write_bytes(trunc.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_loss_decreases_on_synthetic_task(default_cfg):
    stack = build_model(default_cfg, 0)
    ds = gen_majority_task(4096, default_cfg, 1)
    opt = OptimState(Adam())
    losses = []
    feed = batches(ds, 32, 1)
    for _ in range(300):
        x, y = next(feed)
        loss, d = cross_entropy(stack.forward(x), y)
        stack.backward(d)
        optimizer_step(stack, opt)
        losses.append(loss)
    assert np.mean(losses[-20:]) < 0.9 * np.mean(losses[:20])


def test_softmax_rows_stable():
    z = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
    np.testing.assert_allclose(softmax_rows(z), [[0.5, 0.5], [0.0, 1.0]])
