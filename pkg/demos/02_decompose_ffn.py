"""Low-rank structure of an FFN down-projection and what the rewrite does to the model."""

import numpy as np

from splitft import ModelConfig, build_model
from splitft.decompose import ResidualMode, SplitPlan, decompose_ffn
from splitft.svd import reconstruction_error, svd

cfg = ModelConfig()
model = build_model(cfg, seed=0)
w = model.layer("blk3.down").params["w"]  # 128 x 32

s = svd(w)
print("leading singular values:", np.round(s.sigma[:6], 3))
for r in (1, 2, 4, 8, 16, 32):
    print(f"rank {r:>2}: relative error {reconstruction_error(w, r):.3e}")

ids = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(8, cfg.seq_len))
ref = model.forward(ids)

# full rank with the skip connection left in place is the same function
full = decompose_ffn(model, SplitPlan(3, 32, ResidualMode.KEPT_LOCAL))
print("full-rank change:", np.linalg.norm(full.forward(ids) - ref) / np.linalg.norm(ref))

# rank 8, residual dropped: what actually gets split and fine-tuned
small = decompose_ffn(model, SplitPlan(3, 8, ResidualMode.ELIMINATED))
print("rank-8 change before fine-tuning:", np.linalg.norm(small.forward(ids) - ref) / np.linalg.norm(ref))
print([layer.name for layer in small.layers if "3" in layer.name])
