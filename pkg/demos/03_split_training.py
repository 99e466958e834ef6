"""Edge/cloud split fine-tuning over an in-memory link, checked against local training."""

import numpy as np

from splitft import ModelConfig, build_model
from splitft.data import gen_majority_task
from splitft.decompose import SplitPlan, decompose_ffn
from splitft.optim import Adam
from splitft.splitnet import final_accuracy, run_local, run_split_loopback

cfg = ModelConfig()
data = gen_majority_task(4096, cfg, seed=1)
plan = SplitPlan(split_layer=3, rank=8)

model = decompose_ffn(build_model(cfg, seed=0), plan)
local = run_local(model.astype(np.float32), data, 100, Adam(), batch_size=32)
edge, cloud, part = run_split_loopback(model, plan, data, 100, Adam(), batch_size=32)

print("edge layers :", [x.name for x in part.net1.layers][-3:])
print("cloud layers:", [x.name for x in part.net2.layers][:3], "...")
print("identical losses:", [m.loss for m in edge] == [m.loss for m in local])
print("bytes up / down per iteration:", edge[0].bytes_up, edge[0].bytes_down)

# same run without the decomposition: a 32-wide activation crosses the link
plain, _, _ = run_split_loopback(build_model(cfg, seed=0), None, data, 5, Adam(), split_layer=3)
print("classic split learning bytes up:", plain[0].bytes_up, f"({plain[0].bytes_up / edge[0].bytes_up:.2f}x)")

# a throttled link: 20 Mbit/s
slow, _, _ = run_split_loopback(model, plan, data, 5, Adam(), bandwidth_bps=20e6)
print("t_comm at 20 Mbit/s (ms):", [round(m.t_comm_ms, 2) for m in slow])
print("batch accuracy, last 20 iterations:", final_accuracy(edge))
