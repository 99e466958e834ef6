"""Iteration-time estimates for BERT-base on a Jetson-class edge and a V100 cloud."""

from dataclasses import replace

from splitft.perfmodel import breakeven_bandwidth, comm_volume, estimate_table, format_bytes, bert_base_params

params = bert_base_params()

print("mode    compute_ms  comm_ms  total_ms")
for mode, compute, comm, total in estimate_table(params):
    print(f"{mode:<6} {compute:>11.1f} {comm:>8.1f} {total:>9.1f}")

# activation traffic per iteration, unsplit hidden size vs rank 8
print("SL :", format_bytes(comm_volume(32, 3076, 768)))
print("SFT:", format_bytes(comm_volume(32, 3076, 8)))

# below this link rate the decomposed split no longer beats training on the edge alone
sft = replace(params["sft"], t_comm_override_ms=None)
print(f"break-even bandwidth: {breakeven_bandwidth(sft, 744.0) / 1e6:.1f} Mbit/s")
