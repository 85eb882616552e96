"""
Re-parameterizing a Rep-TDNN
============================

Build the multi-branch training topology, rewrite it into a plain chain of
TDNN layers and check that frame-level outputs did not move.
"""

# %%
import numpy as np

from csrep import RepTdnnConfig, build_rep_tdnn, count_params, csrep_transform, forward_frames
from csrep.graph import branch_group_count, trunk_conv_count
from csrep.transform import TransformOptions

model = build_rep_tdnn(RepTdnnConfig(dtype="float64"))
print("branch groups:", branch_group_count(model), " params:", f"{count_params(model):,}")

# %%
# Each stage can be inspected on its own. Stage 1 only moves batch norms
# across layer boundaries, so it is bit-for-bit identical.
x = np.random.default_rng(1).standard_normal((2, 161, 120))
ref = forward_frames(model, x)
for stop in (1, 2, 3, 4):
    out, report = csrep_transform(model, TransformOptions(stop_after=stop))
    dev = np.abs(forward_frames(out, x) - ref).max()
    print(f"after step {stop} ({report.steps[-1]}): max |diff| = {dev:.1e}")

# %%
plain, report = csrep_transform(model, TransformOptions(self_check=True))
print("merged groups:", report.merged_groups, " trunk convs:", trunk_conv_count(plain))
print("self-check deviation:", report.max_deviation)
print("batch norms kept in front of SE:", len(report.retained_bns))
for layer, reason in report.retained_bns[:2]:
    print("  layer", layer, "-", reason)
print("plain params:", f"{count_params(plain):,}")
