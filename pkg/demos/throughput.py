"""
Frames per second, before and after
===================================

Fewer, wider convs mean fewer passes over memory. Single BLAS thread, one
utterance of 300 frames.
"""

# %%
from csrep import RepTdnnConfig, build_rep_tdnn, csrep_transform
from csrep.bench import benchmark

model = build_rep_tdnn(RepTdnnConfig())
plain, _ = csrep_transform(model)

best = {"multi-branch": 0.0, "plain": 0.0}
for _ in range(5):
    for name, m in (("multi-branch", model), ("plain", plain)):
        best[name] = max(best[name], benchmark(m, frames=300, warmup=1, iters=4).frames_per_second)

for name, fps in best.items():
    print(f"{name:>13}: {fps:8.0f} frames/s")
print(f"speedup: {best['plain'] / best['multi-branch']:.2f}x")
