"""
EER and minDCF on synthetic trials
==================================
"""

# %%
import numpy as np

from csrep.metrics import TrialScore, compute_eer, compute_min_dcf

rng = np.random.default_rng(0)
targets = rng.normal(2.0, 1.0, 2000)
nontargets = rng.normal(0.0, 1.0, 20000)
trials = [TrialScore("target", s) for s in targets] + [TrialScore("nontarget", s) for s in nontargets]

# %%
# Two unit-variance Gaussians two apart cross at 1, where both error rates
# are Phi(-1), about 15.9%. With 2000 targets expect to land within a
# percentage point of that.
print(f"EER: {compute_eer(trials):.4f}")
for p in (0.01, 0.001):
    print(f"minDCF(p_target={p}): {compute_min_dcf(trials, p):.4f}")

# %%
# The same numbers from the command line:
#   csrep eer scores.txt --p-target 0.01
