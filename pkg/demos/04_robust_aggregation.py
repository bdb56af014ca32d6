"""Server-side aggregation rules and the update-level defenses.

Weighted averaging, norm clipping, Gaussian noising, and how Krum /
Multi-Krum score and reject an outlier update.
"""

import numpy as np

from fedsim.aggregation import (add_noise, fedavg_aggregate, krum_scores,
                                krum_select, multi_krum_aggregate, norm_clip)
from fedsim.params import ModelUpdate, ParamTag, ParamTree

rng = np.random.default_rng(0)


def update(vec, count, cid):
    tree = ParamTree({"delta": (np.asarray(vec, float), ParamTag.BODY)})
    return ModelUpdate(tree, count, cid)


# --- weighted average (sizes 1 and 3, deltas 1 and 5 -> 4) -------------------
ups = [update([1.0], 1, 0), update([5.0], 3, 1)]
print("weighted average of deltas 1 (n=1) and 5 (n=3):",
      fedavg_aggregate(ups).get("delta")[0])

# --- norm clipping ------------------------------------------------------------
big = update([3.0, 4.0], 1, 0)
clipped = norm_clip(big, c=1.0)
print("clip (3,4) to norm 1 ->", clipped.delta.get("delta"))

# --- Gaussian noising ----------------------------------------------------------
noisy = add_noise(update(np.zeros(50_000), 1, 0), sigma=1e-3,
                  rng=np.random.default_rng(1))
print(f"noise sigma=1e-3 -> empirical std {noisy.delta.get('delta').std():.2e}")

# --- Krum rejects the outlier ---------------------------------------------------
honest = [update(rng.normal(0, 0.1, 4), 1, i) for i in range(6)]
outlier = update(np.full(4, 25.0), 1, 6)
everyone = honest + [outlier]
scores = krum_scores(everyone, f=1)
print("\nKrum scores (last update is the outlier):")
print("  " + "  ".join(f"{s:8.2f}" for s in scores))
winner = krum_select(everyone, f=1)
print(f"Krum winner index: {winner} (outlier rejected: {winner != 6})")

mean = multi_krum_aggregate(everyone, f=1, k=4).get("delta")
print("Multi-Krum (k=4) mean:", np.round(mean, 3))
