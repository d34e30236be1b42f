"""
Why rewards are ranked
======================

Weighting samples by how far their reward sits above the batch quantile
breaks down in two ways. When rewards are squashed into a tiny range, single
precision cannot tell them apart. When a few samples dominate, everything
else gets no weight at all. Rank based weights sidestep both.
"""

import numpy as np

from freqsr.bench import precision_barrier_demo, synthetic_tail_logs, tail_barrier_stats
from freqsr.rewards import baseline_weights, rank_map

for dtype in (np.float32, np.float64):
    info = precision_barrier_demo(1000, 5, dtype)
    print(f"{info['precision']}: {info['distinct_mapped']} distinct mapped rewards, "
          f"baseline all zero: {info['baseline_all_zero']}, rank weights > 0: {info['rank_positive']}")

rewards = np.array([3.0, 1.0, 2.0, 2.0, 0.5, -1.0, 0.0, 4.0, 1.5, 2.5])
print("rewards:          ", rewards)
print("baseline weights: ", np.round(baseline_weights(rewards, 30), 3))
print("rank weights:     ", np.round(rank_map(rewards, 30), 3))

table = tail_barrier_stats(synthetic_tail_logs(seed=0), 5, (0, 1, 3, 5, 10))
print("\nshare of epochs where the top k samples carry all weight")
for k, frac in table.rows():
    print(f"  k={k:>2}: {100 * frac:.2f}%")
print(f"epochs with no positive baseline weight: {100 * table.barrier:.2f}%")
