"""Streaming frequency estimates for the sampling-bias correction.

Popular items show up as in-batch negatives far more often than rare ones.
A count-min sketch tracks how often each item has been seen, and its log
frequency is subtracted from the logits.

Run: python demos/02_sketch_logq.py
"""

from collections import Counter

import numpy as np

from hetrep.schema import NodeRef
from hetrep.sketch import CountMinSketch

rng = np.random.default_rng(0)
stream = [NodeRef(int(x), 0) for x in rng.zipf(1.2, size=100_000) % 50_000]
exact = Counter(stream)

sk = CountMinSketch(width=2048, depth=4, seed=0)
sk.update_many(stream)

err = np.array([sk.estimate(r) - c for r, c in exact.items()])
print(f"{len(exact)} distinct items, {sk.total} updates")
print(f"underestimates: {(err < 0).sum()}, mean overcount {err.mean():.1f}, bound e/w*N = {np.e / 2048 * sk.total:.0f}")

print("\nitem      true   sketch   log q")
for ref, c in exact.most_common(3) + [(NodeRef(49_999, 0), exact[NodeRef(49_999, 0)])]:
    print(f"{ref.id:6d} {c:7d} {sk.estimate(ref):8d} {sk.log_q(ref):7.2f}")
