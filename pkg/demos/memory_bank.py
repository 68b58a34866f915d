# Greedy deduplication of feature vectors into a memory bank, then soft
# retrieval by attention.
import numpy as np

from anchorsplat import diffcore as dc
from anchorsplat.membank import AdaptLayer, attend, attention_weights, build_bank, build_bank_fast

rng = np.random.default_rng(1)

# 6 prototypes, each repeated with a little noise: a feature map seen as a stream
protos = rng.normal(size=(6, 32))
stream = np.repeat(protos, 200, axis=0) + rng.normal(scale=0.02, size=(1200, 32))
rng.shuffle(stream)

for gamma in (0.5, 0.9, 0.999):
    sub = build_bank(stream, gamma)
    print(f"gamma {gamma}: {len(sub)} entries")

sub = build_bank(stream, 0.9, tag="demo")
sims = sub.entries @ sub.entries.T
np.fill_diagonal(sims, -1)
print("largest pairwise cosine among entries:", sims.max().round(3))

# exact duplicates collapse, so scanning only the unique rows is enough
rows = protos[rng.integers(0, 6, 5000)]
assert np.array_equal(build_bank_fast(rows, 0.9).entries, build_bank(rows, 0.9).entries)

# a query aligned with entry 2 puts most of its weight there
q = dc.constant(5 * sub.entries[2:3])
wts = attention_weights(q, sub.entries).data[0]
print("attention weights:", wts.round(3), "sum", wts.sum())

# full retrieval: d_q-dim rendered queries -> projector -> attention -> adapt
layer = AdaptLayer(rng, "demo", 32, 8)
f = attend(dc.constant(rng.normal(size=(4, 8))), sub, layer)
print("retrieved features:", f.data.shape)
