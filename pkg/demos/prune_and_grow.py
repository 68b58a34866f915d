# Scoring anchors, removing the least significant and growing into new cells.
import numpy as np

from anchorsplat import lifecycle
from anchorsplat.scaffold import voxelize

rng = np.random.default_rng(3)
v = 1000
pts = np.column_stack([np.arange(v) + 0.5, np.zeros(v), np.zeros(v)])
sc = voxelize(pts, 1.0, n_per_anchor=3, d_f=8, rng=rng)

# a window of two rendered views: hit counts, opacities and volumes per Gaussian
win = lifecycle.Window(v, 3)
for _ in range(2):
    hits = rng.poisson(2, 3 * v)
    win.add_view(hits, rng.uniform(0, 1, 3 * v), rng.uniform(0.1, 1, 3 * v))
contrib = lifecycle.contribution_score(win)

recs = lifecycle.significance(sc.ids, sc.latents.data, rng.random(v) * 0.05, contrib, 2.0, 8.0)
print("S for first anchors:", [round(r.total, 3) for r in recs[:5]])
print("recomposition exact:", all(lifecycle.recompose(r) == r.total for r in recs))

for ratio in (0.0005, 0.001, 0.0125):
    print(f"ratio {ratio}: prune {lifecycle.prune_count(v, ratio)} anchors")

print(lifecycle.dry_run_report(recs, 0.003).splitlines()[0])
removed = lifecycle.prune(sc, recs, 0.003)
print("removed rows", removed, "->", len(sc), "anchors left")

# Gaussians drifting into empty space with large position gradients seed new anchors
means = np.array([[1500.5, 0, 0], [1500.7, 0.2, 0], [3.5, 0, 0], [2000.2, 0, 0]])
new = lifecycle.grow(sc, means, np.array([1e-3, 1e-3, 1e-3, 1e-5]), 2e-4, rng)
print("new cells:", new, "->", len(sc), "anchors")
