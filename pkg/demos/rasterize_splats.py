# Splat a handful of random 3D Gaussians into a 48x48 image, once with the
# per-splat reference sweep and once with the tiled kernel, and compare.
import sys

import numpy as np

from anchorsplat import featio
from anchorsplat.rasterizer import composite_reference, composite_tiled, depth_order, project
from anchorsplat.scaffold import Camera

rng = np.random.default_rng(0)
h = w = 48
cam = Camera.look_at(0, [0, -3, 1.5], [0, 0, 0], [0, 0, 1], 50, 50, w, h)

n = 40
means = rng.uniform(-0.6, 0.6, (n, 3))
a = rng.normal(size=(n, 3, 3)) * 0.06
cov = a @ a.transpose(0, 2, 1) + 1e-4 * np.eye(3)
opacity = rng.uniform(0.3, 0.9, n)
colors = rng.uniform(0, 1, (n, 3))

proj = project(means, cov, cam)
order = depth_order(proj.depth, proj.valid)
print("visible splats:", len(order), "of", n)

args = (proj.mean2d, proj.conic, opacity, colors, order, h, w)
ref = composite_reference(*args)
til = composite_tiled(*args, proj.radius, 16)
print("max |tiled - reference|:", np.abs(ref.rgb - til.rgb).max())

# transmittance left over at each pixel is exactly what alpha did not cover
print("max |T_final - (1 - alpha)|:", np.abs(til.final_trans - (1 - til.alpha)).max())
print("pixel-splat pairs in the record:", len(til.record.w))
print("splats hit by at least one pixel:", (til.hits > 0).sum())

if len(sys.argv) > 1:
    featio.save_png(sys.argv[1], til.rgb + (1 - til.alpha[..., None]))
    print("wrote", sys.argv[1])
