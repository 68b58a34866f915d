# From a point cloud to anchors, and from anchors to view-dependent Gaussians.
import numpy as np

from anchorsplat.decoders import DecoderBank, decode
from anchorsplat.scaffold import Camera, gaussian_positions, voxelize

rng = np.random.default_rng(2)
pts = rng.normal(size=(5000, 3)) * [1.0, 0.5, 0.2]

for l in (0.4, 0.2, 0.1):
    print(f"voxel {l}: {len(voxelize(pts, l, 1, 1))} anchors")

sc = voxelize(pts, 0.2, n_per_anchor=4, d_f=16, rng=rng)
print("anchor centers", sc.centers.shape, "offsets", sc.offsets.data.shape,
      "latents", sc.latents.data.shape)

# every anchor center sits in its own voxel
i = 17
print("lookup of anchor", i, "->", sc.lookup(sc.centers[i]))

mu = gaussian_positions(sc)
print("gaussian means", mu.data.shape)

bank = DecoderBank(rng, d_f=16, d_c=8, d_q=12, n_per_anchor=4)
embed = rng.normal(scale=0.1, size=8)
for eye in ([4, 0, 1], [0, 4, 1]):
    cam = Camera.look_at(0, eye, [0, 0, 0], [0, 0, 1], 60, 60, 64, 64)
    dg = decode(sc, bank, cam, embed)
    print(f"eye {eye}: opacity mean {dg.opacity.data.mean():.3f}, "
          f"rgb mean {dg.rgb.data.mean(axis=0).round(3)}, queries {dg.queries.data.shape}")

# covariances are symmetric positive definite
ev = np.linalg.eigvalsh(dg.cov.data)
print("smallest covariance eigenvalue:", ev.min())
print("decoder parameters:", bank.size())
