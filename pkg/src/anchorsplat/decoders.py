"""Shared decoder heads: anchor latent + view direction + appearance embedding
to Gaussian attributes and hierarchical semantic queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .scaffold import gaussian_positions, viewing_direction

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class DecodedGaussians:
    means: dc.Tensor  # (G, 3)
    scales: dc.Tensor  # (G, 3)
    quats: dc.Tensor  # (G, 4)
    opacity: dc.Tensor  # (G,)
    rgb: dc.Tensor  # (G, 3)
    queries: dc.Tensor  # (G, d_q)
    cov: dc.Tensor  # (G, 3, 3)
    voxel_queries: dc.Tensor = None
    n_quat_fallback: int = 0


class DecoderBank:
    def __init__(self, rng, d_f=32, d_c=32, d_q=160, n_per_anchor=10):
        n_in = d_f + 3 + d_c
        n = n_per_anchor
        self.d_f, self.d_c, self.d_q, self.n = d_f, d_c, d_q, n
        self.mlp_opacity = dc.MlpWeights.init(rng, n_in, d_f, n, "mlp_opacity")
        self.mlp_cov = dc.MlpWeights.init(rng, n_in, d_f, 7 * n, "mlp_cov")
        self.mlp_color = dc.MlpWeights.init(rng, n_in, d_f, 3 * n, "mlp_color")
        self.mlp_qv = dc.MlpWeights.init(rng, n_in, d_f, d_q, "mlp_qv")
        lim = 1.0 / np.sqrt(d_q + 3)
        self.qg_w = dc.Param(rng.uniform(-lim, lim, (d_q, d_q + 3)), "mlp", "linear_qg.w")
        self.qg_b = dc.Param(np.zeros(d_q), "mlp", "linear_qg.b")

    @property
    def heads(self):
        return {"opacity": self.mlp_opacity, "cov": self.mlp_cov,
                "color": self.mlp_color, "qv": self.mlp_qv}

    def head_layers(self):
        """(name, [(w, b), ...]) in checkpoint order."""
        out = [(k, m.layers) for k, m in self.heads.items()]
        out.append(("qg", [(self.qg_w, self.qg_b)]))
        return out

    def params(self):
        ps = []
        for _, layers in self.head_layers():
            for w, b in layers:
                ps += [w, b]
        return ps

    def size(self):
        return sum(p.data.size for p in self.params())


def decoder_input(latents, dirs, embed):
    """concat(z_v, d_v, e_c) for every anchor row."""
    v = latents.shape[0]
    return dc.concat([latents, dc.constant(dirs, dtype=latents.data.dtype), dc.broadcast_row(embed, v)])


def quat_to_rot(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3), dtype=q.dtype)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rot_to_quat_grad(q, g):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def covariance(scales, quats):
    """R S S^T R^T from per-axis scales and unit quaternions, shape (G, 3, 3)."""
    s, q = scales.data, quats.data
    r = quat_to_rot(q)
    s2 = s * s
    sigma = (r * s2[:, None, :]) @ r.transpose(0, 2, 1)
    sigma = 0.5 * (sigma + sigma.transpose(0, 2, 1))  # exact symmetry

    def bw(g):
        gs = 0.5 * (g + g.transpose(0, 2, 1))
        gsr = gs @ r
        d_scale = 2 * s * np.einsum("gik,gik->gk", r, gsr)
        d_rot = 2 * gsr * s2[:, None, :]
        return d_scale, _rot_to_quat_grad(q, d_rot)

    return dc.custom(sigma, (scales, quats), bw, name="covariance")


def zero_mean_residual(res, n, d_q):
    """(V, (N-1)*d_q) free rows -> (V*N, d_q) residuals whose mean per anchor is zero."""
    v = res.shape[0]
    free = res.data.reshape(v, n - 1, d_q)
    full = np.concatenate([free, -free.sum(axis=1, keepdims=True)], axis=1)

    def bw(g):
        g = g.reshape(v, n, d_q)
        return ((g[:, :-1] - g[:, -1:]).reshape(v, -1),)

    return dc.custom(full.reshape(v * n, d_q), (res,), bw, name="query_residual")


def decode_voxel_query(bank, x):
    return dc.mlp_forward(bank.mlp_qv, x)


def adapt_gaussian_queries(bank, q_v, offsets, n):
    """Linear_qg([q_v, dx_n]) for every Gaussian; offsets are (V, N*3)."""
    rows = dc.repeat_rows(q_v, n)
    dx = dc.reshape(offsets, (-1, 3))
    return dc.linear(dc.concat([rows, dx]), bank.qg_w, bank.qg_b)


def decode(scaffold, bank, camera, embed, query_residual=None):
    """Decode every anchor for one camera; ``embed`` is that camera's e_c."""
    n = scaffold.n_per_anchor
    dirs = viewing_direction(scaffold.centers, camera)
    x = decoder_input(scaffold.latents, dirs, embed)
    l = scaffold.voxel_size

    opacity = dc.sigmoid(dc.reshape(dc.mlp_forward(bank.mlp_opacity, x), (-1,)))
    raw_cov = dc.reshape(dc.mlp_forward(bank.mlp_cov, x), (-1, 7))
    scales = dc.scale(dc.softplus(dc.cols(raw_cov, 0, 3)), l)
    quats = dc.normalize_rows(dc.cols(raw_cov, 3, 7), fallback=IDENTITY_QUAT)
    rgb = dc.sigmoid(dc.reshape(dc.mlp_forward(bank.mlp_color, x), (-1, 3)))
    q_v = decode_voxel_query(bank, x)
    queries = adapt_gaussian_queries(bank, q_v, scaffold.offsets, n)
    if query_residual is not None:
        queries = dc.add(queries, zero_mean_residual(query_residual, n, bank.d_q))
    means = gaussian_positions(scaffold)
    n_fb = int(quats.name.split(":")[1])
    return DecodedGaussians(means, scales, quats, opacity, rgb, queries,
                            covariance(scales, quats), q_v, n_fb)
