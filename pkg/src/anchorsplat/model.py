"""The assembled scene model: scaffold, decoders, appearance embeddings,
memory bank and adapt layers, with one differentiable forward per view."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import losses
from .decoders import DecoderBank, decode
from .membank import AdaptLayer, MemoryBank, attend, build_bank_fast
from .rasterizer import render
from .scaffold import voxelize


@dataclass
class ViewTarget:
    image: np.ndarray  # (H, W, 3)
    features: dict  # tag -> (H*W, D) array
    alpha: np.ndarray = None  # (H, W) coverage, when known

    def over(self, old_bg, new_bg):
        """The target re-composited over ``new_bg`` (needs coverage)."""
        d = np.asarray(new_bg, dtype=self.image.dtype) - np.asarray(old_bg, dtype=self.image.dtype)
        return ViewTarget(self.image + (1 - self.alpha)[..., None] * d, self.features, self.alpha)


@dataclass
class Forward:
    decoded: object
    out: dc.Tensor
    render: object
    rgb: dc.Tensor
    qmap: dc.Tensor
    alpha: dc.Tensor
    features: dict  # tag -> Tensor (P, D)


def bank_from_views(feature_views, gamma):
    """Greedy bank per model over the flattened per-pixel stream, view-major."""
    bank = MemoryBank()
    for tag in feature_views[0]:
        stream = np.concatenate([fv[tag].data.reshape(-1, fv[tag].data.shape[-1]) for fv in feature_views])
        sub = build_bank_fast(stream, gamma, tag)
        # stored as float32 on disk; keep in-memory values identical
        sub.entries = sub.entries.astype(np.float32).astype(np.float64)
        bank.banks[tag] = sub
    return bank


class Model:
    def __init__(self, cfg, scaffold, decoders, embeds, bank, adapt, cameras, train_views=None):
        self.cfg = cfg
        self.scaffold = scaffold
        self.decoders = decoders
        self.embeds = embeds
        self.bank = bank
        self.adapt = adapt
        self.cameras = cameras
        self.train_views = list(range(len(cameras))) if train_views is None else list(train_views)

    @classmethod
    def build(cls, cfg, points, cameras, feature_views, rng, train_views=None, bank=None):
        s = cfg.scene
        sc = voxelize(points, s.voxel_size, s.n_per_anchor, s.d_f, rng)
        if s.query_granularity == "per_gaussian":
            sc.query_residual = dc.Param(np.zeros((len(sc), (s.n_per_anchor - 1) * s.d_q)),
                                         "anchor_latent", "query_residual")
        dec = DecoderBank(rng, s.d_f, s.d_c, s.d_q, s.n_per_anchor)
        embeds = dc.Param(np.zeros((len(cameras), s.d_c)), "appearance_embed", "appearance")
        if bank is None:
            views = [feature_views[i] for i in (train_views or range(len(feature_views)))]
            bank = bank_from_views(views, cfg.bank.gamma)
        adapt = {tag: AdaptLayer(rng, tag, sub.dim, s.d_q) for tag, sub in bank.banks.items()}
        return cls(cfg, sc, dec, embeds, bank, adapt, cameras, train_views)

    def params(self):
        ps = self.scaffold.params() + self.decoders.params() + [self.embeds]
        for layer in self.adapt.values():
            ps += layer.params()
        return ps

    def embedding(self, view):
        """Trained views use their own e_c; others use the mean over trained views."""
        if view in self.train_views:
            return dc.reshape(dc.gather_rows(self.embeds, [view]), (-1,))
        idx = np.asarray(self.train_views)
        mean = self.embeds.data[idx].mean(axis=0)
        return dc.constant(mean, dtype=self.embeds.data.dtype)

    def forward(self, view, camera=None, with_features=True, background=None):
        cam = self.cameras[view] if camera is None else camera
        dg = decode(self.scaffold, self.decoders, cam, self.embedding(view), self.scaffold.query_residual)
        payload = dc.concat([dg.rgb, dg.queries])
        out, ro = render(dg.means, dg.cov, dg.opacity, payload, cam, tiled=self.cfg.render.tiled,
                         tile=self.cfg.render.tile)
        d_q = self.decoders.d_q
        alpha = dc.cols(out, 3 + d_q, 4 + d_q)
        bg = self.cfg.render.background if background is None else background
        rgb = over_background(dc.cols(out, 0, 3), alpha, bg)
        qmap = dc.cols(out, 3, 3 + d_q)
        if self.cfg.render.normalize_query:
            qmap = normalize_by_alpha(qmap, alpha)
        feats = {}
        if with_features:
            for tag, sub in self.bank.banks.items():
                feats[tag] = attend(qmap, sub, self.adapt[tag])
        return Forward(dg, out, ro, rgb, qmap, alpha, feats)

    def losses(self, fw, target):
        lw = self.cfg.loss
        cam_h, cam_w = fw.render.alpha.shape
        img = dc.reshape(fw.rgb, (cam_h, cam_w, 3))
        l1 = losses.l1_loss(img, target.image)
        ls = losses.ssim_loss(img, target.image)
        lscale = losses.scale_volume_loss(fw.decoded.scales, fw.render.visible)
        l_img = dc.add(dc.add(dc.scale(l1, lw.l1), dc.scale(ls, lw.ssim)), dc.scale(lscale, lw.scale))
        lf = None
        for tag, f in fw.features.items():
            if tag not in target.features:
                raise KeyError(tag)
            term = losses.feature_loss(f, target.features[tag])
            lf = term if lf is None else dc.add(lf, term)
        total = l_img if lf is None or lw.feature == 0 else dc.add(l_img, dc.scale(lf, lw.feature))
        comps = {"loss_l1": l1.item(), "loss_ssim": ls.item(), "loss_scale": lscale.item(),
                 "loss_feat": 0.0 if lf is None else lf.item()}
        return total, comps

    def param_count(self):
        """Closed form: V(d_f + 3N + 3) + MLPs + cams d_c + sum_j (D_j^2 + D_j + D_j d_q)."""
        s = self.cfg.scene
        v = len(self.scaffold)
        n = s.n_per_anchor
        total = v * (s.d_f + 3 * n + 3) + self.decoders.size() + len(self.cameras) * s.d_c
        total += sum(d * d + d + d * s.d_q for d in (sub.dim for sub in self.bank.banks.values()))
        if s.query_granularity == "per_gaussian":
            total += v * (n - 1) * s.d_q
        return total


def normalize_by_alpha(q, alpha, eps=1e-6):
    a = alpha.data.reshape(-1)
    inv = 1.0 / (a + eps)

    def bw(g):
        return g * inv[:, None], -(np.einsum("ij,ij->i", g, q.data) * inv**2).reshape(-1, 1)

    return dc.custom(q.data * inv[:, None], (q, alpha), bw, name="normalize_query")


def over_background(rgb, alpha, bg):
    """rgb + (1 - alpha) * bg: the remaining transmittance shows the background."""
    bg = np.asarray(bg, dtype=rgb.data.dtype)

    def bw(g):
        return g, -(g @ bg).reshape(-1, 1)

    return dc.custom(rgb.data + (1 - alpha.data) * bg, (rgb, alpha), bw, name="over_background")
