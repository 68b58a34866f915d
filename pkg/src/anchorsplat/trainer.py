"""Training loop, evaluation and gradient checking."""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import diffcore as dc
from . import featio, lifecycle, losses
from .membank import load_bank
from .model import Model, ViewTarget
from .optim import Adam
from .scaffold import Camera, read_ply

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "loss", "loss_l1", "loss_ssim", "loss_scale", "loss_feat", "psnr", "anchors", "params"]


class NumericError(RuntimeError):
    pass


def load_data(cfg):
    d = cfg.data
    if d.scene_dir:
        data = featio.read_scene_dir(d.scene_dir, list(d.models))
    else:
        ring = featio.CameraRing(count=d.n_cameras, image_size=d.image_size)
        data = featio.synth_scene(d.synth_seed, d.n_objects, d.n_points, ring, d.models)
    if d.points:
        data.points = read_ply(d.points)
    return data


def split_views(n_views, holdout):
    test = sorted(v for v in holdout if 0 <= v < n_views)
    train = [v for v in range(n_views) if v not in test]
    return train, test


def targets_for(data, dtype):
    out = []
    for i, (cam, img, feats) in enumerate(zip(data.cameras, data.images, data.features)):
        f = {t: fm.resized(cam.height, cam.width).data.reshape(-1, fm.data.shape[-1]).astype(dtype)
             for t, fm in feats.items()}
        alpha = None if data.alphas is None else np.asarray(data.alphas[i], dtype=dtype)
        out.append(ViewTarget(np.asarray(img, dtype=dtype), f, alpha))
    return out


def make_optimizer(model):
    o = model.cfg.optim
    return Adam(model.params(), o.lr, o.beta1, o.beta2, o.eps)


class ViewSchedule:
    """Uniform view sampling: a fresh seeded permutation per epoch."""

    def __init__(self, views, rng):
        self.views = list(views)
        self.rng = rng
        self.queue = []

    def next(self):
        if not self.queue:
            self.queue = [self.views[i] for i in self.rng.permutation(len(self.views))]
        return self.queue.pop(0)


def _fmt(x):
    return f"{x:.9g}" if isinstance(x, float) else str(x)


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    log_rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    lifecycle_events: list = field(default_factory=list)

    def log_csv(self):
        buf = io.StringIO()
        buf.write(",".join(LOG_COLUMNS) + "\n")
        for row in self.log_rows:
            buf.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
        return buf.getvalue()


def build(cfg, data=None):
    dtype = np.dtype(cfg.train.precision).type
    dc.set_dtype(dtype)
    data = data if data is not None else load_data(cfg)
    train_views, test_views = split_views(len(data.cameras), cfg.data.holdout)
    rng = np.random.default_rng(cfg.train.seed)
    bank = load_bank(cfg.bank.path) if cfg.bank.path else None
    model = Model.build(cfg, data.points, data.cameras, data.features, rng, train_views, bank)
    return model, data, rng, train_views, test_views


def train(cfg, data=None, out_dir=None, progress=None):
    """Run the full loop; writes ``metrics.csv`` and ``final.ckpt`` when
    ``out_dir`` is given."""
    cfg.validate()
    model, data, rng, train_views, test_views = build(cfg, data)
    dtype = dc.get_dtype()
    targets = targets_for(data, dtype)
    opt = make_optimizer(model)
    sched = ViewSchedule(train_views, np.random.default_rng([cfg.train.seed, 7]))
    bg_rng = np.random.default_rng([cfg.train.seed, 11])
    random_bg = cfg.render.random_background and all(t.alpha is not None for t in targets)
    lc = cfg.lifecycle
    sc = model.scaffold
    window = lifecycle.Window(len(sc), sc.n_per_anchor)
    result = TrainResult(model, opt)
    log.info("parameters: %d (anchors %d)", model.param_count(), len(sc))

    for it in range(1, cfg.train.iterations + 1):
        view = sched.next()
        opt.zero_grad()
        target, bg = targets[view], None
        if random_bg:
            # a random backdrop each step, so background pixels can only be explained by transparency
            bg = bg_rng.uniform(0.0, 1.0, 3)
            target = target.over(cfg.render.background, bg)
        fw = model.forward(view, with_features=cfg.loss.feature > 0, background=bg)
        loss, comps = model.losses(fw, target)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss at iteration {it}: "
                               + ", ".join(f"{k}={v}" for k, v in comps.items()))
        dc.backward(loss)
        dg = fw.decoded
        window.add_view(fw.render.hits, dg.opacity.data, dg.scales.data.prod(axis=1), fw.render.visible)
        window.add_gradients(sc.latents.grad, dg.means.grad)
        opt.step()

        if lifecycle.is_event(it, lc):
            result.lifecycle_events.append(_lifecycle_event(model, window, opt, rng, it))
            window = lifecycle.Window(len(sc), sc.n_per_anchor)

        if it % max(cfg.train.log_every, 1) == 0:
            psnr = losses.psnr(fw.rgb.data.reshape(target.image.shape), target.image)
            row = {"iter": it, "loss": float(loss.item()), **comps, "psnr": psnr,
                   "anchors": len(sc), "params": model.param_count()}
            result.log_rows.append(row)
        if progress is not None:
            progress(it, result)
        if cfg.train.eval_every and it % cfg.train.eval_every == 0:
            ev = evaluate(model, data, targets=targets)
            ev["iter"] = it
            result.evals.append(ev)
            log.info("iter %d train psnr %.2f test psnr %.2f", it, ev["train_psnr"], ev["test_psnr"])
        if out_dir and cfg.train.checkpoint_every and it % cfg.train.checkpoint_every == 0:
            checkpoint.save(os.path.join(out_dir, f"iter_{it:06d}.ckpt"), model, opt, it,
                            _rng_state(rng))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(result.log_csv())
        checkpoint.save(os.path.join(out_dir, "final.ckpt"), model, opt, cfg.train.iterations,
                        _rng_state(rng))
    return result


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": {k: str(v) for k, v in st["state"].items()}}


def _lifecycle_event(model, window, opt, rng, it):
    lc = model.cfg.lifecycle
    sc = model.scaffold
    contrib = lifecycle.contribution_score(window, lc.volume_percentile, lc.volume_exponent)
    grad = window.mean_latent_grad()
    sc.contrib_accum, sc.grad_norm_accum = contrib, grad
    records = lifecycle.significance(sc.ids, sc.latents.data, grad, contrib, lc.lambda_norm, lc.lambda_grad)
    removed = lifecycle.prune(sc, records, lc.prune_ratio, opt, window)
    means = gaussian_means(sc)
    grown = lifecycle.grow(sc, means, window.mean_pos_grad(), lc.grow_threshold, rng, lc.grow_noise, opt)
    event = {"iter": it, "pruned": len(removed), "grown": len(grown), "anchors": len(sc),
             "params": model.param_count()}
    log.info("lifecycle %s", event)
    return event


def collect_window(model, targets, views=None):
    """One forward/backward pass per view (no update) to fill lifecycle statistics."""
    sc = model.scaffold
    window = lifecycle.Window(len(sc), sc.n_per_anchor)
    for v in model.train_views if views is None else views:
        for p in model.params():
            p.zero_grad()
        fw = model.forward(v)
        loss, _ = model.losses(fw, targets[v])
        dc.backward(loss)
        dg = fw.decoded
        window.add_view(fw.render.hits, dg.opacity.data, dg.scales.data.prod(axis=1), fw.render.visible)
        window.add_gradients(sc.latents.grad, dg.means.grad)
    for p in model.params():
        p.zero_grad()
    return window


def significance_records(model, window):
    lc = model.cfg.lifecycle
    sc = model.scaffold
    contrib = lifecycle.contribution_score(window, lc.volume_percentile, lc.volume_exponent)
    return lifecycle.significance(sc.ids, sc.latents.data, window.mean_latent_grad(), contrib,
                                  lc.lambda_norm, lc.lambda_grad)


def gaussian_means(sc):
    s = np.logaddexp(0, sc.scale_raw.data.astype(np.float64))
    off = sc.offsets.data.reshape(len(sc), sc.n_per_anchor, 3)
    return (sc.centers[:, None, :] + off * s[:, None, :]).reshape(-1, 3)


def evaluate(model, data, targets=None, views=None):
    """PSNR / SSIM per view and feature cosine / l2 distance per model."""
    targets = targets or targets_for(data, dc.get_dtype())
    views = range(len(model.cameras)) if views is None else views
    per_view = []
    for v in views:
        fw = model.forward(v)
        img = fw.rgb.data.reshape(targets[v].image.shape)
        row = {"view": v, "split": "train" if v in model.train_views else "test",
               "psnr": losses.psnr(img, targets[v].image), "ssim": losses.ssim(img, targets[v].image)}
        for tag, f in fw.features.items():
            cosd, l2 = losses.feature_metrics(f.data, targets[v].features[tag])
            row[f"cos:{tag}"] = cosd
            row[f"l2:{tag}"] = l2
        per_view.append(row)
    out = {"views": per_view}
    for split in ("train", "test"):
        rows = [r for r in per_view if r["split"] == split]
        out[f"{split}_psnr"] = float(np.mean([r["psnr"] for r in rows])) if rows else float("nan")
        out[f"{split}_ssim"] = float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")
    cos = [r[k] for r in per_view for k in r if k.startswith("cos:")]
    l2 = [r[k] for r in per_view for k in r if k.startswith("l2:")]
    out["mean_cos"] = float(np.mean(cos)) if cos else float("nan")
    out["mean_l2"] = float(np.mean(l2)) if l2 else float("nan")
    return out


# ------------------------------------------------------------- gradcheck

def tiny_scene(seed=0, size=8, models=None):
    """Four anchors seen by two 8x8 cameras, with random targets."""
    rng = np.random.default_rng(seed)
    points = np.array([[0.1, 0.1, 0.1], [0.6, 0.1, 0.1], [0.1, 0.6, 0.1], [0.6, 0.6, 0.1]]) - 0.25
    f = 1.4 * size
    cams = [Camera.look_at(i, eye, [0, 0, 0], [0, 0, 1], f, f, size, size)
            for i, eye in enumerate([[2.5, 0.4, 1.2], [0.3, 2.5, 1.0]])]
    models = models or {"a": 8, "b": 12}
    images, feats = [], []
    for _ in cams:
        images.append(rng.uniform(0, 1, (size, size, 3)))
        fv = {}
        for tag, d in models.items():
            proto = rng.normal(size=(3, d))
            proto /= np.linalg.norm(proto, axis=1, keepdims=True)
            fv[tag] = featio.FeatureMap(tag, proto[rng.integers(0, 3, (size, size))].astype(np.float32))
        feats.append(fv)
    return featio.SceneData(cams, images, feats, points)


def gradcheck(cfg=None, samples=12, eps=(1e-4, 1e-5), seed=0):
    """Max relative FD error per parameter group on the tiny scene (float64)."""
    from .config import Config

    cfg = (cfg or Config()).copy()
    cfg.scene.voxel_size = 0.5
    cfg.data.holdout = []
    cfg.train.precision = "float64"
    cfg.lifecycle.interval = 0
    with dc.precision(np.float64):
        data = tiny_scene(seed, models=None)
        rng = np.random.default_rng(seed)
        model = Model.build(cfg, data.points, data.cameras, data.features, rng)
        _perturb(model, rng)
        targets = targets_for(data, np.float64)

        def objective():
            total = None
            for v in range(len(data.cameras)):
                loss, _ = model.losses(model.forward(v), targets[v])
                total = loss if total is None else dc.add(total, loss)
            return total

        params = model.params()
        coords = {k: rng.choice(p.data.size, min(samples, p.data.size), replace=False)
                  for k, p in enumerate(params)}
        report = {}
        for k, p in enumerate(params):
            err = dc.finite_diff_check(objective, params, eps=eps, coords={k: coords[k]})
            report[p.group] = max(report.get(p.group, 0.0), err)
            report[f"param:{p.name}"] = err
    return report


def _perturb(model, rng):
    """Move away from the symmetric initialization so every path carries gradient."""
    for p in model.params():
        if p.group in ("appearance_embed",):
            p.data += rng.normal(0, 0.1, p.shape)
        elif p.group == "adapt_layer":
            p.data += rng.normal(0, 0.05, p.shape)
        elif p.name == "query_residual":
            p.data += rng.normal(0, 0.1, p.shape)
