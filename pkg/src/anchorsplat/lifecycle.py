"""Feature-aware anchor significance, pruning and gradient-driven growing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, LifecycleConfig
from .scaffold import init_anchor_params


class EmptyWindowError(RuntimeError):
    pass


@dataclass
class SignificanceRecord:
    anchor_id: int
    feat_norm: float
    grad_norm: float
    contrib: float
    total: float


def volume_weight(volume, percentile=90.0, exponent=1.0):
    """clamp(V / V_p, 0, 1) ** beta with V_p the given percentile of ``volume``."""
    volume = np.asarray(volume, dtype=np.float64)
    vp = np.percentile(volume, percentile) if volume.size else 1.0
    if vp <= 0:
        return np.ones_like(volume)
    return np.clip(volume / vp, 0.0, 1.0) ** exponent


class Window:
    """Statistics accumulated between two lifecycle events.

    Per Gaussian: sum over rendered views of hits * opacity, the latest decoded
    volume, and the summed / counted position-gradient norms. Per anchor: the
    summed latent-gradient norms and the number of backward passes.
    """

    def __init__(self, n_anchors, n_per_anchor):
        self.n = n_per_anchor
        g = n_anchors * n_per_anchor
        self.views = 0
        self.hit_alpha = np.zeros(g)
        self.volume = np.zeros(g)
        self.pos_grad = np.zeros(g)
        self.pos_count = np.zeros(g, dtype=np.int64)
        self.latent_grad = np.zeros(n_anchors)
        self.steps = 0

    def add_view(self, hits, opacity, volume, visible=None):
        self.views += 1
        self.hit_alpha += np.asarray(hits, dtype=np.float64) * np.asarray(opacity, dtype=np.float64)
        self.volume = np.asarray(volume, dtype=np.float64).copy()
        if visible is not None:
            self.pos_count += np.asarray(visible, dtype=np.int64)

    def add_gradients(self, latent_grad, pos_grad=None):
        self.steps += 1
        self.latent_grad += np.linalg.norm(latent_grad, axis=1)
        if pos_grad is not None:
            self.pos_grad += np.linalg.norm(pos_grad, axis=1)

    def mean_latent_grad(self):
        return self.latent_grad / max(self.steps, 1)

    def mean_pos_grad(self):
        return self.pos_grad / np.maximum(self.pos_count, 1)

    def select(self, keep):
        keep = np.asarray(keep)
        gidx = (keep[:, None] * self.n + np.arange(self.n)).reshape(-1)
        self.hit_alpha, self.volume = self.hit_alpha[gidx], self.volume[gidx]
        self.pos_grad, self.pos_count = self.pos_grad[gidx], self.pos_count[gidx]
        self.latent_grad = self.latent_grad[keep]


def contribution_score(window, percentile=90.0, exponent=1.0):
    """Per-anchor sum over its Gaussians of hits * opacity * volume weight."""
    if window.views == 0:
        raise EmptyWindowError("contribution score needs at least one rendered view")
    per_gauss = window.hit_alpha * volume_weight(window.volume, percentile, exponent)
    return per_gauss.reshape(-1, window.n).sum(axis=1)


def significance(ids, latents, grad_norm, contrib, lambda_norm=2.0, lambda_grad=8.0):
    feat = np.linalg.norm(np.asarray(latents, dtype=np.float64), axis=1)
    grad_norm = np.asarray(grad_norm, dtype=np.float64)
    contrib = np.asarray(contrib, dtype=np.float64)
    total = lambda_norm * feat + lambda_grad * grad_norm + contrib
    return [SignificanceRecord(int(i), float(f), float(g), float(c), float(s))
            for i, f, g, c, s in zip(ids, feat, grad_norm, contrib, total)]


def recompose(rec, lambda_norm=2.0, lambda_grad=8.0):
    return lambda_norm * rec.feat_norm + lambda_grad * rec.grad_norm + rec.contrib


def prune_count(n, ratio):
    if not 0 <= ratio < 1:
        raise ConfigError(f"prune ratio must lie in [0, 1), got {ratio}")
    return int(np.floor(ratio * n + 1e-9))


def select_pruned(records, ratio):
    """Row indices of the k lowest-scoring anchors, ties by anchor id."""
    k = prune_count(len(records), ratio)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    totals = np.array([r.total for r in records])
    ids = np.array([r.anchor_id for r in records])
    return np.sort(np.lexsort((ids, totals))[:k])


def prune(scaffold, records, ratio, optimizer=None, window=None):
    """Remove the floor(ratio * V) least significant anchors. Returns removed rows."""
    removed = select_pruned(records, ratio)
    if len(removed) == 0:
        return removed
    keep = np.setdiff1d(np.arange(len(scaffold)), removed)
    params = scaffold.params()
    scaffold.select(keep)
    if optimizer is not None:
        for p in params:
            optimizer.select_rows(p, keep)
    if window is not None:
        window.select(keep)
    return removed


def grow(scaffold, means, pos_grad_mean, threshold, rng, noise=0.01, optimizer=None):
    """Add one anchor per unoccupied cell that holds a Gaussian whose mean
    position-gradient norm exceeds ``threshold``. Returns the new cells."""
    means = np.asarray(means, dtype=np.float64)
    n = scaffold.n_per_anchor
    cand = np.nonzero(np.asarray(pos_grad_mean) > threshold)[0]
    new_cells, parents = [], []
    seen = set()
    for g in cand:
        cell = tuple(int(c) for c in np.floor(means[g] / scaffold.voxel_size))
        if cell in scaffold.cell_map or cell in seen:
            continue
        seen.add(cell)
        new_cells.append(cell)
        parents.append(g // n)
    if not new_cells:
        return []
    k = len(new_cells)
    _, off, sc = init_anchor_params(rng, k, n, scaffold.d_f, scaffold.voxel_size)
    lat = scaffold.latents.data[parents] + rng.normal(0.0, noise, (k, scaffold.d_f))
    params = scaffold.params()
    extra = []
    if getattr(scaffold, "query_residual", None) is not None:
        extra = [np.zeros((k, scaffold.query_residual.shape[1]))]
    scaffold.append(np.array(new_cells), lat, off, sc, *extra)
    if optimizer is not None:
        for p in params:
            optimizer.extend_rows(p, k)
    return new_cells


def dry_run_report(records, ratio):
    """Lines ``id,feat_norm,grad_norm,contrib,S,pruned``."""
    pruned = set(select_pruned(records, ratio).tolist())
    lines = ["id,feat_norm,grad_norm,contrib,S,pruned"]
    for i, r in enumerate(records):
        lines.append(f"{r.anchor_id},{r.feat_norm:.9g},{r.grad_norm:.9g},{r.contrib:.9g},"
                     f"{r.total:.9g},{int(i in pruned)}")
    return "\n".join(lines)


def is_event(it, cfg: LifecycleConfig):
    return cfg.interval > 0 and cfg.warmup <= it <= cfg.stop and it % cfg.interval == 0 and it > 0
