"""Differentiable Gaussian splatting.

Compositing is split in two. The depth-ordered transmittance pass only deals
with scalar weights ``w_i(u) = T_i a_i`` and emits them as a sparse
pixel-by-splat matrix; the payload (rgb, query channels, and a constant one
whose composite is the alpha map) is then one sparse product. The same
record drives the hand-written adjoint.

A splat's footprint is the 3-sigma ellipse ``d^T Sigma'^-1 d <= 9``; outside it
the Gaussian is exactly zero, so tile binning by the ellipse bounding box is
exact and the tiled and reference paths agree.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

numba.config.THREADING_LAYER = "workqueue"
import scipy.sparse as sp

from . import diffcore as dc

DILATION = 0.3
Z_NEAR = 0.01
HIT_THRESHOLD = 1.0 / 255.0
T_STOP = 1e-4
CUTOFF = 9.0
DET_MIN = 1e-12


def configure_threads():
    n = int(os.environ.get("CUSGS_THREADS", "0") or 0)
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ------------------------------------------------------------- projection

@dataclass
class Projected:
    mean2d: np.ndarray  # (G, 2)
    cov2d: np.ndarray  # (G, 2, 2)
    conic: np.ndarray  # (G, 3) a, b, c of the inverse
    depth: np.ndarray
    valid: np.ndarray
    radius: np.ndarray  # (G, 2) half extents of the 3-sigma box
    n_degenerate: int
    # cached for the adjoint
    p_cam: np.ndarray
    jac: np.ndarray
    cov3d: np.ndarray


def project(means, cov, camera, z_near=Z_NEAR):
    """Perspective projection of means and covariances (EWA, with dilation).

    Splats with depth <= z_near or a near-singular 2D covariance are marked
    invalid; they are culled rather than treated as errors.
    """
    means = np.asarray(means)
    cov = np.asarray(cov)
    dt = means.dtype
    rot = camera.rotation.astype(dt)
    p = means @ rot.T + camera.translation.astype(dt)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    front = z > z_near
    zs = np.where(front, z, 1.0).astype(dt)
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    jac = np.zeros((len(p), 2, 3), dtype=dt)
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / (zs * zs)
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / (zs * zs)
    m = jac @ rot
    cov2d = m @ cov @ m.transpose(0, 2, 1)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    ok_det = det >= DET_MIN
    valid = front & ok_det
    sdet = np.where(ok_det, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / sdet, -cov2d[:, 0, 1] / sdet, cov2d[:, 0, 0] / sdet], axis=1)
    mean2d = np.stack([fx * x / zs + dt.type(camera.cx), fy * y / zs + dt.type(camera.cy)], axis=1)
    radius = 3.0 * np.sqrt(np.maximum(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1), 0))
    return Projected(mean2d.astype(dt), cov2d, conic.astype(dt), z, valid, radius,
                     int((front & ~ok_det).sum()), p, jac, cov)


def project_backward(proj, camera, g_mean2d, g_conic):
    """Adjoints of the projection wrt 3D means and covariances."""
    dt = proj.p_cam.dtype
    rot = camera.rotation.astype(dt)
    fx, fy = camera.fx, camera.fy
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    z = np.where(proj.valid, z, 1.0)
    k = np.zeros((len(x), 2, 2), dtype=dt)
    k[:, 0, 0], k[:, 0, 1], k[:, 1, 0], k[:, 1, 1] = (proj.conic[:, 0], proj.conic[:, 1],
                                                      proj.conic[:, 1], proj.conic[:, 2])
    gk = np.zeros_like(k)
    gk[:, 0, 0] = g_conic[:, 0]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * g_conic[:, 1]
    gk[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -k @ gk @ k
    m = proj.jac @ rot
    g_cov3d = m.transpose(0, 2, 1) @ g_cov2d @ m
    g_m = 2.0 * g_cov2d @ m @ proj.cov3d
    g_j = g_m @ rot.T
    gx = g_mean2d[:, 0] * fx / z - g_j[:, 0, 2] * fx / z**2
    gy = g_mean2d[:, 1] * fy / z - g_j[:, 1, 2] * fy / z**2
    gz = (-g_mean2d[:, 0] * fx * x / z**2 - g_mean2d[:, 1] * fy * y / z**2
          - g_j[:, 0, 0] * fx / z**2 + g_j[:, 0, 2] * 2 * fx * x / z**3
          - g_j[:, 1, 1] * fy / z**2 + g_j[:, 1, 2] * 2 * fy * y / z**3)
    g_pcam = np.stack([gx, gy, gz], axis=1)
    g_pcam[~proj.valid] = 0
    g_cov3d[~proj.valid] = 0
    return (g_pcam @ rot).astype(dt), g_cov3d.astype(dt)


# ---------------------------------------------------------- the record

@dataclass
class Record:
    """Per-pixel front-to-back composite state in CSR layout (rows = pixels)."""
    indptr: np.ndarray
    cols: np.ndarray
    w: np.ndarray
    trans: np.ndarray
    a: np.ndarray
    g: np.ndarray
    height: int
    width: int
    n_splats: int

    def matrix(self):
        return sp.csr_matrix((self.w, self.cols, self.indptr),
                             shape=(self.height * self.width, self.n_splats))


@dataclass
class RenderOutput:
    rgb: np.ndarray
    qmap: np.ndarray
    alpha: np.ndarray
    contrib: np.ndarray
    hits: np.ndarray
    visible: np.ndarray
    n_skipped: int = 0
    record: Record = None
    final_trans: np.ndarray = None


def depth_order(depth, valid, ids=None):
    """Valid splat indices sorted by depth, ties by source id."""
    ids = np.arange(len(depth)) if ids is None else np.asarray(ids)
    idx = np.nonzero(valid)[0]
    return idx[np.lexsort((ids[idx], depth[idx]))]


def _finish(rec, payload, n_skipped=0):
    h, w = rec.height, rec.width
    mat = rec.matrix()
    out = np.asarray(mat @ payload)
    alpha = np.asarray(mat.sum(axis=1)).reshape(h, w).astype(payload.dtype)
    contrib = np.bincount(rec.cols, weights=rec.w, minlength=rec.n_splats)
    hits = np.bincount(rec.cols, weights=(rec.a > HIT_THRESHOLD), minlength=rec.n_splats)
    final_t = np.ones(h * w, dtype=rec.w.dtype)
    last = rec.indptr[1:] - 1
    has = rec.indptr[1:] > rec.indptr[:-1]
    final_t[has] = rec.trans[last[has]] * (1 - rec.a[last[has]])
    c = payload.shape[1]
    return RenderOutput(out[:, :3].reshape(h, w, 3), out[:, 3:].reshape(h, w, c - 3), alpha,
                        contrib, hits.astype(np.int64), np.zeros(rec.n_splats, bool),
                        n_skipped, rec, final_t.reshape(h, w))


def composite_reference(mean2d, conic, opacity, payload, order, height, width):
    """Straightforward per-splat sweep over all pixels in depth order."""
    dt = mean2d.dtype
    n = len(mean2d)
    ys, xs = np.mgrid[0:height, 0:width]
    px = (xs.reshape(-1) + 0.5).astype(dt)
    py = (ys.reshape(-1) + 0.5).astype(dt)
    trans = np.ones(height * width, dtype=dt)
    alive = np.ones(height * width, dtype=bool)
    pieces = []
    for rank, i in enumerate(order):
        dx = px - mean2d[i, 0]
        dy = py - mean2d[i, 1]
        power = dt.type(-0.5) * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
        inside = alive & (power >= -0.5 * CUTOFF)
        if not inside.any():
            continue
        pix = np.nonzero(inside)[0]
        g = np.exp(power[pix])
        a = opacity[i] * g
        t = trans[pix]
        pieces.append((pix, np.full(len(pix), rank), np.full(len(pix), i), a * t, t, a, g))
        trans[pix] = t * (1 - a)
        alive[pix[trans[pix] < T_STOP]] = False
    rec = _pack(pieces, height, width, n, dt)
    return _finish(rec, payload)


def _pack(pieces, height, width, n, dt):
    if not pieces:
        z = np.zeros(0, dtype=dt)
        return Record(np.zeros(height * width + 1, np.int64), np.zeros(0, np.int64),
                      z, z, z, z, height, width, n)
    pix, rank, col, w, t, a, g = (np.concatenate(x) for x in zip(*pieces))
    srt = np.lexsort((rank, pix))
    indptr = np.zeros(height * width + 1, np.int64)
    np.cumsum(np.bincount(pix, minlength=height * width), out=indptr[1:])
    return Record(indptr, col[srt].astype(np.int64), w[srt], t[srt], a[srt], g[srt],
                  height, width, n)


# ------------------------------------------------------------ tiled path

@numba.njit(parallel=True, cache=True)
def _tile_kernel(tile_ptr, tile_splats, mean2d, conic, opacity, height, width, tile,
                 n_tx, fill, indptr, cols, w_out, t_out, a_out, g_out, counts):
    n_tiles = len(tile_ptr) - 1
    for t_id in numba.prange(n_tiles):
        ty, tx = t_id // n_tx, t_id % n_tx
        s0, s1 = tile_ptr[t_id], tile_ptr[t_id + 1]
        for r in range(ty * tile, min((ty + 1) * tile, height)):
            for c in range(tx * tile, min((tx + 1) * tile, width)):
                pix = r * width + c
                px = c + 0.5
                py = r + 0.5
                trans = 1.0
                k = indptr[pix] if fill else 0
                cnt = 0
                for s in range(s0, s1):
                    i = tile_splats[s]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power < -0.5 * 9.0:
                        continue
                    g = np.exp(power)
                    a = opacity[i] * g
                    if fill:
                        cols[k] = i
                        w_out[k] = a * trans
                        t_out[k] = trans
                        a_out[k] = a
                        g_out[k] = g
                        k += 1
                    cnt += 1
                    trans = trans * (1.0 - a)
                    if trans < 1e-4:
                        break
                if not fill:
                    counts[pix] = cnt


def _bin_tiles(order, mean2d, radius, height, width, tile):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    if len(order) == 0:
        return np.zeros(n_tx * n_ty + 1, np.int64), np.zeros(0, np.int64), n_tx, n_ty
    m = mean2d[order].astype(np.float64)
    r = radius[order].astype(np.float64)
    c0 = np.ceil(m[:, 0] - r[:, 0] - 0.5).astype(np.int64)
    c1 = np.floor(m[:, 0] + r[:, 0] - 0.5).astype(np.int64)
    r0 = np.ceil(m[:, 1] - r[:, 1] - 0.5).astype(np.int64)
    r1 = np.floor(m[:, 1] + r[:, 1] - 0.5).astype(np.int64)
    # one-pixel margin absorbs rounding at the ellipse boundary
    c0, r0 = np.maximum(c0 - 1, 0), np.maximum(r0 - 1, 0)
    c1, r1 = np.minimum(c1 + 1, width - 1), np.minimum(r1 + 1, height - 1)
    keep = (c0 <= c1) & (r0 <= r1)
    tx0, tx1 = c0 // tile, c1 // tile
    ty0, ty1 = r0 // tile, r1 // tile
    nx = np.where(keep, tx1 - tx0 + 1, 0)
    ny = np.where(keep, ty1 - ty0 + 1, 0)
    cnt = nx * ny
    rank = np.repeat(np.arange(len(order)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nxr = np.repeat(nx, cnt)
    tiles = (np.repeat(ty0, cnt) + local // np.maximum(nxr, 1)) * n_tx + np.repeat(tx0, cnt) + local % np.maximum(nxr, 1)
    srt = np.lexsort((rank, tiles))
    tile_ptr = np.zeros(n_tx * n_ty + 1, np.int64)
    np.cumsum(np.bincount(tiles, minlength=n_tx * n_ty), out=tile_ptr[1:])
    return tile_ptr, order[rank[srt]].astype(np.int64), n_tx, n_ty


def composite_tiled(mean2d, conic, opacity, payload, order, height, width, radius, tile=16):
    """Same semantics as ``composite_reference``; splats binned to tiles."""
    dt = mean2d.dtype
    n = len(mean2d)
    tile_ptr, tile_splats, n_tx, _ = _bin_tiles(order, mean2d, radius, height, width, tile)
    p = height * width
    counts = np.zeros(p, np.int64)
    indptr = np.zeros(p + 1, np.int64)
    empty_i = np.zeros(0, np.int64)
    empty_f = np.zeros(0, dt)
    args = (tile_ptr, tile_splats, np.ascontiguousarray(mean2d), np.ascontiguousarray(conic),
            np.ascontiguousarray(opacity), height, width, tile, n_tx)
    _tile_kernel(*args, False, indptr, empty_i, empty_f, empty_f, empty_f, empty_f, counts)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    cols = np.empty(nnz, np.int64)
    w, t, a, g = (np.empty(nnz, dt) for _ in range(4))
    _tile_kernel(*args, True, indptr, cols, w, t, a, g, counts)
    rec = Record(indptr, cols, w, t, a, g, height, width, n)
    return _finish(rec, payload)


# ---------------------------------------------------------------- adjoint

@numba.njit(parallel=True, cache=True)
def _backward_kernel(indptr, cols, w, trans, a_arr, g_arr, payload, dout, mean2d, conic,
                     opacity, width, d_op, d_mx, d_my, d_ca, d_cb, d_cc):
    n_pix = len(indptr) - 1
    nc = payload.shape[1]
    for pix in numba.prange(n_pix):
        k0, k1 = indptr[pix], indptr[pix + 1]
        if k0 == k1:
            continue
        px = pix % width + 0.5
        py = pix // width + 0.5
        acc = 0.0
        for k in range(k1 - 1, k0 - 1, -1):
            i = cols[k]
            dw = 0.0
            for ch in range(nc):
                dw += payload[i, ch] * dout[pix, ch]
            a = a_arr[k]
            da = trans[k] * (dw - acc)
            acc = dw * a + (1.0 - a) * acc
            g = g_arr[k]
            d_op[k] = da * g
            dpower = da * opacity[i] * g
            dx = px - mean2d[i, 0]
            dy = py - mean2d[i, 1]
            d_mx[k] = dpower * (conic[i, 0] * dx + conic[i, 1] * dy)
            d_my[k] = dpower * (conic[i, 1] * dx + conic[i, 2] * dy)
            d_ca[k] = -0.5 * dx * dx * dpower
            d_cb[k] = -dx * dy * dpower
            d_cc[k] = -0.5 * dy * dy * dpower


def composite_backward(rec, payload, dout, mean2d, conic, opacity):
    """Adjoints of the composite wrt 2D means, conics, opacities and payload.

    ``payload`` and ``dout`` include every composited channel. Per-entry terms
    are reduced per splat with ``bincount``, a fixed-order reduction.
    """
    dt = payload.dtype
    nnz = len(rec.cols)
    bufs = [np.zeros(nnz, np.float64) for _ in range(6)]
    if nnz:
        _backward_kernel(rec.indptr, rec.cols, rec.w, rec.trans, rec.a, rec.g,
                         np.ascontiguousarray(payload), np.ascontiguousarray(dout),
                         mean2d, conic, opacity, rec.width, *bufs)
    n = rec.n_splats

    def red(b):
        return np.bincount(rec.cols, weights=b, minlength=n).astype(dt)

    d_opacity = red(bufs[0])
    d_mean2d = np.stack([red(bufs[1]), red(bufs[2])], axis=1)
    d_conic = np.stack([red(bufs[3]), red(bufs[4]), red(bufs[5])], axis=1)
    d_payload = np.asarray(rec.matrix().T @ dout).astype(dt)
    return d_mean2d, d_conic, d_opacity, d_payload


# ------------------------------------------------------- differentiable op

def render(means, cov, opacity, payload, camera, ids=None, tiled=True, tile=16):
    """Differentiable render; returns (composite tensor, RenderOutput).

    The composite tensor has one row per pixel: payload channels followed by
    the alpha channel.
    """
    dt = means.data.dtype
    proj = project(means.data, cov.data, camera)
    order = depth_order(proj.depth, proj.valid, ids)
    pay = np.concatenate([payload.data, np.ones((len(payload.data), 1), dt)], axis=1)
    h, w = camera.height, camera.width
    if tiled:
        ro = composite_tiled(proj.mean2d, proj.conic, opacity.data, pay, order, h, w, proj.radius, tile)
    else:
        ro = composite_reference(proj.mean2d, proj.conic, opacity.data, pay, order, h, w)
    ro.visible = proj.valid & _on_screen(proj, h, w)
    ro.n_skipped = proj.n_degenerate
    ro.qmap = ro.qmap[..., :-1]
    rec = ro.record
    flat = np.concatenate([ro.rgb.reshape(h * w, 3), ro.qmap.reshape(h * w, -1),
                           ro.alpha.reshape(-1, 1)], axis=1).astype(dt)

    def bw(g):
        d_m2, d_con, d_op, d_pay = composite_backward(rec, pay, g.astype(dt), proj.mean2d,
                                                      proj.conic, opacity.data)
        d_means, d_cov = project_backward(proj, camera, d_m2, d_con)
        return d_means, d_cov, d_op, d_pay[:, :-1]

    out = dc.custom(flat, (means, cov, opacity, payload), bw, name="render")
    return out, ro


def _on_screen(proj, h, w):
    m, r = proj.mean2d, proj.radius
    return (m[:, 0] + r[:, 0] > 0) & (m[:, 0] - r[:, 0] < w) & (m[:, 1] + r[:, 1] > 0) & (m[:, 1] - r[:, 1] < h)
