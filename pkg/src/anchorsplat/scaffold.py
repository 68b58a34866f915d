"""Voxel scaffold: anchors, cameras and point-cloud initialization.

Anchor state is stored as row-aligned arrays (one row per anchor) so that the
decoders can run over every anchor at once. ``Scaffold.anchor(i)`` gives the
per-anchor view when one is needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


class InitializationError(ValueError):
    pass


class DegenerateDirectionError(ValueError):
    pass


class FormatError(ValueError):
    pass


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class Camera:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (err {err:.2e})")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, id, eye, target, up, fx, fy, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(id, fx, fy, width / 2.0, height / 2.0, rot, -rot @ eye, height, width)

    def to_dict(self):
        return {"id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["fx"], d["fy"], d["cx"], d["cy"], d["rotation"],
                   d["translation"], d["height"], d["width"])

    def resized(self, height, width):
        sx, sy = width / self.width, height / self.height
        return Camera(self.id, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.rotation, self.translation, height, width)


@dataclass
class VoxelAnchor:
    cell_index: tuple
    center: np.ndarray
    latent: np.ndarray
    offsets: np.ndarray
    scale_raw: np.ndarray
    contrib_accum: float = 0.0
    grad_norm_accum: float = 0.0
    obs_count: int = 0


@dataclass
class Scaffold:
    voxel_size: float
    n_per_anchor: int
    cells: np.ndarray  # (V, 3) int
    latents: dc.Param  # (V, d_f)
    offsets: dc.Param  # (V, N*3)
    scale_raw: dc.Param  # (V, 3)
    ids: np.ndarray  # (V,) stable anchor ids
    d_f: int = 32
    next_id: int = 0
    contrib_accum: np.ndarray = None
    grad_norm_accum: np.ndarray = None
    obs_count: np.ndarray = None
    query_residual: dc.Param = None  # (V, (N-1)*d_q), per-gaussian query mode only
    cell_map: dict = field(default_factory=dict)

    def __post_init__(self):
        v = len(self.cells)
        if self.contrib_accum is None:
            self.contrib_accum = np.zeros(v)
        if self.grad_norm_accum is None:
            self.grad_norm_accum = np.zeros(v)
        if self.obs_count is None:
            self.obs_count = np.zeros(v, dtype=np.int64)
        self.next_id = max(self.next_id, int(self.ids.max()) + 1 if v else 0)
        self.rebuild_cell_map()

    def __len__(self):
        return len(self.cells)

    @property
    def centers(self):
        return (self.cells + 0.5) * self.voxel_size

    def rebuild_cell_map(self):
        self.cell_map = {tuple(int(c) for c in cell): i for i, cell in enumerate(self.cells)}
        if len(self.cell_map) != len(self.cells):
            raise InitializationError("duplicate cell in scaffold")

    def params(self):
        ps = [self.latents, self.offsets, self.scale_raw]
        return ps if self.query_residual is None else ps + [self.query_residual]

    def anchor(self, i):
        return VoxelAnchor(tuple(int(c) for c in self.cells[i]), self.centers[i],
                           self.latents.data[i], self.offsets.data[i].reshape(-1, 3),
                           self.scale_raw.data[i], float(self.contrib_accum[i]),
                           float(self.grad_norm_accum[i]), int(self.obs_count[i]))

    def lookup(self, point):
        cell = tuple(int(c) for c in np.floor(np.asarray(point) / self.voxel_size))
        return self.cell_map.get(cell)

    def select(self, keep):
        """Keep only anchors at row indices ``keep`` (sorted)."""
        keep = np.asarray(keep, dtype=np.int64)
        self.cells = self.cells[keep]
        self.ids = self.ids[keep]
        for p in self.params():
            p.assign(p.data[keep])
        self.contrib_accum = self.contrib_accum[keep]
        self.grad_norm_accum = self.grad_norm_accum[keep]
        self.obs_count = self.obs_count[keep]
        self.rebuild_cell_map()

    def append(self, cells, latents, offsets, scale_raw, query_residual=None):
        n = len(cells)
        self.cells = np.concatenate([self.cells, np.asarray(cells, dtype=np.int64).reshape(n, 3)])
        self.ids = np.concatenate([self.ids, np.arange(self.next_id, self.next_id + n)])
        self.next_id += n
        self.latents.assign(np.concatenate([self.latents.data, latents]))
        self.offsets.assign(np.concatenate([self.offsets.data, offsets]))
        self.scale_raw.assign(np.concatenate([self.scale_raw.data, scale_raw]))
        if self.query_residual is not None:
            if query_residual is None:
                query_residual = np.zeros((n, self.query_residual.shape[1]))
            self.query_residual.assign(np.concatenate([self.query_residual.data, query_residual]))
        self.contrib_accum = np.concatenate([self.contrib_accum, np.zeros(n)])
        self.grad_norm_accum = np.concatenate([self.grad_norm_accum, np.zeros(n)])
        self.obs_count = np.concatenate([self.obs_count, np.zeros(n, dtype=np.int64)])
        self.rebuild_cell_map()


def distinct_cells(points, voxel_size):
    cells = np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
    return np.unique(cells, axis=0)


def init_anchor_params(rng, n, n_per_anchor, d_f, voxel_size):
    latents = rng.normal(0.0, 0.01, (n, d_f))
    offsets = rng.uniform(-0.5, 0.5, (n, n_per_anchor * 3))
    scale_raw = np.full((n, 3), inverse_softplus(voxel_size))
    return latents, offsets, scale_raw


def voxelize(points, voxel_size, n_per_anchor=10, d_f=32, rng=None):
    """One anchor per distinct cell floor(p / l), cells in lexicographic order."""
    if voxel_size <= 0:
        raise InitializationError("voxel size must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise InitializationError("cannot initialize a scaffold from an empty point set")
    rng = rng if rng is not None else np.random.default_rng(0)
    cells = distinct_cells(points, voxel_size)
    lat, off, sc = init_anchor_params(rng, len(cells), n_per_anchor, d_f, voxel_size)
    return Scaffold(
        voxel_size=voxel_size, n_per_anchor=n_per_anchor, cells=cells, d_f=d_f,
        latents=dc.Param(lat, "anchor_latent", "latents"),
        offsets=dc.Param(off, "anchor_offset", "offsets"),
        scale_raw=dc.Param(sc, "anchor_scale", "scale_raw"),
        ids=np.arange(len(cells), dtype=np.int64),
    )


def gaussian_positions(scaffold):
    """Decoded means c_v + dx * softplus(s_v), shape (V*N, 3)."""
    n = scaffold.n_per_anchor
    s = dc.tile_cols(dc.softplus(scaffold.scale_raw), n)
    centers = dc.constant(np.tile(scaffold.centers, (1, n)))
    mu = dc.add(centers, dc.mul(scaffold.offsets, s))
    return dc.reshape(mu, (-1, 3))


def viewing_direction(centers, camera):
    """Unit vectors from the camera center to each anchor center."""
    d = np.atleast_2d(np.asarray(centers, dtype=np.float64)) - camera.center
    n = np.linalg.norm(d, axis=1)
    if (n < 1e-12).any():
        raise DegenerateDirectionError("camera center coincides with an anchor center")
    return d / n[:, None]


# ------------------------------------------------------------------- PLY

def read_ply(path):
    """ASCII PLY vertices (x, y, z); other vertex properties are ignored."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic")
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise FormatError(f"{path}: only 'format ascii 1.0' is supported")
    elements = []
    i = 2
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                raise FormatError(f"{path}: list properties are not supported")
            elements[-1][2].append(tok[2])
        elif tok[0] == "end_header":
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    points = None
    for name, count, props in elements:
        body = lines[i:i + count]
        if len(body) < count:
            raise FormatError(f"{path}: expected {count} {name} rows, found {len(body)}")
        if name == "vertex":
            try:
                cols = [props.index(c) for c in "xyz"]
            except ValueError:
                raise FormatError(f"{path}: vertex element lacks x/y/z") from None
            rows = np.array([[float(v) for v in row.split()] for row in body]).reshape(count, -1)
            points = rows[:, cols]
        i += count
    if points is None:
        raise FormatError(f"{path}: no vertex element")
    return points


def write_ply(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in points:
            fh.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n")


# ------------------------------------------------------------ ANCH chunk

def encode_anchors(scaffold):
    v, n, d_f = len(scaffold), scaffold.n_per_anchor, scaffold.d_f
    out = [struct.pack("<I", v)]
    lat = scaffold.latents.data.astype("<f4")
    off = scaffold.offsets.data.astype("<f4").reshape(v, n * 3)
    sc = scaffold.scale_raw.data.astype("<f4")
    cells = scaffold.cells.astype("<i4")
    for i in range(v):
        out += [cells[i].tobytes(), lat[i].tobytes(), off[i].tobytes(), sc[i].tobytes()]
    return b"".join(out)


def decode_anchors(buf, n_per_anchor, d_f):
    (v,) = struct.unpack_from("<I", buf, 0)
    rec = 12 + 4 * (d_f + 3 * n_per_anchor + 3)
    expected = 4 + v * rec
    if len(buf) < expected:
        raise FormatError(f"ANCH chunk truncated: expected {expected} bytes, got {len(buf)}")
    dt = np.dtype([("cell", "<i4", 3), ("lat", "<f4", d_f),
                   ("off", "<f4", 3 * n_per_anchor), ("sc", "<f4", 3)])
    arr = np.frombuffer(buf, dtype=dt, count=v, offset=4)
    return (arr["cell"].astype(np.int64), arr["lat"].copy(), arr["off"].copy(), arr["sc"].copy())
