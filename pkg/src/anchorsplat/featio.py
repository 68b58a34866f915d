"""Ground-truth supply: a deterministic synthetic scene with an analytic
ray-ellipsoid renderer and per-object feature vectors, plus the binary
FeatureMap format for externally computed features."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .scaffold import Camera, read_ply, write_ply

FEATURE_MAGIC = b"CUSF"
FEATURE_VERSION = 1
DEFAULT_MODELS = {"clip": 16, "siglip": 16, "dinov2": 32, "seem": 16, "llama3": 32, "llamav": 160}
BACKGROUND_ID = 0
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureMap:
    tag: str
    data: np.ndarray  # (H, W, D) float32

    @property
    def shape(self):
        return self.data.shape

    def resized(self, height, width):
        """Nearest-neighbour resample to (height, width)."""
        h, w, _ = self.data.shape
        if (h, w) == (height, width):
            return self
        rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
        cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
        return FeatureMap(self.tag, self.data[rows][:, cols])


@dataclass
class Ellipsoid:
    center: list
    radii: list
    yaw: float
    rgb: list
    semantic_id: int

    def rotation(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def contains(self, points, tol=1e-9):
        local = (np.asarray(points) - self.center) @ self.rotation()
        return ((local / self.radii) ** 2).sum(axis=1) <= 1.0 + tol


@dataclass
class CameraRing:
    count: int = 8
    radius: float = 3.5
    height: float = 1.5
    image_size: int = 64
    focal_scale: float = 1.1


@dataclass
class SyntheticScene:
    seed: int
    objects: list
    ring: CameraRing = field(default_factory=CameraRing)
    models: dict = field(default_factory=lambda: dict(DEFAULT_MODELS))
    background: list = field(default_factory=lambda: list(DEFAULT_BACKGROUND))

    def cameras(self):
        r = self.ring
        size = r.image_size
        f = r.focal_scale * size
        cams = []
        for i in range(r.count):
            t = 2 * np.pi * i / r.count
            eye = [r.radius * np.cos(t), r.radius * np.sin(t), r.height]
            cams.append(Camera.look_at(i, eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], f, f, size, size))
        return cams

    def to_dict(self):
        return {"seed": self.seed, "objects": [asdict(o) for o in self.objects],
                "ring": asdict(self.ring), "models": self.models, "background": self.background}

    @classmethod
    def from_dict(cls, d):
        return cls(d["seed"], [Ellipsoid(**o) for o in d["objects"]],
                   CameraRing(**d["ring"]), dict(d["models"]),
                   list(d.get("background", DEFAULT_BACKGROUND)))


def make_scene(seed=0, n_objects=3, ring=None, models=None):
    if n_objects < 1:
        raise ValueError("n_objects must be at least 1")
    rng = np.random.default_rng(seed)
    objects = []
    for k in range(n_objects):
        ang = 2 * np.pi * k / n_objects + rng.uniform(-0.3, 0.3)
        rad = 0.0 if n_objects == 1 else rng.uniform(0.55, 0.8)
        center = [rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-0.15, 0.15)]
        objects.append(Ellipsoid(
            center=[float(c) for c in center],
            radii=[float(v) for v in rng.uniform(0.3, 0.55, 3)],
            yaw=float(rng.uniform(0, np.pi)),
            rgb=[float(v) for v in rng.uniform(0.15, 0.95, 3)],
            semantic_id=k + 1,
        ))
    return SyntheticScene(seed, objects, ring or CameraRing(),
                          dict(models) if models else dict(DEFAULT_MODELS))


# --------------------------------------------------------- analytic render

LIGHT = np.array([0.3, 0.4, 0.866])


def _rays(camera, ss):
    h, w = camera.height, camera.width
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    d_cam = np.stack([(gx - camera.cx) / camera.fx, (gy - camera.cy) / camera.fy,
                      np.ones_like(gx)], axis=-1)
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return camera.center, d_world  # (h*ss, w*ss, 3)


def trace(scene, camera, ss=1):
    """Nearest object hit per ray: (object index or -1, shaded rgb)."""
    origin, dirs = _rays(camera, ss)
    best_t = np.full(dirs.shape[:2], np.inf)
    best = np.full(dirs.shape[:2], -1)
    normal = np.zeros(dirs.shape)
    for k, obj in enumerate(scene.objects):
        rot = obj.rotation()
        radii = np.asarray(obj.radii)
        o = ((origin - obj.center) @ rot) / radii
        d = (dirs @ rot) / radii
        a = (d * d).sum(-1)
        b = 2 * (d * o).sum(-1)
        c = (o * o).sum() - 1
        disc = b * b - 4 * a * c
        hit = disc >= 0
        t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0))) / (2 * a), np.inf)
        t = np.where(t > 0, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best = np.where(closer, k, best)
        p_local = o + np.where(np.isfinite(t), t, 0)[..., None] * d
        n = (p_local / radii) @ rot.T
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        normal = np.where(closer[..., None], n, normal)
    colors = np.array([o.rgb for o in scene.objects] + [scene.background])
    shade = 0.7 + 0.3 * np.clip(normal @ LIGHT, 0, None)
    rgb = colors[best] * np.where(best >= 0, shade, 1.0)[..., None]
    return best, rgb


def render_gt(scene, camera, ss=3):
    """Anti-aliased RGB over the scene background (ss x ss supersampling), the
    centre-ray object id map and the fractional object coverage."""
    hit, rgb = trace(scene, camera, ss)
    h, w = camera.height, camera.width
    img = rgb.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    alpha = (hit >= 0).reshape(h, ss, w, ss).mean(axis=(1, 3))
    ids, _ = trace(scene, camera, 1)
    sem = np.where(ids >= 0, np.array([o.semantic_id for o in scene.objects])[ids], BACKGROUND_ID)
    return img, sem, alpha


def sample_points(scene, n_points, rng, shell=0.85):
    """Points inside each ellipsoid, concentrated in the outer shell."""
    pts = []
    per = max(1, n_points // len(scene.objects))
    for obj in scene.objects:
        d = rng.normal(size=(per, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(shell, 1.0, per)[:, None]
        pts.append(obj.center + (d * r * obj.radii) @ obj.rotation().T)
    return np.concatenate(pts)


@dataclass
class SceneData:
    """Everything training needs: cameras, GT images and features, seed points."""
    cameras: list
    images: list  # (H, W, 3) float
    features: list  # per view: {tag: FeatureMap}
    points: np.ndarray
    scene: SyntheticScene = None
    semantic: list = None
    alphas: list = None  # per view (H, W) coverage, when known


def synth_scene(seed=0, n_objects=3, n_points=3000, ring=None, models=None):
    scene = make_scene(seed, n_objects, ring, models)
    rng = np.random.default_rng([seed, 1])
    points = sample_points(scene, n_points, rng)
    cams = scene.cameras()
    images, sems, feats, alphas = [], [], [], []
    for cam in cams:
        img, sem, alpha = render_gt(scene, cam)
        images.append(img)
        sems.append(sem)
        alphas.append(alpha)
        feats.append({tag: features_from_ids(scene, sem, tag, d) for tag, d in scene.models.items()})
    return SceneData(cams, images, feats, points, scene, sems, alphas)


# ---------------------------------------------------------------- features

def semantic_vector(seed, tag, semantic_id, dim):
    h = hashlib.sha256(f"{seed}:{tag}:{semantic_id}:{dim}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def features_from_ids(scene, sem, tag, dim):
    ids = sorted({BACKGROUND_ID} | {o.semantic_id for o in scene.objects})
    table = np.zeros((max(ids) + 1, dim))
    for i in ids:
        table[i] = semantic_vector(scene.seed, tag, i, dim)
    return FeatureMap(tag, table[sem].astype(np.float32))


def synth_features(scene, camera, tag, dim):
    if dim < 2:
        raise ValueError("feature dim must be at least 2")
    _, sem, _ = render_gt(scene, camera, ss=1)
    return features_from_ids(scene, sem, tag, dim)


# -------------------------------------------------------------- file IO

def save_feature_map(path, fmap):
    h, w, d = fmap.data.shape
    t = fmap.tag.encode("utf-8")
    header = FEATURE_MAGIC + struct.pack("<IB", FEATURE_VERSION, len(t)) + t + struct.pack("<III", h, w, d)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def feature_file_size(tag, h, w, d):
    return 4 + 4 + 1 + len(tag.encode("utf-8")) + 12 + 4 * h * w * d


def load_feature_map(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 9:
        raise FeatureFormatError(f"{path}: truncated header, expected at least 9 bytes, got {len(buf)}")
    if buf[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    version, n = struct.unpack_from("<IB", buf, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at byte 4")
    off = 9 + n
    if len(buf) < off + 12:
        raise FeatureFormatError(f"{path}: truncated header at byte {len(buf)}, expected {off + 12} bytes")
    tag = buf[9:off].decode("utf-8")
    h, w, d = struct.unpack_from("<III", buf, off)
    off += 12
    expected = off + 4 * h * w * d
    if len(buf) != expected:
        raise FeatureFormatError(f"{path}: payload length mismatch at byte {off}: "
                                 f"expected {expected} bytes total, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=off).reshape(h, w, d).astype(np.float32)
    return FeatureMap(tag, data)


def save_png(path, img, alpha=None):
    """8-bit PNG; with ``alpha`` the coverage goes into a fourth channel."""
    from PIL import Image

    img = np.asarray(img)
    if alpha is not None:
        img = np.concatenate([img, np.asarray(alpha)[..., None]], axis=-1)
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path, with_alpha=False):
    from PIL import Image

    im = Image.open(path)
    has_alpha = im.mode in ("RGBA", "LA")
    rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if not with_alpha:
        return rgb
    alpha = np.asarray(im.convert("RGBA"), dtype=np.float64)[..., 3] / 255.0 if has_alpha else None
    return rgb, alpha


# ----------------------------------------------------------- scene dirs

def write_scene_dir(out_dir, data):
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    write_ply(os.path.join(out_dir, "points.ply"), data.points)
    with open(os.path.join(out_dir, "cams.json"), "w") as fh:
        json.dump([c.to_dict() for c in data.cameras], fh, indent=1)
    if data.scene is not None:
        with open(os.path.join(out_dir, "scene.json"), "w") as fh:
            json.dump(data.scene.to_dict(), fh, indent=1)
    for i, (img, feats) in enumerate(zip(data.images, data.features)):
        alpha = data.alphas[i] if data.alphas is not None else None
        save_png(os.path.join(out_dir, "rgb", f"view_{i:03d}.png"), img, alpha)
        for tag, fm in feats.items():
            save_feature_map(os.path.join(out_dir, "features", f"view_{i:03d}_{tag}.cusf"), fm)


def read_scene_dir(scene_dir, tags=None):
    with open(os.path.join(scene_dir, "cams.json")) as fh:
        cams = [Camera.from_dict(d) for d in json.load(fh)]
    scene = None
    path = os.path.join(scene_dir, "scene.json")
    if os.path.exists(path):
        with open(path) as fh:
            scene = SyntheticScene.from_dict(json.load(fh))
    if tags is None:
        tags = list(scene.models) if scene else sorted(
            {f.split("_", 2)[2][:-5] for f in os.listdir(os.path.join(scene_dir, "features"))})
    images, feats, alphas = [], [], []
    for i, _ in enumerate(cams):
        img, alpha = load_png(os.path.join(scene_dir, "rgb", f"view_{i:03d}.png"), with_alpha=True)
        images.append(img)
        alphas.append(alpha)
        feats.append({t: load_feature_map(os.path.join(scene_dir, "features", f"view_{i:03d}_{t}.cusf"))
                      for t in tags})
    points = read_ply(os.path.join(scene_dir, "points.ply"))
    if any(a is None for a in alphas):
        alphas = None
    return SceneData(cams, images, feats, points, scene, alphas=alphas)


def missing_feature_tags(scene_dir, tags, n_views):
    missing = []
    for t in tags:
        for i in range(n_views):
            if not os.path.exists(os.path.join(scene_dir, "features", f"view_{i:03d}_{t}.cusf")):
                missing.append(t)
                break
    return missing
