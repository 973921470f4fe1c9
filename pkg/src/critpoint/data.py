"""Point-cloud containers, a parametric synthetic dataset, OFF mesh sampling
and plain-text exporters."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ParseError, ShapeError

SYNTHETIC_CLASSES = (
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "plane",
    "pyramid",
    "two_spheres",
)


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"point cloud must be (n, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class Dataset:
    """Labelled clouds with a fixed point count, stored as one (N, n, 3) block."""

    points: np.ndarray
    labels: np.ndarray
    class_names: tuple
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise ShapeError(f"dataset points must be (N, n, 3), got {self.points.shape}")
        if len(self.labels) != len(self.points):
            raise ShapeError("labels and clouds differ in count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class table")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return PointCloud(self.points[i], int(self.labels[i]))

    @property
    def num_points(self):
        return self.points.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.points[idx], self.labels[idx], self.class_names, self.split, dict(self.meta))


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------

def _unit_sphere(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _disk(n, rng, radius):
    r = radius * np.sqrt(rng.random(n))
    t = rng.random(n) * 2 * np.pi
    return r * np.cos(t), r * np.sin(t)


def _triangles(tris, n, rng):
    tris = np.asarray(tris, dtype=np.float64)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    face = rng.choice(len(tris), size=n, p=areas / areas.sum())
    return _barycentric(tris[face], rng)


def _barycentric(tri, rng):
    r1 = np.sqrt(rng.random(len(tri)))[:, None]
    r2 = rng.random(len(tri))[:, None]
    return (1 - r1) * tri[:, 0] + r1 * (1 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]


def _sphere(n, rng):
    return _unit_sphere(n, rng)


def _cube(n, rng):
    pts = rng.uniform(-1, 1, (n, 3))
    axis = rng.integers(0, 3, n)
    pts[np.arange(n), axis] = rng.choice([-1.0, 1.0], n)
    return pts


def _cylinder(n, rng, radius=0.6, half=1.0):
    side = 2 * np.pi * radius * 2 * half
    cap = np.pi * radius**2
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    t = rng.random(n) * 2 * np.pi
    pts = np.stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-half, half, n)], axis=1)
    caps = kind > 0
    x, y = _disk(caps.sum(), rng, radius)
    pts[caps, 0], pts[caps, 1] = x, y
    pts[caps, 2] = np.where(kind[caps] == 1, half, -half)
    return pts


def _cone(n, rng, radius=0.8, height=2.0):
    slant = np.hypot(radius, height)
    side = np.pi * radius * slant
    base = np.pi * radius**2
    on_base = rng.random(n) < base / (side + base)
    frac = np.sqrt(rng.random(n))  # distance-from-apex fraction, area-uniform
    t = rng.random(n) * 2 * np.pi
    pts = np.stack([frac * radius * np.cos(t), frac * radius * np.sin(t), height / 2 - frac * height], axis=1)
    x, y = _disk(on_base.sum(), rng, radius)
    pts[on_base, 0], pts[on_base, 1] = x, y
    pts[on_base, 2] = -height / 2
    return pts


def _torus(n, rng, major=0.8, minor=0.25):
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.random(2 * n) * 2 * np.pi
        v = rng.random(2 * n) * 2 * np.pi
        keep = rng.random(2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
    return out[:n]


def _plane(n, rng):
    return np.stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), np.zeros(n)], axis=1)


def _pyramid(n, rng):
    b = [(-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1)]
    apex = (0, 0, 1)
    tris = [(b[i], b[(i + 1) % 4], apex) for i in range(4)] + [(b[0], b[1], b[2]), (b[0], b[2], b[3])]
    return _triangles(tris, n, rng)


def _two_spheres(n, rng, radius=0.5, offset=0.7):
    pts = radius * _unit_sphere(n, rng)
    pts[:, 0] += np.where(rng.random(n) < 0.5, -offset, offset)
    return pts


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "pyramid": _pyramid,
    "two_spheres": _two_spheres,
}


def sample_shape(name, n, rng, jitter=0.01):
    """Raw surface sample of one synthetic primitive plus Gaussian point jitter."""
    pts = _SAMPLERS[name](n, rng)
    return pts + jitter * rng.standard_normal(pts.shape)


def _rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_synthetic(num_classes=8, per_class=25, n=1024, seed=0, split="train", jitter=0.01, scale_jitter=0.1):
    """Labelled clouds of parametric primitives.

    Each instance is rotated about the vertical axis by a random angle,
    scaled per axis by a factor in ``1 ± scale_jitter``, jittered with
    Gaussian noise of std ``jitter`` and normalized into [-1, 1]^3.
    """
    if not 2 <= num_classes <= len(SYNTHETIC_CLASSES):
        raise ValueError(f"num_classes must be in [2, {len(SYNTHETIC_CLASSES)}]")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if n < 8:
        raise ValueError("n must be >= 8")
    rng = np.random.default_rng(seed)
    names = SYNTHETIC_CLASSES[:num_classes]
    clouds, labels = [], []
    for label, name in enumerate(names):
        for _ in range(per_class):
            pts = _SAMPLERS[name](n, rng)
            pts = pts * rng.uniform(1 - scale_jitter, 1 + scale_jitter, 3)
            pts = pts @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
            pts = pts + jitter * rng.standard_normal(pts.shape)
            clouds.append(normalize(PointCloud(pts)).points)
            labels.append(label)
    return Dataset(np.stack(clouds), np.array(labels), names, split, {"seed": seed, "source": "synthetic"})


def synthetic_splits(num_classes=8, train_per_class=200, test_per_class=50, n=512, seed=0):
    """Independent train/test datasets drawn from disjoint seed streams."""
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    train = generate_synthetic(num_classes, train_per_class, n, train_seed, "train")
    test = generate_synthetic(num_classes, test_per_class, n, test_seed, "test")
    train.meta["seed"] = test.meta["seed"] = seed
    return train, test


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def normalize(cloud):
    """Center on the bounding-box center and scale uniformly into [-1, 1]^3."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise DegenerateInputError("cannot normalize an empty cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = (hi - lo) / 2
    scale = half.max()
    if scale == 0:
        raise DegenerateInputError("all points coincide")
    out = (pts - (lo + hi) / 2) / scale
    np.clip(out, -1.0, 1.0, out=out)
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(out, label)


# --------------------------------------------------------------------------
# OFF meshes
# --------------------------------------------------------------------------

def read_off(path):
    """Parse an ASCII OFF file into (vertices, triangles).

    Polygons with more than three vertices are fan-triangulated. Also
    accepts the ``OFF<nv> <nf> <ne>`` header variant with counts glued to
    the magic word.
    """
    lines = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.split("#", 1)[0].strip()
            if text:
                lines.append((lineno, text))
    if not lines or not lines[0][1].startswith("OFF"):
        raise ParseError("missing OFF header", lines[0][0] if lines else 1)
    lineno, head = lines[0]
    rest = head[3:].split()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise ParseError("missing element counts", lineno)
        lineno, text = lines[1]
        rest = text.split()
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError("bad element counts", lineno) from None
    if len(lines) < pos + nv + nf:
        raise ParseError("file ends before all vertices and faces were read", lines[-1][0])
    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = lines[pos + i]
        try:
            verts[i] = [float(v) for v in text.split()[:3]]
        except ValueError:
            raise ParseError("bad vertex", lineno) from None
    tris = []
    for i in range(nf):
        lineno, text = lines[pos + nv + i]
        try:
            vals = [int(v) for v in text.split()]
        except ValueError:
            raise ParseError("bad face", lineno) from None
        k, idx = vals[0], vals[1 : 1 + vals[0]]
        if k < 3 or len(idx) != k or min(idx) < 0 or max(idx) >= nv:
            raise ParseError("bad face", lineno)
        tris.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    return verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def sample_mesh(verts, tris, n, rng):
    """``n`` points uniform over the mesh surface (area-weighted faces)."""
    corners = verts[tris]
    areas = 0.5 * np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1)
    total = areas.sum()
    if not total > 0:
        raise DegenerateInputError("mesh has zero surface area")
    face = rng.choice(len(tris), size=n, p=areas / total)
    return _barycentric(corners[face], rng)


def load_off_and_sample(path, n, seed=0):
    verts, tris = read_off(path)
    return PointCloud(sample_mesh(verts, tris, n, np.random.default_rng(seed)))


def load_off_directory(root, n, split="train", seed=0):
    """ModelNet-style tree ``root/<class>/<split>/*.off`` as a normalized Dataset."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name / split).glob("*.off")):
            verts, tris = read_off(f)
            clouds.append(normalize(PointCloud(sample_mesh(verts, tris, n, rng))).points)
            labels.append(label)
    if not clouds:
        raise ValueError(f"no OFF files under {root}/*/{split}")
    return Dataset(np.stack(clouds), np.array(labels), tuple(classes), split, {"seed": seed, "source": str(root)})


# --------------------------------------------------------------------------
# text exporters
# --------------------------------------------------------------------------

def write_xyz(path, points):
    np.savetxt(path, np.asarray(points), fmt="%.17g")


def read_xyz(path):
    pts = np.loadtxt(path, ndmin=2)
    return PointCloud(pts[:, :3])


def write_ply(path, points, **columns):
    """ASCII PLY with optional extra per-point scalar properties."""
    points = np.asarray(points)
    extra = {k: np.asarray(v) for k, v in columns.items()}
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        for axis in "xyz":
            fh.write(f"property double {axis}\n")
        for name, col in extra.items():
            kind = "int" if np.issubdtype(col.dtype, np.integer) or col.dtype == bool else "double"
            fh.write(f"property {kind} {name}\n")
        fh.write("end_header\n")
        for i, p in enumerate(points):
            vals = [repr(float(c)) for c in p]
            for col in extra.values():
                v = col[i]
                vals.append(str(int(v)) if col.dtype == bool or np.issubdtype(col.dtype, np.integer) else repr(float(v)))
            fh.write(" ".join(vals) + "\n")
