"""Dataset ingestion: OFF mesh parsing and surface sampling, the BPTP point
file format, synthetic classification/place data and dataset manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointops import PointCloud, normalize

BPTP_MAGIC = b"BPTP"
BPTP_VERSION = 1
_BPTP_HEADER = struct.Struct("<4sHI")

MANIFEST_NAME = "manifest.json"


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# -- OFF meshes ---------------------------------------------------------------------


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: list[np.ndarray]

    def triangles(self) -> np.ndarray:
        """Fan-triangulated faces as (T, 3) vertex indices."""
        tris = [(f[0], f[i], f[i + 1]) for f in self.faces for i in range(1, len(f) - 1)]
        return np.array(tris, dtype=np.int64).reshape(-1, 3)

    def to_point_cloud(self) -> PointCloud:
        return PointCloud(self.vertices)


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_off(text: str) -> Mesh:
    """Parse an OFF mesh.  Errors carry the offending line number."""
    lines = list(_tokens(text))
    if not lines:
        raise ParseError("empty file", 1)
    lineno, first = lines[0]
    pos = 1
    if first.startswith("OFF"):
        rest = first[3:].strip()
        if rest:
            # some exporters write "OFF1 2 3" or "OFF 1 2 3" on one line
            counts_line = (lineno, rest)
        elif len(lines) > 1:
            counts_line = lines[1]
            pos = 2
        else:
            raise ParseError("missing vertex/face counts", lineno)
    else:
        raise ParseError(f"expected 'OFF' header, got {first[:20]!r}", lineno)
    cl, counts = counts_line
    parts = counts.split()
    try:
        n_verts, n_faces = int(parts[0]), int(parts[1])
    except (ValueError, IndexError):
        raise ParseError(f"bad count line {counts!r}", cl) from None
    if n_verts < 0 or n_faces < 0:
        raise ParseError("negative counts", cl)
    body = lines[pos:]
    if len(body) < n_verts + n_faces:
        have = len(body)
        last = body[-1][0] if body else cl
        raise ParseError(f"header promises {n_verts} vertices and {n_faces} faces, found {have} data lines", last)
    verts = np.empty((n_verts, 3))
    for i in range(n_verts):
        ln, line = body[i]
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"vertex needs 3 coordinates, got {len(parts)}", ln)
        try:
            verts[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"non-numeric vertex {line!r}", ln) from None
    faces = []
    for j in range(n_faces):
        ln, line = body[n_verts + j]
        parts = line.split()
        try:
            k = int(parts[0])
            idx = np.array([int(p) for p in parts[1 : 1 + k]], dtype=np.int64)
        except (ValueError, IndexError):
            raise ParseError(f"bad face {line!r}", ln) from None
        if len(idx) != k or k < 3:
            raise ParseError(f"face declares {k} vertices but lists {len(idx)}", ln)
        if np.any(idx < 0) or np.any(idx >= n_verts):
            raise ParseError("face references a missing vertex", ln)
        faces.append(idx)
    if len(body) > n_verts + n_faces:
        ln = body[n_verts + n_faces][0]
        raise ParseError(f"extra data after {n_verts} vertices and {n_faces} faces", ln)
    return Mesh(verts, faces)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """n points uniformly over the mesh surface (area-weighted triangles)."""
    tris = mesh.triangles()
    if len(tris) == 0:
        raise DataError("mesh has no faces to sample")
    v = mesh.vertices[tris]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    if area.sum() <= 0:
        raise DataError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    t = rng.choice(len(tris), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = v[t, 0], v[t, 1], v[t, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


# -- BPTP point files -------------------------------------------------------------


def write_bptp(path, points) -> None:
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4"))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"points must be N x 3, got {pts.shape}")
    Path(path).write_bytes(_BPTP_HEADER.pack(BPTP_MAGIC, BPTP_VERSION, len(pts)) + pts.tobytes())


def read_bptp(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _BPTP_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n = _BPTP_HEADER.unpack_from(data)
    if magic != BPTP_MAGIC:
        raise DataError(f"{path}: not a BPTP file")
    if version != BPTP_VERSION:
        raise DataError(f"{path}: unsupported BPTP version {version}")
    need = _BPTP_HEADER.size + 12 * n
    if len(data) != need:
        raise DataError(f"{path}: expected {need} bytes for {n} points, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=_BPTP_HEADER.size).reshape(n, 3).astype(np.float64)


# -- manifests ------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Files plus labels (classification) or poses (place recognition) and splits."""

    format: str
    task: str
    files: list[str]
    splits: dict[str, list[int]]
    labels: list[int] | None = None
    class_names: list[str] | None = None
    poses: list[list[float]] | None = None
    normalized: bool = True
    positive_radius: float | None = None
    negative_radius: float | None = None

    def validate(self, root: Path | None = None):
        if self.task == "classification":
            if self.labels is None or len(self.labels) != len(self.files):
                raise DataError("classification manifest needs one label per file")
        elif self.task == "place_recognition":
            if self.poses is None or len(self.poses) != len(self.files):
                raise DataError("place-recognition manifest needs one pose per file")
        else:
            raise DataError(f"unknown task {self.task!r}")
        seen: set[int] = set()
        for name, ids in self.splits.items():
            if any(not 0 <= i < len(self.files) for i in ids):
                raise DataError(f"split {name!r} references a missing file")
            if seen & set(ids):
                raise DataError("splits must be disjoint")
            seen |= set(ids)
        if root is not None:
            for f in self.files:
                if not (Path(root) / f).exists():
                    raise DataError(f"missing file {f}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
            return cls(**d)
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"bad manifest: {e}") from None


def save_dataset(root, manifest: DatasetManifest, clouds: np.ndarray) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, pts in zip(manifest.files, clouds):
        write_bptp(root / name, pts)
    (root / MANIFEST_NAME).write_text(manifest.to_json())
    return root


def load_dataset(root) -> tuple[DatasetManifest, np.ndarray]:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    manifest = DatasetManifest.from_json(path.read_text())
    manifest.validate(root)
    clouds = [read_bptp(root / f) for f in manifest.files]
    sizes = {len(c) for c in clouds}
    if len(sizes) > 1:
        raise DataError("all clouds in a dataset must have the same number of points")
    return manifest, np.stack(clouds) if clouds else np.zeros((0, 0, 3))


# -- synthetic shapes -----------------------------------------------------------------


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    p = rng.uniform(-1, 1, size=(n, 3))
    axis = rng.integers(0, 3, n)
    p[np.arange(n), axis] = rng.choice([-1.0, 1.0], n)
    return p


def _cylinder(rng, n):
    t = rng.uniform(0, 2 * np.pi, n)
    return np.stack([np.cos(t), np.sin(t), rng.uniform(-1, 1, n)], axis=1)


def _torus(rng, n, R=1.0, r=0.35):
    u, v = rng.uniform(0, 2 * np.pi, (2, n))
    return np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)


def _plane(rng, n):
    return np.stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), np.zeros(n)], axis=1)


def _cone(rng, n):
    h = np.sqrt(rng.uniform(0, 1, n))
    t = rng.uniform(0, 2 * np.pi, n)
    return np.stack([h * np.cos(t), h * np.sin(t), 1 - 2 * h], axis=1)


def _helix(rng, n):
    t = rng.uniform(0, 4 * np.pi, n)
    return np.stack([np.cos(t), np.sin(t), t / (2 * np.pi) - 1], axis=1) + rng.normal(0, 0.05, (n, 3))


def _cross(rng, n):
    p = np.zeros((n, 3))
    axis = rng.integers(0, 3, n)
    p[np.arange(n), axis] = rng.uniform(-1, 1, n)
    return p + rng.normal(0, 0.05, (n, 3))


SHAPE_FAMILIES = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "plane": _plane,
    "cone": _cone,
    "helix": _helix,
    "cross": _cross,
}


def gen_synthetic_classification(n_classes: int, n_per_class: int, points_per_cloud: int, seed: int = 0,
                                 jitter: float = 0.01, test_per_class: int = 0) -> tuple[DatasetManifest, np.ndarray]:
    """Parametric shape families under random rotation, anisotropic scale and jitter.

    The last ``test_per_class`` samples of every family form the "test" split.
    """
    if not 0 <= test_per_class <= n_per_class:
        raise DataError("test_per_class must be in [0, n_per_class]")
    if not 1 <= n_classes <= len(SHAPE_FAMILIES):
        raise DataError(f"n_classes must be in [1, {len(SHAPE_FAMILIES)}]")
    rng = np.random.default_rng(seed)
    names = list(SHAPE_FAMILIES)[:n_classes]
    clouds, labels, is_test = [], [], []
    for c, name in enumerate(names):
        for i in range(n_per_class):
            p = SHAPE_FAMILIES[name](rng, points_per_cloud)
            p = p * rng.uniform(0.8, 1.2, size=3)
            p = p @ _rotation(rng).T
            p = p + rng.normal(0, jitter, p.shape)
            clouds.append(normalize(p))
            labels.append(c)
            is_test.append(i >= n_per_class - test_per_class)
    order = rng.permutation(len(clouds))
    clouds = np.stack(clouds)[order]
    labels = [int(labels[i]) for i in order]
    test = [int(j) for j, i in enumerate(order) if is_test[i]]
    train = [int(j) for j, i in enumerate(order) if not is_test[i]]
    files = [f"cloud_{i:05d}.bptp" for i in range(len(clouds))]
    splits = {"train": train, "test": test} if test_per_class else {"train": train}
    manifest = DatasetManifest("bptp", "classification", files, splits,
                               labels=labels, class_names=names, normalized=True)
    return manifest, clouds


# -- synthetic places -------------------------------------------------------------------


@dataclass
class PlaceScene:
    """Box-shaped obstacles on a ground disc, in the place's local frame."""

    boxes: np.ndarray  # (n, 6): cx, cy, sx, sy, height, yaw
    radius: float


def _make_scene(rng, radius: float = 1.0, n_boxes=(4, 8)) -> PlaceScene:
    n = int(rng.integers(n_boxes[0], n_boxes[1] + 1))
    boxes = np.empty((n, 6))
    for i in range(n):
        r = radius * np.sqrt(rng.uniform(0.05, 0.8))
        t = rng.uniform(0, 2 * np.pi)
        boxes[i] = [r * np.cos(t), r * np.sin(t), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3),
                    rng.uniform(0.1, 0.8), rng.uniform(0, np.pi)]
    return PlaceScene(boxes, radius)


def _sample_scene(scene: PlaceScene, n: int, rng, ground_fraction: float = 0.3) -> np.ndarray:
    n_ground = int(round(ground_fraction * n))
    r = scene.radius * np.sqrt(rng.uniform(0, 1, n_ground))
    t = rng.uniform(0, 2 * np.pi, n_ground)
    ground = np.stack([r * np.cos(t), r * np.sin(t), np.zeros(n_ground)], axis=1)
    b = scene.boxes
    # box side area decides how many points each box receives
    area = 2 * (b[:, 2] + b[:, 3]) * b[:, 4] + b[:, 2] * b[:, 3]
    which = rng.choice(len(b), size=n - n_ground, p=area / area.sum())
    pts = []
    for i in range(len(b)):
        m = int((which == i).sum())
        if not m:
            continue
        cx, cy, sx, sy, h, yaw = b[i]
        p = rng.uniform(-0.5, 0.5, size=(m, 3)) * [sx, sy, h] + [0, 0, h / 2]
        # project onto a random face (sides or top)
        face = rng.integers(0, 5, m)
        p[face == 0, 0] = -sx / 2
        p[face == 1, 0] = sx / 2
        p[face == 2, 1] = -sy / 2
        p[face == 3, 1] = sy / 2
        p[face == 4, 2] = h
        c, s = np.cos(yaw), np.sin(yaw)
        p[:, :2] = p[:, :2] @ np.array([[c, s], [-s, c]])
        p[:, 0] += cx
        p[:, 1] += cy
        pts.append(p)
    return np.concatenate([ground] + pts, axis=0)


def gen_synthetic_places(n_places: int, revisits_per_place: int, points_per_cloud: int, seed: int = 0,
                         spacing: float = 3.0, noise: float = 0.01, dropout: float = 0.05,
                         max_yaw: float = 0.2, positive_radius: float = 0.5,
                         negative_radius: float = 2.0, ground_fraction: float = 0.1,
                         n_boxes: tuple[int, int] = (6, 12)) -> tuple[DatasetManifest, np.ndarray]:
    """Each place is a fixed random scene on a 2-D grid of poses; every revisit
    re-scans it with noise, an occluded sector and a random yaw.  The default
    yaw range is small: revisits follow the same route and heading.

    Splits by revisit index r of R: "query" is r = R-1, "database" r = R-2 and
    "train" every earlier revisit (empty splits are left out).
    """
    if n_places < 1 or revisits_per_place < 1:
        raise DataError("need at least one place and one revisit")
    if spacing <= negative_radius:
        raise DataError("grid spacing must exceed the negative radius")
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_places)))
    grid = np.array([(i % side, i // side) for i in range(n_places)], dtype=np.float64) * spacing
    clouds, poses, place_ids = [], [], []
    for p in range(n_places):
        scene = _make_scene(rng, n_boxes=tuple(n_boxes))
        for _ in range(revisits_per_place):
            extra = int(np.ceil(points_per_cloud * dropout / (1 - dropout))) + 8
            pts = _sample_scene(scene, points_per_cloud + extra, rng, ground_fraction)
            # occlusion: drop the points inside a random angular sector
            ang = np.arctan2(pts[:, 1], pts[:, 0])
            start = rng.uniform(-np.pi, np.pi)
            rel = (ang - start) % (2 * np.pi)
            keep = rel > 2 * np.pi * dropout
            pts = pts[keep]
            if len(pts) < points_per_cloud:
                pts = np.concatenate([pts, pts[rng.integers(0, len(pts), points_per_cloud - len(pts))]])
            pts = pts[rng.permutation(len(pts))[:points_per_cloud]]
            yaw = rng.uniform(-max_yaw, max_yaw)
            c, s = np.cos(yaw), np.sin(yaw)
            pts[:, :2] = pts[:, :2] @ np.array([[c, s], [-s, c]])
            pts = pts + rng.normal(0, noise, pts.shape)
            clouds.append(normalize(pts))
            poses.append(grid[p].tolist())
            place_ids.append(p)
    files = [f"scan_{i:05d}.bptp" for i in range(len(clouds))]
    # by revisit: the last is the query set, the one before the database, the rest train
    rev = np.tile(np.arange(revisits_per_place), n_places)
    r = revisits_per_place
    splits = {"train": np.flatnonzero(rev < r - 2), "database": np.flatnonzero(rev == max(r - 2, 0)),
              "query": np.flatnonzero(rev == r - 1) if r > 1 else np.arange(0)}
    splits = {k: [int(i) for i in v] for k, v in splits.items() if len(v)}
    manifest = DatasetManifest("bptp", "place_recognition", files, splits,
                               poses=poses, normalized=True, positive_radius=positive_radius,
                               negative_radius=negative_radius)
    return manifest, np.stack(clouds)
