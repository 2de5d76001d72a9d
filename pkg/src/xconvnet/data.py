"""Cloud persistence, synthetic dataset generators, and evaluation metrics.

On-disk cloud format ("XPC1", little-endian):

    magic "XPC1" | u32 version | u32 N | u32 Dim | u32 C | u32 label_mode
    coords  float32[N * Dim]  row-major
    features float32[N * C]   row-major
    labels  u32: absent (mode 0) / one value (mode 1) / N values (mode 2)

A whitespace text form is accepted on read: a header line
``N Dim C label_mode [cloud_label]`` followed by one point per line
(Dim coords, C features, and a trailing integer label in mode 2).

Coordinates are float32 on disk and float64 in memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .geometry import PointSet

CLOUD_MAGIC = b"XPC1"
CLOUD_VERSION = 1

LABEL_NONE = 0
LABEL_CLOUD = 1
LABEL_POINT = 2


class CloudFormatError(DataError):
    """Malformed cloud file; message carries the failing byte offset."""


def write_cloud(path, cloud: PointSet) -> None:
    """Serialize one cloud in the binary format."""
    n, dim = cloud.coords.shape
    c = cloud.n_features
    if cloud.point_labels is not None:
        mode = LABEL_POINT
    elif cloud.cloud_label is not None:
        mode = LABEL_CLOUD
    else:
        mode = LABEL_NONE
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<5I", CLOUD_VERSION, n, dim, c, mode))
        fh.write(cloud.coords.astype("<f4").tobytes())
        if c:
            fh.write(cloud.features.astype("<f4").tobytes())
        if mode == LABEL_CLOUD:
            fh.write(struct.pack("<I", cloud.cloud_label))
        elif mode == LABEL_POINT:
            fh.write(cloud.point_labels.astype("<u4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise CloudFormatError(f"truncated cloud file: {what} at byte {offset}")
    return data


def _read_cloud_binary(fh) -> PointSet:
    header = _read_exact(fh, 20, "header")
    version, n, dim, c, mode = struct.unpack("<5I", header)
    if version != CLOUD_VERSION:
        raise CloudFormatError(f"unsupported cloud version {version} at byte 4")
    if n < 1 or dim not in (2, 3) or mode not in (0, 1, 2):
        raise CloudFormatError(
            f"invalid header N={n} Dim={dim} label_mode={mode} at byte 4")
    coords = np.frombuffer(_read_exact(fh, 4 * n * dim, "coords"),
                           dtype="<f4").astype(np.float64).reshape(n, dim)
    features = None
    if c:
        features = np.frombuffer(_read_exact(fh, 4 * n * c, "features"),
                                 dtype="<f4").astype(np.float64).reshape(n, c)
    cloud_label = None
    point_labels = None
    if mode == LABEL_CLOUD:
        cloud_label = struct.unpack("<I", _read_exact(fh, 4, "cloud label"))[0]
    elif mode == LABEL_POINT:
        point_labels = np.frombuffer(_read_exact(fh, 4 * n, "point labels"),
                                     dtype="<u4").astype(np.int64)
    return PointSet(coords, features, point_labels, cloud_label)


def _read_cloud_text(text: str) -> PointSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CloudFormatError("empty text cloud at byte 0")
    head = lines[0].split()
    if len(head) not in (4, 5):
        raise CloudFormatError("text header must be 'N Dim C label_mode [label]'")
    n, dim, c, mode = (int(v) for v in head[:4])
    cloud_label = int(head[4]) if len(head) == 5 else None
    if mode == LABEL_CLOUD and cloud_label is None:
        raise CloudFormatError("label_mode 1 needs the cloud label in the header")
    if len(lines) - 1 != n:
        raise CloudFormatError(f"expected {n} point lines, found {len(lines) - 1}")
    want = dim + c + (1 if mode == LABEL_POINT else 0)
    rows = []
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != want:
            raise CloudFormatError(f"point line {i} has {len(parts)} fields, "
                                   f"expected {want}")
        rows.append([float(v) for v in parts])
    table = np.asarray(rows, dtype=np.float64)
    coords = table[:, :dim]
    features = table[:, dim:dim + c] if c else None
    point_labels = table[:, -1].astype(np.int64) if mode == LABEL_POINT else None
    return PointSet(coords, features, point_labels,
                    cloud_label if mode == LABEL_CLOUD else None)


def read_cloud(path) -> PointSet:
    """Read a cloud file, accepting either the binary or the text form."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic == CLOUD_MAGIC:
            return _read_cloud_binary(fh)
        head = magic + fh.read()
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CloudFormatError(f"bad magic {magic!r} at byte 0") from exc
    return _read_cloud_text(text)


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """A list of clouds with a train/test split."""

    clouds: list
    split: list          # "train" / "test" per cloud
    class_names: list
    task: str
    part_names: list = field(default_factory=list)

    def subset(self, which: str) -> list:
        return [c for c, s in zip(self.clouds, self.split) if s == which]

    @property
    def num_classes(self) -> int:
        if self.task == "segmentation":
            return len(self.part_names)
        return len(self.class_names)


def _sphere_surface(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube_surface(n: int, rng: np.random.Generator) -> np.ndarray:
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for a in range(3):
        mask = axis == a
        rest = [d for d in range(3) if d != a]
        pts[mask, a] = sign[mask]
        pts[mask, rest[0]] = uv[mask, 0]
        pts[mask, rest[1]] = uv[mask, 1]
    return pts


def _ring_surface(n: int, rng: np.random.Generator,
                  major: float = 1.0, minor: float = 0.3) -> np.ndarray:
    """Area-uniform torus sampling by rejection on the tube angle."""
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = (n - filled) * 2 + 8
        theta = rng.uniform(0.0, 2 * np.pi, m)
        phi = rng.uniform(0.0, 2 * np.pi, m)
        keep = rng.uniform(0.0, 1.0, m) < (major + minor * np.cos(phi)) / (major + minor)
        theta, phi = theta[keep], phi[keep]
        take = min(len(theta), n - filled)
        r = major + minor * np.cos(phi[:take])
        pts[filled:filled + take, 0] = r * np.cos(theta[:take])
        pts[filled:filled + take, 1] = r * np.sin(theta[:take])
        pts[filled:filled + take, 2] = minor * np.sin(phi[:take])
        filled += take
    return pts


_SHAPE_SAMPLERS = {
    "sphere": _sphere_surface,
    "cube": _cube_surface,
    "ring": _ring_surface,
}


def _rotate_vertical(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def _normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    radius = np.sqrt(np.max(np.sum(centered ** 2, axis=1)))
    return centered / max(radius, 1e-12)


def gen_shapes(classes: Sequence[str] = ("sphere", "cube", "ring"),
               per_class: int = 70, n_points: int = 256,
               noise_sigma: float = 0.02,
               rng: Optional[np.random.Generator] = None,
               train_fraction: float = 0.75) -> Dataset:
    """Classification dataset of noisy rotated primitives.

    Each cloud is sampled on one primitive's surface, perturbed with
    Gaussian coordinate noise, rotated by a random angle about the
    vertical axis, and normalized into the unit sphere. The first
    ``round(per_class * train_fraction)`` clouds of each class land in the
    train split.
    """
    rng = np.random.default_rng() if rng is None else rng
    for name in classes:
        if name not in _SHAPE_SAMPLERS:
            raise DataError(f"unknown shape class {name!r}; "
                            f"choose from {sorted(_SHAPE_SAMPLERS)}")
    if n_points < 8:
        raise DataError("n_points must be >= 8")
    clouds, split = [], []
    n_train = int(round(per_class * train_fraction))
    for label, name in enumerate(classes):
        sampler = _SHAPE_SAMPLERS[name]
        for j in range(per_class):
            pts = sampler(n_points, rng)
            pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
            pts = _rotate_vertical(pts, rng.uniform(0.0, 2 * np.pi))
            pts = _normalize_unit_sphere(pts)
            clouds.append(PointSet(pts, cloud_label=label))
            split.append("train" if j < n_train else "test")
    return Dataset(clouds, split, list(classes), "classification")


def _two_part_shape(n_points: int, rng: np.random.Generator,
                    sphere_fraction: float = 0.6):
    """A sphere with a cylindrical stem; labels by nearest primitive."""
    sphere_r = 0.5
    cyl_r, cyl_len = 0.15, 1.0
    n_sphere = int(round(n_points * sphere_fraction))
    n_cyl = n_points - n_sphere

    sphere = _sphere_surface(n_sphere, rng) * sphere_r
    theta = rng.uniform(0.0, 2 * np.pi, n_cyl)
    z = rng.uniform(-cyl_len, 0.0, n_cyl)
    cyl = np.stack([cyl_r * np.cos(theta), cyl_r * np.sin(theta),
                    z - sphere_r], axis=1)
    pts = np.concatenate([sphere, cyl], axis=0)

    def nearest_primitive(p: np.ndarray) -> np.ndarray:
        d_sphere = np.abs(np.linalg.norm(p, axis=1) - sphere_r)
        radial = np.linalg.norm(p[:, :2], axis=1)
        dz = np.maximum.reduce([(-sphere_r - cyl_len) - p[:, 2],
                                p[:, 2] - (-sphere_r),
                                np.zeros(len(p))])
        d_cyl = np.hypot(np.abs(radial - cyl_r), dz)
        return (d_cyl < d_sphere).astype(np.int64)

    return pts, nearest_primitive


def gen_parts(per_class: int = 24, n_points: int = 256,
              rng: Optional[np.random.Generator] = None,
              noise_sigma: float = 0.01,
              train_fraction: float = 0.75) -> Dataset:
    """Segmentation dataset of composite two-part shapes.

    Every point carries the label of its geometrically nearest primitive,
    assigned after noise is applied.
    """
    rng = np.random.default_rng() if rng is None else rng
    if n_points < 8:
        raise DataError("n_points must be >= 8")
    clouds, split = [], []
    n_train = int(round(per_class * train_fraction))
    for j in range(per_class):
        pts, assign = _two_part_shape(n_points, rng)
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
        labels = assign(pts)
        pts = _rotate_vertical(pts, rng.uniform(0.0, 2 * np.pi))
        center = pts.mean(axis=0)
        radius = np.sqrt(np.max(np.sum((pts - center) ** 2, axis=1)))
        pts = (pts - center) / max(radius, 1e-12)
        order = rng.permutation(n_points)
        clouds.append(PointSet(pts[order], point_labels=labels[order],
                               cloud_label=0))
        split.append("train" if j < n_train else "test")
    return Dataset(clouds, split, ["two_part"], "segmentation",
                   part_names=["body", "stem"])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    """Accuracy and IoU summaries plus the raw confusion matrix."""

    overall_accuracy: float
    mean_class_accuracy: float
    mean_iou: float
    part_avg_iou: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {
            "oa": self.overall_accuracy,
            "ma": self.mean_class_accuracy,
            "miou": self.mean_iou,
            "piou": self.part_avg_iou,
        }


def _iou_per_class(confusion: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / denom
    return iou, denom


def compute_metrics(predictions, ground_truth, task: str,
                    num_classes: Optional[int] = None) -> Metrics:
    """Aggregate accuracy and IoU over a flat prediction/label pairing.

    ``mean_iou`` averages TP / (TP + FP + FN) over the classes that occur
    at all; ``part_avg_iou`` applies the absent-part convention, scoring a
    class as 1.0 when it appears in neither predictions nor ground truth.
    """
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    ground_truth = np.asarray(ground_truth, dtype=np.int64).reshape(-1)
    if predictions.shape != ground_truth.shape:
        raise ValueError(f"got {predictions.shape[0]} predictions for "
                         f"{ground_truth.shape[0]} labels")
    if num_classes is None:
        num_classes = int(max(predictions.max(initial=0),
                              ground_truth.max(initial=0))) + 1

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (ground_truth, predictions), 1)

    total = confusion.sum()
    oa = float(np.trace(confusion)) / total if total else 0.0
    row_sums = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class_acc = np.diag(confusion) / row_sums
    present = row_sums > 0
    ma = float(per_class_acc[present].mean()) if present.any() else 0.0

    iou, denom = _iou_per_class(confusion)
    occurs = denom > 0
    miou = float(iou[occurs].mean()) if occurs.any() else 1.0
    piou_terms = np.where(occurs, iou, 1.0)
    piou = float(piou_terms.mean())
    return Metrics(oa, ma, miou, piou, confusion)


def per_category_piou(predictions_by_category: dict, task: str = "segmentation",
                      num_classes: Optional[int] = None) -> dict:
    """Absent-convention IoU aggregated separately per shape category."""
    return {cat: compute_metrics(p, g, task, num_classes).part_avg_iou
            for cat, (p, g) in predictions_by_category.items()}
