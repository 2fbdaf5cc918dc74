"""Point-cloud primitives: normalization, kNN, PCA normals, augmentations.

All functions are pure in their inputs plus an explicit seed, so they are safe
to call concurrently on shared read-only clouds. Internal arithmetic runs in
float64; cloud payloads are stored as float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MIN_CROP_SURVIVORS = 8
MIN_PAIR_MATCHES = 16
PAIR_RESAMPLE_ATTEMPTS = 10


class GeometryError(ValueError):
    pass


def subseed(*parts: int) -> int:
    """Stable derived seed from a tuple of integers (platform independent)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class PointCloud:
    """N x 3 coordinates with optional unit normals and a class label."""

    points: np.ndarray
    normals: np.ndarray | None = None
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise GeometryError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise GeometryError("points contain non-finite values")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float32)
            if self.normals.shape != self.points.shape:
                raise GeometryError("normals must match points shape")
            lengths = np.linalg.norm(self.normals.astype(np.float64), axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-5):
                raise GeometryError("normals must be unit length within 1e-5")

    @property
    def n(self) -> int:
        return self.points.shape[0]


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center the centroid at the origin and scale the farthest point to radius 1.

    A degenerate (zero-extent) cloud maps to the origin. Idempotent within 1e-6.
    """
    pts = cloud.points.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 1e-12:
        centered = centered / radius
    else:
        centered = np.zeros_like(centered)
    return PointCloud(
        centered.astype(np.float32),
        normals=None if cloud.normals is None else cloud.normals.copy(),
        label=cloud.label,
        source_id=cloud.source_id,
    )


def knn(points: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the k nearest rows per row, ascending distance.

    Works on rows of any dimension (reused on feature rows by the edge-conv
    backbone). Distance ties break by ascending index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise GeometryError(f"knn: k={k} out of range for {n} points (exclude_self={exclude_self})")
    sq = (pts * pts).sum(axis=1)
    out = np.empty((n, k), dtype=np.int64)
    chunk = max(1, min(n, int(2**22 // max(n, 1)) or 1))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (pts[start:stop] @ pts.T)
        np.maximum(d2, 0.0, out=d2)
        if exclude_self:
            d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, :k]
    return out


@dataclass
class PcaNormalsResult:
    normals: np.ndarray  # N x 3 float32 unit vectors
    degenerate: np.ndarray  # N bool, True where the neighborhood had rank <= 1


def _canonical_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-|component| coordinate is positive."""
    idx = np.argmax(np.abs(vectors), axis=1)
    picked = vectors[np.arange(vectors.shape[0]), idx]
    sign = np.where(picked < 0, -1.0, 1.0)
    return vectors * sign[:, None]


def pca_normals(points: np.ndarray, k: int = 30) -> PcaNormalsResult:
    """Per-point unit normals from the smallest principal direction of each
    k-NN neighborhood (self included).

    Rank-deficient neighborhoods (collinear or coincident) are flagged, not
    fatal: they keep the canonical eigenvector that eigh returns.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 3 <= k < n:
        raise GeometryError(f"pca_normals: requires N > k >= 3, got N={n}, k={k}")
    nbr = knn(pts, k, exclude_self=False)
    hoods = pts[nbr]  # N x k x 3
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = _canonical_sign(eigvecs[:, :, 0])
    scale = np.maximum(eigvals[:, 2], 1e-30)
    degenerate = (eigvals[:, 1] / scale < 1e-9) | (eigvals[:, 2] < 1e-24)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(lengths, 1e-30)
    return PcaNormalsResult(normals.astype(np.float32), degenerate)


# --------------------------------------------------------------------------
# Augmentations
# --------------------------------------------------------------------------


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues formula; returns a proper rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + math.sin(angle) * cross + (1.0 - math.cos(angle)) * (cross @ cross)


@dataclass
class RigidAugmentation:
    """Similarity transform plus an optional crop direction, seed-determined."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    crop_direction: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise GeometryError("rotation must be 3 x 3")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise GeometryError("rotation must have determinant +1")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-6:
            raise GeometryError("rotation must be orthonormal")
        if self.scale <= 0:
            raise GeometryError("scale must be positive")
        if self.crop_direction is not None:
            self.crop_direction = np.asarray(self.crop_direction, dtype=np.float64)
            self.crop_direction = self.crop_direction / np.linalg.norm(self.crop_direction)

    def angle(self) -> float:
        """Rotation angle in radians, recovered from the trace."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))


def _unit_sphere_direction(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm


ROTATION_MAX_DEG = 45.0
SCALE_RANGE = (0.8, 1.25)
TRANSLATION_MAX = 0.5


def sample_augmentation(rng_seed: int) -> RigidAugmentation:
    """Random rigid augmentation: axis-angle rotation up to 45 degrees, scale
    in [0.8, 1.25], per-axis translation in [-0.5, 0.5], random crop direction."""
    rng = np.random.default_rng(rng_seed)
    axis = _unit_sphere_direction(rng)
    angle = rng.uniform(-math.radians(ROTATION_MAX_DEG), math.radians(ROTATION_MAX_DEG))
    scale = rng.uniform(*SCALE_RANGE)
    translation = rng.uniform(-TRANSLATION_MAX, TRANSLATION_MAX, size=3)
    crop_direction = _unit_sphere_direction(rng)
    return RigidAugmentation(
        rotation=rotation_from_axis_angle(axis, angle),
        scale=scale,
        translation=translation,
        crop_direction=crop_direction,
        seed=rng_seed,
    )


def apply_augmentation(
    cloud: PointCloud, aug: RigidAugmentation, crop_fraction: float = 0.5
) -> tuple[PointCloud, np.ndarray]:
    """Crop along the crop direction (in the canonical frame), then apply
    p -> scale * R p + t. Returns the transformed cloud and the retained
    source indices in output order."""
    if not 0.0 < crop_fraction <= 1.0:
        raise GeometryError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    n = cloud.n
    keep = math.ceil(crop_fraction * n)
    if keep < MIN_CROP_SURVIVORS:
        raise GeometryError(f"crop would leave {keep} < {MIN_CROP_SURVIVORS} points")
    if keep < n:
        if aug.crop_direction is None:
            raise GeometryError("augmentation has no crop direction but crop_fraction < 1")
        proj = cloud.points.astype(np.float64) @ aug.crop_direction
        order = np.argsort(-proj, kind="stable")  # ties keep ascending index
        survivors = np.sort(order[:keep])
    else:
        survivors = np.arange(n)
    pts = cloud.points[survivors].astype(np.float64)
    pts = aug.scale * (pts @ aug.rotation.T) + aug.translation
    normals = None
    if cloud.normals is not None:
        normals = (cloud.normals[survivors].astype(np.float64) @ aug.rotation.T).astype(np.float32)
    out = PointCloud(
        pts.astype(np.float32), normals=normals, label=cloud.label, source_id=cloud.source_id
    )
    return out, survivors


def invert_augmentation(points: np.ndarray, aug: RigidAugmentation) -> np.ndarray:
    """Map augmented points back to the canonical frame: R^T (p - t) / scale."""
    pts = np.asarray(points, dtype=np.float64)
    return ((pts - aug.translation) @ aug.rotation) / aug.scale


@dataclass
class AugmentedPair:
    """Two augmented views of one cloud plus the matched point-index pairs."""

    view_a: PointCloud
    view_b: PointCloud
    matches: np.ndarray  # M x 2, (index in view_a, index in view_b)
    aug_a: RigidAugmentation = field(repr=False, default=None)
    aug_b: RigidAugmentation = field(repr=False, default=None)

    def __post_init__(self):
        m = np.asarray(self.matches)
        if m.ndim != 2 or m.shape[1] != 2:
            raise GeometryError("matches must be M x 2")
        if len(np.unique(m[:, 0])) != len(m) or len(np.unique(m[:, 1])) != len(m):
            raise GeometryError("matches must not repeat view indices")


def make_augmented_pair(cloud: PointCloud, seed: int, crop_fraction: float = 0.5) -> AugmentedPair:
    """Generate two independently augmented views and their point matches.

    Matches pair view positions whose source indices coincide. If fewer than
    16 source points survive both crops, augmentations are resampled up to 10
    times before rejecting the cloud.
    """
    if cloud.n < 64:
        raise GeometryError(f"make_augmented_pair needs N >= 64, got {cloud.n}")
    for attempt in range(PAIR_RESAMPLE_ATTEMPTS):
        aug_a = sample_augmentation(subseed(seed, 2 * attempt))
        aug_b = sample_augmentation(subseed(seed, 2 * attempt + 1))
        view_a, idx_a = apply_augmentation(cloud, aug_a, crop_fraction)
        view_b, idx_b = apply_augmentation(cloud, aug_b, crop_fraction)
        common = np.intersect1d(idx_a, idx_b)
        if len(common) >= MIN_PAIR_MATCHES:
            pos_a = {src: i for i, src in enumerate(idx_a)}
            pos_b = {src: i for i, src in enumerate(idx_b)}
            matches = np.array([[pos_a[s], pos_b[s]] for s in common], dtype=np.int64)
            return AugmentedPair(view_a, view_b, matches, aug_a, aug_b)
    raise GeometryError(
        f"make_augmented_pair: fewer than {MIN_PAIR_MATCHES} matches after "
        f"{PAIR_RESAMPLE_ATTEMPTS} attempts"
    )
