"""Point cloud statistics: crop filtering, MST clustering measure, and
windowed 8-dimensional feature vectors.

A scan is reduced to four per-scan statistics (point count, mean intensity,
mean radial distance, normalized MST length); a window of scans is reduced
to the mean and population standard deviation of each, giving the feature
vector

    [count_mean, count_std, intensity_mean, intensity_std,
     radial_mean, radial_std, mst_mean, mst_std].

The normalized MST length is the total MST edge length divided by the mean
MST length of the same number of uniformly distributed points in the same
crop box: about 1 for uniform scatter, below 1 for clustered points, above 1
for points spread out more evenly than uniform (e.g. regular returns pushed
towards the box boundary).
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

FEATURE_NAMES = (
    "count_mean",
    "count_std",
    "intensity_mean",
    "intensity_std",
    "radial_mean",
    "radial_std",
    "mst_mean",
    "mst_std",
)

# Seed stream tag for the uniform MST reference draws.
_REFERENCE_STREAM = 0x4D5354
DEFAULT_REFERENCE_REPS = 16

_reference_cache: dict[tuple[int, int, int], float] = {}


@dataclass(frozen=True)
class Scan:
    """One lidar revolution reduced to noise points.

    ``xyz`` is (n, 3) in meters relative to the sensor origin; ``intensity``
    is (n,) non-negative. Scans may be empty.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    timestamp: float = 0.0
    frame_id: int = 0

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
        if xyz.shape[0] != intensity.shape[0]:
            raise InvalidInputError("xyz and intensity lengths differ")
        if xyz.size and not np.all(np.isfinite(xyz)):
            raise InvalidInputError("point coordinates must be finite")
        if intensity.size and (np.any(intensity < 0) or not np.all(np.isfinite(intensity))):
            raise InvalidInputError("intensities must be finite and non-negative")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)

    @property
    def n_points(self) -> int:
        return self.xyz.shape[0]


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned cube centered on the sensor; ``half_extent`` per axis."""

    half_extent: float

    def __post_init__(self):
        if not (np.isfinite(self.half_extent) and self.half_extent > 0):
            raise InvalidInputError("crop box half extent must be positive")


@dataclass(frozen=True)
class ScanFeatures:
    """Per-scan statistics; None marks a feature undefined for the scan."""

    n_points: int
    mean_intensity: float | None
    mean_radial: float | None
    norm_mst: float | None


@dataclass(frozen=True)
class WindowSample:
    """One training sample: 8 window statistics and the mean rainfall target."""

    features: np.ndarray
    target: float
    window: tuple[float, float]
    provenance: str = ""

    def __post_init__(self):
        vec = np.asarray(self.features, dtype=float).reshape(-1)
        if vec.size != len(FEATURE_NAMES):
            raise InvalidInputError(f"feature vector must have length {len(FEATURE_NAMES)}")
        if not np.all(np.isfinite(vec)):
            raise InvalidInputError("feature vector must be finite")
        if np.any(vec[1::2] < 0):
            raise InvalidInputError("standard deviation features must be non-negative")
        if not self.target >= 0:
            raise InvalidInputError("target rainfall rate must be non-negative")
        start, end = self.window
        if not start < end:
            raise InvalidInputError("window start must precede end")
        object.__setattr__(self, "features", vec)
        object.__setattr__(self, "window", (float(start), float(end)))


def crop(scan: Scan, box: CropBox) -> Scan:
    """Keep points with |x|, |y|, |z| <= half_extent; order preserved."""
    if scan.n_points == 0:
        return scan
    keep = np.all(np.abs(scan.xyz) <= box.half_extent, axis=1)
    return Scan(scan.xyz[keep], scan.intensity[keep], scan.timestamp, scan.frame_id)


def mst_length(points) -> float:
    """Total Euclidean edge length of a minimum spanning tree.

    Prim's algorithm over the dense pairwise distances, O(n^2) time and O(n)
    memory. Edge weights are accumulated in sorted order, so the value is
    invariant under point permutations down to the last bit.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InvalidInputError("MST needs at least 2 points")
    n = pts.shape[0]
    # Squared pairwise distances; sqrt is monotone, so selecting edges on
    # squares is equivalent and the root is taken only for chosen edges.
    # Larger point sets use the BLAS Gram identity, which differs from the
    # subtraction form only in the last float bits.
    if n >= 64:
        sq_norms = (pts**2).sum(axis=1)
        dist_sq = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (pts @ pts.T)
        np.clip(dist_sq, 0.0, None, out=dist_sq)
    else:
        diff = pts[:, None, :] - pts[None, :, :]
        dist_sq = (diff**2).sum(axis=-1)
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    best_sq = dist_sq[0].copy()
    best_sq[0] = np.inf
    edges_sq = np.empty(n - 1)
    for i in range(n - 1):
        j = int(np.argmin(best_sq))
        edges_sq[i] = best_sq[j]
        visited[j] = True
        best_sq = np.minimum(best_sq, dist_sq[j])
        best_sq[visited] = np.inf
    return float(np.sort(np.sqrt(edges_sq)).sum())


def uniform_mst_reference(
    n: int,
    box: CropBox,
    seed: int = 0,
    reps: int = DEFAULT_REFERENCE_REPS,
) -> float:
    """Mean MST length of ``n`` uniform points in the box (Monte-Carlo).

    MST length scales linearly with the box side, so the unit-cube value is
    computed once per (n, reps, seed) from a fixed seed stream, cached, and
    rescaled. Repeated calls are deterministic regardless of call order.
    """
    n = int(n)
    if n < 2:
        raise InvalidInputError("reference needs at least 2 points")
    if reps < 1:
        raise InvalidInputError("reps must be positive")
    key = (n, int(reps), int(seed))
    unit = _reference_cache.get(key)
    if unit is None:
        rng = np.random.default_rng([_REFERENCE_STREAM, int(seed), n, int(reps)])
        unit = float(np.mean([mst_length(rng.random((n, 3))) for _ in range(reps)]))
        _reference_cache[key] = unit
    return unit * 2.0 * box.half_extent


def normalized_mst(
    points,
    box: CropBox,
    seed: int = 0,
    reps: int = DEFAULT_REFERENCE_REPS,
) -> float:
    """MST length divided by the uniform reference for the same point count."""
    pts = np.asarray(points, dtype=float)
    return mst_length(pts) / uniform_mst_reference(pts.shape[0], box, seed=seed, reps=reps)


def scan_features(scan: Scan, box: CropBox) -> ScanFeatures:
    """Crop, then compute count, mean intensity, mean radial distance, MST ratio.

    Features that need points are None on empty scans; the MST ratio needs
    at least two points.
    """
    cropped = crop(scan, box)
    n = cropped.n_points
    if n == 0:
        return ScanFeatures(0, None, None, None)
    mean_intensity = float(cropped.intensity.mean())
    mean_radial = float(np.linalg.norm(cropped.xyz, axis=1).mean())
    norm = normalized_mst(cropped.xyz, box) if n >= 2 else None
    return ScanFeatures(n, mean_intensity, mean_radial, norm)


def window_features(scans, box: CropBox) -> np.ndarray:
    """Mean and population std of each per-scan feature across a window.

    Scans where a feature is undefined are excluded from that feature's
    statistics; if a feature is undefined in every scan its mean and std are
    substituted with 0 and a warning is emitted.
    """
    per_scan = [scan_features(s, box) for s in scans]
    if len(per_scan) < 2:
        raise InvalidInputError("window statistics need at least 2 scans")
    columns = (
        ("count", [float(f.n_points) for f in per_scan]),
        ("intensity", [f.mean_intensity for f in per_scan]),
        ("radial", [f.mean_radial for f in per_scan]),
        ("mst", [f.norm_mst for f in per_scan]),
    )
    out = np.empty(8)
    for c, (name, values) in enumerate(columns):
        present = np.array([v for v in values if v is not None], dtype=float)
        if present.size == 0:
            _warnings.warn(
                f"feature {name!r} undefined in all {len(per_scan)} scans of a window; "
                "substituting 0",
                stacklevel=2,
            )
            mean = std = 0.0
        else:
            mean = float(present.mean())
            std = float(present.std())
        out[2 * c] = mean
        out[2 * c + 1] = std
    return out


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension standardization statistics (z-score transform)."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        scale = np.asarray(self.scale, dtype=float).reshape(-1)
        if mean.shape != scale.shape:
            raise InvalidInputError("mean and scale lengths differ")
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise InvalidInputError("scale entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)


def standardize_fit(samples) -> FeatureStats:
    """Fit per-dimension z-score statistics; zero-variance dimensions get scale 1."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidInputError("standardization needs at least 2 samples")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    flat = scale <= 0
    if np.any(flat):
        names = [FEATURE_NAMES[i] if i < len(FEATURE_NAMES) else str(i) for i in np.flatnonzero(flat)]
        _warnings.warn(f"zero-variance dimensions {names}; scale set to 1", stacklevel=2)
        scale = np.where(flat, 1.0, scale)
    return FeatureStats(mean=mean, scale=scale)


def standardize_apply(stats: FeatureStats, values) -> np.ndarray:
    """Apply the z-score transform to a vector or sample matrix."""
    return (np.asarray(values, dtype=float) - stats.mean) / stats.scale


def standardize_invert(stats: FeatureStats, values) -> np.ndarray:
    """Invert :func:`standardize_apply`."""
    return np.asarray(values, dtype=float) * stats.scale + stats.mean
