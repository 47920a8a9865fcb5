"""Gaze from back-traced normals.

The reconstructed surface normals, extended backwards into the eye, meet
at the cornea and sclera sphere centers; the line through those two
points is the optical axis. A sequential RANSAC splits the mixed line
bundle into the two centers, the smaller-radius cluster is the cornea,
and the signed rotation of gaze estimates about the stage axis gives
relative gaze angles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AmbiguousRadiiError,
    CentersTooCloseError,
    DegenerateBundleError,
    InsufficientLinesError,
    InvariantViolation,
    SecondCenterNotFoundError,
)
from .geometry import (
    best_fit_axis,
    least_squares_point,
    point_line_distances,
    unit,
)
from .stereo import NormalField

GAZE_CSV_HEADER = ("method,gx,gy,gz,cornea_x,cornea_y,cornea_z,"
                   "sclera_x,sclera_y,sclera_z,n_cornea,n_sclera,"
                   "rms_cornea,rms_sclera")


@dataclass(frozen=True)
class ClusterParams:
    """Sequential-RANSAC settings for the two-center split."""

    ransac_iters: int = 500
    inlier_tol: float = 0.3   # mm; matches bundle spread at sigma_c ~ 0.5 px
    min_inliers: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if self.inlier_tol <= 0:
            raise InvariantViolation("cluster: inlier_tol > 0")
        if self.ransac_iters < 10:
            raise InvariantViolation("cluster: ransac_iters >= 10")


@dataclass(frozen=True)
class GazeEstimate:
    """Estimated optical axis with its supporting centers and diagnostics."""

    direction: np.ndarray
    cornea_center: np.ndarray
    sclera_center: np.ndarray
    n_cornea_inliers: int
    n_sclera_inliers: int
    rms_cornea: float
    rms_sclera: float
    method_tag: str

    def csv_row(self) -> str:
        parts = [self.method_tag]
        for v in (self.direction, self.cornea_center, self.sclera_center):
            parts.extend(f"{x:.12g}" for x in v)
        parts.extend([str(self.n_cornea_inliers), str(self.n_sclera_inliers),
                      f"{self.rms_cornea:.12g}", f"{self.rms_sclera:.12g}"])
        return ",".join(parts)

    def pretty(self) -> str:
        g = self.direction
        return "\n".join([
            f"method:        {self.method_tag}",
            f"gaze direction: ({g[0]:+.6f}, {g[1]:+.6f}, {g[2]:+.6f})",
            f"cornea center:  ({self.cornea_center[0]:.4f}, "
            f"{self.cornea_center[1]:.4f}, {self.cornea_center[2]:.4f}) mm"
            f"  [{self.n_cornea_inliers} lines, rms {self.rms_cornea:.4f} mm]",
            f"sclera center:  ({self.sclera_center[0]:.4f}, "
            f"{self.sclera_center[1]:.4f}, {self.sclera_center[2]:.4f}) mm"
            f"  [{self.n_sclera_inliers} lines, rms {self.rms_sclera:.4f} mm]",
        ])


def backtrace_lines(field: NormalField) -> tuple[np.ndarray, np.ndarray]:
    """One undirected 3D line per sample: surface point along its normal."""
    if len(field) == 0:
        raise InsufficientLinesError("empty normal field")
    return field.points.copy(), field.normals.copy()


def _ransac_center(points, dirs, params, rng):
    """Best line-bundle intersection by 3-line RANSAC, then refined over its
    inliers. Returns (center, inlier_mask) or (None, None).

    The minimal solves and inlier counts run batched: all 3-line normal
    systems are solved at once and candidate-to-line distances are
    evaluated blockwise.
    """
    n = len(points)
    iters = params.ransac_iters
    idx = np.array([rng.choice(n, size=3, replace=False) for _ in range(iters)])
    d3 = dirs[idx]                                   # (iters, 3, 3)
    p3 = points[idx]
    m = 3.0 * np.eye(3) - np.einsum("kij,kil->kjl", d3, d3)
    rhs = p3.sum(axis=1) - np.einsum("kij,ki->kj", d3,
                                     np.einsum("kij,kij->ki", d3, p3))
    det = np.linalg.det(m)
    solvable = np.abs(det) > 1e-9
    centers = np.full((iters, 3), np.nan)
    if solvable.any():
        centers[solvable] = np.linalg.solve(
            m[solvable], rhs[solvable][..., None]
        )[..., 0]

    best_count = 0
    best_center = None
    block = 64
    tol = params.inlier_tol
    for lo in range(0, iters, block):
        c = centers[lo:lo + block]
        ok = np.isfinite(c[:, 0])
        if not ok.any():
            continue
        v = c[:, None, :] - points[None, :, :]       # (b, n, 3)
        proj = np.einsum("bnj,nj->bn", v, dirs)
        perp = v - proj[..., None] * dirs[None]
        d2 = np.einsum("bnj,bnj->bn", perp, perp)
        counts = (d2 < tol * tol).sum(axis=1)
        counts[~ok] = 0
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_center = c[k]
    if best_center is None or best_count < 3:
        return None, None
    inliers = point_line_distances(best_center, points, dirs) < tol
    center, _ = least_squares_point(points[inliers], dirs[inliers])
    inliers = point_line_distances(center, points, dirs) < tol
    return center, inliers


def two_center_cluster(
    points: np.ndarray, dirs: np.ndarray, params: ClusterParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[float, float]]:
    """Split a line bundle into two intersection centers.

    Sequential RANSAC: find the strongest center, remove its inliers, find
    the second, then polish by reassigning every line to its nearer center
    and re-solving both. Returns (center_a, center_b, labels, rms) where
    labels[i] in {0, 1} assigns line i to center a or b.

    Raises:
        InsufficientLinesError: fewer than 2 * min_inliers lines.
        SecondCenterNotFoundError: too few lines support a second center.
    """
    points = np.asarray(points, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = len(points)
    if n < 2 * params.min_inliers:
        raise InsufficientLinesError(
            f"{n} lines < 2 * min_inliers = {2 * params.min_inliers}"
        )
    rng = np.random.default_rng(params.rng_seed)

    c_a, in_a = _ransac_center(points, dirs, params, rng)
    if c_a is None or in_a.sum() < params.min_inliers:
        raise SecondCenterNotFoundError("no dominant center found")

    rest = ~in_a
    if rest.sum() < params.min_inliers:
        raise SecondCenterNotFoundError(
            f"only {int(rest.sum())} lines remain after the first center"
        )
    c_b, in_b_rest = _ransac_center(points[rest], dirs[rest], params, rng)
    if c_b is None or in_b_rest.sum() < params.min_inliers:
        raise SecondCenterNotFoundError(
            "second center has too few inliers"
        )

    # final polish: nearest-center reassignment, re-solve both
    d_a = point_line_distances(c_a, points, dirs)
    d_b = point_line_distances(c_b, points, dirs)
    labels = (d_b < d_a).astype(int)
    if (labels == 0).sum() < 2 or (labels == 1).sum() < 2:
        raise SecondCenterNotFoundError("degenerate reassignment")
    c_a, rms_a = least_squares_point(points[labels == 0], dirs[labels == 0])
    c_b, rms_b = least_squares_point(points[labels == 1], dirs[labels == 1])
    return c_a, c_b, labels, (rms_a, rms_b)


def identify_cornea(
    c_a: np.ndarray,
    c_b: np.ndarray,
    points: np.ndarray,
    labels: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Tell cornea from sclera by estimated sphere radius.

    The mean distance from each cluster's surface points to its center
    estimates that sphere's radius; the smaller one is the cornea. Returns
    (cornea_center, sclera_center, cornea_label).

    Raises:
        AmbiguousRadiiError: estimated radii differ by less than 10%.
    """
    r_a = float(np.mean(np.linalg.norm(points[labels == 0] - c_a, axis=1)))
    r_b = float(np.mean(np.linalg.norm(points[labels == 1] - c_b, axis=1)))
    if abs(r_a - r_b) < 0.10 * max(r_a, r_b):
        raise AmbiguousRadiiError(
            f"cluster radii {r_a:.2f} and {r_b:.2f} mm differ by < 10%"
        )
    if r_a < r_b:
        return c_a, c_b, 0
    return c_b, c_a, 1


def gaze_from_centers(
    cornea_center: np.ndarray, sclera_center: np.ndarray
) -> np.ndarray:
    """Unit gaze direction out of the eye: cornea center minus sclera
    center, normalized.

    Raises:
        CentersTooCloseError: centers closer than 0.5 mm.
    """
    d = np.asarray(cornea_center, float) - np.asarray(sclera_center, float)
    if np.linalg.norm(d) < 0.5:
        raise CentersTooCloseError(
            f"centers {np.linalg.norm(d):.3f} mm apart (< 0.5 mm)"
        )
    return unit(d)


def gaze_axis_fit(points: np.ndarray, dirs: np.ndarray) -> GazeEstimate:
    """Axis-fit gaze for rotationally symmetric bundles.

    Delegates to the total-least-squares axis of the bundle; the sign is
    chosen to point from the fitted line's centroid toward the mean surface
    point (outward). Degenerate bundles (single sphere) propagate
    DegenerateBundleError.
    """
    axis = best_fit_axis(points, dirs)
    g = axis.dir
    outward = np.asarray(points, float).mean(axis=0) - axis.point
    if g @ outward < 0:
        g = -g
    return GazeEstimate(
        direction=g,
        cornea_center=axis.point.copy(),
        sclera_center=axis.point.copy(),
        n_cornea_inliers=0,
        n_sclera_inliers=0,
        rms_cornea=0.0,
        rms_sclera=0.0,
        method_tag="axis-fit",
    )


def relative_gaze_angle(
    g_a: np.ndarray, g_ref: np.ndarray, rotation_axis: np.ndarray
) -> float:
    """Signed angle (degrees) from ``g_ref`` to ``g_a`` about the rotation
    axis: the angle between their projections onto the plane normal to the
    axis, signed by the axis direction."""
    g_a = np.asarray(g_a, float)
    g_ref = np.asarray(g_ref, float)
    ax = np.asarray(rotation_axis, float)
    s = np.cross(g_ref, g_a) @ ax
    c = g_ref @ g_a - (g_ref @ ax) * (g_a @ ax)
    return float(np.degrees(np.arctan2(s, c)))


def estimate_gaze_two_center(
    field: NormalField,
    params: ClusterParams | None = None,
    fallback_axis: bool = False,
) -> GazeEstimate:
    """Full method-1 gaze stage: back-trace, cluster, identify, connect.

    With ``fallback_axis`` a failed two-center split falls back to the
    axis fit instead of raising.
    """
    params = params or ClusterParams()
    points, dirs = backtrace_lines(field)
    try:
        c_a, c_b, labels, rms = two_center_cluster(points, dirs, params)
    except (InsufficientLinesError, SecondCenterNotFoundError):
        if fallback_axis:
            return gaze_axis_fit(points, dirs)
        raise
    cornea, sclera, cl = identify_cornea(c_a, c_b, points, labels)
    direction = gaze_from_centers(cornea, sclera)
    n0 = int((labels == 0).sum())
    n1 = int((labels == 1).sum())
    return GazeEstimate(
        direction=direction,
        cornea_center=cornea,
        sclera_center=sclera,
        n_cornea_inliers=n0 if cl == 0 else n1,
        n_sclera_inliers=n1 if cl == 0 else n0,
        rms_cornea=rms[cl],
        rms_sclera=rms[1 - cl],
        method_tag="two-center",
    )
