"""Stereo resolution of the deflectometric normal-depth ambiguity.

Any depth along a camera-1 ray is consistent with its screen
correspondence, each implying a different surface normal. Sweeping depth
hypotheses and scoring each by the disagreement between the normals the
two cameras imply selects the true surface point: only there do both
views bisect to the same normal.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFieldError, InvariantViolation
from .geometry import bisector_masked, half_vector_normal, unit
from .render import CorrespondenceMap
from .scene import CameraModel, SceneConfig

NORMAL_FIELD_HEADER = "px,py,X,Y,Z,nx,ny,nz,consistency"


@dataclass(frozen=True)
class DepthSweepParams:
    """Depth hypothesis sweep along the camera-1 ray, in mm."""

    t_min: float
    t_max: float
    n_steps: int = 256
    refine: bool = True

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise InvariantViolation("sweep: t_min < t_max")
        if self.n_steps < 16:
            raise InvariantViolation("sweep: n_steps >= 16")


@dataclass(frozen=True)
class NormalSample:
    """One reconstructed surface point with its deflectometric normal and
    the stereo disagreement (radians) at the chosen depth."""

    point: np.ndarray
    normal: np.ndarray
    pixel: tuple[int, int]
    consistency: float


@dataclass
class NormalField:
    """Dense reconstruction output, one row per camera-1 pixel, sorted by
    row-major pixel index."""

    pixels: np.ndarray        # (N, 2) int, (px, py)
    points: np.ndarray        # (N, 3) mm
    normals: np.ndarray       # (N, 3) unit
    consistency: np.ndarray   # (N,) radians
    camera_index: int = 0

    def __len__(self) -> int:
        return len(self.pixels)

    def samples(self):
        for i in range(len(self.pixels)):
            yield NormalSample(self.points[i], self.normals[i],
                               (int(self.pixels[i, 0]), int(self.pixels[i, 1])),
                               float(self.consistency[i]))

    def to_csv(self, path) -> None:
        data = np.column_stack([
            self.pixels.astype(float), self.points, self.normals,
            self.consistency,
        ])
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(NORMAL_FIELD_HEADER + "\n")
            np.savetxt(f, data, fmt="%.12g", delimiter=",")

    @classmethod
    def from_csv(cls, path, camera_index: int = 0) -> "NormalField":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != NORMAL_FIELD_HEADER:
                raise ValueError(f"unexpected NormalField header: {header!r}")
            data = np.loadtxt(io.StringIO(f.read()), delimiter=",", ndmin=2)
        if data.size == 0:
            data = data.reshape(0, 9)
        return cls(
            pixels=data[:, 0:2].astype(int),
            points=data[:, 2:5],
            normals=data[:, 5:8],
            consistency=data[:, 8],
            camera_index=camera_index,
        )


def candidate_normal(
    camera: CameraModel, pixel: tuple[int, int], t: float, screen_point: np.ndarray
) -> NormalSample:
    """Normal implied by one camera ray at depth hypothesis ``t``: the
    bisector of the directions back to the camera and to the screen point."""
    if t <= 0:
        raise ValueError("depth must be positive")
    ray = camera.pixel_ray(*pixel)
    p = ray.at(t)
    n = half_vector_normal(unit(camera.center - p), unit(screen_point - p))
    return NormalSample(point=p, normal=n, pixel=(int(pixel[0]), int(pixel[1])),
                        consistency=0.0)


def _bilinear_uv(corr, x, y):
    """Bilinear interpolation of (u, v) at sub-pixel camera positions.

    Any out-of-frame sample or invalid contributing corner yields ok=False
    (validity veto prevents hallucinating across mask boundaries).
    """
    h, w = corr.u.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(yc).astype(int), 0, h - 2)
    fx = xc - x0
    fy = yc - y0
    ok = inside & corr.valid[y0, x0] & corr.valid[y0, x0 + 1] \
        & corr.valid[y0 + 1, x0] & corr.valid[y0 + 1, x0 + 1]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    u = np.where(ok, corr.u[y0, x0] * w00 + corr.u[y0, x0 + 1] * w01
                 + corr.u[y0 + 1, x0] * w10 + corr.u[y0 + 1, x0 + 1] * w11,
                 np.nan)
    v = np.where(ok, corr.v[y0, x0] * w00 + corr.v[y0, x0 + 1] * w01
                 + corr.v[y0 + 1, x0] * w10 + corr.v[y0 + 1, x0 + 1] * w11,
                 np.nan)
    return u, v, ok


def _consistency_at(scene, cam1, cam2, dirs1, s1, corr2, t):
    """Stereo normal disagreement for a batch of camera-1 pixels at
    per-pixel depths ``t``. Returns (angle_rad, n1, ok)."""
    p = cam1.center + t[:, None] * dirs1
    n1, ok1 = bisector_masked(unit(cam1.center - p), unit(s1 - p))

    px2, py2, z2 = cam2.project(p)
    front = z2 > 1e-9
    u2, v2, ok2 = _bilinear_uv(corr2, px2, py2)
    s2 = scene.screen.uv_to_world(np.where(ok2, u2, 0.0),
                                  np.where(ok2, v2, 0.0))
    n2, ok3 = bisector_masked(unit(cam2.center - p), unit(s2 - p))

    ok = ok1 & front & ok2 & ok3
    dot = np.clip(np.sum(n1 * n2, axis=-1), -1.0, 1.0)
    ang = np.where(ok, np.arccos(dot), np.inf)
    return ang, n1, ok


def stereo_consistency(
    scene: SceneConfig,
    pixel1: tuple[int, int],
    t: float,
    corr1: CorrespondenceMap,
    corr2: CorrespondenceMap,
    cam1_index: int = 0,
    cam2_index: int = 1,
) -> float | None:
    """Normal disagreement (radians) between the two cameras for one depth
    hypothesis, or None when the hypothesis is unusable (projection outside
    camera 2, invalid interpolation corners, or a degenerate bisector)."""
    px, py = pixel1
    if not corr1.valid[py, px]:
        raise ValueError(f"pixel {pixel1} is invalid in corr1")
    cam1 = scene.cameras[cam1_index]
    cam2 = scene.cameras[cam2_index]
    ray = cam1.pixel_ray(px, py)
    s1 = scene.screen.uv_to_world(corr1.u[py, px], corr1.v[py, px])
    ang, _, ok = _consistency_at(scene, cam1, cam2, ray.dir[None, :],
                                 s1[None, :], corr2, np.array([float(t)]))
    return float(ang[0]) if ok[0] else None


def _sweep_pixels(scene, pixels, corr1, corr2, params, cam1_index, cam2_index,
                  min_usable=8):
    """Vectorized depth sweep over many camera-1 pixels at once."""
    cam1 = scene.cameras[cam1_index]
    cam2 = scene.cameras[cam2_index]
    n = len(pixels)
    cx, cy = cam1.principal_point
    d_cam = np.column_stack([
        (pixels[:, 0] - cx) / cam1.focal_length,
        (pixels[:, 1] - cy) / cam1.focal_length,
        np.ones(n),
    ])
    dirs1 = unit(d_cam) @ cam1.pose.rotation.T
    s1 = scene.screen.uv_to_world(corr1.u[pixels[:, 1], pixels[:, 0]],
                                  corr1.v[pixels[:, 1], pixels[:, 0]])

    ts = np.linspace(params.t_min, params.t_max, params.n_steps)
    cost = np.empty((params.n_steps, n))
    for i, t in enumerate(ts):
        ang, _, _ = _consistency_at(scene, cam1, cam2, dirs1, s1, corr2,
                                    np.full(n, t))
        cost[i] = ang
    usable = np.isfinite(cost)
    n_usable = usable.sum(axis=0)
    good = n_usable >= min_usable

    i_best = np.argmin(np.where(usable, cost, np.inf), axis=0)
    cols = np.arange(n)
    c_best = cost[i_best, cols]
    t_best = ts[i_best]
    good &= np.isfinite(c_best)

    if params.refine:
        interior = good & (i_best > 0) & (i_best < params.n_steps - 1)
        im = np.where(interior, i_best, 1)
        cm1 = cost[im - 1, cols]
        cp1 = cost[im + 1, cols]
        with np.errstate(invalid="ignore"):
            denom = cm1 - 2.0 * cost[im, cols] + cp1
            convex = interior & np.isfinite(cm1) & np.isfinite(cp1) \
                & (denom > 1e-18)
            step = ts[1] - ts[0]
            shift = np.where(convex,
                             0.5 * np.where(convex, cm1 - cp1, 0.0)
                             / np.where(convex, denom, 1.0), 0.0)
            shift = np.clip(shift, -1.0, 1.0)
        t_ref = t_best + shift * step
        ang_ref, _, ok_ref = _consistency_at(scene, cam1, cam2, dirs1, s1,
                                             corr2, t_ref)
        take = convex & ok_ref
        t_best = np.where(take, t_ref, t_best)
        c_best = np.where(take, ang_ref, c_best)

    p_best = cam1.center + t_best[:, None] * dirs1
    n_best, ok_n = bisector_masked(unit(cam1.center - p_best),
                                   unit(s1 - p_best))
    good &= ok_n
    return t_best, c_best, p_best, n_best, good


def solve_depth(
    scene: SceneConfig,
    pixel1: tuple[int, int],
    corr1: CorrespondenceMap,
    corr2: CorrespondenceMap,
    params: DepthSweepParams,
    cam1_index: int = 0,
    cam2_index: int = 1,
) -> NormalSample | None:
    """Depth-sweep minimization of stereo disagreement for one pixel.

    Returns None when fewer than 8 sweep hypotheses are usable. With
    ``params.refine`` the minimum is polished by a parabolic fit through the
    minimizer and its neighbors, re-evaluated at the vertex.
    """
    px, py = pixel1
    if not corr1.valid[py, px]:
        raise ValueError(f"pixel {pixel1} is invalid in corr1")
    pixels = np.array([[px, py]], dtype=int)
    t, c, p, nrm, good = _sweep_pixels(scene, pixels, corr1, corr2, params,
                                       cam1_index, cam2_index)
    if not good[0]:
        return None
    return NormalSample(point=p[0], normal=nrm[0], pixel=(int(px), int(py)),
                        consistency=float(c[0]))


def default_sweep(scene: SceneConfig, cam1_index: int = 0,
                  half_range: float = 8.0, n_steps: int = 256,
                  refine: bool = True) -> DepthSweepParams:
    """Sweep around the nominal surface depth: the camera-to-apex distance
    plus a small interior margin, plus/minus ``half_range`` mm."""
    eye = scene.eye
    d_center = float(np.linalg.norm(
        scene.cameras[cam1_index].center - eye.sclera_center
    ))
    t_nom = d_center - (eye.cornea_offset + eye.cornea_radius) + 2.5
    return DepthSweepParams(t_min=t_nom - half_range, t_max=t_nom + half_range,
                            n_steps=n_steps, refine=refine)


def reconstruct_field(
    scene: SceneConfig,
    corr1: CorrespondenceMap,
    corr2: CorrespondenceMap,
    params: DepthSweepParams | None = None,
    stride: int = 1,
    cam1_index: int = 0,
    cam2_index: int = 1,
    min_samples: int = 100,
    max_consistency: float | None = None,
) -> NormalField:
    """Solve depth at every valid camera-1 pixel (optionally strided).

    Pixels with no usable depth are dropped, as are pixels whose best
    stereo disagreement is an outlier (default: above 10x the field median,
    floored at 1e-3 rad); those are points the second camera cannot verify,
    whose sweep minimum is meaningless. Pass ``max_consistency=np.inf`` to
    keep everything. Output is sorted by row-major pixel index.

    Raises:
        EmptyFieldError: fewer than ``min_samples`` pixels survive.
    """
    if params is None:
        params = default_sweep(scene, cam1_index)
    ys, xs = np.nonzero(corr1.valid)
    keep = (ys % stride == 0) & (xs % stride == 0)
    pixels = np.column_stack([xs[keep], ys[keep]]).astype(int)
    if len(pixels) == 0:
        raise EmptyFieldError("no valid pixels in corr1")
    t, c, p, nrm, good = _sweep_pixels(scene, pixels, corr1, corr2, params,
                                       cam1_index, cam2_index)
    if good.any():
        if max_consistency is None:
            max_consistency = max(10.0 * float(np.median(c[good])), 1e-3)
        good &= c <= max_consistency
    if good.sum() < min_samples:
        raise EmptyFieldError(
            f"only {int(good.sum())} usable samples (need {min_samples})"
        )
    pixels = pixels[good]
    order = np.lexsort((pixels[:, 0], pixels[:, 1]))
    return NormalField(
        pixels=pixels[order],
        points=p[good][order],
        normals=nrm[good][order],
        consistency=c[good][order],
        camera_index=cam1_index,
    )
