"""Forward deflectometry simulator.

Traces every camera pixel through the specular eye reflection onto the
screen plane, yielding ground-truth screen-camera correspondences and
pattern intensity frames. Intensities are pure pattern samples: no ray
differentials, blur, or Fresnel falloff, since both estimation methods
consume correspondences rather than radiometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation
from .geometry import reflect
from .scene import SceneConfig, eye_surface_hit_batch

BACKGROUND_INTENSITY = 0.02  # near-dark surround, as in real captures


@dataclass(frozen=True)
class CrossedFringe:
    """Two superposed orthogonal cosines encoding both screen axes at once:
    ``bias + amp_x cos(2 pi u / period_x) + amp_y cos(2 pi v / period_y)``."""

    period_x: float
    period_y: float
    amp_x: float = 0.25
    amp_y: float = 0.25
    bias: float = 0.5

    def __post_init__(self):
        if min(self.period_x, self.period_y) < 4:
            raise InvariantViolation("pattern: periods >= 4 px")
        if not (0 <= self.amp_x <= 0.25 and 0 <= self.amp_y <= 0.25):
            raise InvariantViolation("pattern: amplitudes in [0, 0.25]")
        if self.bias + self.amp_x + self.amp_y > 1.0 or self.bias < 0:
            raise InvariantViolation("pattern: bias + amp_x + amp_y <= 1")


@dataclass(frozen=True)
class PhaseShiftSet:
    """N-step phase-shifted sinusoid along one screen axis."""

    period: float
    n_shifts: int = 4
    direction: str = "x"

    def __post_init__(self):
        if self.period < 4:
            raise InvariantViolation("pattern: periods >= 4 px")
        if self.n_shifts < 3:
            raise InvariantViolation("pattern: n_shifts >= 3")
        if self.direction not in ("x", "y"):
            raise InvariantViolation("pattern: direction must be 'x' or 'y'")


@dataclass(frozen=True)
class ImagePattern:
    """Arbitrary screen content (e.g. an ordinary video frame), bilinearly
    sampled. ``image[v, u]`` with intensities in [0, 1]."""

    image: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim != 2:
            raise InvariantViolation("pattern: image must be 2D")
        if img.min() < 0.0 or img.max() > 1.0:
            raise InvariantViolation("pattern: image values in [0, 1]")
        object.__setattr__(self, "image", img)


PatternSpec = CrossedFringe | PhaseShiftSet | ImagePattern


def pattern_value(pattern: PatternSpec, u, v, shift_index: int = 0):
    """Screen intensity at (sub)pixel position (u, v). Vectorized."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(pattern, CrossedFringe):
        return (pattern.bias
                + pattern.amp_x * np.cos(2.0 * np.pi * u / pattern.period_x)
                + pattern.amp_y * np.cos(2.0 * np.pi * v / pattern.period_y))
    if isinstance(pattern, PhaseShiftSet):
        if not 0 <= shift_index < pattern.n_shifts:
            raise ValueError("shift_index out of range")
        coord = u if pattern.direction == "x" else v
        phase = (2.0 * np.pi * coord / pattern.period
                 + 2.0 * np.pi * shift_index / pattern.n_shifts)
        return 0.5 + 0.4 * np.cos(phase)
    if isinstance(pattern, ImagePattern):
        img = pattern.image
        h, w = img.shape
        # screen coordinates live in [0, W) x [0, H); the last fractional
        # pixel clamps to the edge sample
        if np.any(u < 0) or np.any(u >= w) or np.any(v < 0) or np.any(v >= h):
            raise ValueError("pattern coordinates outside the image")
        x0 = np.minimum(np.floor(u).astype(int), w - 1)
        y0 = np.minimum(np.floor(v).astype(int), h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = u - x0
        fy = v - y0
        return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
                + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    raise TypeError(f"unknown pattern type {type(pattern)!r}")


@dataclass
class CorrespondenceMap:
    """Per-camera-pixel screen coordinates (u, v) plus a validity mask.

    Invalid pixels carry NaN; valid pixels satisfy 0 <= u < W_s,
    0 <= v < H_s.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def copy(self) -> "CorrespondenceMap":
        return CorrespondenceMap(self.u.copy(), self.v.copy(), self.valid.copy())


@dataclass
class Frame:
    """Intensity image in [0, 1]."""

    intensity: np.ndarray

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]


def render_correspondence(
    scene: SceneConfig, cam_index: int, surface=None, stride: int = 1
) -> CorrespondenceMap:
    """Trace each camera pixel to its screen correspondence.

    For every pixel: camera ray, eye hit, specular reflection, intersection
    of the reflected ray with the screen plane, conversion to screen pixels.
    A pixel is invalid iff the ray misses the eye, the reflected ray is
    parallel to or points away from the screen plane, or the screen point
    falls outside the panel.

    ``surface`` optionally replaces the eye-surface hit function (signature
    ``surface(origin, dirs) -> (points, normals, region, hit)``); used by
    tests with analytic reference surfaces.
    """
    cam = scene.cameras[cam_index]
    origin, dirs = cam.pixel_rays()
    if stride > 1:
        dirs = dirs[::stride, ::stride]
    if surface is None:
        points, normals, _, hit = eye_surface_hit_batch(scene.eye, origin, dirs)
    else:
        points, normals, _, hit = surface(origin, dirs)

    shape = dirs.shape[:-1]
    u = np.full(shape, np.nan)
    v = np.full(shape, np.nan)
    valid = np.zeros(shape, dtype=bool)
    if np.any(hit):
        d_h = dirs[hit]
        p_h = points[hit]
        r = reflect(d_h, normals[hit])
        p0 = scene.screen.plane_point
        nrm = scene.screen.plane_normal
        denom = r @ nrm
        safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
        t = ((p0 - p_h) @ nrm) / safe
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9)

        q = p_h + t[:, None] * r
        uu, vv = scene.screen.world_to_uv(q)
        w_s, h_s = scene.screen.resolution
        ok &= (uu >= 0) & (uu < w_s) & (vv >= 0) & (vv < h_s)
        u[hit] = np.where(ok, uu, np.nan)
        v[hit] = np.where(ok, vv, np.nan)
        valid[hit] = ok
    return CorrespondenceMap(u=u, v=v, valid=valid)


def render_margins(scene: SceneConfig, cam_index: int, stride: int = 1) -> dict:
    """Continuous per-pixel margins of the current eye configuration.

    Unlike the binary validity mask these vary smoothly with the eye
    parameters, which the inverse-rendering loss needs for smooth boundary
    weights:

    - ``silhouette``: mm of clearance between the ray and the eye outline
      (positive inside), the largest over both spheres of radius minus
      perpendicular ray distance to the center.
    - ``aperture``: degrees between the hit direction at the cornea center
      and the cap boundary (signed; NaN at misses). Zero on the
      cornea/sclera seam.
    - ``cap_edge``: mm of clearance between the ray and the corneal cap
      edge circle. Rays grazing that circle jump between the cap flank and
      the sclera it occludes, so the correspondence is discontinuous there.
    """
    cam = scene.cameras[cam_index]
    origin, dirs = cam.pixel_rays()
    if stride > 1:
        dirs = dirs[::stride, ::stride]
    eye = scene.eye
    flat = dirs.reshape(-1, 3)

    def perp_margin(center, radius):
        oc = origin - center
        proj = flat @ oc
        d2 = oc @ oc - proj * proj
        return radius - np.sqrt(np.maximum(d2, 0.0))

    sil = np.maximum(perp_margin(eye.cornea_center, eye.cornea_radius),
                     perp_margin(eye.sclera_center, eye.sclera_radius))

    points, _, _, hit = eye_surface_hit_batch(eye, origin, dirs)
    rel = points.reshape(-1, 3) - eye.cornea_center
    with np.errstate(invalid="ignore"):
        norm = np.linalg.norm(rel, axis=1)
        cosang = np.where(norm > 0, (rel @ eye.optical_axis)
                          / np.maximum(norm, 1e-12), np.nan)
        ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    aper = ang - eye.cornea_aperture

    # clearance to the cap-edge circle (evaluated at the ray's closest
    # approach to the circle center; exact at zero crossing, smooth in the
    # eye parameters)
    ap_rad = np.radians(eye.cornea_aperture)
    circle_center = eye.cornea_center \
        + eye.cornea_radius * np.cos(ap_rad) * eye.optical_axis
    circle_radius = eye.cornea_radius * np.sin(ap_rad)
    to_c = circle_center - origin
    t_star = flat @ to_c
    p_star = origin + t_star[:, None] * flat
    v = p_star - circle_center
    h = v @ eye.optical_axis
    rho = np.linalg.norm(v - h[:, None] * eye.optical_axis, axis=1)
    cap_edge = np.hypot(rho - circle_radius, h)

    shape = dirs.shape[:-1]
    return {"silhouette": sil.reshape(shape),
            "aperture": aper.reshape(shape),
            "cap_edge": cap_edge.reshape(shape)}


def render_frame(
    scene: SceneConfig,
    cam_index: int,
    pattern: PatternSpec,
    shift_index: int = 0,
    sigma_i: float = 0.0,
    seed: int = 0,
    correspondence: CorrespondenceMap | None = None,
) -> Frame:
    """Render the camera image of the reflected screen pattern.

    Valid pixels sample the pattern at their correspondence; invalid pixels
    get the dark background. Additive Gaussian intensity noise (std
    ``sigma_i``) is clamped to [0, 1] and deterministic per seed. Passing a
    precomputed ``correspondence`` skips the ray trace.
    """
    corr = correspondence
    if corr is None:
        corr = render_correspondence(scene, cam_index)
    img = np.full(corr.u.shape, BACKGROUND_INTENSITY)
    m = corr.valid
    img[m] = pattern_value(pattern, corr.u[m], corr.v[m], shift_index)
    if sigma_i > 0.0:
        rng = np.random.default_rng(seed)
        img = np.clip(img + rng.normal(0.0, sigma_i, img.shape), 0.0, 1.0)
    return Frame(intensity=img)


def add_correspondence_noise(
    corr: CorrespondenceMap,
    sigma_c: float,
    seed: int = 0,
    screen_resolution: tuple[int, int] | None = None,
) -> CorrespondenceMap:
    """Add i.i.d. Gaussian noise (std ``sigma_c`` screen px) to the valid
    correspondences; validity is unchanged and the result is deterministic
    per seed. When ``screen_resolution`` is given, noisy coordinates are
    clipped to the panel so the map invariants keep holding at the edges."""
    if sigma_c < 0:
        raise ValueError("sigma_c must be >= 0")
    if sigma_c == 0.0:
        return corr.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma_c, size=(2,) + corr.u.shape)
    out = corr.copy()
    m = corr.valid
    out.u[m] = corr.u[m] + noise[0][m]
    out.v[m] = corr.v[m] + noise[1][m]
    if screen_resolution is not None:
        w_s, h_s = screen_resolution
        out.u[m] = np.clip(out.u[m], 0.0, np.nextafter(float(w_s), 0.0))
        out.v[m] = np.clip(out.v[m], 0.0, np.nextafter(float(h_s), 0.0))
    return out
