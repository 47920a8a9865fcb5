"""Calibrated measurement scene: two-sphere eye, pinhole cameras, screen.

The scene is the forward model both estimation methods share. Geometry is
read from config files (JSON), never estimated. World frame: +y up, the
default eye looks along +z, cameras and screen sit on the +z side.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .errors import InvariantViolation, SceneParseError
from .geometry import Ray, RigidPose, ray_sphere_roots, rotation_about_axis, unit

WORLD_UP = np.array([0.0, 1.0, 0.0])

CORNEA = 0
SCLERA = 1
REGION_NAMES = {CORNEA: "cornea", SCLERA: "sclera"}


@dataclass(frozen=True)
class EyeModel:
    """Two-sphere specular eye: a scleral sphere whose front cap is replaced
    by a protruding corneal cap of smaller radius.

    ``cornea_offset`` is the distance from the sclera center to the cornea
    sphere center along the optical axis; ``cornea_aperture`` is the
    half-angle (degrees) of the corneal cap measured at the cornea center
    about the optical axis.
    """

    sclera_center: np.ndarray
    optical_axis: np.ndarray
    sclera_radius: float
    cornea_radius: float
    cornea_offset: float
    cornea_aperture: float

    def __post_init__(self):
        object.__setattr__(
            self, "sclera_center", np.asarray(self.sclera_center, dtype=float)
        )
        object.__setattr__(
            self, "optical_axis", np.asarray(self.optical_axis, dtype=float)
        )
        self.validate()

    def validate(self):
        if not np.all(np.isfinite(self.sclera_center)):
            raise InvariantViolation("eye: sclera_center must be finite")
        geometry.check_unit(self.optical_axis, "eye: optical_axis")
        if self.sclera_radius <= 0 or self.cornea_radius <= 0:
            raise InvariantViolation("eye: radii must be positive")
        if not self.cornea_radius < self.sclera_radius:
            raise InvariantViolation("eye: cornea_radius < sclera_radius")
        if not self.cornea_offset > 0:
            raise InvariantViolation("eye: cornea_offset > 0")
        if not self.cornea_offset + self.cornea_radius > self.sclera_radius:
            raise InvariantViolation(
                "eye: cornea_offset + cornea_radius > sclera_radius"
            )
        if not 0.0 < self.cornea_aperture < 90.0:
            raise InvariantViolation("eye: 0 < cornea_aperture < 90")

    @property
    def cornea_center(self) -> np.ndarray:
        return self.sclera_center + self.cornea_offset * self.optical_axis


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``pose`` maps camera to world; camera looks along its
    local +z with pixel x right and pixel y down."""

    pose: RigidPose
    focal_length: float
    principal_point: tuple[float, float]
    resolution: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(
            self, "principal_point", tuple(float(c) for c in self.principal_point)
        )
        object.__setattr__(
            self, "resolution", tuple(int(r) for r in self.resolution)
        )
        if self.focal_length <= 0:
            raise InvariantViolation("camera: focal_length > 0")
        if self.resolution[0] < 16 or self.resolution[1] < 16:
            raise InvariantViolation("camera: resolution >= 16x16")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space unit ray directions through all pixel centers.

        Returns (origin (3,), dirs (H, W, 3)), rows indexed by pixel y.
        The grid is cached on the instance (pose and intrinsics are frozen).
        """
        cached = getattr(self, "_ray_cache", None)
        if cached is not None:
            return cached
        w, h = self.resolution
        cx, cy = self.principal_point
        ix, iy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        d = np.stack(
            [(ix - cx) / self.focal_length, (iy - cy) / self.focal_length,
             np.ones_like(ix)],
            axis=-1,
        )
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        out = (self.pose.translation, d @ self.pose.rotation.T)
        object.__setattr__(self, "_ray_cache", out)
        return out

    def pixel_ray(self, px: float, py: float) -> Ray:
        cx, cy = self.principal_point
        d = np.array([(px - cx) / self.focal_length,
                      (py - cy) / self.focal_length, 1.0])
        return Ray(self.center, unit(self.pose.rotation @ d))

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project world points; returns (px, py, z_cam). Points with
        z_cam <= 0 are behind the camera."""
        pc = self.pose.inverse_points(pts)
        z = pc[..., 2]
        safe = np.where(np.abs(z) > 1e-12, z, 1.0)
        px = self.focal_length * pc[..., 0] / safe + self.principal_point[0]
        py = self.focal_length * pc[..., 1] / safe + self.principal_point[1]
        return px, py, z


@dataclass(frozen=True)
class ScreenModel:
    """Planar screen. Local frame: pixels in x/y, plane z = 0; local origin
    at the center of screen pixel (0, 0)."""

    pose: RigidPose
    resolution: tuple[int, int]
    pixel_pitch: float

    def __post_init__(self):
        object.__setattr__(
            self, "resolution", tuple(int(r) for r in self.resolution)
        )
        if self.pixel_pitch <= 0:
            raise InvariantViolation("screen: pixel_pitch > 0")

    @property
    def plane_point(self) -> np.ndarray:
        return self.pose.translation

    @property
    def plane_normal(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    def uv_to_world(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        local = np.stack(
            [np.asarray(u, dtype=float) * self.pixel_pitch,
             np.asarray(v, dtype=float) * self.pixel_pitch,
             np.zeros_like(np.asarray(u, dtype=float))],
            axis=-1,
        )
        return self.pose.transform_points(local)

    def world_to_uv(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        local = self.pose.inverse_points(pts)
        return local[..., 0] / self.pixel_pitch, local[..., 1] / self.pixel_pitch


@dataclass(frozen=True)
class SceneConfig:
    """Complete calibrated scene. Immutable after load; safe to share."""

    screen: ScreenModel
    cameras: tuple[CameraModel, ...]
    eye: EyeModel

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not 1 <= len(self.cameras) <= 2:
            raise InvariantViolation("scene: 1 <= number of cameras <= 2")


def eye_surface_hit_batch(
    eye: EyeModel, origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit of many shared-origin rays with the composite eye surface.

    A cornea-sphere point belongs to the surface iff the angle at the cornea
    center between (point - cornea_center) and the optical axis is at most
    the aperture; a sclera-sphere point belongs iff that same test exceeds
    the aperture (the corneal cap replaces the scleral cap).

    Returns (points (N,3), normals (N,3), region (N,), hit (N,)); points and
    normals are NaN where ``hit`` is False.
    """
    dirs = np.asarray(dirs, dtype=float)
    flat = dirs.reshape(-1, 3)
    n = len(flat)
    cc = eye.cornea_center
    sc = eye.sclera_center
    cos_ap = np.cos(np.radians(eye.cornea_aperture))

    # Bounding-sphere prefilter: both spheres fit inside a ball about the
    # sclera center of radius max(R_s, d_c + R_c).
    bound = max(eye.sclera_radius, eye.cornea_offset + eye.cornea_radius)
    oc = origin - sc
    proj = flat @ oc
    miss_bound = (oc @ oc - proj * proj) > bound * bound
    near = ~miss_bound
    sub = flat[near]

    points = np.full((n, 3), np.nan)
    normals = np.full((n, 3), np.nan)
    region = np.full(n, -1, dtype=np.int8)
    hit_all = np.zeros(n, dtype=bool)

    if len(sub):
        t_cand = np.empty((4, len(sub)))
        t_cand[0], t_cand[1] = ray_sphere_roots(origin, sub, cc, eye.cornea_radius)
        t_cand[2], t_cand[3] = ray_sphere_roots(origin, sub, sc, eye.sclera_radius)

        # Membership test along each ray without materializing candidate
        # points: with rel(t) = (o - cc) + t d,
        #   rel . axis = a0 + t (d . axis),   |rel|^2 = b0 + 2 t (d . occ) + t^2
        occ = origin - cc
        a0 = occ @ eye.optical_axis
        b0 = occ @ occ
        d_axis = sub @ eye.optical_axis
        d_occ = sub @ occ
        dot_axis = a0 + t_cand * d_axis
        with np.errstate(invalid="ignore"):
            member = np.empty_like(t_cand, dtype=bool)
            # cornea candidates lie on the cornea sphere: |rel| = R_c
            member[:2] = dot_axis[:2] >= cos_ap * eye.cornea_radius
            rel_norm = np.sqrt(b0 + t_cand[2:] * (2.0 * d_occ + t_cand[2:]))
            member[2:] = dot_axis[2:] < cos_ap * rel_norm
            usable = member & np.isfinite(t_cand) & (t_cand > geometry.EPS_GEOM)
        t_masked = np.where(usable, t_cand, np.inf)
        k_best = np.argmin(t_masked, axis=0)
        best_t = np.min(t_masked, axis=0)
        hit = np.isfinite(best_t)

        p = origin + best_t[:, None] * sub
        is_c = k_best < 2
        nrm = np.where(is_c[:, None], (p - cc) / eye.cornea_radius,
                       (p - sc) / eye.sclera_radius)
        p[~hit] = np.nan
        nrm[~hit] = np.nan

        points[near] = p
        normals[near] = nrm
        reg_sub = np.where(is_c, CORNEA, SCLERA).astype(np.int8)
        reg_sub[~hit] = -1
        region[near] = reg_sub
        hit_all[near] = hit

    shape = dirs.shape[:-1]
    return (points.reshape(*shape, 3), normals.reshape(*shape, 3),
            region.reshape(shape), hit_all.reshape(shape))


def eye_surface_hit(
    eye: EyeModel, ray: Ray
) -> tuple[np.ndarray, np.ndarray, str] | None:
    """Single-ray version of :func:`eye_surface_hit_batch`.

    Returns (point, normal, region name) or None on a miss.
    """
    p, nrm, reg, hit = eye_surface_hit_batch(eye, ray.origin, ray.dir[None, :])
    if not hit[0]:
        return None
    return p[0], nrm[0], REGION_NAMES[int(reg[0])]


def rotate_eye(
    eye: EyeModel, azimuth: float, elevation: float, up: np.ndarray = WORLD_UP
) -> EyeModel:
    """Rotate the optical axis about the fixed pivot ``sclera_center``.

    Azimuth turns about ``up``; elevation then turns about the rotated right
    axis, positive elevation tilting the axis toward ``up``. Radii, offsets,
    and the sclera center are unchanged.
    """
    up = unit(up)
    axis = eye.optical_axis
    r_az = rotation_about_axis(up, azimuth)
    if elevation != 0.0:
        right = np.cross(up, axis)
        if np.linalg.norm(right) < geometry.EPS_GEOM:
            raise InvariantViolation("eye: optical_axis parallel to up axis")
        right = r_az @ unit(right)
        rot = rotation_about_axis(right, -elevation) @ r_az
    else:
        rot = r_az
    return replace(eye, optical_axis=unit(rot @ axis))


def look_at(position, target, up=WORLD_UP) -> RigidPose:
    """Pose whose local +z looks from ``position`` toward ``target`` with
    local +y pointing down relative to ``up`` (image convention)."""
    position = np.asarray(position, dtype=float)
    z = unit(np.asarray(target, dtype=float) - position)
    x = np.cross(z, unit(up))
    if np.linalg.norm(x) < geometry.EPS_GEOM:
        raise InvariantViolation("look_at: view direction parallel to up")
    x = unit(x)
    y = np.cross(z, x)
    return RigidPose(rotation=np.stack([x, y, z], axis=1), translation=position)


# ---------------------------------------------------------------------------
# Configuration I/O. JSON, all lengths mm, all angles degrees; unknown fields
# are rejected so typos fail loudly. See docs/scene-schema.md.

_POSE_KEYS = {"rotation", "translation"}
_EYE_KEYS = {"sclera_center", "optical_axis", "sclera_radius", "cornea_radius",
             "cornea_offset", "cornea_aperture"}
_CAMERA_KEYS = {"pose", "focal_length", "principal_point", "resolution"}
_SCREEN_KEYS = {"pose", "resolution", "pixel_pitch"}
_SCENE_KEYS = {"screen", "cameras", "eye"}


def _check_keys(obj: dict, allowed: set, path: str):
    if not isinstance(obj, dict):
        raise SceneParseError(f"{path}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise SceneParseError(f"{path}: unknown field '{sorted(unknown)[0]}'")
    missing = allowed - set(obj)
    if missing:
        raise SceneParseError(f"{path}: missing field '{sorted(missing)[0]}'")


def _pose_from_dict(d: dict, path: str) -> RigidPose:
    _check_keys(d, _POSE_KEYS, path)
    try:
        return RigidPose(np.array(d["rotation"], dtype=float),
                         np.array(d["translation"], dtype=float))
    except (ValueError, TypeError) as e:
        raise SceneParseError(f"{path}: {e}") from e


def scene_from_dict(d: dict) -> SceneConfig:
    _check_keys(d, _SCENE_KEYS, "scene")
    _check_keys(d["eye"], _EYE_KEYS, "eye")
    _check_keys(d["screen"], _SCREEN_KEYS, "screen")
    if not isinstance(d["cameras"], list) or not d["cameras"]:
        raise SceneParseError("cameras: expected a non-empty list")
    cams = []
    for i, c in enumerate(d["cameras"]):
        _check_keys(c, _CAMERA_KEYS, f"cameras[{i}]")
        cams.append(CameraModel(
            pose=_pose_from_dict(c["pose"], f"cameras[{i}].pose"),
            focal_length=float(c["focal_length"]),
            principal_point=tuple(c["principal_point"]),
            resolution=tuple(c["resolution"]),
        ))
    eye = d["eye"]
    screen = d["screen"]
    return SceneConfig(
        screen=ScreenModel(
            pose=_pose_from_dict(screen["pose"], "screen.pose"),
            resolution=tuple(screen["resolution"]),
            pixel_pitch=float(screen["pixel_pitch"]),
        ),
        cameras=tuple(cams),
        eye=EyeModel(
            sclera_center=np.array(eye["sclera_center"], dtype=float),
            optical_axis=np.array(eye["optical_axis"], dtype=float),
            sclera_radius=float(eye["sclera_radius"]),
            cornea_radius=float(eye["cornea_radius"]),
            cornea_offset=float(eye["cornea_offset"]),
            cornea_aperture=float(eye["cornea_aperture"]),
        ),
    )


def scene_to_dict(scene: SceneConfig) -> dict:
    def pose(p: RigidPose) -> dict:
        return {"rotation": p.rotation.tolist(),
                "translation": p.translation.tolist()}

    return {
        "screen": {
            "pose": pose(scene.screen.pose),
            "resolution": list(scene.screen.resolution),
            "pixel_pitch": scene.screen.pixel_pitch,
        },
        "cameras": [
            {
                "pose": pose(c.pose),
                "focal_length": c.focal_length,
                "principal_point": list(c.principal_point),
                "resolution": list(c.resolution),
            }
            for c in scene.cameras
        ],
        "eye": {
            "sclera_center": scene.eye.sclera_center.tolist(),
            "optical_axis": scene.eye.optical_axis.tolist(),
            "sclera_radius": scene.eye.sclera_radius,
            "cornea_radius": scene.eye.cornea_radius,
            "cornea_offset": scene.eye.cornea_offset,
            "cornea_aperture": scene.eye.cornea_aperture,
        },
    }


def load_scene(path) -> SceneConfig:
    """Load and validate a scene config. Raises SceneParseError with
    line/field diagnostics, or InvariantViolation naming the violated
    invariant."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError(
            f"{path}: line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    return scene_from_dict(d)


def save_scene(scene: SceneConfig, path) -> None:
    """Write a scene config in canonical form (load/save round-trips are
    byte-identical)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(scene_to_dict(scene), indent=2, sort_keys=True))
        f.write("\n")


def make_default_scene() -> SceneConfig:
    """Build the shipped default scene from its design numbers.

    VR-headset-like scale: 120x68 mm screen (600x340 px at 0.2 mm pitch)
    about 35 mm from the eye and tilted 30 degrees off the gaze axis, two
    128x128 px cameras about 50 mm away with a ~15 degree stereo baseline.
    """
    eye = EyeModel(
        sclera_center=np.zeros(3),
        optical_axis=np.array([0.0, 0.0, 1.0]),
        sclera_radius=12.0,
        cornea_radius=7.8,
        cornea_offset=5.6,
        cornea_aperture=45.0,
    )

    target = np.array([0.0, 0.0, 10.0])
    cam_dist = 50.0
    half_base = np.radians(7.5)
    cams = []
    for s in (-1.0, 1.0):
        pos = np.array(
            [cam_dist * np.sin(s * half_base), 4.0,
             cam_dist * np.cos(half_base)]
        )
        cams.append(CameraModel(
            pose=look_at(pos, target),
            focal_length=170.0,
            principal_point=(63.5, 63.5),
            resolution=(128, 128),
        ))

    beta = np.radians(30.0)
    screen_center = 35.0 * np.array([0.0, np.sin(beta), np.cos(beta)])
    nrm = -unit(screen_center)  # faces the eye
    x_s = np.array([1.0, 0.0, 0.0])
    y_s = np.cross(nrm, x_s)
    rot = np.stack([x_s, y_s, nrm], axis=1)
    w_s, h_s, pitch = 600, 340, 0.2
    origin = (screen_center - x_s * (w_s - 1) * pitch / 2.0
              - y_s * (h_s - 1) * pitch / 2.0)
    screen = ScreenModel(
        pose=RigidPose(rotation=rot, translation=origin),
        resolution=(w_s, h_s),
        pixel_pitch=pitch,
    )
    return SceneConfig(screen=screen, cameras=tuple(cams), eye=eye)


def make_decode_scene() -> SceneConfig:
    """Build the shipped fringe-decoding scene.

    Same layout as the default scene but with higher-resolution cameras and
    a smaller panel that keeps the reflected-fringe magnification in its
    flat band. Single-shot wavelet decoding needs several well-sampled,
    slowly-chirping fringe periods across the eye patch; at the default
    128 px that is physically out of reach (the local fringe frequency
    changes by over 100% per period), so decode-path tests run here.
    """
    base = make_default_scene()
    cams = tuple(
        CameraModel(pose=c.pose, focal_length=730.0,
                    principal_point=(223.5, 223.5), resolution=(448, 448))
        for c in base.cameras
    )
    beta = np.radians(30.0)
    screen_center = 35.0 * np.array([0.0, np.sin(beta), np.cos(beta)])
    nrm = -unit(screen_center)
    x_s = np.array([1.0, 0.0, 0.0])
    y_s = np.cross(nrm, x_s)
    rot = np.stack([x_s, y_s, nrm], axis=1)
    w_s, h_s, pitch = 300, 170, 0.2
    origin = (screen_center - x_s * (w_s - 1) * pitch / 2.0
              - y_s * (h_s - 1) * pitch / 2.0)
    screen = ScreenModel(
        pose=RigidPose(rotation=rot, translation=origin),
        resolution=(w_s, h_s),
        pixel_pitch=pitch,
    )
    return SceneConfig(screen=screen, cameras=cams, eye=base.eye)


def default_scene() -> SceneConfig:
    """Load the default scene shipped with the package."""
    res = importlib.resources.files("deflect_gaze").joinpath(
        "data/default_scene.json"
    )
    with importlib.resources.as_file(res) as p:
        return load_scene(p)


def decode_scene() -> SceneConfig:
    """Load the fringe-decoding scene shipped with the package."""
    res = importlib.resources.files("deflect_gaze").joinpath(
        "data/decode_scene.json"
    )
    with importlib.resources.as_file(res) as p:
        return load_scene(p)
