"""Inverse rendering of eye pose and shape from measured correspondences.

A simulated eye is adjusted until the correspondences its renders produce
match the measured ones; the fitted eye's optical axis is the gaze
estimate. The loss is evaluated on correspondences (the information
bearing channel), the gradient by central finite differences, and the
descent is momentum plus backtracking with projection onto the valid
parameter box.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import EmptyMapError, NoDescentError, UnreliableLossError
from .gaze import GazeEstimate
from .render import (CorrespondenceMap, Frame, PatternSpec,
                     render_correspondence, render_frame, render_margins)
from .scene import EyeModel, SceneConfig, rotate_eye

PARAM_NAMES = ("azimuth", "elevation", "tx", "ty", "tz",
               "cornea_radius", "sclera_radius", "cornea_offset")
ANGLE_PARAMS = (0, 1)
DEFAULT_ACTIVE = (True, True, True, True, True, False, False, False)
FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class EyeParamVector:
    """Optimizable eye state relative to a nominal eye.

    Rotation in degrees about the nominal pivot, translation in mm of the
    sclera center from nominal, and the three shape radii/offsets in mm.
    ``active`` masks which entries the descent may move (shape is frozen by
    default).
    """

    azimuth: float = 0.0
    elevation: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cornea_radius: float = 7.8
    sclera_radius: float = 12.0
    cornea_offset: float = 5.6
    active: tuple[bool, ...] = DEFAULT_ACTIVE

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float))
        if len(self.active) != len(PARAM_NAMES):
            raise ValueError("active mask must have 8 entries")
        if not any(self.active):
            raise ValueError("at least one parameter must be active")

    @classmethod
    def from_eye(cls, eye: EyeModel,
                 active: tuple[bool, ...] = DEFAULT_ACTIVE) -> "EyeParamVector":
        return cls(cornea_radius=eye.cornea_radius,
                   sclera_radius=eye.sclera_radius,
                   cornea_offset=eye.cornea_offset, active=active)

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, *self.translation,
                         self.cornea_radius, self.sclera_radius,
                         self.cornea_offset])

    def with_array(self, x: np.ndarray) -> "EyeParamVector":
        return replace(self, azimuth=float(x[0]), elevation=float(x[1]),
                       translation=np.array(x[2:5], dtype=float),
                       cornea_radius=float(x[5]), sclera_radius=float(x[6]),
                       cornea_offset=float(x[7]))

    def materialize(self, nominal: EyeModel) -> EyeModel:
        """Concrete eye: nominal rotated and translated per this vector."""
        eye = rotate_eye(nominal, self.azimuth, self.elevation)
        return replace(eye,
                       sclera_center=nominal.sclera_center + self.translation,
                       cornea_radius=self.cornea_radius,
                       sclera_radius=self.sclera_radius,
                       cornea_offset=self.cornea_offset)


def project_params(p: EyeParamVector) -> EyeParamVector:
    """Project onto the valid box: radii above 1 mm, cornea at least 0.5 mm
    smaller than the sclera, offset positive with a protruding apex."""
    x = p.as_array()
    x[6] = max(x[6], 1.5)
    x[5] = min(max(x[5], 1.0), x[6] - 0.5)
    x[7] = max(x[7], x[6] - x[5] + 1e-3, 1e-3)
    return p.with_array(x)


@dataclass(frozen=True)
class OptConfig:
    """Descent settings. Steps are per parameter group (degrees for the
    rotation entries, mm for the rest)."""

    max_iters: int = 300
    step_deg: float = 0.5
    step_mm: float = 0.5
    step_decay: float = 0.5
    momentum: float = 0.8
    grad_mode: str = "finite-diff"
    fd_step_deg: float = 1e-3
    fd_step_mm: float = 1e-3
    rel_tol: float = 1e-7
    rel_window: int = 10
    min_step: float = 1e-5
    n_min: int = 200
    boundary_px: int = 2
    mismatch_weight: float = 25.0
    pixel_stride: int = 1

    def __post_init__(self):
        if self.step_deg <= 0 or self.step_mm <= 0:
            raise ValueError("steps must be positive")
        if not 0 < self.step_decay < 1:
            raise ValueError("step_decay in (0, 1)")
        if self.grad_mode not in ("finite-diff", "analytic-if-available"):
            raise ValueError("unknown grad_mode")


@dataclass(frozen=True)
class LossReport:
    """Correspondence mismatch cost in screen px^2 plus diagnostics."""

    total: float
    n_valid: int
    mismatch_penalty: float
    per_camera: tuple[dict, ...]


def _strided(m: CorrespondenceMap, s: int) -> CorrespondenceMap:
    if s == 1:
        return m
    return CorrespondenceMap(u=m.u[::s, ::s], v=m.v[::s, ::s],
                             valid=m.valid[::s, ::s])


def _erode(mask: np.ndarray, px: int) -> np.ndarray:
    if px <= 0:
        return mask
    return ndimage.binary_erosion(mask, FOUR_CONN, iterations=px)


def _fade_weight(mask: np.ndarray, px: int) -> np.ndarray:
    """Weight ramp that is 0 at the mask boundary and 1 from ``px + 1``
    pixels inward; a smooth realization of the boundary exclusion that
    keeps the loss from jolting when a silhouette pixel flips."""
    if px <= 0:
        return mask.astype(float)
    dt = ndimage.distance_transform_edt(mask)
    return np.clip((dt - 1.0) / px, 0.0, 1.0)


def _seam_mask(m: CorrespondenceMap, dilate_px: int) -> np.ndarray:
    """Pixels adjacent to an internal correspondence discontinuity.

    The field jumps across the cornea/sclera transition even though both
    sides are valid; neighbor steps far above the typical step mark the
    seam, which is then dilated like the validity-boundary guard.
    """
    jump = np.zeros(m.u.shape)
    du = np.hypot(np.diff(m.u, axis=1), np.diff(m.v, axis=1))
    both = m.valid[:, 1:] & m.valid[:, :-1]
    du = np.where(both, du, 0.0)
    jump[:, 1:] = np.maximum(jump[:, 1:], du)
    jump[:, :-1] = np.maximum(jump[:, :-1], du)
    dv = np.hypot(np.diff(m.u, axis=0), np.diff(m.v, axis=0))
    both = m.valid[1:, :] & m.valid[:-1, :]
    dv = np.where(both, dv, 0.0)
    jump[1:, :] = np.maximum(jump[1:, :], dv)
    jump[:-1, :] = np.maximum(jump[:-1, :], dv)
    steps = jump[m.valid & (jump > 0)]
    if steps.size == 0:
        return np.zeros(m.u.shape, dtype=bool)
    thresh = max(8.0 * float(np.median(steps)), 30.0)
    seam = m.valid & (jump > thresh)
    if dilate_px > 0 and seam.any():
        seam = ndimage.binary_dilation(seam, FOUR_CONN, iterations=dilate_px)
    return seam


def correspondence_loss(
    params: EyeParamVector,
    measured: list[CorrespondenceMap],
    scene: SceneConfig,
    n_min: int = 200,
    boundary_px: int = 2,
    mismatch_weight: float = 25.0,
    pixel_stride: int = 1,
) -> LossReport:
    """Mean squared screen-px distance between measured and simulated
    correspondences, plus a penalty on validity mismatch.

    Pixels within ``boundary_px`` of either validity boundary are excluded
    from the mean (the correspondence field is discontinuous at silhouette
    and region boundaries). The penalty is ``mismatch_weight`` times the
    fraction of pixels valid in exactly one map.

    Raises:
        UnreliableLossError: fewer than ``n_min`` jointly valid pixels for
            any camera.
    """
    if len(measured) != len(scene.cameras):
        raise ValueError("need one measured map per configured camera")
    eye = params.materialize(scene.eye)
    sim_scene = replace(scene, eye=eye)
    per_cam = []
    totals = []
    penalties = []
    n_total = 0
    # boundary_px and n_min are stated at full resolution; on a strided
    # grid the erosion depth and the pixel-count floor scale accordingly
    grid_b = max(1, int(round(boundary_px / pixel_stride)))
    n_min_eff = max(8, n_min // (pixel_stride * pixel_stride))
    for i, meas_full in enumerate(measured):
        sim = render_correspondence(sim_scene, i, stride=pixel_stride)
        margins = render_margins(sim_scene, i, stride=pixel_stride)
        meas = _strided(meas_full, pixel_stride)
        sil = margins["silhouette"]
        aper = margins["aperture"]
        cap_edge = margins["cap_edge"]

        er_meas = _erode(meas.valid, grid_b)
        er_sim = _erode(sim.valid, grid_b)
        core = er_meas & er_sim
        n_core = int(core.sum())
        if n_core < n_min_eff:
            raise UnreliableLossError(
                f"camera {i}: {n_core} jointly valid core pixels < {n_min_eff}"
            )

        # Weights near every discontinuity fade to zero. The measured map is
        # fixed during an optimization, so binary distance fades are fine
        # there; the simulated side uses ramps of continuous quantities
        # (panel-edge distance in screen px, silhouette clearance, aperture
        # angle margin) so the loss stays smooth in the eye parameters.
        joint = meas.valid & sim.valid
        w = _fade_weight(meas.valid, grid_b)
        w[_seam_mask(meas, grid_b)] = 0.0

        steps = np.hypot(np.diff(meas.u, axis=1), np.diff(meas.v, axis=1))
        step_scale = float(np.nanmedian(
            steps[meas.valid[:, 1:] & meas.valid[:, :-1]]
        )) / pixel_stride if joint.any() else 1.0
        w_s, h_s = scene.screen.resolution
        edge = np.minimum(np.minimum(sim.u, w_s - 1 - sim.u),
                          np.minimum(sim.v, h_s - 1 - sim.v))
        w = w * np.clip(np.where(joint, edge, 0.0)
                        / max(boundary_px * step_scale, 1e-9), 0.0, 1.0)
        footprint = (np.linalg.norm(scene.cameras[i].center
                                    - scene.eye.sclera_center)
                     / scene.cameras[i].focal_length)
        w = w * np.clip(np.where(joint, sil, 0.0)
                        / max(boundary_px * footprint, 1e-9), 0.0, 1.0)
        ang_scale = np.degrees(footprint / scene.eye.cornea_radius)
        w = w * np.clip(np.abs(np.where(joint, aper, 0.0))
                        / max(boundary_px * ang_scale, 1e-9), 0.0, 1.0)
        # the cap edge occludes the sclera behind it: rays grazing the cap
        # edge circle carry a correspondence jump just like the seam
        w = w * np.clip(np.where(joint, cap_edge, 0.0)
                        / max(boundary_px * footprint, 1e-9), 0.0, 1.0)
        w[~joint] = 0.0

        du = np.where(joint, meas.u - sim.u, 0.0)
        dv = np.where(joint, meas.v - sim.v, 0.0)
        wsum = float(np.sum(w))
        if wsum <= 0:
            raise UnreliableLossError(f"camera {i}: zero total loss weight")
        # saturating residual: a pixel flipping across an unmasked internal
        # discontinuity (occluded sclera appearing behind the cap edge) has
        # an unbounded squared error; capping its influence keeps the loss
        # landscape smooth while leaving small residuals untouched
        v2 = du * du + dv * dv
        cap = (4.0 * step_scale * pixel_stride) ** 2
        sq = float(np.sum(w * cap * v2 / (cap + v2)) / wsum)
        # the discontinuity band is excluded from the mismatch count too,
        # so silhouette-grazing pixel flips cannot jolt the penalty
        band = (meas.valid & ~er_meas) | (sim.valid & ~er_sim)
        mismatch = float(np.mean((meas.valid ^ sim.valid) & ~band))
        pen = mismatch_weight * mismatch
        per_cam.append({"camera": i, "n_valid": n_core, "sq": sq,
                        "mismatch_penalty": pen})
        totals.append(sq + pen)
        penalties.append(pen)
        n_total += n_core
    return LossReport(total=float(np.mean(totals)), n_valid=n_total,
                      mismatch_penalty=float(np.mean(penalties)),
                      per_camera=tuple(per_cam))


def _loss_from_config(params, measured, scene, config: OptConfig) -> LossReport:
    return correspondence_loss(
        params, measured, scene, n_min=config.n_min,
        boundary_px=config.boundary_px,
        mismatch_weight=config.mismatch_weight,
        pixel_stride=config.pixel_stride,
    )


def loss_gradient(
    params: EyeParamVector,
    measured: list[CorrespondenceMap],
    scene: SceneConfig,
    config: OptConfig,
) -> np.ndarray:
    """Central finite-difference gradient over the active parameters."""
    g, _ = _fd_gradient_curvature(params, measured, scene, config)
    return g


def _fd_gradient_curvature(
    params: EyeParamVector,
    measured: list[CorrespondenceMap],
    scene: SceneConfig,
    config: OptConfig,
    loss0: float | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Central-difference gradient, plus the diagonal curvature when the
    center loss is supplied (the same probes serve both)."""
    active = np.nonzero(params.active)[0]
    x0 = params.as_array()
    g = np.zeros(len(active))
    curv = np.zeros(len(active)) if loss0 is not None else None
    for j, idx in enumerate(active):
        h = config.fd_step_deg if idx in ANGLE_PARAMS else config.fd_step_mm
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        lp = _loss_from_config(params.with_array(xp), measured, scene, config)
        lm = _loss_from_config(params.with_array(xm), measured, scene, config)
        g[j] = (lp.total - lm.total) / (2.0 * h)
        if curv is not None:
            curv[j] = (lp.total + lm.total - 2.0 * loss0) / (h * h)
    return g, curv


def optimize_gaze(
    init: EyeParamVector,
    measured: list[CorrespondenceMap],
    scene: SceneConfig,
    config: OptConfig | None = None,
) -> tuple[EyeParamVector, GazeEstimate, list[dict]]:
    """Momentum descent with backtracking on the correspondence loss.

    Proposals that lower the loss are accepted and keep their momentum;
    rejected proposals halve the step and reset momentum. Parameters stay
    in the valid box by projection. The trace records (iter, loss, step)
    plus the parameter state per iteration.

    Raises:
        NoDescentError: no accepted step within the first 50 proposals.
        UnreliableLossError: the loss is unreliable at ``init``.
    """
    config = config or OptConfig()
    p = project_params(init)
    loss = _loss_from_config(p, measured, scene, config).total
    active = np.nonzero(p.active)[0]
    base = np.array([
        config.step_deg if idx in ANGLE_PARAMS else config.step_mm
        for idx in active
    ])
    velocity = np.zeros(len(active))
    step = 1.0
    trace: list[dict] = []

    def descent_direction(grad, curv):
        """Diagonal-curvature preconditioned step, trust-capped per group.

        The loss valley couples rotation to a compensating translation
        (rotating a sphere about an offset pivot looks like translating
        it); raw gradient steps crawl along it, Newton-diagonal steps do
        not. Non-convex or tiny curvatures fall back to a unit gradient
        step at the group base scale."""
        floor = 1e-8 + 1e-3 * float(np.max(np.abs(curv))) if curv is not None \
            else 0.0
        d = np.zeros_like(grad)
        gnorm = float(np.linalg.norm(grad))
        for j in range(len(grad)):
            if curv is not None and curv[j] > floor:
                d[j] = grad[j] / curv[j]
            elif gnorm > 0:
                d[j] = base[j] * grad[j] / gnorm
        lim = 4.0 * base
        return np.clip(d, -lim, lim)

    def record(it, cur_loss, cur_step, pv: EyeParamVector):
        x = pv.as_array()
        trace.append({
            "iter": it, "loss": cur_loss, "step": cur_step,
            "azimuth": x[0], "elevation": x[1],
            "tx": x[2], "ty": x[3], "tz": x[4],
        })

    record(0, loss, step, p)
    accepted_losses = [loss]
    grad = None
    curv = None
    n_proposals = 0
    accepted_any = False

    for it in range(1, config.max_iters + 1):
        if loss < 1e-12:
            break
        if grad is None:
            grad, curv = _fd_gradient_curvature(p, measured, scene, config,
                                                loss0=loss)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-15:
            break
        delta = config.momentum * velocity - step * descent_direction(grad, curv)
        x_new = p.as_array()
        x_new[active] += delta
        p_new = project_params(p.with_array(x_new))
        n_proposals += 1
        try:
            loss_new = _loss_from_config(p_new, measured, scene, config).total
        except UnreliableLossError:
            loss_new = np.inf
        if loss_new < loss:
            p, loss = p_new, loss_new
            velocity = delta
            accepted_any = True
            grad = None
            # backtracking recovery: accepted steps regrow toward the base
            step = min(step / config.step_decay, 1.0)
            accepted_losses.append(loss)
        else:
            step *= config.step_decay
            velocity[:] = 0.0
        if not accepted_any and n_proposals >= 50:
            raise NoDescentError("no accepted step in the first 50 proposals")
        record(it, loss, step, p)
        if step < config.min_step:
            break
        # converged: the last rel_window accepted steps changed the loss
        # by less than rel_tol relative
        if len(accepted_losses) > config.rel_window:
            old = accepted_losses[-1 - config.rel_window]
            if old - loss <= config.rel_tol * max(old, 1e-30):
                break

    eye = p.materialize(scene.eye)
    estimate = GazeEstimate(
        direction=eye.optical_axis,
        cornea_center=eye.cornea_center,
        sclera_center=eye.sclera_center,
        n_cornea_inliers=0,
        n_sclera_inliers=0,
        rms_cornea=float(np.sqrt(max(loss, 0.0))),
        rms_sclera=float(np.sqrt(max(loss, 0.0))),
        method_tag="optimize",
    )
    return p, estimate, trace


def init_guess(
    measured: list[CorrespondenceMap],
    scene: SceneConfig,
    active: tuple[bool, ...] = DEFAULT_ACTIVE,
) -> EyeParamVector:
    """Initial parameter vector: zero rotation, translation from the shift
    of the valid-pixel centroid back-projected at the nominal eye depth
    (clamped to 3 mm), nominal shape.

    Raises:
        EmptyMapError: the measured map has no valid pixels.
    """
    meas = measured[0]
    if meas.n_valid == 0:
        raise EmptyMapError("measured map has no valid pixels")
    cam = scene.cameras[0]
    nominal = render_correspondence(scene, 0)

    def centroid_point(m: CorrespondenceMap) -> np.ndarray:
        ys, xs = np.nonzero(m.valid)
        ray = cam.pixel_ray(float(xs.mean()), float(ys.mean()))
        depth = float(np.linalg.norm(cam.center - scene.eye.sclera_center))
        return ray.at(depth)

    shift = centroid_point(meas) - centroid_point(nominal)
    return EyeParamVector.from_eye(scene.eye, active=active).with_array(
        np.array([0.0, 0.0, *np.clip(shift, -3.0, 3.0),
                  scene.eye.cornea_radius, scene.eye.sclera_radius,
                  scene.eye.cornea_offset])
    )


def image_loss(
    params: EyeParamVector,
    frames: list[Frame],
    pattern: PatternSpec,
    scene: SceneConfig,
    n_min: int = 200,
    boundary_px: int = 2,
) -> LossReport:
    """Mean squared intensity difference against a simulated render, over
    the (eroded) simulated-valid pixels. Optional variant of the
    correspondence loss for pattern-free or video-frame measurements."""
    if len(frames) != len(scene.cameras):
        raise ValueError("need one frame per configured camera")
    eye = params.materialize(scene.eye)
    sim_scene = replace(scene, eye=eye)
    per_cam = []
    totals = []
    n_total = 0
    for i, meas in enumerate(frames):
        sim_corr = render_correspondence(sim_scene, i)
        sim = render_frame(sim_scene, i, pattern, correspondence=sim_corr)
        core = _erode(sim_corr.valid, boundary_px)
        n_core = int(core.sum())
        if n_core < n_min:
            raise UnreliableLossError(
                f"camera {i}: {n_core} valid core pixels < {n_min}"
            )
        d = meas.intensity[core] - sim.intensity[core]
        sq = float(np.mean(d * d))
        per_cam.append({"camera": i, "n_valid": n_core, "sq": sq,
                        "mismatch_penalty": 0.0})
        totals.append(sq)
        n_total += n_core
    return LossReport(total=float(np.mean(totals)), n_valid=n_total,
                      mismatch_penalty=0.0, per_camera=tuple(per_cam))
