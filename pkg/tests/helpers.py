"""Shared test utilities: analytic surfaces and synthetic line bundles."""

import numpy as np

from deflect_gaze.geometry import unit


def plane_mirror_surface(point, normal):
    """Analytic plane-mirror hit function with the renderer's surface
    signature; the R -> infinity limit of the eye."""
    p0 = np.asarray(point, dtype=float)
    n = unit(np.asarray(normal, dtype=float))

    def surface(origin, dirs):
        flat = dirs.reshape(-1, 3)
        denom = flat @ n
        safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
        t = ((p0 - origin) @ n) / safe
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9)
        pts = origin + t[:, None] * flat
        nrm = np.tile(n, (len(flat), 1))
        pts[~hit] = np.nan
        nrm[~hit] = np.nan
        region = np.zeros(len(flat), dtype=np.int8)
        sh = dirs.shape[:-1]
        return (pts.reshape(*sh, 3), nrm.reshape(*sh, 3),
                region.reshape(sh), hit.reshape(sh))

    return surface


def random_unit_vectors(n, seed=0):
    g = np.random.default_rng(seed)
    v = g.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def bundle_through_point(center, n, seed=0, point_radius=10.0,
                         dir_sigma=0.0, point_sigma=0.0):
    """Lines through ``center`` (optionally perturbed), with base points on
    a sphere of ``point_radius`` around it."""
    g = np.random.default_rng(seed)
    dirs = random_unit_vectors(n, seed=seed + 1)
    points = np.asarray(center, float) + point_radius * dirs
    if point_sigma > 0:
        points = points + g.normal(0.0, point_sigma, size=points.shape)
    if dir_sigma > 0:
        dirs = dirs + g.normal(0.0, dir_sigma, size=dirs.shape)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return points, dirs


def cone_frustum_normal_lines(n_rings=6, n_azimuth=10, half_angle_deg=30.0,
                              r_lo=3.0, r_hi=8.0, axis_z=True):
    """Surface points and outward normals of a cone frustum about +z with
    apex above; all normal lines intersect the z axis."""
    alpha = np.radians(half_angle_deg)
    radii = np.linspace(r_lo, r_hi, n_rings)
    thetas = np.linspace(0.0, 2.0 * np.pi, n_azimuth, endpoint=False)
    pts = []
    nrms = []
    for r in radii:
        z = -r / np.tan(alpha)
        for th in thetas:
            pts.append([r * np.cos(th), r * np.sin(th), z])
            nrms.append([np.cos(alpha) * np.cos(th),
                         np.cos(alpha) * np.sin(th), np.sin(alpha)])
    return np.array(pts), np.array(nrms)


def brute_force_min_point(points, dirs, lo, hi, step):
    """Grid search of the sum of squared line distances over a cube; the
    independent oracle for the closed-form solver."""
    ax = np.arange(lo, hi + step / 2, step)
    best_val = np.inf
    best_x = None
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    plane = np.stack([xx.ravel(), yy.ravel()], axis=1)
    for z in ax:
        grid = np.column_stack([plane, np.full(len(plane), z)])
        v = grid[:, None, :] - points[None, :, :]
        proj = np.einsum("gnj,nj->gn", v, dirs)
        d2 = np.einsum("gnj,gnj->gn", v, v) - proj * proj
        tot = d2.sum(axis=1)
        k = int(np.argmin(tot))
        if tot[k] < best_val:
            best_val = float(tot[k])
            best_x = grid[k]
    return best_x, best_val
