"""Matrix-free forward/back projection by exact ray-grid traversal.

Rays are traced through the pixel grid Siddon-style: the traversal visits
every pixel a ray crosses and uses the exact intersection length (mm) as the
system-matrix weight h_ij. The back projector replays the identical traversal
and scatters instead of gathering, so <Ax, y> == <x, A^T y> holds to rounding.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numba import njit, prange

from .grids import (
    FanBeamGeometry,
    GeometryError,
    Image,
    ImageGrid,
    Sinogram,
    SirtWeights,
)

__all__ = [
    "forward_project",
    "back_project",
    "sirt_weights",
    "project_values",
    "backproject_values",
    "ray_table",
]

# Rays whose accumulated intersection length falls below this fraction of a
# pixel are treated as missing the grid when inverting row/column sums.
WEIGHT_GUARD_FACTOR = 1e-12


@lru_cache(maxsize=32)
def ray_table(geom: FanBeamGeometry, grid: ImageGrid):
    """Per-ray origin and unit direction, one row per (view, detector) pair.

    Returns (p0x, p0y, dirx, diry) as float64 arrays of length
    n_views * n_detectors, ordered view-major to match sinogram layout.
    """
    angles = np.asarray(geom.view_angles, dtype=np.float64)
    nd = geom.n_detectors
    pitch = geom.detector_pitch()
    offsets = (np.arange(nd, dtype=np.float64) - (nd - 1) / 2.0) * pitch

    if geom.mode == "parallel":
        # ray through (s*cos b, s*sin b) along (-sin b, cos b)
        cb = np.cos(angles)[:, None]
        sb = np.sin(angles)[:, None]
        s = offsets[None, :]
        p0x = s * cb
        p0y = s * sb
        dirx = np.broadcast_to(-sb, p0x.shape).copy()
        diry = np.broadcast_to(cb, p0x.shape).copy()
    else:
        d_s = geom.source_to_center
        if geom.detector_shape == "arc":
            # equiangular: offsets are fan angles gamma measured at the source
            gamma = offsets[None, :]
            theta = angles[:, None] + gamma
            dirx = -np.cos(theta)
            diry = -np.sin(theta)
            p0x = np.broadcast_to(d_s * np.cos(angles)[:, None], dirx.shape).copy()
            p0y = np.broadcast_to(d_s * np.sin(angles)[:, None], dirx.shape).copy()
        else:
            # flat detector: offsets are lateral positions on the detector line
            d_d = geom.center_to_detector
            cb = np.cos(angles)[:, None]
            sb = np.sin(angles)[:, None]
            sx = d_s * cb
            sy = d_s * sb
            # detector element position: center of detector line + lateral offset
            ex = -d_d * cb + offsets[None, :] * (-sb)
            ey = -d_d * sb + offsets[None, :] * cb
            dx = ex - sx
            dy = ey - sy
            norm = np.hypot(dx, dy)
            dirx = dx / norm
            diry = dy / norm
            p0x = np.broadcast_to(sx, dirx.shape).copy()
            p0y = np.broadcast_to(sy, dirx.shape).copy()

    return (
        np.ascontiguousarray(p0x.ravel()),
        np.ascontiguousarray(p0y.ravel()),
        np.ascontiguousarray(dirx.ravel()),
        np.ascontiguousarray(diry.ravel()),
    )


@njit(cache=True, parallel=True)
def _forward_kernel(img, p0x, p0y, dirx, diry, x0, y0, p, nx, ny, out):
    n_rays = p0x.shape[0]
    x1 = x0 + nx * p
    y1 = y0 + ny * p
    for r in prange(n_rays):
        px = p0x[r]
        py = p0y[r]
        dx = dirx[r]
        dy = diry[r]

        tmin = -1e300
        tmax = 1e300
        if dx != 0.0:
            ta = (x0 - px) / dx
            tb = (x1 - px) / dx
            lo = min(ta, tb)
            hi = max(ta, tb)
            if lo > tmin:
                tmin = lo
            if hi < tmax:
                tmax = hi
        elif px <= x0 or px >= x1:
            out[r] = 0.0
            continue
        if dy != 0.0:
            ta = (y0 - py) / dy
            tb = (y1 - py) / dy
            lo = min(ta, tb)
            hi = max(ta, tb)
            if lo > tmin:
                tmin = lo
            if hi < tmax:
                tmax = hi
        elif py <= y0 or py >= y1:
            out[r] = 0.0
            continue
        if tmax <= tmin:
            out[r] = 0.0
            continue

        ix = int(np.floor((px + tmin * dx - x0) / p))
        iy = int(np.floor((py + tmin * dy - y0) / p))
        if ix < 0:
            ix = 0
        elif ix > nx - 1:
            ix = nx - 1
        if iy < 0:
            iy = 0
        elif iy > ny - 1:
            iy = ny - 1

        if dx > 0.0:
            step_x = 1
            tx = ((ix + 1) * p + x0 - px) / dx
            dtx = p / dx
        elif dx < 0.0:
            step_x = -1
            tx = (ix * p + x0 - px) / dx
            dtx = -p / dx
        else:
            step_x = 0
            tx = 1e300
            dtx = 0.0
        if dy > 0.0:
            step_y = 1
            ty = ((iy + 1) * p + y0 - py) / dy
            dty = p / dy
        elif dy < 0.0:
            step_y = -1
            ty = (iy * p + y0 - py) / dy
            dty = -p / dy
        else:
            step_y = 0
            ty = 1e300
            dty = 0.0

        acc = 0.0
        t = tmin
        while True:
            if tx < ty:
                tn = tx
            else:
                tn = ty
            tc = tn
            if tc > tmax:
                tc = tmax
            seg = tc - t
            if seg > 0.0:
                acc += seg * img[iy, ix]
            if tn >= tmax:
                break
            t = tn
            if tx <= ty:
                ix += step_x
                tx += dtx
            else:
                iy += step_y
                ty += dty
            if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                break
        out[r] = acc


@njit(cache=True, parallel=True)
def _back_kernel(vals, p0x, p0y, dirx, diry, x0, y0, p, nx, ny, n_det, partials):
    # One partial image per view; summed by the caller in fixed view order so
    # the result does not depend on the thread schedule.
    n_views = partials.shape[0]
    x1 = x0 + nx * p
    y1 = y0 + ny * p
    for v in prange(n_views):
        out = partials[v]
        for k in range(n_det):
            r = v * n_det + k
            val = vals[r]
            px = p0x[r]
            py = p0y[r]
            dx = dirx[r]
            dy = diry[r]

            tmin = -1e300
            tmax = 1e300
            if dx != 0.0:
                ta = (x0 - px) / dx
                tb = (x1 - px) / dx
                lo = min(ta, tb)
                hi = max(ta, tb)
                if lo > tmin:
                    tmin = lo
                if hi < tmax:
                    tmax = hi
            elif px <= x0 or px >= x1:
                continue
            if dy != 0.0:
                ta = (y0 - py) / dy
                tb = (y1 - py) / dy
                lo = min(ta, tb)
                hi = max(ta, tb)
                if lo > tmin:
                    tmin = lo
                if hi < tmax:
                    tmax = hi
            elif py <= y0 or py >= y1:
                continue
            if tmax <= tmin:
                continue

            ix = int(np.floor((px + tmin * dx - x0) / p))
            iy = int(np.floor((py + tmin * dy - y0) / p))
            if ix < 0:
                ix = 0
            elif ix > nx - 1:
                ix = nx - 1
            if iy < 0:
                iy = 0
            elif iy > ny - 1:
                iy = ny - 1

            if dx > 0.0:
                step_x = 1
                tx = ((ix + 1) * p + x0 - px) / dx
                dtx = p / dx
            elif dx < 0.0:
                step_x = -1
                tx = (ix * p + x0 - px) / dx
                dtx = -p / dx
            else:
                step_x = 0
                tx = 1e300
                dtx = 0.0
            if dy > 0.0:
                step_y = 1
                ty = ((iy + 1) * p + y0 - py) / dy
                dty = p / dy
            elif dy < 0.0:
                step_y = -1
                ty = (iy * p + y0 - py) / dy
                dty = -p / dy
            else:
                step_y = 0
                ty = 1e300
                dty = 0.0

            t = tmin
            while True:
                if tx < ty:
                    tn = tx
                else:
                    tn = ty
                tc = tn
                if tc > tmax:
                    tc = tmax
                seg = tc - t
                if seg > 0.0:
                    out[iy, ix] += seg * val
                if tn >= tmax:
                    break
                t = tn
                if tx <= ty:
                    ix += step_x
                    tx += dtx
                else:
                    iy += step_y
                    ty += dty
                if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                    break


def project_values(values: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Forward projection on raw arrays; (ny, nx) -> (n_views, n_detectors)."""
    img = np.ascontiguousarray(values, dtype=np.float64)
    if img.shape != grid.shape:
        raise GeometryError(f"image shape {img.shape} does not match grid {grid.shape}")
    p0x, p0y, dirx, diry = ray_table(geom, grid)
    x0, y0 = grid.origin()
    out = np.empty(p0x.shape[0], dtype=np.float64)
    _forward_kernel(img, p0x, p0y, dirx, diry, x0, y0, grid.pixel_size, grid.nx, grid.ny, out)
    return out.reshape(geom.shape)


def backproject_values(sino_values: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Exact transpose of :func:`project_values`; (n_views, n_detectors) -> (ny, nx)."""
    vals = np.ascontiguousarray(sino_values, dtype=np.float64)
    if vals.shape != geom.shape:
        raise GeometryError(f"sinogram shape {vals.shape} does not match geometry {geom.shape}")
    p0x, p0y, dirx, diry = ray_table(geom, grid)
    x0, y0 = grid.origin()
    partials = np.zeros((geom.n_views, grid.ny, grid.nx), dtype=np.float64)
    _back_kernel(
        vals.ravel(), p0x, p0y, dirx, diry, x0, y0,
        grid.pixel_size, grid.nx, grid.ny, geom.n_detectors, partials,
    )
    return partials.sum(axis=0)


def forward_project(image: Image, geom: FanBeamGeometry) -> Sinogram:
    """Apply the system matrix A: line integrals of ``image`` along every ray."""
    image.require_finite("forward_project input")
    return Sinogram(geom, project_values(image.values, geom, image.grid))


def back_project(sino: Sinogram, grid: ImageGrid) -> Image:
    """Apply A^T, scattering each ray value back along its traversal."""
    sino.require_finite("back_project input")
    return Image(grid, backproject_values(sino.values, sino.geometry, grid))


def sirt_weights(geom: FanBeamGeometry, grid: ImageGrid) -> SirtWeights:
    """Reciprocal row/column sums of A, computed matrix-free.

    Row sums are A applied to the all-ones image (per-ray chord length through
    the grid); column sums are A^T applied to the all-ones sinogram. Sums below
    the guard threshold signal rays/pixels outside the field of view and invert
    to exactly 0.
    """
    ones_img = np.ones(grid.shape, dtype=np.float64)
    row_sums = project_values(ones_img, geom, grid).ravel()
    ones_sino = np.ones(geom.shape, dtype=np.float64)
    col_sums = backproject_values(ones_sino, geom, grid).ravel()

    guard = WEIGHT_GUARD_FACTOR * grid.pixel_size
    row_inv = np.where(row_sums > guard, 1.0 / np.maximum(row_sums, guard), 0.0)
    col_inv = np.where(col_sums > guard, 1.0 / np.maximum(col_sums, guard), 0.0)
    return SirtWeights(row_inv=row_inv, col_inv=col_inv, grid=grid, geom=geom)
