"""Classical reconstruction: FBP, the SIRT update, and FISTA with TV.

FBP follows the textbook recipes: plain Ram-Lak filtering plus unweighted
backprojection in parallel mode, and the equiangular fan-beam formula
(cos-gamma pre-weighting, modified ramp kernel, 1/L^2 backprojection) in fan
mode. The ramp filter is applied in the frequency domain after zero-padding
to the next power of two, using the band-limited spatial kernel so the DC
term comes out right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import FanBeamGeometry, GeometryError, Image, ImageGrid, Sinogram, SirtWeights
from .projector import backproject_values, project_values, sirt_weights

__all__ = [
    "fbp",
    "sirt_step",
    "sirt_reconstruct",
    "FistaConfig",
    "fista_tv",
    "estimate_step_size",
    "tv_value",
    "tv_prox",
]


# --- filtered back projection ---

def _next_pow2(n: int) -> int:
    m = 1
    while m < n:
        m *= 2
    return m


def _ramlak_wrapped(m: int, spacing: float, fan_pitch: float | None = None) -> np.ndarray:
    """Band-limited Ram-Lak impulse response in FFT (wrap-around) layout.

    h[0] = 1/(4 d^2), h[n odd] = -1/(pi n d)^2, h[n even] = 0. In fan mode the
    samples additionally carry the (g / sin g)^2 / 2 equiangular correction.
    """
    idx = np.fft.fftfreq(m, d=1.0 / m)  # 0, 1, ..., -1 in wrap order
    h = np.zeros(m, dtype=np.float64)
    h[0] = 1.0 / (4.0 * spacing ** 2)
    odd = (np.abs(idx.astype(np.int64)) % 2) == 1
    h[odd] = -1.0 / (np.pi * idx[odd] * spacing) ** 2
    if fan_pitch is not None:
        g = idx * fan_pitch
        corr = np.ones(m, dtype=np.float64)
        nz = g != 0.0
        corr[nz] = (g[nz] / np.sin(g[nz])) ** 2
        h = 0.5 * h * corr
    return h


def _filter_views(rows: np.ndarray, spacing: float, fan_pitch: float | None = None) -> np.ndarray:
    n_det = rows.shape[1]
    m = _next_pow2(2 * n_det)
    kernel = _ramlak_wrapped(m, spacing, fan_pitch)
    kf = np.fft.rfft(kernel)
    padded = np.zeros((rows.shape[0], m), dtype=np.float64)
    padded[:, :n_det] = rows
    filtered = np.fft.irfft(np.fft.rfft(padded, axis=1) * kf[None, :], n=m, axis=1)
    # discrete convolution approximates the integral with measure `spacing`
    return filtered[:, :n_det] * spacing


def fbp(sino: Sinogram, grid: ImageGrid) -> Image:
    """Filtered back projection onto ``grid``.

    Deterministic; linear in the sinogram. Sparse-view inputs produce the
    usual streak artifacts, which is exactly what the comparisons expect.
    """
    geom = sino.geometry
    if geom.n_detectors < 2:
        raise GeometryError("fbp needs at least 2 detector elements")
    sino.require_finite("fbp input")

    angles = np.asarray(geom.view_angles)
    n_views = geom.n_views
    pitch = geom.detector_pitch()
    ys, xs = grid.pixel_centers()
    out = np.zeros(grid.shape, dtype=np.float64)
    half = (geom.n_detectors - 1) / 2.0

    if geom.mode == "parallel":
        q = _filter_views(sino.values, pitch)
        for v in range(n_views):
            b = angles[v]
            s = xs * np.cos(b) + ys * np.sin(b)
            out += np.interp(s / pitch + half, np.arange(geom.n_detectors), q[v],
                             left=0.0, right=0.0)
        # covers [0, pi) once or [0, 2*pi) twice; either way the measure is pi/n
        return Image(grid, out * (np.pi / n_views))

    if geom.detector_shape != "arc":
        raise GeometryError("fan-beam fbp is implemented for the equiangular arc detector")
    d_s = geom.source_to_center
    gammas = (np.arange(geom.n_detectors) - half) * pitch
    weighted = sino.values * (d_s * np.cos(gammas))[None, :]
    q = _filter_views(weighted, pitch, fan_pitch=pitch)
    for v in range(n_views):
        b = angles[v]
        sx, sy = d_s * np.cos(b), d_s * np.sin(b)
        vx = xs - sx
        vy = ys - sy
        # signed fan angle of each pixel relative to the central ray
        ux, uy = -np.cos(b), -np.sin(b)
        gamma = np.arctan2(ux * vy - uy * vx, ux * vx + uy * vy)
        l2 = vx * vx + vy * vy
        out += np.interp(gamma / pitch + half, np.arange(geom.n_detectors), q[v],
                         left=0.0, right=0.0) / l2
    return Image(grid, out * (2.0 * np.pi / n_views))


# --- SIRT ---

def sirt_step_values(channel_values: list[np.ndarray], weights: np.ndarray,
                     y: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid,
                     sw: SirtWeights) -> list[np.ndarray]:
    """One SIRT sweep: the shared residual of the weighted mean corrects every channel."""
    xbar = np.zeros(grid.shape, dtype=np.float64)
    for w, xv in zip(weights, channel_values):
        xbar += w * xv
    residual = y - project_values(xbar, geom, grid)
    if not np.all(np.isfinite(residual)):
        raise ValueError("sirt_step: residual is non-finite; diverging state")
    row_inv = sw.row_inv.reshape(geom.shape)
    col_inv = sw.col_inv.reshape(grid.shape)
    correction = col_inv * backproject_values(row_inv * residual, geom, grid)
    return [xv + correction for xv in channel_values]


def sirt_step(channel_images: list[Image], weights, sino: Sinogram, sw: SirtWeights) -> list[Image]:
    """Typed wrapper over :func:`sirt_step_values` for ensemble images."""
    if not channel_images:
        raise ValueError("need at least one channel")
    grid = channel_images[0].grid
    for im in channel_images:
        if im.grid != grid:
            raise GeometryError("channel images must share one grid")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(channel_images),) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be one per channel and sum to 1")
    values = sirt_step_values([im.values for im in channel_images], w,
                              sino.values, sino.geometry, grid, sw)
    return [Image(grid, v) for v in values]


def sirt_reconstruct(sino: Sinogram, grid: ImageGrid, n_iters: int,
                     x0: np.ndarray | None = None) -> Image:
    """Plain single-channel SIRT from ``x0`` (zero by default)."""
    sw = sirt_weights(sino.geometry, grid)
    x = np.zeros(grid.shape) if x0 is None else np.array(x0, dtype=np.float64)
    for _ in range(n_iters):
        (x,) = sirt_step_values([x], np.array([1.0]), sino.values, sino.geometry, grid, sw)
    return Image(grid, x)


# --- total variation + FISTA ---

def _tv_forward_diff(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]  # reflexive: zero difference at the far edge
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def _tv_divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    div = np.zeros_like(px)
    div[:, 0] += px[:, 0]
    div[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    div[:, -1] += -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    return div


def tv_value(x: np.ndarray) -> float:
    gx, gy = _tv_forward_diff(x)
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def tv_prox(b: np.ndarray, alpha: float, n_iters: int = 20) -> np.ndarray:
    """prox of alpha*TV via the fast dual projection scheme (fixed iteration count)."""
    if alpha <= 0.0:
        return b.copy()
    px = np.zeros_like(b)
    py = np.zeros_like(b)
    rx, ry = px.copy(), py.copy()
    t = 1.0
    step = 1.0 / (8.0 * alpha)
    for _ in range(n_iters):
        # dual ascent on the unit-ball field p; primal iterate is b + alpha*div(p)
        gx, gy = _tv_forward_diff(b + alpha * _tv_divergence(rx, ry))
        qx = rx + step * gx
        qy = ry + step * gy
        mag = np.maximum(1.0, np.sqrt(qx * qx + qy * qy))
        px_new, py_new = qx / mag, qy / mag
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        m = (t - 1.0) / t_new
        rx = px_new + m * (px_new - px)
        ry = py_new + m * (py_new - py)
        px, py, t = px_new, py_new, t_new
    return b + alpha * _tv_divergence(px, py)


def estimate_step_size(geom: FanBeamGeometry, grid: ImageGrid,
                       max_iters: int = 100, tol: float = 1e-4) -> float:
    """1/L with L = ||A||_2^2 from power iteration on A^T A."""
    rng = np.random.Generator(np.random.PCG64(1234))
    b = rng.standard_normal(grid.shape)
    b /= np.linalg.norm(b)
    lam = 0.0
    for _ in range(max_iters):
        ab = backproject_values(project_values(b, geom, grid), geom, grid)
        lam_new = float(np.linalg.norm(ab))
        if lam_new == 0.0:
            raise RuntimeError("power iteration collapsed to zero")
        b = ab / lam_new
        if abs(lam_new - lam) <= tol * lam_new:
            return 1.0 / (lam_new * 1.02)  # small margin keeps the step safely below 1/L
        lam = lam_new
    raise RuntimeError(f"power iteration did not converge in {max_iters} iterations")


@dataclass(frozen=True)
class FistaConfig:
    """FISTA-TV settings; ``step`` is 1/L or 'auto' for power iteration."""

    lam: float = 0.0
    n_iters: int = 100
    step: float | str = "auto"
    tv_inner_iters: int = 20

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def fista_tv(sino: Sinogram, grid: ImageGrid, cfg: FistaConfig,
             return_objectives: bool = False):
    """FISTA on 0.5*||Ax - y||^2 + lam*TV(x), TV prox by fixed dual iterations."""
    geom = sino.geometry
    y = sino.values
    tau = estimate_step_size(geom, grid) if cfg.step == "auto" else float(cfg.step)

    x = np.zeros(grid.shape, dtype=np.float64)
    v = x.copy()
    t = 1.0
    objectives = []
    for _ in range(cfg.n_iters):
        grad = backproject_values(project_values(v, geom, grid) - y, geom, grid)
        z = v - tau * grad
        x_new = tv_prox(z, cfg.lam * tau, cfg.tv_inner_iters) if cfg.lam > 0 else z
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        v = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if return_objectives:
            r = project_values(x, geom, grid) - y
            objectives.append(0.5 * float(np.sum(r * r)) + cfg.lam * tv_value(x))
    img = Image(grid, x)
    return (img, objectives) if return_objectives else img
