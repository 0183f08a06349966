"""Image grids, scan geometry and the typed arrays that live on them.

Coordinate conventions used throughout the package:

* physical coordinates are in mm, origin at the rotation axis;
* an ``ImageGrid`` covers ``[ox - nx*p/2, ox + nx*p/2] x [oy - ny*p/2, oy + ny*p/2]``
  where ``p`` is the pixel size and ``(ox, oy)`` the center offset;
* image arrays have shape ``(ny, nx)``; row index increases with +y,
  column index with +x (previews are flipped vertically for display);
* a view angle ``beta`` places the fan-beam source at
  ``(d_s*cos(beta), d_s*sin(beta))``; in parallel mode the detector axis is
  ``(cos(beta), sin(beta))`` and rays travel along ``(-sin(beta), cos(beta))``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImageGrid",
    "Image",
    "FanBeamGeometry",
    "Sinogram",
    "SirtWeights",
    "GeometryError",
    "geometry_to_json",
    "geometry_from_json",
    "grid_to_json",
    "grid_from_json",
    "geometry_hash",
]


class GeometryError(ValueError):
    """Invalid geometry, grid or a mismatch between the two."""


@dataclass(frozen=True)
class ImageGrid:
    """Discretized reconstruction domain."""

    nx: int
    ny: int
    pixel_size: float
    center_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise GeometryError(f"grid must be at least 1x1, got {self.nx}x{self.ny}")
        if not (self.pixel_size > 0.0 and math.isfinite(self.pixel_size)):
            raise GeometryError(f"pixel_size must be positive, got {self.pixel_size}")
        object.__setattr__(self, "center_offset", (float(self.center_offset[0]), float(self.center_offset[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def width(self) -> float:
        return self.nx * self.pixel_size

    @property
    def height(self) -> float:
        return self.ny * self.pixel_size

    def origin(self) -> tuple[float, float]:
        """Lower-left corner (x0, y0) of the grid in mm."""
        ox, oy = self.center_offset
        return (ox - 0.5 * self.width, oy - 0.5 * self.height)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates as broadcastable (y[ny,1], x[1,nx]) arrays."""
        x0, y0 = self.origin()
        p = self.pixel_size
        xs = x0 + (np.arange(self.nx, dtype=np.float64) + 0.5) * p
        ys = y0 + (np.arange(self.ny, dtype=np.float64) + 0.5) * p
        return ys[:, None], xs[None, :]


@dataclass(frozen=True)
class Image:
    """Attenuation map (1/mm) on an :class:`ImageGrid`."""

    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.size != self.grid.n_pixels:
            raise GeometryError(
                f"image has {arr.size} values, grid wants {self.grid.n_pixels}"
            )
        object.__setattr__(self, "values", arr.reshape(self.grid.shape))

    def require_finite(self, label: str = "image") -> None:
        if not np.all(np.isfinite(self.values)):
            bad = int(np.count_nonzero(~np.isfinite(self.values)))
            raise ValueError(f"{label} contains {bad} non-finite values")


@dataclass(frozen=True)
class FanBeamGeometry:
    """Scanner description for one acquisition.

    ``detector_width_total`` is the arc length (mm) at the detector radius for
    ``mode='fan'`` with an equiangular arc, or the linear width for flat/parallel
    detectors. ``view_angles`` are radians in [0, 2*pi).
    """

    source_to_center: float
    center_to_detector: float
    n_detectors: int
    detector_width_total: float
    view_angles: tuple[float, ...]
    mode: str = "fan"
    detector_shape: str = "arc"  # 'arc' (equiangular) or 'flat'; ignored in parallel mode

    def __post_init__(self):
        if self.mode not in ("fan", "parallel"):
            raise GeometryError(f"mode must be 'fan' or 'parallel', got {self.mode!r}")
        if self.detector_shape not in ("arc", "flat"):
            raise GeometryError(f"detector_shape must be 'arc' or 'flat', got {self.detector_shape!r}")
        if self.mode == "fan":
            if not (self.source_to_center > 0 and self.center_to_detector > 0):
                raise GeometryError("source/detector distances must be positive")
        if self.n_detectors < 1:
            raise GeometryError("need at least one detector element")
        if not (self.detector_width_total > 0):
            raise GeometryError("detector width must be positive")
        angles = tuple(float(a) for a in self.view_angles)
        if len(angles) == 0:
            raise GeometryError("view_angles must be nonempty")
        for a in angles:
            if not (0.0 <= a < 2.0 * math.pi):
                raise GeometryError(f"view angle {a} outside [0, 2*pi)")
        object.__setattr__(self, "view_angles", angles)

    @property
    def n_views(self) -> int:
        return len(self.view_angles)

    @property
    def shape(self) -> tuple[int, int]:
        """Sinogram shape (n_views, n_detectors)."""
        return (self.n_views, self.n_detectors)

    def detector_pitch(self) -> float:
        """Per-element pitch: radians (arc fan) or mm (flat fan / parallel)."""
        if self.mode == "fan" and self.detector_shape == "arc":
            radius = self.source_to_center + self.center_to_detector
            return self.detector_width_total / radius / self.n_detectors
        return self.detector_width_total / self.n_detectors

    def with_angles(self, angles) -> "FanBeamGeometry":
        return FanBeamGeometry(
            source_to_center=self.source_to_center,
            center_to_detector=self.center_to_detector,
            n_detectors=self.n_detectors,
            detector_width_total=self.detector_width_total,
            view_angles=tuple(float(a) for a in angles),
            mode=self.mode,
            detector_shape=self.detector_shape,
        )


@dataclass(frozen=True)
class Sinogram:
    """Line integrals (unitless attenuation * mm), shape (n_views, n_detectors)."""

    geometry: FanBeamGeometry
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.shape != self.geometry.shape:
            raise GeometryError(
                f"sinogram shape {arr.shape} does not match geometry {self.geometry.shape}"
            )
        object.__setattr__(self, "values", arr)

    def require_finite(self, label: str = "sinogram") -> None:
        if not np.all(np.isfinite(self.values)):
            bad = int(np.count_nonzero(~np.isfinite(self.values)))
            raise ValueError(f"{label} contains {bad} non-finite values")


@dataclass(frozen=True)
class SirtWeights:
    """Reciprocal row/column sums of the system matrix (guarded zeros outside FOV)."""

    row_inv: np.ndarray  # length n_views*n_detectors, 1/sum_j h_ij
    col_inv: np.ndarray  # length ny*nx, 1/sum_i h_ij
    grid: ImageGrid = field(repr=False, default=None)
    geom: FanBeamGeometry = field(repr=False, default=None)

    def __post_init__(self):
        row = np.asarray(self.row_inv, dtype=np.float64).ravel()
        col = np.asarray(self.col_inv, dtype=np.float64).ravel()
        for name, arr in (("row_inv", row), ("col_inv", col)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        object.__setattr__(self, "row_inv", row)
        object.__setattr__(self, "col_inv", col)


# --- JSON serialization (angles stored in radians as 64-bit floats) ---

def grid_to_json(grid: ImageGrid) -> dict:
    return {
        "nx": grid.nx,
        "ny": grid.ny,
        "pixel_size": grid.pixel_size,
        "center_offset": list(grid.center_offset),
    }


def grid_from_json(doc: dict) -> ImageGrid:
    return ImageGrid(
        nx=int(doc["nx"]),
        ny=int(doc["ny"]),
        pixel_size=float(doc["pixel_size"]),
        center_offset=tuple(doc.get("center_offset", (0.0, 0.0))),
    )


def geometry_to_json(geom: FanBeamGeometry) -> dict:
    return {
        "source_to_center": geom.source_to_center,
        "center_to_detector": geom.center_to_detector,
        "n_detectors": geom.n_detectors,
        "detector_width_total": geom.detector_width_total,
        "view_angles": [float(a) for a in geom.view_angles],
        "mode": geom.mode,
        "detector_shape": geom.detector_shape,
    }


def geometry_from_json(doc: dict) -> FanBeamGeometry:
    return FanBeamGeometry(
        source_to_center=float(doc["source_to_center"]),
        center_to_detector=float(doc["center_to_detector"]),
        n_detectors=int(doc["n_detectors"]),
        detector_width_total=float(doc["detector_width_total"]),
        view_angles=tuple(float(a) for a in doc["view_angles"]),
        mode=doc.get("mode", "fan"),
        detector_shape=doc.get("detector_shape", "arc"),
    )


def geometry_hash(geom: FanBeamGeometry, grid: ImageGrid | None = None) -> str:
    """Stable content hash used to tag files with the acquisition they belong to."""
    doc = {"geometry": geometry_to_json(geom)}
    if grid is not None:
        doc["grid"] = grid_to_json(grid)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
