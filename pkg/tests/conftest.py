"""Shared fixtures: small reference geometries and cached trained models.

Trained score models are expensive, so they are built once and cached under
tests/_cache keyed by their training configuration; delete the directory to
force retraining.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dosmct.grids import FanBeamGeometry, ImageGrid
from dosmct.phantoms import random_ellipse_images
from dosmct.score import (
    ConvDenoiser,
    NoiseSchedule,
    TrainConfig,
    dsm_train,
    load_checkpoint,
    save_checkpoint,
)

CACHE_DIR = Path(__file__).parent / "_cache"


def small_parallel_geom(n_views: int = 16, n_det: int = 24) -> FanBeamGeometry:
    """Well-conditioned 8x8 test geometry (full column rank, dense-oracle scale)."""
    angles = tuple((np.linspace(0, np.pi, n_views, endpoint=False) + 0.123) % (2 * np.pi))
    return FanBeamGeometry(30.0, 15.0, n_det, 13.2, angles, "parallel")


def small_fan_geom(n_views: int = 7, n_det: int = 15) -> FanBeamGeometry:
    angles = tuple(np.linspace(0.1, 2 * np.pi, n_views, endpoint=False) % (2 * np.pi))
    return FanBeamGeometry(20.0, 10.0, n_det, 18.0, angles, "fan", "arc")


def paper_fan_geom(n_views: int = 720, n_det: int = 720) -> FanBeamGeometry:
    """The configured acquisition: 1500/500 mm distances, 413 mm arc detector."""
    angles = tuple(np.linspace(0, 2 * np.pi, n_views, endpoint=False))
    return FanBeamGeometry(1500.0, 500.0, n_det, 413.0, angles, "fan", "arc")


@pytest.fixture(scope="session")
def grid8() -> ImageGrid:
    return ImageGrid(8, 8, 1.0)


@pytest.fixture(scope="session")
def grid64() -> ImageGrid:
    return ImageGrid(64, 64, 1.0)


def _cached_model(name: str, builder):
    CACHE_DIR.mkdir(exist_ok=True)
    path = CACHE_DIR / f"{name}.ckpt"
    if path.exists():
        return load_checkpoint(path)
    model = builder()
    save_checkpoint(path, model)
    return model


@pytest.fixture(scope="session")
def ellipse_score_model():
    """64x64 score model trained on the random-ellipse corpus (pipeline prior)."""

    def build():
        grid = ImageGrid(64, 64, 1.0)
        data = random_ellipse_images(2000, grid, seed=101)
        sched = NoiseSchedule(0.01, 50.0, 200)
        model = ConvDenoiser(sched, hidden_channels=16, data_scale=1.0, seed=0)
        model, _ = dsm_train(data, sched, model,
                             TrainConfig(learning_rate=2e-3, batch_size=8,
                                         epochs=30, steps_per_epoch=100, seed=0))
        model, _ = dsm_train(data, sched, model,
                             TrainConfig(learning_rate=5e-4, batch_size=8,
                                         epochs=10, steps_per_epoch=100, seed=1))
        return model

    return _cached_model("ellipse64_h16_t200", build)
