import numpy as np
import pytest

from src.config import RunConfig
from src.models import ImageGrid, ProbeGeometry, TransmitScheme

FC = 15.625e6
C = 1540.0
WAVELENGTH = C / FC


@pytest.fixture
def probe():
    return ProbeGeometry(num_elements=16, pitch=WAVELENGTH, center_frequency=FC, sound_speed=C)


@pytest.fixture
def scheme():
    return TransmitScheme.from_degrees([-5.0, 0.0, 5.0])


@pytest.fixture
def broadside():
    return TransmitScheme.from_degrees([0.0])


@pytest.fixture
def point_grid():
    """Small grid centered on (0, 30 lambda) with lambda/2 pixels."""
    half = 0.5 * WAVELENGTH
    return ImageGrid(x0=-8 * half, z0=30 * WAVELENGTH - 8 * half, dx=half, dz=half, nx=17, nz=17)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_config(tmp_path):
    """Default desk configuration with a short sequence, writing under tmp_path."""
    config = RunConfig()
    config.output_dir = str(tmp_path / "run")
    config.phantom.num_frames = 24
    config.ulm.min_track_len = 8
    config.ulm.density_min_len = 8
    return config


def random_complex(rng, shape, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
