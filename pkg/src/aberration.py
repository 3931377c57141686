"""Near-field phase-screen aberrators: generation, application and I/O."""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

from src.config import AberrationConfig
from src.core import delay_channels
from src.exceptions import DomainError, ShapeMismatchError
from src.models import AberrationFunction, ChannelIQ, ProbeGeometry, TransmitScheme, wrap_phase
from src.tensor_io import COMPLEX128, read_tensor, write_tensor

logger = logging.getLogger(__name__)


def draw_knots(config: AberrationConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw i.i.d. uniform knot amplitudes and phases (radians)."""
    if config.smoothing_points < 2:
        raise DomainError(f"smoothing_points must be >= 2, got {config.smoothing_points}")
    if not 0 < config.amp_min <= 1:
        raise DomainError(f"amp_min must be in (0, 1], got {config.amp_min}")
    if not config.phase_bound > 0:
        raise DomainError(f"phase_bound must be positive, got {config.phase_bound}")
    k = config.smoothing_points
    amplitudes = rng.uniform(config.amp_min, 1.0, size=k)
    phases = 2 * np.pi * rng.uniform(-config.phase_bound, config.phase_bound, size=k)
    return amplitudes, phases


def aberration_from_knots(amplitudes: np.ndarray, phases: np.ndarray, num_elements: int,
                          amp_min: float = 0.0) -> AberrationFunction:
    """Spline knot values across the aperture and evaluate at every element.

    Knots sit at evenly spaced element indices spanning the aperture.
    Amplitudes are clamped to [amp_min, 1] and phases wrapped.
    """
    amplitudes = np.asarray(amplitudes, dtype=float)
    phases = np.asarray(phases, dtype=float)
    if amplitudes.shape != phases.shape or amplitudes.size < 2:
        raise DomainError("need at least two knots with matching amplitude and phase")
    knots = np.linspace(0, num_elements - 1, amplitudes.size)
    elements = np.arange(num_elements)
    amp = CubicSpline(knots, amplitudes)(elements)
    phase = CubicSpline(knots, phases)(elements)
    amp = np.clip(amp, max(amp_min, np.finfo(float).tiny), 1.0)
    return AberrationFunction.from_amplitude_phase(amp, wrap_phase(phase))


def generate_aberration(config: AberrationConfig, probe: ProbeGeometry,
                        rng: Optional[np.random.Generator] = None) -> AberrationFunction:
    """Draw a smooth random aberration function.

    Args:
        config: Bounds, knot count and seed
        probe: Probe supplying the element count
        rng: Generator to draw from; a fresh one seeded by config.rng_seed when None

    Returns:
        AberrationFunction: Amplitudes in [amp_min, 1], phases in (-pi, pi]
    """
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    amplitudes, phases = draw_knots(config, rng)
    return aberration_from_knots(amplitudes, phases, probe.num_elements, config.amp_min).validate()


def _check_length(ab: AberrationFunction, num_elements: int) -> None:
    if len(ab) != num_elements:
        raise ShapeMismatchError(f"aberration has {len(ab)} elements, data has {num_elements}")


def apply_aberration_rx(iq: ChannelIQ, ab: AberrationFunction, probe: ProbeGeometry) -> ChannelIQ:
    """Scale channel n by a(n) and delay it by tau(n)."""
    iq.check_probe(probe)
    _check_length(ab, iq.num_elements)
    delayed = delay_channels(iq, ab.delays(probe.center_frequency), probe.center_frequency)
    return delayed.with_data(delayed.data * ab.amplitude[None, None, :])


def aberrate_transmit(scheme: TransmitScheme, ab: AberrationFunction, probe: ProbeGeometry) -> TransmitScheme:
    """Add tau(n) to the transmit delays and multiply the apodization by a(n)."""
    _check_length(ab, probe.num_elements)
    ne = probe.num_elements
    return replace(
        scheme,
        transmit_delays=scheme.element_delays(ne) + ab.delays(probe.center_frequency),
        transmit_apodization=scheme.apodization(ne) * ab.amplitude,
    )


def write_aberration(path: Union[str, Path], ab: AberrationFunction) -> Path:
    return write_tensor(path, ab.values, COMPLEX128)


def read_aberration(path: Union[str, Path]) -> AberrationFunction:
    values = read_tensor(path)
    if values.ndim != 1:
        raise ShapeMismatchError(f"aberration tensor must be 1-D, got shape {values.shape}")
    return AberrationFunction(values=values)


def aberration_to_frame(ab: AberrationFunction) -> pd.DataFrame:
    return pd.DataFrame({
        "element": np.arange(len(ab)),
        "amplitude": ab.amplitude,
        "phase_rad": ab.phase,
    })


def write_aberration_csv(path: Union[str, Path], ab: AberrationFunction) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    aberration_to_frame(ab).to_csv(path, index=False)
    return path


def read_aberration_csv(path: Union[str, Path]) -> AberrationFunction:
    df = pd.read_csv(path)
    missing = {"element", "amplitude", "phase_rad"} - set(df.columns)
    if missing:
        raise DomainError(f"aberration CSV {path} lacks columns {sorted(missing)}")
    df = df.sort_values("element")
    return AberrationFunction.from_amplitude_phase(df["amplitude"].to_numpy(), df["phase_rad"].to_numpy())
