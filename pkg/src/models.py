"""Domain types shared by the simulation, estimation and ULM modules."""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.exceptions import DomainError, ShapeMismatchError


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Wrap angles to (-pi, pi]."""
    wrapped = np.mod(np.asarray(phase, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)


@dataclass(frozen=True)
class ProbeGeometry:
    """Linear array description.

    Element positions are centered so that they sum to zero.
    """
    num_elements: int
    pitch: float
    center_frequency: float
    sound_speed: float = 1540.0

    def __post_init__(self):
        if self.num_elements < 2:
            raise DomainError(f"probe needs at least 2 elements, got {self.num_elements}")
        if not self.pitch > 0:
            raise DomainError(f"pitch must be positive, got {self.pitch}")
        if not self.center_frequency > 0:
            raise DomainError(f"center frequency must be positive, got {self.center_frequency}")
        if not self.sound_speed > 0:
            raise DomainError(f"sound speed must be positive, got {self.sound_speed}")

    @property
    def wavelength(self) -> float:
        return self.sound_speed / self.center_frequency

    @property
    def element_x(self) -> np.ndarray:
        return (np.arange(self.num_elements) - (self.num_elements - 1) / 2.0) * self.pitch

    @property
    def aperture(self) -> float:
        return self.pitch * (self.num_elements - 1)

    @property
    def omega(self) -> float:
        return 2 * np.pi * self.center_frequency


@dataclass(frozen=True)
class TransmitScheme:
    """Plane-wave compounding sequence.

    transmit_delays and transmit_apodization are per-element and optional;
    None means an ideal (zero-delay, unit-weight) aperture.
    """
    angles: Tuple[float, ...]
    pulse_cycles: int = 3
    transmit_apodization: Optional[np.ndarray] = None
    transmit_delays: Optional[np.ndarray] = None

    def __post_init__(self):
        angles = tuple(float(a) for a in np.atleast_1d(self.angles))
        object.__setattr__(self, "angles", angles)
        if not angles:
            raise DomainError("transmit scheme needs at least one angle")
        if any(abs(a) >= np.pi / 2 for a in angles):
            raise DomainError(f"plane-wave angles must satisfy |theta| < pi/2, got {angles}")
        if self.pulse_cycles < 1:
            raise DomainError(f"pulse_cycles must be >= 1, got {self.pulse_cycles}")

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    def apodization(self, num_elements: int) -> np.ndarray:
        if self.transmit_apodization is None:
            return np.ones(num_elements)
        apod = np.asarray(self.transmit_apodization, dtype=float)
        if apod.shape != (num_elements,):
            raise ShapeMismatchError(f"transmit apodization has shape {apod.shape}, expected ({num_elements},)")
        return apod

    def element_delays(self, num_elements: int) -> np.ndarray:
        if self.transmit_delays is None:
            return np.zeros(num_elements)
        delays = np.asarray(self.transmit_delays, dtype=float)
        if delays.shape != (num_elements,):
            raise ShapeMismatchError(f"transmit delays have shape {delays.shape}, expected ({num_elements},)")
        return delays

    @classmethod
    def from_degrees(cls, angles_deg: Iterable[float], pulse_cycles: int = 3) -> "TransmitScheme":
        return cls(angles=tuple(np.deg2rad(list(angles_deg))), pulse_cycles=pulse_cycles)


@dataclass
class ChannelIQ:
    """Complex baseband channel data [angles x time x elements] for one frame."""
    data: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"channel IQ must be [angles x time x elements], got shape {self.data.shape}")
        if not self.sample_rate > 0:
            raise DomainError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("channel IQ contains non-finite samples")

    @property
    def num_angles(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    @property
    def num_elements(self) -> int:
        return self.data.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.num_samples) / self.sample_rate

    def check_probe(self, probe: ProbeGeometry) -> None:
        if self.num_elements != probe.num_elements:
            raise ShapeMismatchError(
                f"channel data has {self.num_elements} elements, probe has {probe.num_elements}"
            )

    def with_data(self, data: np.ndarray) -> "ChannelIQ":
        return ChannelIQ(data=data, sample_rate=self.sample_rate, t0=self.t0)


@dataclass
class AberrationFunction:
    """Per-element complex phasor a(n) exp(i w tau(n)).

    Values are not forced into the (0, 1] amplitude range here because
    inverse and composed functions legitimately leave it; call validate()
    where the range is a contract.
    """
    values: np.ndarray
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("aberration function contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return wrap_phase(np.angle(self.values))

    def delays(self, center_frequency: float) -> np.ndarray:
        return self.phase / (2 * np.pi * center_frequency)

    def validate(self) -> "AberrationFunction":
        amp = self.amplitude
        if np.any(amp <= 0) or np.any(amp > 1 + 1e-12):
            raise DomainError(f"aberration amplitudes must lie in (0, 1], got range [{amp.min():.3g}, {amp.max():.3g}]")
        return self

    @classmethod
    def from_amplitude_phase(cls, amplitude: np.ndarray, phase: np.ndarray) -> "AberrationFunction":
        amplitude = np.asarray(amplitude, dtype=float)
        return cls(values=amplitude * np.exp(1j * wrap_phase(phase)))

    @classmethod
    def from_delays(cls, delays: np.ndarray, center_frequency: float,
                    amplitude: Optional[np.ndarray] = None) -> "AberrationFunction":
        delays = np.asarray(delays, dtype=float)
        amp = np.ones_like(delays) if amplitude is None else amplitude
        return cls(values=amp * np.exp(1j * 2 * np.pi * center_frequency * delays))

    @classmethod
    def identity(cls, num_elements: int) -> "AberrationFunction":
        return cls(values=np.ones(num_elements, dtype=np.complex128))

    def remove_piston(self) -> "AberrationFunction":
        """Remove the mean of the element-unwrapped phase."""
        unwrapped = np.unwrap(np.angle(self.values))
        piston = unwrapped.mean()
        return AberrationFunction(values=self.amplitude * np.exp(1j * (unwrapped - piston)), flags=self.flags)

    def inverse(self) -> "AberrationFunction":
        """Conjugate inverse 1/y: amplitude 1/a(n), delay -tau(n)."""
        return AberrationFunction(values=np.conj(self.values) / self.amplitude ** 2)

    def compose(self, other: "AberrationFunction") -> "AberrationFunction":
        if len(other) != len(self):
            raise ShapeMismatchError(f"cannot compose aberrations of lengths {len(self)} and {len(other)}")
        return AberrationFunction(values=self.values * other.values)


@dataclass(frozen=True)
class Scatterer:
    x: float
    z: float
    reflectivity: complex = 1.0

    def __post_init__(self):
        if not self.z > 0:
            raise DomainError(f"scatterer depth must be positive, got {self.z}")
        if not np.isfinite(self.reflectivity):
            raise DomainError("scatterer reflectivity must be finite")


@dataclass
class ScattererSet:
    """Vectorized list of point scatterers."""
    x: np.ndarray
    z: np.ndarray
    reflectivity: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        self.reflectivity = np.asarray(self.reflectivity, dtype=np.complex128).reshape(-1)
        if not (self.x.size == self.z.size == self.reflectivity.size):
            raise ShapeMismatchError("scatterer coordinate and reflectivity arrays differ in length")
        if np.any(self.z <= 0):
            raise DomainError("all scatterers must lie at z > 0")

    def __len__(self) -> int:
        return self.x.size

    @classmethod
    def empty(cls) -> "ScattererSet":
        return cls(x=np.zeros(0), z=np.zeros(0), reflectivity=np.zeros(0, dtype=np.complex128))

    @classmethod
    def from_list(cls, scatterers: Sequence[Scatterer]) -> "ScattererSet":
        if not scatterers:
            return cls.empty()
        return cls(
            x=np.array([s.x for s in scatterers]),
            z=np.array([s.z for s in scatterers]),
            reflectivity=np.array([s.reflectivity for s in scatterers], dtype=np.complex128),
        )

    @classmethod
    def concat(cls, sets: Sequence["ScattererSet"]) -> "ScattererSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            x=np.concatenate([s.x for s in sets]),
            z=np.concatenate([s.z for s in sets]),
            reflectivity=np.concatenate([s.reflectivity for s in sets]),
        )

    def scaled(self, factor: complex) -> "ScattererSet":
        return ScattererSet(x=self.x, z=self.z, reflectivity=self.reflectivity * factor)


ScattererInput = Union[ScattererSet, Sequence[Scatterer]]


def as_scatterer_set(scatterers: ScattererInput) -> ScattererSet:
    if isinstance(scatterers, ScattererSet):
        return scatterers
    return ScattererSet.from_list(list(scatterers))


@dataclass
class ScattererTimeline:
    """Moving bubbles per frame plus static speckle.

    ground_truth columns: frame, bubble_id, x, z.
    """
    bubbles: List[ScattererSet]
    bubble_ids: List[np.ndarray]
    speckle: ScattererSet
    frame_rate: float
    fov: Tuple[float, float, float, float]
    ground_truth: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["frame", "bubble_id", "x", "z"]))
    speeds: Dict[int, float] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.bubbles)


@dataclass(frozen=True)
class ImageGrid:
    """Regular pixel grid; pixel (row, col) sits at (x0 + col*dx, z0 + row*dz)."""
    x0: float
    z0: float
    dx: float
    dz: float
    nx: int
    nz: int

    def __post_init__(self):
        if not (self.dx > 0 and self.dz > 0):
            raise DomainError(f"grid spacing must be positive, got dx={self.dx}, dz={self.dz}")
        if not self.z0 > 0:
            raise DomainError(f"grid must start below the probe (z0 > 0), got {self.z0}")
        if self.nx < 1 or self.nz < 1:
            raise DomainError(f"grid extents must be >= 1, got nx={self.nx}, nz={self.nz}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nz, self.nx)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + np.arange(self.nx) * self.dx

    @property
    def z(self) -> np.ndarray:
        return self.z0 + np.arange(self.nz) * self.dz

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.z)

    def refine(self, factor: int) -> "ImageGrid":
        if factor < 1:
            raise DomainError(f"interpolation factor must be >= 1, got {factor}")
        return ImageGrid(x0=self.x0, z0=self.z0, dx=self.dx / factor, dz=self.dz / factor,
                         nx=self.nx * factor, nz=self.nz * factor)

    def to_index(self, x: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) coordinates of metric positions."""
        return (np.asarray(z) - self.z0) / self.dz, (np.asarray(x) - self.x0) / self.dx

    def to_position(self, row: np.ndarray, col: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.x0 + np.asarray(col) * self.dx, self.z0 + np.asarray(row) * self.dz

    def describe(self) -> dict:
        return {"x0": self.x0, "z0": self.z0, "dx": self.dx, "dz": self.dz, "nx": self.nx, "nz": self.nz}


@dataclass
class BeamformedImage:
    grid: ImageGrid
    pixels: np.ndarray
    zero_filled: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.complex128)
        if self.pixels.shape != self.grid.shape:
            raise ShapeMismatchError(f"image pixels {self.pixels.shape} do not match grid {self.grid.shape}")

    @property
    def envelope(self) -> np.ndarray:
        return np.abs(self.pixels)


@dataclass
class RealignedPatch:
    """Rephased channel data around one bubble, [angles x frames x time x elements]."""
    data: np.ndarray
    track_ref: int
    center_positions: np.ndarray
    zero_padded: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"realigned patch must be 4-D, got shape {self.data.shape}")
        if self.data.shape[2] % 2 != 1:
            raise ShapeMismatchError(f"realignment window must have an odd sample count, got {self.data.shape[2]}")
        self.center_positions = np.asarray(self.center_positions, dtype=float).reshape(-1, 2)

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def num_elements(self) -> int:
        return self.data.shape[3]


@dataclass
class CorrectionProfile:
    """Receive delays/weights and transmit delay injected into the beamformer.

    rx arrays have shape (Ne,) or (nz, nx, Ne); tx_delay is a scalar or (nz, nx).
    """
    rx_delays: np.ndarray
    rx_weights: np.ndarray
    tx_delay: Union[float, np.ndarray] = 0.0

    def __post_init__(self):
        self.rx_delays = np.asarray(self.rx_delays, dtype=float)
        self.rx_weights = np.asarray(self.rx_weights, dtype=float)
        if self.rx_delays.shape != self.rx_weights.shape:
            raise ShapeMismatchError(
                f"rx delays {self.rx_delays.shape} and weights {self.rx_weights.shape} differ in shape"
            )
        if not (np.all(np.isfinite(self.rx_delays)) and np.all(np.isfinite(self.rx_weights))
                and np.all(np.isfinite(self.tx_delay))):
            raise DomainError("correction profile contains non-finite values")

    @property
    def num_elements(self) -> int:
        return self.rx_delays.shape[-1]

    @classmethod
    def identity(cls, num_elements: int) -> "CorrectionProfile":
        return cls(rx_delays=np.zeros(num_elements), rx_weights=np.ones(num_elements), tx_delay=0.0)


@dataclass
class Track:
    """Time-ordered bubble positions with consecutive frame indices."""
    track_id: int
    frames: np.ndarray
    x: np.ndarray
    z: np.ndarray
    frame_rate: float = 1.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=int).reshape(-1)
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        if not (self.frames.size == self.x.size == self.z.size):
            raise ShapeMismatchError("track frame/x/z arrays differ in length")
        if self.frames.size > 1 and np.any(np.diff(self.frames) != 1):
            raise DomainError(f"track {self.track_id} frame indices must be consecutive")

    def __len__(self) -> int:
        return self.frames.size

    @property
    def mean_position(self) -> Tuple[float, float]:
        return float(self.x.mean()), float(self.z.mean())

    @property
    def mean_velocity(self) -> Tuple[float, float]:
        if len(self) < 2:
            return 0.0, 0.0
        return (float(np.mean(np.diff(self.x))) * self.frame_rate,
                float(np.mean(np.diff(self.z))) * self.frame_rate)

    def head(self, count: int) -> "Track":
        return Track(self.track_id, self.frames[:count], self.x[:count], self.z[:count], self.frame_rate)


def tracks_to_frame(tracks: Sequence[Track]) -> pd.DataFrame:
    rows = [
        {"track_id": t.track_id, "frame": int(f), "x": float(x), "z": float(z)}
        for t in tracks for f, x, z in zip(t.frames, t.x, t.z)
    ]
    return pd.DataFrame(rows, columns=["track_id", "frame", "x", "z"])


def tracks_from_frame(df: pd.DataFrame, frame_rate: float = 1.0) -> List[Track]:
    tracks = []
    for track_id, group in df.sort_values(["track_id", "frame"]).groupby("track_id", sort=True):
        tracks.append(Track(int(track_id), group["frame"].to_numpy(), group["x"].to_numpy(),
                            group["z"].to_numpy(), frame_rate))
    return tracks


@dataclass
class DensityMap:
    grid: ImageGrid
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.shape != self.grid.shape:
            raise ShapeMismatchError(f"density counts {self.counts.shape} do not match grid {self.grid.shape}")
        if np.any(self.counts < 0):
            raise DomainError("density counts must be non-negative")


@dataclass
class AberrationMap:
    """Aberration function per pixel of a coarse grid, [nz x nx x Ne]."""
    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 3 or self.values.shape[:2] != self.grid.shape:
            raise ShapeMismatchError(f"aberration map {self.values.shape} does not match grid {self.grid.shape}")

    def at(self, row: int, col: int) -> AberrationFunction:
        return AberrationFunction(values=self.values[row, col])


@dataclass
class CoherenceCurve:
    values: np.ndarray
    auc: float

    @property
    def lags(self) -> np.ndarray:
        return np.arange(self.values.size)


@dataclass
class FrcResult:
    frequencies: np.ndarray
    frc: np.ndarray
    threshold: np.ndarray
    ring_counts: np.ndarray
    resolution: Optional[float]
    snr: float
