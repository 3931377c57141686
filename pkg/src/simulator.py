"""Analytic pulse-summation simulator for plane-wave microbubble acquisitions."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.aberration import aberrate_transmit, read_aberration, write_aberration
from src.beamform import das_beamform
from src.config import PhantomConfig, VesselConfig
from src.core import das_delay, demodulate_iq
from src.exceptions import DomainError
from src.models import (AberrationFunction, BeamformedImage, ChannelIQ, ImageGrid, ProbeGeometry, ScattererInput, ScattererSet,
                        ScattererTimeline, TransmitScheme, as_scatterer_set)
from src.tensor_io import COMPLEX128, read_tensor, write_tensor

logger = logging.getLogger(__name__)

MODES = ("exact", "fast")
RF_OVERSAMPLING = 8
DIRECTIVITY_CUTOFF = np.deg2rad(60.0)
CHUNK = 1 << 18


def poiseuille_speed(r: np.ndarray, radius: float, peak_speed: float) -> np.ndarray:
    """Laminar profile v(r) = v_peak (1 - (r/R)^2), zero outside the lumen."""
    ratio = np.asarray(r, dtype=float) / radius
    return np.where(np.abs(ratio) <= 1, peak_speed * (1 - ratio ** 2), 0.0)


def directivity(xs: np.ndarray, zs: np.ndarray, xn: np.ndarray) -> np.ndarray:
    """Single-lobe cosine element directivity with a hard cutoff at 60 degrees."""
    cos_angle = zs / np.hypot(zs, xs - xn)
    return np.where(cos_angle >= np.cos(DIRECTIVITY_CUTOFF), cos_angle, 0.0)


def default_duration(scatterers: ScattererSet, probe: ProbeGeometry, scheme: TransmitScheme) -> float:
    """Record length covering every echo, or 128 wavelengths of travel when empty."""
    c = probe.sound_speed
    pulse = scheme.pulse_cycles / probe.center_frequency
    if len(scatterers) == 0:
        return 2 * 64 * probe.wavelength / c
    half_aperture = probe.aperture / 2
    reach = np.max(scatterers.z + np.abs(scatterers.x) + np.hypot(scatterers.z, np.abs(scatterers.x) + half_aperture))
    return reach / c + 2 * probe.wavelength / c + 2 * pulse


def fov_duration(fov: Tuple[float, float, float, float], probe: ProbeGeometry, scheme: TransmitScheme) -> float:
    """Record length covering echoes from anywhere inside the field of view."""
    x_far = max(abs(fov[0]), abs(fov[1]))
    corners = ScattererSet(x=[x_far], z=[fov[3]], reflectivity=[0.0])
    return default_duration(corners, probe, scheme)


class PulseAccumulator:
    """Adds Hann-windowed tone bursts into an RF buffer [angles x time x elements].

    The buffer holds the positive-frequency part of the RF signal, so a
    complex reflectivity w contributes 0.5 w envelope exp(i 2 pi fc t) and
    the channel data stays linear in w over the complex numbers.
    """

    def __init__(self, probe: ProbeGeometry, scheme: TransmitScheme, num_samples: int):
        self.fc = probe.center_frequency
        self.fs = RF_OVERSAMPLING * self.fc
        self.duration = scheme.pulse_cycles / self.fc
        self.half_len = int(np.ceil(0.5 * self.duration * self.fs)) + 1
        self.num_samples = num_samples
        self.num_elements = probe.num_elements
        self.rf = np.zeros((scheme.num_angles, num_samples, probe.num_elements), dtype=np.complex128)

    def add(self, angle: int, arrivals: np.ndarray, weights: np.ndarray, elements: np.ndarray) -> None:
        """Insert one pulse per (arrival, weight, receive element) triple."""
        arrivals = arrivals.reshape(-1)
        weights = weights.reshape(-1)
        elements = elements.reshape(-1)
        keep = weights != 0
        arrivals, weights, elements = arrivals[keep], weights[keep], elements[keep]
        size = self.num_samples * self.num_elements
        buffer = np.zeros(size, dtype=np.complex128)
        for start in range(0, arrivals.size, CHUNK):
            a = arrivals[start:start + CHUNK]
            w = weights[start:start + CHUNK]
            e = elements[start:start + CHUNK]
            center = np.round(a * self.fs).astype(np.int64)
            for k in range(-self.half_len, self.half_len + 1):
                n = center + k
                t_rel = n / self.fs - a
                inside = (np.abs(t_rel) <= 0.5 * self.duration) & (n >= 0) & (n < self.num_samples)
                if not np.any(inside):
                    continue
                t_in = t_rel[inside]
                envelope = 0.5 * (1 + np.cos(2 * np.pi * t_in / self.duration))
                values = 0.5 * w[inside] * np.exp(2j * np.pi * self.fc * t_in) * envelope
                index = n[inside] * self.num_elements + e[inside]
                buffer += (np.bincount(index, weights=values.real, minlength=size)
                           + 1j * np.bincount(index, weights=values.imag, minlength=size))
        self.rf[angle] += buffer.reshape(self.num_samples, self.num_elements)


def _fast_arrivals(scatterers: ScattererSet, probe: ProbeGeometry, theta: float,
                   ab: Optional[AberrationFunction]) -> Tuple[np.ndarray, np.ndarray]:
    xn = probe.element_x[None, :]
    xs = scatterers.x[:, None]
    zs = scatterers.z[:, None]
    arrivals = das_delay(xs, zs, theta, xn, probe.sound_speed)
    weights = scatterers.reflectivity[:, None] * directivity(xs, zs, xn)
    if ab is not None:
        arrivals = arrivals + ab.delays(probe.center_frequency)[None, :]
        weights = weights * ab.amplitude[None, :]
    return arrivals, weights


def _synthesize_rf(scatterers: ScattererSet, probe: ProbeGeometry, scheme: TransmitScheme,
                   ab: Optional[AberrationFunction], mode: str, num_samples: int) -> np.ndarray:
    acc = PulseAccumulator(probe, scheme, num_samples)
    if len(scatterers) == 0:
        return acc.rf
    ne = probe.num_elements
    xn = probe.element_x
    c = probe.sound_speed
    receive = np.broadcast_to(np.arange(ne)[None, :], (len(scatterers), ne))
    if mode == "fast":
        for a, theta in enumerate(scheme.angles):
            arrivals, weights = _fast_arrivals(scatterers, probe, theta, ab)
            acc.add(a, arrivals, weights, receive)
        return acc.rf

    tx_scheme = aberrate_transmit(scheme, ab, probe) if ab is not None else scheme
    tx_delays = tx_scheme.element_delays(ne)
    tx_apod = tx_scheme.apodization(ne)
    rx_delay = ab.delays(probe.center_frequency) if ab is not None else np.zeros(ne)
    rx_amp = ab.amplitude if ab is not None else np.ones(ne)
    xs = scatterers.x[:, None]
    zs = scatterers.z[:, None]
    back = np.hypot(zs, xs - xn[None, :]) / c + rx_delay[None, :]
    back_weight = directivity(xs, zs, xn[None, :]) * rx_amp[None, :] * scatterers.reflectivity[:, None]
    for a, theta in enumerate(scheme.angles):
        for et in range(ne):
            if tx_apod[et] == 0:
                continue
            out = xn[et] * np.sin(theta) / c + tx_delays[et] + np.hypot(scatterers.z, scatterers.x - xn[et]) / c
            out_weight = tx_apod[et] * directivity(scatterers.x, scatterers.z, xn[et]) / ne
            acc.add(a, out[:, None] + back, out_weight[:, None] * back_weight, receive)
    return acc.rf


def _add_noise(iq: ChannelIQ, noise_fraction: float, rng: np.random.Generator) -> ChannelIQ:
    if noise_fraction <= 0:
        return iq
    rms = np.sqrt(np.mean(np.abs(iq.data) ** 2))
    if rms == 0:
        return iq
    sigma = noise_fraction * rms / np.sqrt(2)
    noise = sigma * (rng.standard_normal(iq.data.shape) + 1j * rng.standard_normal(iq.data.shape))
    return iq.with_data(iq.data + noise)


def simulate_frame(scatterers: ScattererInput, probe: ProbeGeometry, scheme: TransmitScheme,
                   ab: Optional[AberrationFunction] = None, mode: str = "fast", noise_fraction: float = 0.0,
                   rng_seed: Optional[int] = None, duration: Optional[float] = None) -> ChannelIQ:
    """Simulate one frame of plane-wave channel IQ.

    Args:
        scatterers: Point scatterers (list of Scatterer or a ScattererSet)
        probe: Probe geometry
        scheme: Plane-wave transmit sequence
        ab: Aberration applied on receive (both modes) and transmit (exact mode)
        mode: 'exact' sums every transmit element, 'fast' assumes an ideal plane wave
        noise_fraction: Complex Gaussian noise std relative to the noiseless RMS
        rng_seed: Seed for the noise generator
        duration: Record length in seconds; derived from the scatterers when None

    Returns:
        ChannelIQ: Demodulated data sampled at the center frequency

    Raises:
        DomainError: If mode is unknown
    """
    if mode not in MODES:
        raise DomainError(f"unknown simulation mode '{mode}', expected one of {MODES}")
    scatterers = as_scatterer_set(scatterers)
    if ab is not None and len(ab) != probe.num_elements:
        raise DomainError(f"aberration has {len(ab)} elements, probe has {probe.num_elements}")
    if duration is None:
        duration = default_duration(scatterers, probe, scheme)
    fs_rf = RF_OVERSAMPLING * probe.center_frequency
    num_samples = int(np.ceil(duration * fs_rf))
    rf = _synthesize_rf(scatterers, probe, scheme, ab, mode, num_samples)
    iq = demodulate_iq(rf, fs_rf, probe)
    return _add_noise(iq, noise_fraction, np.random.default_rng(rng_seed))


def simulate_sequence(timeline: ScattererTimeline, probe: ProbeGeometry, scheme: TransmitScheme,
                      ab: Optional[AberrationFunction] = None, mode: str = "fast", noise_fraction: float = 0.0,
                      rng_seed: int = 0, workers: int = 1, duration: Optional[float] = None) -> List[ChannelIQ]:
    """Simulate every frame of a timeline.

    Static speckle is simulated once and added to each frame; noise is drawn
    per frame from a generator seeded by (rng_seed, frame).
    """
    if timeline.num_frames == 0:
        raise DomainError("timeline has no frames")
    if duration is None:
        duration = fov_duration(timeline.fov, probe, scheme)
    logger.info(f"Simulating {timeline.num_frames} frames ({mode} mode, {len(timeline.speckle)} speckle points)")
    static = simulate_frame(timeline.speckle, probe, scheme, ab, mode, 0.0, duration=duration)

    def run(frame: int) -> ChannelIQ:
        moving = simulate_frame(timeline.bubbles[frame], probe, scheme, ab, mode, 0.0, duration=duration)
        combined = moving.with_data(moving.data + static.data)
        return _add_noise(combined, noise_fraction, np.random.default_rng([rng_seed, frame]))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(run, range(timeline.num_frames)))


def _polyline(path: Sequence[Sequence[float]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    points = np.asarray(path, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2 or points.shape[1] != 2:
        raise DomainError(f"vessel path needs at least two [x, z] vertices, got {points.shape}")
    seg = np.diff(points, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths == 0):
        raise DomainError("vessel path has repeated vertices")
    return points, lengths, np.concatenate([[0.0], np.cumsum(lengths)])


def _point_on_path(points: np.ndarray, lengths: np.ndarray, cumulative: np.ndarray,
                   s: np.ndarray, offset: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    seg = np.clip(np.searchsorted(cumulative, s, side="right") - 1, 0, lengths.size - 1)
    tangent = (points[seg + 1] - points[seg]) / lengths[seg, None]
    base = points[seg] + tangent * (s - cumulative[seg])[:, None]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    pos = base + normal * offset[:, None]
    return pos[:, 0], pos[:, 1]


def vessel_volume_mm3(vessel: VesselConfig) -> float:
    _, lengths, _ = _polyline(vessel.path)
    return float(np.pi * vessel.radius ** 2 * lengths.sum() * 1e9)


def make_speckle(fov: Tuple[float, float, float, float], wavelength: float, density: float, scale: float,
                 rng: np.random.Generator) -> ScattererSet:
    """Uniform static scatterers with circular complex Gaussian reflectivity."""
    x_min, x_max, z_min, z_max = fov
    count = int(round(density * (x_max - x_min) * (z_max - z_min) / wavelength ** 2))
    if count == 0:
        return ScattererSet.empty()
    reflectivity = scale * (rng.standard_normal(count) + 1j * rng.standard_normal(count)) / np.sqrt(2)
    return ScattererSet(x=rng.uniform(x_min, x_max, count), z=rng.uniform(z_min, z_max, count),
                        reflectivity=reflectivity)


def make_flow_phantom(config: PhantomConfig, probe: ProbeGeometry,
                      fov: Tuple[float, float, float, float]) -> ScattererTimeline:
    """Seed bubbles in cylindrical vessels and advect them with Poiseuille flow.

    Each bubble gets a uniform position in the vessel cross-section; its
    in-plane component offsets it from the centerline and its radial distance
    sets its speed. Bubbles leaving a path re-enter at its start under a new id.

    Args:
        config: Phantom parameters
        probe: Probe geometry (wavelength for the speckle density)
        fov: (x_min, x_max, z_min, z_max) in meters

    Returns:
        ScattererTimeline: Bubbles per frame, static speckle and ground truth

    Raises:
        DomainError: If no vessel is configured or a parameter is invalid
    """
    if not config.vessels:
        raise DomainError("flow phantom needs at least one vessel")
    if not config.bubble_concentration > 0 or not config.frame_rate > 0:
        raise DomainError("bubble concentration and frame rate must be positive")
    rng = np.random.default_rng(config.rng_seed)
    x_min, x_max, z_min, z_max = fov

    seeded = []
    for vessel in config.vessels:
        if not vessel.radius > 0:
            raise DomainError(f"vessel radius must be positive, got {vessel.radius}")
        points, lengths, cumulative = _polyline(vessel.path)
        count = rng.poisson(config.bubble_concentration * vessel_volume_mm3(vessel))
        r = vessel.radius * np.sqrt(rng.uniform(0, 1, count))
        phi = rng.uniform(0, 2 * np.pi, count)
        seeded.append({
            "geometry": (points, lengths, cumulative),
            "s0": rng.uniform(0, cumulative[-1], count),
            "offset": r * np.cos(phi),
            "speed": poiseuille_speed(r, vessel.radius, vessel.peak_speed),
        })
    logger.info(f"Seeded {sum(v['s0'].size for v in seeded)} bubbles in {len(seeded)} vessels")

    ids: Dict[Tuple[int, int, int], int] = {}
    speeds: Dict[int, float] = {}
    bubbles, bubble_ids, rows = [], [], []
    for frame in range(config.num_frames):
        xs, zs, fids = [], [], []
        t = frame / config.frame_rate
        for v_index, vessel in enumerate(seeded):
            points, lengths, cumulative = vessel["geometry"]
            travelled = vessel["s0"] + vessel["speed"] * t
            passes = np.floor(travelled / cumulative[-1]).astype(int)
            x, z = _point_on_path(points, lengths, cumulative, travelled - passes * cumulative[-1], vessel["offset"])
            for b in range(x.size):
                if not (x_min <= x[b] <= x_max and z_min <= z[b] <= z_max and z[b] > 0):
                    continue
                key = (v_index, b, passes[b])
                if key not in ids:
                    ids[key] = len(ids)
                    speeds[ids[key]] = float(vessel["speed"][b])
                xs.append(x[b])
                zs.append(z[b])
                fids.append(ids[key])
                rows.append((frame, ids[key], x[b], z[b]))
        bubbles.append(ScattererSet(x=np.array(xs), z=np.array(zs),
                                    reflectivity=np.full(len(xs), config.bubble_reflectivity, dtype=complex)))
        bubble_ids.append(np.array(fids, dtype=int))

    speckle = make_speckle(fov, probe.wavelength, config.speckle_density, config.speckle_scale, rng)
    ground_truth = pd.DataFrame(rows, columns=["frame", "bubble_id", "x", "z"])
    return ScattererTimeline(bubbles=bubbles, bubble_ids=bubble_ids, speckle=speckle, frame_rate=config.frame_rate,
                             fov=fov, ground_truth=ground_truth, speeds=speeds)


def grid_fov(grid: ImageGrid) -> Tuple[float, float, float, float]:
    return (grid.x0, grid.x0 + (grid.nx - 1) * grid.dx, grid.z0, grid.z0 + (grid.nz - 1) * grid.dz)


def calibrate_speckle_scale(probe: ProbeGeometry, scheme: TransmitScheme, grid: ImageGrid, density: float,
                            target_db: float = 25.0, iterations: int = 3, rng_seed: int = 0,
                            initial_scale: float = 0.01) -> float:
    """Find the speckle reflectivity scale giving a bubble-to-background contrast of target_db.

    An isolated unit bubble at the grid center is imaged over speckle; the
    scale is rescaled by the contrast error until it converges.
    """
    from src.metrics import contrast_ratio

    fov = grid_fov(grid)
    cx, cz = 0.5 * (fov[0] + fov[1]), 0.5 * (fov[2] + fov[3])
    unit_speckle = make_speckle(fov, probe.wavelength, density, 1.0, np.random.default_rng(rng_seed))
    bubble = ScattererSet(x=[cx], z=[cz], reflectivity=[1.0])
    duration = default_duration(ScattererSet.concat([unit_speckle, bubble]), probe, scheme)
    bubble_img = das_beamform(simulate_frame(bubble, probe, scheme, duration=duration), grid, probe, scheme).pixels
    speckle_img = das_beamform(simulate_frame(unit_speckle, probe, scheme, duration=duration),
                               grid, probe, scheme).pixels

    xx, zz = grid.mesh()
    distance = np.hypot(xx - cx, zz - cz)
    signal_roi = distance <= probe.wavelength
    background_roi = distance >= 4 * probe.wavelength

    scale = initial_scale
    for step in range(iterations):
        combined = BeamformedImage(grid=grid, pixels=bubble_img + scale * speckle_img)
        measured = contrast_ratio(combined, signal_roi, background_roi)
        scale *= 10 ** ((measured - target_db) / 20)
        logger.info(f"Calibration step {step + 1}: contrast {measured:.2f} dB, next scale {scale:.4g}")
    return float(scale)


def write_sequence(out_dir: Union[str, Path], frames: Sequence[ChannelIQ], timeline: ScattererTimeline,
                   ab: Optional[AberrationFunction]) -> Path:
    """Write frame_%05d.ulmt files, ground_truth.csv, aberration.ulmt and sequence.json."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for index, frame in enumerate(frames):
            write_tensor(out_dir / f"frame_{index:05d}.ulmt", frame.data, COMPLEX128)
        timeline.ground_truth.to_csv(out_dir / "ground_truth.csv", index=False)
        if ab is not None:
            write_aberration(out_dir / "aberration.ulmt", ab)
        meta = {"sample_rate": frames[0].sample_rate, "t0": frames[0].t0,
                "frame_rate": timeline.frame_rate, "num_frames": len(frames), "fov": list(timeline.fov)}
        (out_dir / "sequence.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    except OSError as e:
        logger.error(f"Failed to write sequence to {out_dir}: {e}")
        raise
    logger.info(f"Wrote {len(frames)} frames to {out_dir}")
    return out_dir


def read_sequence(seq_dir: Union[str, Path]) -> Tuple[List[ChannelIQ], pd.DataFrame, Optional[AberrationFunction], dict]:
    seq_dir = Path(seq_dir)
    meta_path = seq_dir / "sequence.json"
    if not meta_path.exists():
        raise DomainError(f"{seq_dir} is not a simulated sequence (missing sequence.json)")
    meta = json.loads(meta_path.read_text())
    frames = [
        ChannelIQ(data=read_tensor(seq_dir / f"frame_{i:05d}.ulmt"), sample_rate=meta["sample_rate"], t0=meta["t0"])
        for i in range(meta["num_frames"])
    ]
    ground_truth = pd.read_csv(seq_dir / "ground_truth.csv")
    ab_path = seq_dir / "aberration.ulmt"
    ab = read_aberration(ab_path) if ab_path.exists() else None
    return frames, ground_truth, ab, meta
