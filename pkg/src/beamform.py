"""Delay-and-sum beamforming, correction injection and hyperbola realignment."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.core import cubic_sample, das_delay
from src.exceptions import DomainError, ShapeMismatchError
from src.models import (AberrationFunction, AberrationMap, BeamformedImage, ChannelIQ, CorrectionProfile, ImageGrid,
                        ProbeGeometry, RealignedPatch, Track, TransmitScheme)

logger = logging.getLogger(__name__)

PIXEL_CHUNK = 2048
REALIGN_OVERSAMPLING = 4
MAX_AMPLITUDE_GAIN = 2.0


def _pixel_fields(correction: Optional[CorrectionProfile], grid: ImageGrid,
                  num_elements: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a correction profile to per-pixel [P x Ne] delays/weights and [P] tx delays."""
    npix = grid.nx * grid.nz
    if correction is None:
        return np.zeros((1, num_elements)), np.ones((1, num_elements)), np.zeros(1)
    if correction.num_elements != num_elements:
        raise ShapeMismatchError(
            f"correction has {correction.num_elements} elements, channel data has {num_elements}"
        )
    rx = correction.rx_delays
    if rx.ndim == 1:
        rx_delays = rx[None, :]
        rx_weights = correction.rx_weights[None, :]
    elif rx.shape == (grid.nz, grid.nx, num_elements):
        rx_delays = rx.reshape(npix, num_elements)
        rx_weights = correction.rx_weights.reshape(npix, num_elements)
    else:
        raise ShapeMismatchError(f"per-pixel correction {rx.shape} does not match grid {grid.shape}")
    tx = np.asarray(correction.tx_delay, dtype=float)
    if tx.ndim == 0:
        tx_delay = tx.reshape(1)
    elif tx.shape == grid.shape:
        tx_delay = tx.reshape(npix)
    else:
        raise ShapeMismatchError(f"tx delay field {tx.shape} does not match grid {grid.shape}")
    return rx_delays, rx_weights, tx_delay


def _rows(field: np.ndarray, sl: slice) -> np.ndarray:
    return field if field.shape[0] == 1 else field[sl]


def das_beamform(iq: ChannelIQ, grid: ImageGrid, probe: ProbeGeometry, scheme: TransmitScheme,
                 correction: Optional[CorrectionProfile] = None, rx_apodization: Optional[np.ndarray] = None,
                 workers: int = 1) -> BeamformedImage:
    """Coherently compounded delay-and-sum image.

    Each element is sampled at its round-trip delay plus the correction's
    receive and transmit delays, rotated by exp(+i 2 pi fc t) and weighted;
    element sums are then added over angles.

    Args:
        iq: Channel data [angles x time x elements]
        grid: Pixel grid
        probe: Probe geometry
        scheme: Transmit sequence matching the angle axis of iq
        correction: Receive/transmit correction, global or per pixel
        rx_apodization: Receive weights; rectangular when None
        workers: Threads over pixel chunks

    Returns:
        BeamformedImage: Complex image; zero_filled is set when any delay
            fell outside the record

    Raises:
        ShapeMismatchError: If angles, elements or correction shapes disagree
    """
    iq.check_probe(probe)
    if iq.num_angles != scheme.num_angles:
        raise ShapeMismatchError(f"channel data has {iq.num_angles} angles, scheme has {scheme.num_angles}")
    ne = probe.num_elements
    apod = np.ones(ne) if rx_apodization is None else np.asarray(rx_apodization, dtype=float)
    rx_delays, rx_weights, tx_delay = _pixel_fields(correction, grid, ne)
    xx, zz = grid.mesh()
    px, pz = xx.reshape(-1), zz.reshape(-1)
    xn = probe.element_x
    fc, fs, t0 = probe.center_frequency, iq.sample_rate, iq.t0
    out = np.zeros(px.size, dtype=np.complex128)
    chunks = [slice(s, min(s + PIXEL_CHUNK, px.size)) for s in range(0, px.size, PIXEL_CHUNK)]

    def run(sl: slice) -> bool:
        extra = _rows(rx_delays, sl) + _rows(tx_delay, sl)[:, None]
        weight = _rows(rx_weights, sl) * apod[None, :]
        total = np.zeros(sl.stop - sl.start, dtype=np.complex128)
        complete = True
        for a, theta in enumerate(scheme.angles):
            t = das_delay(px[sl, None], pz[sl, None], theta, xn[None, :], probe.sound_speed) + extra
            values, valid = cubic_sample(iq.data[a], (t - t0) * fs)
            complete &= bool(np.all(valid))
            total += np.sum(values * np.exp(2j * np.pi * fc * t) * weight, axis=1)
        out[sl] = total
        return complete

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        complete = all(pool.map(run, chunks))
    if not complete:
        logger.warning("Some beamforming delays fall outside the recorded time range; those samples are zero-filled")
    return BeamformedImage(grid=grid, pixels=out.reshape(grid.shape), zero_filled=not complete)


def make_correction_profile(ab_estimate: AberrationFunction, probe: ProbeGeometry,
                            use_amplitude: bool = False) -> CorrectionProfile:
    """Receive delays tau(n), transmit delay mean(tau), optional 1/a(n) weights clamped to [1, 2]."""
    delays = ab_estimate.delays(probe.center_frequency)
    if use_amplitude:
        weights = np.clip(1.0 / ab_estimate.amplitude, 1.0, MAX_AMPLITUDE_GAIN)
    else:
        weights = np.ones_like(delays)
    return CorrectionProfile(rx_delays=delays, rx_weights=weights, tx_delay=float(np.mean(delays)))


def correction_field_from_map(ab_map: AberrationMap, grid: ImageGrid, probe: ProbeGeometry,
                              use_amplitude: bool = False, transmit: bool = True) -> CorrectionProfile:
    """Per-pixel correction for `grid`, taking each pixel's nearest aberration-map node."""
    row, col = ab_map.grid.to_index(*[a.reshape(-1) for a in grid.mesh()])
    row = np.clip(np.round(row).astype(int), 0, ab_map.grid.nz - 1)
    col = np.clip(np.round(col).astype(int), 0, ab_map.grid.nx - 1)
    values = ab_map.values[row, col]
    phases = np.angle(values)
    delays = phases / (2 * np.pi * probe.center_frequency)
    if use_amplitude:
        weights = np.clip(1.0 / np.abs(values), 1.0, MAX_AMPLITUDE_GAIN)
    else:
        weights = np.ones_like(delays)
    tx = delays.mean(axis=1) if transmit else np.zeros(delays.shape[0])
    shape = (grid.nz, grid.nx, probe.num_elements)
    return CorrectionProfile(rx_delays=delays.reshape(shape), rx_weights=weights.reshape(shape),
                             tx_delay=tx.reshape(grid.shape))


def realign_hyperbola(frames: Sequence[ChannelIQ], track: Track, num_samples: int, probe: ProbeGeometry,
                      scheme: TransmitScheme, num_frames: Optional[int] = None,
                      correction: Optional[CorrectionProfile] = None) -> RealignedPatch:
    """Rephase channel data along a bubble's round-trip delay curve.

    For each of the first `num_frames` track points, every angle and element
    is sampled on a 1/(4 fc) grid of `num_samples` points centered at the
    bubble's delay, with the carrier phase restored.

    Args:
        frames: Full frame sequence indexed by absolute frame number
        track: Bubble track supplying positions per frame
        num_samples: Odd window length
        probe: Probe geometry
        scheme: Transmit sequence
        num_frames: Frames to use; the whole track when None
        correction: Optional global correction applied to the sampling delays

    Returns:
        RealignedPatch: Data [angles x frames x samples x elements]

    Raises:
        DomainError: If the track is shorter than num_frames
    """
    nf = len(track) if num_frames is None else num_frames
    if nf < 1 or len(track) < nf:
        raise DomainError(f"track {track.track_id} has {len(track)} frames, {nf} required")
    if num_samples < 1 or num_samples % 2 == 0:
        raise DomainError(f"realignment window must be a positive odd sample count, got {num_samples}")
    ne = probe.num_elements
    fc = probe.center_frequency
    if correction is not None:
        if correction.rx_delays.shape != (ne,) or np.ndim(correction.tx_delay) != 0:
            raise ShapeMismatchError("realignment accepts only a global (per-element) correction")
        extra = correction.rx_delays + float(correction.tx_delay)
        weight = correction.rx_weights
    else:
        extra = np.zeros(ne)
        weight = np.ones(ne)
    offsets = (np.arange(num_samples) - (num_samples - 1) / 2) / (REALIGN_OVERSAMPLING * fc)
    data = np.zeros((scheme.num_angles, nf, num_samples, ne), dtype=np.complex128)
    padded = False
    for f in range(nf):
        index = int(track.frames[f])
        if not 0 <= index < len(frames):
            raise DomainError(f"track {track.track_id} references frame {index} outside the sequence")
        iq = frames[index]
        iq.check_probe(probe)
        for a, theta in enumerate(scheme.angles):
            center = das_delay(track.x[f], track.z[f], theta, probe.element_x, probe.sound_speed) + extra
            t = center[None, :] + offsets[:, None]
            values, valid = cubic_sample(iq.data[a], (t - iq.t0) * iq.sample_rate)
            padded |= not bool(np.all(valid))
            data[a, f] = values * np.exp(2j * np.pi * fc * t) * weight[None, :]
    if padded:
        logger.warning(f"Realignment window for track {track.track_id} exceeds the record; zero-padded")
    centers = np.stack([track.x[:nf], track.z[:nf]], axis=1)
    return RealignedPatch(data=data, track_ref=track.track_id, center_positions=centers, zero_padded=padded)


def realign_tracks(frames: Sequence[ChannelIQ], tracks: Sequence[Track], num_samples: int, probe: ProbeGeometry,
                   scheme: TransmitScheme, num_frames: int, workers: int = 1) -> List[RealignedPatch]:
    """Realign every track long enough for a patch, in parallel over tracks."""
    usable = [t for t in tracks if len(t) >= num_frames]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(
            lambda t: realign_hyperbola(frames, t, num_samples, probe, scheme, num_frames), usable
        ))
