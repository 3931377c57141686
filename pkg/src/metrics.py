"""Image-quality and reconstruction metrics."""

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from src.exceptions import DomainError, ShapeMismatchError
from src.models import (AberrationFunction, BeamformedImage, CoherenceCurve, DensityMap, FrcResult, ImageGrid,
                        RealignedPatch, Track, wrap_phase)
from src.ulm import rasterize_track

logger = logging.getLogger(__name__)

HALF_BIT_SNR = 0.2071
METRIC_COLUMNS = ["metric", "value", "units", "config_hash"]

MetricRow = Tuple[str, float, str]


def spatial_coherence(patch: RealignedPatch, window: Optional[int] = None) -> CoherenceCurve:
    """Lag-wise spatial coherence of a realigned patch.

    R(m) = N / (N - m) * Re sum_n <s_n, s_n+m> / sum_n <s_n, s_n>, computed on
    the central `window` samples of every (angle, frame) and averaged over those
    with non-zero energy.

    Args:
        patch: Realigned patch [angles x frames x samples x elements]
        window: Number of central samples used; all when None

    Returns:
        CoherenceCurve: R(m) for m = 0..N-1 and its area over lag scaled to [0, 1]

    Raises:
        DomainError: If the window is too long or the patch has no energy
    """
    data = patch.data
    nt, ne = data.shape[2], data.shape[3]
    window = nt if window is None else int(window)
    if not 1 <= window <= nt:
        raise DomainError(f"coherence window {window} must be in [1, {nt}]")
    start = (nt - window) // 2
    s = data[:, :, start:start + window, :].reshape(-1, window, ne)
    energy = np.sum(np.abs(s) ** 2, axis=(1, 2))
    usable = energy > 0
    if not np.any(usable):
        raise DomainError("patch has zero energy")
    s, energy = s[usable], energy[usable]
    curves = np.empty((s.shape[0], ne))
    for m in range(ne):
        products = np.sum(s[:, :, :ne - m] * np.conj(s[:, :, m:]), axis=(1, 2))
        curves[:, m] = ne / (ne - m) * products.real / energy
    values = curves.mean(axis=0)
    auc = float(trapezoid(values, np.arange(ne) / (ne - 1))) if ne > 1 else float(values[0])
    return CoherenceCurve(values=values, auc=auc)


def _as_mask(roi: np.ndarray, shape: Tuple[int, int], name: str) -> np.ndarray:
    mask = np.asarray(roi, dtype=bool)
    if mask.shape != shape:
        raise ShapeMismatchError(f"{name} ROI shape {mask.shape} does not match image {shape}")
    if not mask.any():
        raise DomainError(f"{name} ROI is empty")
    return mask


def contrast_ratio(image: BeamformedImage, signal_roi: np.ndarray, background_roi: np.ndarray) -> float:
    """20 log10 of the peak signal magnitude over the background RMS, in dB."""
    signal = _as_mask(signal_roi, image.grid.shape, "signal")
    background = _as_mask(background_roi, image.grid.shape, "background")
    if np.any(signal & background):
        raise DomainError("signal and background ROIs overlap")
    envelope = image.envelope
    rms = np.sqrt(np.mean(envelope[background] ** 2))
    if rms == 0:
        raise DomainError("background ROI has zero energy")
    return float(20 * np.log10(envelope[signal].max() / rms))


def contrast_gain(before: BeamformedImage, after: BeamformedImage, signal_roi: np.ndarray,
                  background_roi: np.ndarray) -> float:
    return contrast_ratio(after, signal_roi, background_roi) - contrast_ratio(before, signal_roi, background_roi)


def _half_crossing(profile: np.ndarray, peak: int, half: float, step: int) -> float:
    k = peak
    while 0 <= k + step < len(profile):
        if profile[k + step] < half:
            y0, y1 = profile[k], profile[k + step]
            return k + step * (y0 - half) / (y0 - y1)
        k += step
    raise DomainError("profile never falls below half maximum on one side")


def fwhm(profile: np.ndarray, spacing: float) -> float:
    """Full width at half maximum around the global peak, linear interpolation between samples.

    Raises:
        DomainError: If there is no half-maximum crossing on either side
    """
    profile = np.asarray(profile, dtype=float)
    peak = int(np.argmax(profile))
    half = profile[peak] / 2
    left = _half_crossing(profile, peak, half, -1)
    right = _half_crossing(profile, peak, half, +1)
    return float((right - left) * spacing)


def psf_widths(image: BeamformedImage, position: Tuple[float, float], wavelength: float,
               search_radius: int = 2) -> Tuple[float, float]:
    """Lateral and axial FWHM in wavelengths of the point nearest `position`."""
    grid = image.grid
    row, col = grid.to_index(position[0], position[1])
    row, col = int(np.round(row)), int(np.round(col))
    envelope = image.envelope
    r0, r1 = max(row - search_radius, 0), min(row + search_radius + 1, grid.nz)
    c0, c1 = max(col - search_radius, 0), min(col + search_radius + 1, grid.nx)
    dr, dc = np.unravel_index(np.argmax(envelope[r0:r1, c0:c1]), (r1 - r0, c1 - c0))
    row, col = r0 + int(dr), c0 + int(dc)
    lateral = fwhm(envelope[row, :], grid.dx) / wavelength
    axial = fwhm(envelope[:, col], grid.dz) / wavelength
    return lateral, axial


def image_nrmse(test: BeamformedImage, reference: BeamformedImage) -> float:
    """||test - reference|| / ||reference|| on complex pixels."""
    if test.pixels.shape != reference.pixels.shape:
        raise ShapeMismatchError(f"image shapes {test.pixels.shape} and {reference.pixels.shape} differ")
    norm = np.linalg.norm(reference.pixels)
    if norm == 0:
        raise DomainError("reference image is all zero")
    return float(np.linalg.norm(test.pixels - reference.pixels) / norm)


def half_bit_threshold(ring_counts: np.ndarray, snr: float = HALF_BIT_SNR) -> np.ndarray:
    root_n = np.sqrt(np.maximum(np.asarray(ring_counts, dtype=float), 1.0))
    root_s = np.sqrt(snr)
    return (snr + 2 * root_s / root_n + 1 / root_n) / (snr + 2 * root_s / root_n + 1)


def frc(map_a: DensityMap, map_b: DensityMap, snr: float = HALF_BIT_SNR) -> FrcResult:
    """Fourier ring correlation of two half-dataset maps with the half-bit criterion.

    Rings are one frequency bin wide and stop at the Nyquist limit. A resolution
    is reported only when the correlation stays above threshold on the first two
    non-DC rings; it is 1 / (interpolated crossing frequency), or 1 / (highest
    ring frequency) when no crossing occurs.

    Raises:
        ShapeMismatchError: If the grids differ
        DomainError: If a map is all zero
    """
    if map_a.grid != map_b.grid:
        raise ShapeMismatchError("FRC needs maps on the same grid")
    if not np.any(map_a.counts) or not np.any(map_b.counts):
        raise DomainError("FRC of an all-zero map")
    grid = map_a.grid
    fa, fb = np.fft.fft2(map_a.counts), np.fft.fft2(map_b.counts)
    fz = np.fft.fftfreq(grid.nz, grid.dz)[:, None]
    fx = np.fft.fftfreq(grid.nx, grid.dx)[None, :]
    radius = np.hypot(fx, fz)
    bin_width = max(1 / (grid.nx * grid.dx), 1 / (grid.nz * grid.dz))
    nyquist = min(1 / (2 * grid.dx), 1 / (2 * grid.dz))
    num_rings = int(np.floor(nyquist / bin_width)) + 1
    ring = np.round(radius / bin_width).astype(int).ravel()
    inside = ring < num_rings
    ring = ring[inside]

    cross = np.bincount(ring, (fa * np.conj(fb)).real.ravel()[inside], num_rings)
    power_a = np.bincount(ring, (np.abs(fa) ** 2).ravel()[inside], num_rings)
    power_b = np.bincount(ring, (np.abs(fb) ** 2).ravel()[inside], num_rings)
    counts = np.bincount(ring, minlength=num_rings)
    denom = np.sqrt(power_a * power_b)
    curve = np.where(denom > 0, cross / np.where(denom > 0, denom, 1), 0.0)
    frequencies = np.arange(num_rings) * bin_width
    threshold = half_bit_threshold(counts, snr)

    resolution = None
    if num_rings > 2 and curve[1] >= threshold[1] and curve[2] >= threshold[2]:
        below = np.nonzero(curve[1:] < threshold[1:])[0]
        if below.size:
            k = int(below[0]) + 1
            gap0, gap1 = curve[k - 1] - threshold[k - 1], curve[k] - threshold[k]
            crossing = frequencies[k - 1] + bin_width * gap0 / (gap0 - gap1)
        else:
            crossing = frequencies[-1]
        resolution = float(1 / crossing)
    logger.info(f"FRC over {num_rings} rings, resolution {resolution}")
    return FrcResult(frequencies=frequencies, frc=curve, threshold=threshold, ring_counts=counts,
                     resolution=resolution, snr=snr)


def split_tracks(tracks: Sequence[Track], seed: int = 0) -> Tuple[List[Track], List[Track]]:
    """Shuffle with a fixed seed, then assign even positions to the first half and odd to the second."""
    order = np.random.default_rng(seed).permutation(len(tracks))
    return [tracks[i] for i in order[0::2]], [tracks[i] for i in order[1::2]]


def saturation_curve(tracks: Sequence[Track], grid: ImageGrid, factor: int = 10) -> List[Tuple[int, int]]:
    """Distinct illuminated fine-grid pixels after each track, in order."""
    fine = grid.refine(factor)
    seen = set()
    curve = []
    for k, track in enumerate(tracks, start=1):
        seen.update(map(tuple, rasterize_track(track, fine)))
        curve.append((k, len(seen)))
    return curve


def phase_rmse(est: AberrationFunction, truth: AberrationFunction) -> float:
    """RMS of wrapped phase differences after removing the best piston."""
    if len(est) != len(truth):
        raise ShapeMismatchError(f"aberration lengths differ: {len(est)} vs {len(truth)}")
    diff = wrap_phase(est.phase - truth.phase)
    piston = np.angle(np.mean(np.exp(1j * diff)))
    return float(np.sqrt(np.mean(wrap_phase(diff - piston) ** 2)))


def coherence_auc_gain(before: Sequence[CoherenceCurve], after: Sequence[CoherenceCurve]) -> float:
    if not before or not after:
        raise DomainError("AUC gain needs curves before and after correction")
    return float(np.mean([c.auc for c in after]) - np.mean([c.auc for c in before]))


def write_metric_rows(path: Union[str, Path], rows: Iterable[MetricRow], config_hash: str) -> pd.DataFrame:
    """Write (metric, value, units) rows stamped with the config hash."""
    df = pd.DataFrame([(m, v, u, config_hash) for m, v, u in rows], columns=METRIC_COLUMNS)
    try:
        df.to_csv(path, index=False)
    except OSError as e:
        logger.error(f"Failed to write metrics {path}: {e}")
        raise
    return df


def write_curve(path: Union[str, Path], x: Sequence[float], y: Sequence[float],
                columns: Tuple[str, str] = ("x", "y")) -> pd.DataFrame:
    df = pd.DataFrame({columns[0]: np.asarray(x), columns[1]: np.asarray(y)})
    df.to_csv(path, index=False)
    return df
