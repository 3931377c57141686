"""Delay law, IQ demodulation and sub-sample access shared by every module."""

import logging
from typing import Tuple, Union

import numpy as np
from scipy import signal as sps

from src.exceptions import DomainError
from src.models import ChannelIQ, ProbeGeometry

logger = logging.getLogger(__name__)

DEMOD_TAPS = 64

ArrayLike = Union[float, np.ndarray]


def das_delay(x: ArrayLike, z: ArrayLike, theta: ArrayLike, xn: ArrayLike, c: float) -> np.ndarray:
    """Round-trip plane-wave delay from transmit to pixel (x, z) and back to element xn.

    Args:
        x: Lateral pixel position in meters
        z: Depth in meters, must be positive
        theta: Plane-wave steering angle in radians
        xn: Receiving element position in meters
        c: Sound speed in m/s

    Returns:
        np.ndarray: Delay in seconds, broadcast over the inputs

    Raises:
        DomainError: If z or c is not positive
    """
    z = np.asarray(z, dtype=float)
    if not c > 0:
        raise DomainError(f"sound speed must be positive, got {c}")
    if np.any(z <= 0):
        raise DomainError("depth must be positive for every pixel")
    x = np.asarray(x, dtype=float)
    return (z * np.cos(theta) + x * np.sin(theta) + np.hypot(z, x - xn)) / c


def catmull_rom_weights(frac: np.ndarray) -> np.ndarray:
    """Cubic convolution weights for taps (-1, 0, 1, 2); frac in [0, 1)."""
    u = frac[..., None]
    u2 = u * u
    u3 = u2 * u
    return np.concatenate([
        0.5 * (-u3 + 2 * u2 - u),
        0.5 * (3 * u3 - 5 * u2 + 2),
        0.5 * (-3 * u3 + 4 * u2 + u),
        0.5 * (u3 - u2),
    ], axis=-1)


def cubic_sample(data: np.ndarray, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sample columns of data at fractional row positions.

    Args:
        data: Array [N x M] sampled along its first axis
        positions: Fractional row indices [... x M]; column m reads data[:, m]

    Returns:
        Tuple of the interpolated values [... x M] and a validity mask. Samples
        outside [0, N - 1] are zero and flagged invalid; taps past the edges
        are clamped to the border samples.
    """
    n = data.shape[0]
    positions = np.asarray(positions, dtype=float)
    valid = (positions >= 0) & (positions <= n - 1)
    safe = np.where(valid, positions, 0.0)
    base = np.floor(safe).astype(np.int64)
    weights = catmull_rom_weights(safe - base)
    cols = np.broadcast_to(np.arange(data.shape[1]), positions.shape)
    out = np.zeros(positions.shape, dtype=np.result_type(data.dtype, float))
    for k, offset in enumerate((-1, 0, 1, 2)):
        rows = np.clip(base + offset, 0, n - 1)
        out = out + weights[..., k] * data[rows, cols]
    return np.where(valid, out, 0), valid


def demodulate_iq(rf: np.ndarray, fs_rf: float, probe: ProbeGeometry, t0: float = 0.0) -> ChannelIQ:
    """Downmix RF channel data to 100%-bandwidth IQ sampled at the center frequency.

    Args:
        rf: RF data [angles x time x elements], either real or its complex
            positive-frequency part
        fs_rf: RF sample rate, an integer multiple (>= 4) of the center frequency
        probe: Probe geometry supplying the center frequency
        t0: Time of the first RF sample

    Returns:
        ChannelIQ: Baseband data; cos(2 pi fc t) and 0.5 exp(i 2 pi fc t) both map to 0.5

    Raises:
        DomainError: If the rate ratio is invalid or rf has non-finite values
    """
    rf = np.asarray(rf)
    rf = rf.astype(np.complex128 if np.iscomplexobj(rf) else float)
    if rf.ndim != 3:
        raise DomainError(f"rf must be [angles x time x elements], got shape {rf.shape}")
    if not np.all(np.isfinite(rf)):
        raise DomainError("rf contains non-finite samples")
    fc = probe.center_frequency
    ratio = fs_rf / fc
    decimation = int(round(ratio))
    if decimation < 4 or abs(ratio - decimation) > 1e-9 * ratio:
        raise DomainError(f"fs_rf must be an integer multiple >= 4 of fc, got ratio {ratio:.6g}")

    t = t0 + np.arange(rf.shape[1]) / fs_rf
    mixed = rf * np.exp(-2j * np.pi * fc * t)[None, :, None]
    taps = sps.firwin(DEMOD_TAPS, fc / 2, fs=fs_rf)
    filtered = sps.oaconvolve(mixed, taps[None, :, None], mode="full", axes=1)
    iq = filtered[:, ::decimation, :]
    t0_out = t0 - 0.5 * (DEMOD_TAPS - 1) / fs_rf
    return ChannelIQ(data=iq, sample_rate=fs_rf / decimation, t0=t0_out)


def delay_iq(samples: np.ndarray, tau: ArrayLike, fc: float, fs: float, axis: int = 0) -> np.ndarray:
    """Apply a time delay to baseband samples.

    The envelope is resampled at t - tau and rotated by exp(-i 2 pi fc tau),
    the baseband image of delaying the RF signal by tau.

    Args:
        samples: Complex samples along `axis`
        tau: Delay in seconds, scalar or broadcastable to the remaining axes
        fc: Carrier frequency
        fs: Sample rate

    Returns:
        np.ndarray: Delayed samples, zero where t - tau leaves the record
    """
    if not fs > 0:
        raise DomainError(f"sample rate must be positive, got {fs}")
    samples = np.asarray(samples, dtype=np.complex128)
    tau = np.asarray(tau, dtype=float)
    if not (np.all(np.isfinite(samples)) and np.all(np.isfinite(tau))):
        raise DomainError("delay_iq inputs must be finite")
    moved = np.moveaxis(samples, axis, 0)
    rest = moved.shape[1:]
    flat = moved.reshape(moved.shape[0], -1)
    tau_flat = np.broadcast_to(tau, rest).reshape(-1)
    positions = np.arange(flat.shape[0])[:, None] - tau_flat[None, :] * fs
    values, _ = cubic_sample(flat, positions)
    values = values * np.exp(-2j * np.pi * fc * tau_flat)[None, :]
    return np.moveaxis(values.reshape(moved.shape), 0, axis)


def delay_channels(iq: ChannelIQ, tau: np.ndarray, fc: float) -> ChannelIQ:
    """Delay each element channel of a ChannelIQ by tau[n]."""
    return iq.with_data(delay_iq(iq.data, np.broadcast_to(tau, (iq.num_angles, iq.num_elements)),
                                 fc, iq.sample_rate, axis=1))
