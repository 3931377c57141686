"""Cross-correlation aberration estimation from realigned bubble echoes."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config import CoherenceEstimatorConfig
from src.core import cubic_sample
from src.exceptions import DomainError, ShapeMismatchError
from src.models import AberrationFunction, ProbeGeometry, RealignedPatch

logger = logging.getLogger(__name__)

REALIGN_OVERSAMPLING = 4
CARRIER_PHASE_PER_SAMPLE = 2 * np.pi / REALIGN_OVERSAMPLING
LOESS_ITERATIONS = 5
LOESS_MIN_POINTS = 4


def robust_loess(y: np.ndarray, span: float, prior_weights: Optional[np.ndarray] = None,
                 iterations: int = LOESS_ITERATIONS) -> np.ndarray:
    """Robust local linear regression over equally spaced samples.

    Tricube distance weights over the nearest ceil(span * n) points (at least
    four) are multiplied by bisquare residual weights, re-estimated
    `iterations` times. Points with zero prior weight are predicted from
    their neighbours only.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if not 0 < span <= 1:
        raise DomainError(f"smoothing span must be in (0, 1], got {span}")
    prior = np.ones(n) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    if n < 2 or not np.any(prior > 0):
        return y.copy()
    x = np.arange(n, dtype=float)
    k = min(n, max(LOESS_MIN_POINTS, int(np.ceil(span * n))))
    distance = np.abs(x[:, None] - x[None, :])
    # One spacing past the k-th nearest point so all k carry weight.
    bandwidth = np.sort(distance, axis=1)[:, k - 1] + 1.0
    local = np.clip(1 - (distance / bandwidth[:, None]) ** 3, 0, None) ** 3
    y_filled = np.where(prior > 0, y, 0.0)

    robust = np.ones(n)
    fitted = y.copy()
    for step in range(iterations + 1):
        w = local * (robust * prior)[None, :]
        sw = w.sum(axis=1)
        sx = w @ x
        sy = w @ y_filled
        sxx = w @ (x * x)
        sxy = w @ (x * y_filled)
        det = sw * sxx - sx ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(np.abs(det) > 1e-12, (sw * sxy - sx * sy) / det, 0.0)
            mean = np.where(sw > 0, sy / sw, 0.0)
            mean_x = np.where(sw > 0, sx / sw, x)
        fitted = mean + slope * (x - mean_x)
        if step == iterations:
            break
        residual = np.where(prior > 0, y_filled - fitted, 0.0)
        absolute = np.abs(residual[prior > 0])
        scale = np.median(absolute)
        if scale <= 1e-15:
            # Most points fit exactly; fall back to the mean absolute residual.
            scale = np.mean(absolute)
        if scale <= 1e-15:
            break
        u = residual / (6 * scale)
        robust = np.where(np.abs(u) < 1, (1 - u ** 2) ** 2, 0.0)
    return fitted


def adjacent_delays(samples: np.ndarray, config: CoherenceEstimatorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Lag of the correlation peak between neighbouring elements, in window samples.

    Args:
        samples: Realigned window [time x elements]
        config: Upsampling and lag search range

    Returns:
        Tuple of delays [Ne - 1] (element n+1 relative to n) and a boolean
        mask of element pairs whose correlation is defined
    """
    nt, ne = samples.shape
    max_lag = config.max_lag
    lags = np.arange(-max_lag - 1, max_lag + 2)
    left = samples[:, :-1]
    right = samples[:, 1:]
    corr = np.zeros((lags.size, ne - 1), dtype=np.complex128)
    for i, lag in enumerate(lags):
        if lag >= 0:
            corr[i] = np.sum(right[lag:] * np.conj(left[:nt - lag]), axis=0)
        else:
            corr[i] = np.sum(right[:nt + lag] * np.conj(left[-lag:]), axis=0)
    energy = np.sum(np.abs(samples) ** 2, axis=0)
    defined = (energy[:-1] > 0) & (energy[1:] > 0)

    fine = np.linspace(-max_lag, max_lag, 2 * max_lag * config.upsample_factor + 1)
    positions = np.broadcast_to((fine + max_lag + 1)[:, None], (fine.size, ne - 1))
    envelope, _ = cubic_sample(np.abs(corr), positions)
    coarse = fine[np.argmax(envelope, axis=0)]

    # The carrier turns a quarter cycle per sample: refine on the phase at the
    # nearest integer lag, resolving the 4-sample ambiguity with the envelope peak.
    nearest = np.clip(np.rint(coarse), -max_lag, max_lag).astype(np.int64)
    phase = np.angle(corr[nearest + max_lag + 1, np.arange(ne - 1)])
    refined = nearest - phase / CARRIER_PHASE_PER_SAMPLE
    period = 2 * np.pi / CARRIER_PHASE_PER_SAMPLE
    refined = refined + period * np.rint((coarse - refined) / period)
    delays = np.clip(refined, -max_lag - 0.5, max_lag + 0.5)
    return np.where(defined, delays, np.nan), defined


def accumulate_delays(delays: np.ndarray) -> np.ndarray:
    """Cumulative per-element profile from adjacent delays; undefined steps take the median step."""
    steps = np.asarray(delays, dtype=float)
    finite = np.isfinite(steps)
    fill = np.median(steps[finite]) if np.any(finite) else 0.0
    return np.concatenate([[0.0], np.cumsum(np.where(finite, steps, fill))])


def estimate_coherence_based(patch: RealignedPatch, probe: ProbeGeometry,
                             config: CoherenceEstimatorConfig) -> AberrationFunction:
    """Estimate a unit-amplitude, piston-free aberration function from one patch.

    Per frame and angle, neighbouring-element correlation peaks are
    accumulated into a delay profile and smoothed by robust local regression;
    the smoothed profiles are averaged and the mean delay removed.
    """
    if config.upsample_factor < 1:
        raise DomainError(f"upsample_factor must be >= 1, got {config.upsample_factor}")
    if patch.num_elements != probe.num_elements:
        raise ShapeMismatchError(f"patch has {patch.num_elements} elements, probe has {probe.num_elements}")
    n_angles, n_frames, _, ne = patch.dims
    energy = np.sum(np.abs(patch.data) ** 2, axis=2)
    profiles = []
    for a in range(n_angles):
        for f in range(n_frames):
            delays, _ = adjacent_delays(patch.data[a, f], config)
            prior = (energy[a, f] > 0).astype(float)
            profile = accumulate_delays(delays)
            profiles.append(robust_loess(profile, config.smoothing_span, prior))

    degenerate = np.where(np.all(energy == 0, axis=(0, 1)))[0]
    flags: Tuple[str, ...] = tuple(f"degenerate:{n}" for n in degenerate)
    if degenerate.size:
        logger.warning(f"Patch {patch.track_ref}: degenerate channels {degenerate.tolist()} filled by smoothing")
    seconds = np.mean(profiles, axis=0) / (REALIGN_OVERSAMPLING * probe.center_frequency)
    seconds = seconds - seconds.mean()
    estimate = AberrationFunction.from_delays(seconds, probe.center_frequency)
    estimate.flags = flags
    return estimate


def average_track_estimates(estimates: Sequence[AberrationFunction]) -> AberrationFunction:
    """Complex mean of several estimates, renormalized to unit amplitude and piston-free."""
    if not estimates:
        raise DomainError("cannot average an empty list of estimates")
    lengths = {len(e) for e in estimates}
    if len(lengths) != 1:
        raise ShapeMismatchError(f"estimates have differing lengths {sorted(lengths)}")
    mean = np.mean([e.values for e in estimates], axis=0)
    magnitude = np.abs(mean)
    unit = np.where(magnitude > 0, mean / np.where(magnitude > 0, magnitude, 1), 1.0)
    return AberrationFunction(values=unit).remove_piston()


def estimate_tracks(patches: Sequence[RealignedPatch], probe: ProbeGeometry,
                    config: CoherenceEstimatorConfig) -> List[AberrationFunction]:
    return [estimate_coherence_based(p, probe, config) for p in patches]
