import numpy as np
import pytest

from src.config import CoherenceEstimatorConfig
from src.estimator_coherence import (accumulate_delays, adjacent_delays, average_track_estimates,
                                     estimate_coherence_based, estimate_tracks, robust_loess)
from src.exceptions import DomainError, ShapeMismatchError
from src.metrics import phase_rmse
from src.models import AberrationFunction, RealignedPatch

from tests.conftest import FC


def realigned_echo(delays, angles=3, frames=4, samples=9):
    """Rephased echo of a point seen through per-element delays, sampled at 4 fc."""
    offsets = (np.arange(samples) - (samples - 1) / 2) / (4 * FC)
    t = offsets[:, None] - np.asarray(delays)[None, :]
    echo = np.exp(-(t * FC / 1.5) ** 2) * np.exp(2j * np.pi * FC * t)
    return np.broadcast_to(echo, (angles, frames) + echo.shape).copy()


def test_loess_reproduces_a_line():
    y = 0.5 * np.arange(20) - 3.0
    np.testing.assert_allclose(robust_loess(y, 0.3), y, atol=1e-9)


def test_loess_downweights_outliers():
    y = 0.2 * np.arange(30)
    y[15] += 10.0
    fitted = robust_loess(y, 0.3)
    assert abs(fitted[15] - 3.0) < 0.3


def test_loess_rejects_outlier_on_a_short_aperture():
    y = 0.2 * np.arange(16)
    y[8] += 5.0
    fitted = robust_loess(y, 0.15)
    assert fitted[8] == pytest.approx(1.6, abs=0.05)
    np.testing.assert_allclose(np.delete(fitted, 8), np.delete(0.2 * np.arange(16), 8), atol=0.05)


def test_loess_smooths_with_a_narrow_span():
    x = np.arange(16)
    line = 0.3 * x
    fitted = robust_loess(line + 0.1 * (-1.0) ** x, 0.15)
    assert np.max(np.abs(fitted - line)[1:-1]) < 0.05


def test_loess_fills_zero_weight_points():
    y = 0.1 * np.arange(12)
    y[5] = 100.0
    prior = np.ones(12)
    prior[5] = 0.0
    assert robust_loess(y, 0.5, prior)[5] == pytest.approx(0.5, abs=1e-6)


def test_loess_span_range():
    with pytest.raises(DomainError):
        robust_loess(np.zeros(5), 0.0)


def test_accumulate_fills_undefined_steps_with_median():
    profile = accumulate_delays(np.array([1.0, np.nan, 1.0, 3.0]))
    np.testing.assert_allclose(profile, [0.0, 1.0, 2.0, 3.0, 6.0])


def test_adjacent_delays_find_relative_shift():
    delays = np.arange(6) * 0.25 / (4 * FC)
    window = realigned_echo(delays)[0, 0]
    steps, defined = adjacent_delays(window, CoherenceEstimatorConfig(upsample_factor=8, max_lag=2))
    assert defined.all()
    np.testing.assert_allclose(steps, 0.25, atol=1e-3)


@pytest.mark.parametrize("step", [-1.3, -0.6, 0.1, 0.9, 1.7])
def test_adjacent_delays_are_unbiased_off_grid(step):
    delays = np.arange(4) * step / (4 * FC)
    window = realigned_echo(delays, samples=17)[0, 0]
    steps, _ = adjacent_delays(window, CoherenceEstimatorConfig(upsample_factor=4, max_lag=3))
    np.testing.assert_allclose(steps, step, atol=1e-3)


def test_adjacent_delays_mark_silent_elements():
    window = realigned_echo(np.zeros(5))[0, 0]
    window[:, 2] = 0
    steps, defined = adjacent_delays(window, CoherenceEstimatorConfig())
    np.testing.assert_array_equal(defined, [True, False, False, True])
    assert np.isnan(steps[1]) and np.isnan(steps[2])


def test_unaberrated_patch_gives_flat_estimate(probe):
    patch = RealignedPatch(data=realigned_echo(np.zeros(16)), track_ref=0, center_positions=np.zeros((4, 2)))
    estimate = estimate_coherence_based(patch, probe, CoherenceEstimatorConfig())
    np.testing.assert_allclose(estimate.amplitude, 1.0)
    assert np.max(np.abs(estimate.phase)) < 0.05


def test_recovers_smooth_aberration(probe):
    truth_delays = 0.1 / FC * np.sin(np.linspace(0, np.pi, 16))
    patch = RealignedPatch(data=realigned_echo(truth_delays), track_ref=3, center_positions=np.zeros((4, 2)))
    estimate = estimate_coherence_based(patch, probe, CoherenceEstimatorConfig())
    truth = AberrationFunction.from_delays(truth_delays, FC)
    assert phase_rmse(estimate, truth) < 0.25
    assert abs(np.mean(estimate.delays(FC))) < 1e-12


def test_degenerate_channel_is_flagged(probe):
    data = realigned_echo(np.zeros(16))
    data[..., 7] = 0
    patch = RealignedPatch(data=data, track_ref=0, center_positions=np.zeros((4, 2)))
    estimate = estimate_coherence_based(patch, probe, CoherenceEstimatorConfig())
    assert estimate.flags == ("degenerate:7",)
    assert np.all(np.isfinite(estimate.values))


def test_element_count_mismatch(probe):
    patch = RealignedPatch(data=realigned_echo(np.zeros(8)), track_ref=0, center_positions=np.zeros((4, 2)))
    with pytest.raises(ShapeMismatchError):
        estimate_coherence_based(patch, probe, CoherenceEstimatorConfig())


def test_estimate_tracks_processes_each_patch(probe):
    patches = [RealignedPatch(data=realigned_echo(np.zeros(16)), track_ref=i, center_positions=np.zeros((4, 2)))
               for i in range(2)]
    assert len(estimate_tracks(patches, probe, CoherenceEstimatorConfig())) == 2


def test_average_of_conjugate_pair_is_flat():
    phase = np.linspace(-1.0, 1.0, 8)
    first = AberrationFunction.from_amplitude_phase(np.ones(8), phase)
    second = AberrationFunction.from_amplitude_phase(np.ones(8), -phase)
    mean = average_track_estimates([first, second])
    np.testing.assert_allclose(mean.values, 1.0, atol=1e-12)


def test_average_needs_consistent_estimates():
    with pytest.raises(DomainError):
        average_track_estimates([])
    with pytest.raises(ShapeMismatchError):
        average_track_estimates([AberrationFunction.identity(3), AberrationFunction.identity(4)])
