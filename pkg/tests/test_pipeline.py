from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from scripts.main import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, build_parser, config_from_args, main
from src.aberration import read_aberration_csv
from src.config import RunConfig
from src.exceptions import ConfigError, StageError
from src.models import AberrationFunction, ChannelIQ, ImageGrid, ScattererSet, ScattererTimeline, Track
from src.pipeline import Pipeline, coarse_grid, global_correction, run_pipeline, select_fit_tracks
from src.simulator import write_sequence
from src.tensor_io import COMPLEX128, read_tensor, write_tensor


def test_global_correction_transmit_depends_on_mode(probe):
    ab = AberrationFunction.from_delays(np.linspace(0, 1, 16) / probe.center_frequency, probe.center_frequency)
    fast = global_correction(ab, probe, "fast")
    exact = global_correction(ab, probe, "exact")
    assert fast.tx_delay == 0.0
    assert exact.tx_delay == pytest.approx(np.mean(ab.delays(probe.center_frequency)))
    np.testing.assert_allclose(fast.rx_delays, exact.rx_delays)


def test_coarse_grid_keeps_every_step_th_pixel():
    grid = ImageGrid(x0=-1e-3, z0=2e-3, dx=1e-5, dz=2e-5, nx=17, nz=10)
    coarse = coarse_grid(grid, 4)
    assert (coarse.nx, coarse.nz) == (5, 3)
    assert coarse.dx == pytest.approx(4e-5) and coarse.dz == pytest.approx(8e-5)
    assert (coarse.x0, coarse.z0) == (grid.x0, grid.z0)
    assert coarse_grid(grid, 1) == grid


def test_select_fit_tracks_by_start_frame():
    tracks = [Track(k, np.arange(start, start + 5), np.zeros(5), np.ones(5)) for k, start in enumerate([0, 49, 50, 90])]
    assert [t.track_id for t in select_fit_tracks(tracks, 100, 0.5)] == [2, 3]
    assert len(select_fit_tracks(tracks, 100, 1.0)) == 4


def test_run_stage_wraps_failures(tmp_path):
    pipeline = Pipeline(RunConfig(), tmp_path)

    def broken():
        raise ValueError("bad frame")

    def misconfigured():
        raise ConfigError("bad option")

    with pytest.raises(StageError) as info:
        pipeline.run_stage("beamform", broken)
    assert info.value.stage == "beamform"
    with pytest.raises(ConfigError):
        pipeline.run_stage("beamform", misconfigured)
    assert pipeline.run_stage("noop", lambda: 7) == 7


def test_cli_missing_config_file(tmp_path):
    assert main(["pipeline", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_train_needs_dataset(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_infer_needs_checkpoint(tmp_path):
    assert main(["infer", "--patches", str(tmp_path), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_metrics_without_a_run(tmp_path):
    assert main(["metrics", "--out", str(tmp_path / "empty")]) == EXIT_STAGE


def test_cli_estimate_writes_csv(tmp_path):
    patch_path = tmp_path / "patch_00000.ulmt"
    samples = np.arange(9) - 4
    echo = np.exp(-(samples / 2.0) ** 2) * np.exp(1j * np.pi / 2 * samples)
    data = np.broadcast_to(echo[None, None, :, None], RunConfig().patch_dims()).astype(np.complex128)
    write_tensor(patch_path, data, COMPLEX128)
    assert main(["estimate", "coherence", "--patch", str(patch_path), "--out", str(tmp_path)]) == EXIT_OK
    estimate = read_aberration_csv(tmp_path / "patch_00000.aberration.csv")
    assert len(estimate) == 16
    np.testing.assert_allclose(np.angle(estimate.values), 0.0, atol=1e-6)


def _write_source_sequence(directory, num_elements=16, num_frames=2):
    frames = [ChannelIQ(data=np.full((3, 40, num_elements), 0.5 + 0.25j * i), sample_rate=5e6, t0=1e-6)
              for i in range(num_frames)]
    timeline = ScattererTimeline(bubbles=[ScattererSet.empty()] * num_frames,
                                 bubble_ids=[np.array([], dtype=int)] * num_frames, speckle=ScattererSet.empty(),
                                 frame_rate=100.0, fov=(-1e-3, 1e-3, 1e-3, 3e-3))
    return write_sequence(directory, frames, timeline, AberrationFunction.identity(num_elements))


def test_import_stage_copies_an_existing_sequence(tmp_path):
    source = _write_source_sequence(tmp_path / "source")
    pipeline = Pipeline(RunConfig(), tmp_path / "run", input_dir=source)
    assert pipeline.run_stage("import", pipeline.import_sequence) == tmp_path / "run" / "sequence"
    frames, ab = pipeline.load_sequence()
    assert len(frames) == 2 and frames[0].t0 == 1e-6
    np.testing.assert_array_equal(frames[1].data, np.full((3, 40, 16), 0.5 + 0.25j))
    np.testing.assert_array_equal(ab.values, 1.0)


def test_import_stage_rejects_a_foreign_probe(tmp_path):
    source = _write_source_sequence(tmp_path / "source", num_elements=8)
    pipeline = Pipeline(RunConfig(), tmp_path / "run", input_dir=source)
    with pytest.raises(StageError) as info:
        pipeline.run_stage("import", pipeline.import_sequence)
    assert info.value.stage == "import"
    assert not (tmp_path / "run" / "sequence").exists()


def test_cli_pipeline_input_must_be_a_sequence(tmp_path):
    (tmp_path / "empty").mkdir()
    args = ["pipeline", "--input", str(tmp_path / "empty"), "--out", str(tmp_path / "run")]
    assert main(args) == EXIT_STAGE
    assert not (tmp_path / "run" / "images").exists()


def test_cli_paper_scale_flag(tmp_path):
    args = build_parser().parse_args(["pipeline", "--paper-scale", "--out", str(tmp_path)])
    config = config_from_args(args)
    assert config.scale == "paper"
    assert config.patch_dims() == (11, 16, 17, 128)


@pytest.mark.slow
def test_pipeline_without_correction_leaves_images_unchanged(desk_config):
    config = replace(desk_config, estimator="none")
    metrics = run_pipeline(config)
    run_dir = config.output_dir
    for name in ["frame_00000.ulmt", "frame_00023.ulmt"]:
        before = read_tensor(f"{run_dir}/images/before/{name}")
        after = read_tensor(f"{run_dir}/images/after/{name}")
        np.testing.assert_array_equal(before, after)
    values = dict(zip(metrics["metric"], metrics["value"]))
    assert values["num_tracks_before"] == values["num_tracks_after"]
    assert (metrics["config_hash"] == config.config_hash()).all()
    assert (pd.read_csv(f"{run_dir}/metrics/metrics.csv")["metric"] == metrics["metric"]).all()


@pytest.mark.slow
def test_pipeline_with_ground_truth_correction(desk_config):
    config = replace(desk_config, estimator="ground-truth")
    metrics = run_pipeline(config)
    run_dir = config.output_dir
    estimates = pd.read_csv(f"{run_dir}/estimates/estimates.csv")
    assert estimates["element"].max() == 15
    assert read_tensor(f"{run_dir}/map/aberration_map.ulmt").shape[2] == 16
    assert "num_tracks_after" in set(metrics["metric"])
    assert (Path(run_dir) / "config.snapshot").exists()
    assert (Path(run_dir) / "logs" / "pipeline.log").exists()
