"""End-to-end runs: simulate (or import), beamform, localize, estimate, correct, re-localize, evaluate.

Stages exchange data only through files under the run directory:

    config.snapshot
    logs/pipeline.log
    sequence/                 frames, ground truth, aberration
    images/<tag>/             beamformed frames and grid.json
    ulm/<tag>/                tracks.csv, detections.csv, density.ulmt
    estimates/estimates.csv   per-track aberration estimates
    map/                      aberration_map.ulmt and grid.json
    metrics/                  metrics.csv, FRC and saturation curves

<tag> is "before" or "after" correction.
"""

import json
import logging
import shutil
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

from src.aberration import generate_aberration, read_aberration_csv, write_aberration_csv
from src.beamform import correction_field_from_map, das_beamform, make_correction_profile, realign_hyperbola
from src.config import RunConfig
from src.cvcnn import build_model, evaluate_model, infer
from src.dataset import TrainingDatasetLoader, write_training_dataset
from src.estimators import create_estimator
from src.exceptions import ConfigError, DomainError, StageError
from src.metrics import (coherence_auc_gain, contrast_ratio, frc, psf_widths, saturation_curve, spatial_coherence,
                         split_tracks, write_curve, write_metric_rows)
from src.models import (AberrationFunction, AberrationMap, BeamformedImage, ChannelIQ, CorrectionProfile, DensityMap,
                        ImageGrid, ProbeGeometry, RealignedPatch, Track, tracks_from_frame, tracks_to_frame)
from src.simulator import grid_fov, make_flow_phantom, read_sequence, simulate_sequence, write_sequence
from src.tensor_io import COMPLEX128, REAL64, read_tensor, write_tensor
from src.training import load_model, train
from src.ulm import (accumulate_density, detect_frames, interpolate_aberration_map, link_tracks, make_psf_template,
                     svd_clutter_filter)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
TAGS = ("before", "after")
TOTAL_INFORMATION_SNR = 0.4142

T = TypeVar("T")


def write_grid(path: Path, grid: ImageGrid) -> None:
    path.write_text(json.dumps(grid.describe(), indent=2))


def read_grid(path: Path) -> ImageGrid:
    return ImageGrid(**json.loads(Path(path).read_text()))


def global_correction(ab: AberrationFunction, probe: ProbeGeometry, mode: str) -> CorrectionProfile:
    """Correction for one aberration function; fast-mode data has an unaberrated transmit."""
    profile = make_correction_profile(ab, probe)
    return replace(profile, tx_delay=0.0) if mode == "fast" else profile


def coarse_grid(grid: ImageGrid, step: int) -> ImageGrid:
    """Every `step`-th pixel of `grid`."""
    step = max(1, int(step))
    return ImageGrid(x0=grid.x0, z0=grid.z0, dx=grid.dx * step, dz=grid.dz * step,
                     nx=(grid.nx - 1) // step + 1, nz=(grid.nz - 1) // step + 1)


def select_fit_tracks(tracks: Sequence[Track], num_frames: int, fit_fraction: float) -> List[Track]:
    """Tracks starting within the last `fit_fraction` of the sequence."""
    first = int(np.floor((1 - fit_fraction) * num_frames))
    return [t for t in tracks if t.frames[0] >= first]


class Pipeline:
    """One run directory and the stages that fill it."""

    def __init__(self, config: RunConfig, run_dir: Optional[Union[str, Path]] = None,
                 input_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.run_dir = Path(run_dir if run_dir is not None else config.output_dir)
        self.input_dir = Path(input_dir) if input_dir is not None else None
        self.logger = logging.getLogger(__name__)
        self.probe = config.probe_geometry()
        self.scheme = config.transmit_scheme()
        self.grid = config.image_grid()
        self._handler: Optional[logging.FileHandler] = None

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def open_log(self) -> None:
        """Attach a file handler writing logs/pipeline.log."""
        log_dir = self.path("logs")
        log_dir.mkdir(parents=True, exist_ok=True)
        self._handler = logging.FileHandler(log_dir / "pipeline.log")
        self._handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(self._handler)

    def close_log(self) -> None:
        if self._handler is not None:
            logging.getLogger().removeHandler(self._handler)
            self._handler.close()
            self._handler = None

    def run_stage(self, name: str, fn: Callable[[], T]) -> T:
        """Run a stage; failures other than configuration errors become StageError."""
        self.logger.info(f"Stage '{name}' started")
        try:
            result = fn()
        except (ConfigError, StageError):
            raise
        except Exception as e:
            self.logger.error(f"Stage '{name}' failed: {e}")
            raise StageError(name, str(e)) from e
        self.logger.info(f"Stage '{name}' finished")
        return result

    # simulate

    def simulate(self) -> Path:
        """Simulate the aberrated flow phantom into sequence/."""
        config = self.config
        ab = generate_aberration(config.aberration, self.probe)
        timeline = make_flow_phantom(config.phantom, self.probe, grid_fov(self.grid))
        frames = simulate_sequence(timeline, self.probe, self.scheme, ab, config.simulation_mode,
                                   config.phantom.noise_fraction, config.seed, config.workers)
        return write_sequence(self.path("sequence"), frames, timeline, ab)

    def import_sequence(self) -> Path:
        """Copy an existing sequence directory into sequence/ after checking it fits the probe."""
        target = self.path("sequence")
        frames, _, _, _ = read_sequence(self.input_dir)
        for frame in frames:
            frame.check_probe(self.probe)
        if self.input_dir.resolve() != target.resolve():
            shutil.copytree(self.input_dir, target, dirs_exist_ok=True)
        self.logger.info(f"Imported {len(frames)} frames from {self.input_dir}")
        return target

    def load_sequence(self) -> Tuple[List[ChannelIQ], Optional[AberrationFunction]]:
        frames, _, ab, _ = read_sequence(self.path("sequence"))
        return frames, ab

    # beamform

    def beamform(self, tag: str, correction: Optional[CorrectionProfile] = None) -> Path:
        frames, _ = self.load_sequence()
        out_dir = self.path("images", tag)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_grid(out_dir / "grid.json", self.grid)
        zero_filled = 0
        for index, iq in enumerate(frames):
            image = das_beamform(iq, self.grid, self.probe, self.scheme, correction, workers=self.config.workers)
            zero_filled += image.zero_filled
            write_tensor(out_dir / f"frame_{index:05d}.ulmt", image.pixels, COMPLEX128)
        self.logger.info(f"Beamformed {len(frames)} frames ({tag}), {zero_filled} with zero-filled pixels")
        return out_dir

    def load_images(self, tag: str) -> List[BeamformedImage]:
        image_dir = self.path("images", tag)
        grid = read_grid(image_dir / "grid.json")
        files = sorted(image_dir.glob("frame_*.ulmt"))
        if not files:
            raise DomainError(f"no beamformed frames in {image_dir}")
        return [BeamformedImage(grid=grid, pixels=read_tensor(f)) for f in files]

    # localization

    def localize(self, tag: str) -> List[Track]:
        """Clutter-filter, detect, track and render the density map for one image set."""
        ulm = self.config.ulm
        images = self.load_images(tag)
        filtered = svd_clutter_filter(images, ulm.svd_cutoff)
        template = make_psf_template(self.probe, self.scheme, self.grid)
        detections = detect_frames(filtered, template, ulm.corr_threshold, self.config.workers)
        tracks = link_tracks(detections, ulm.max_link_dist, ulm.min_track_len, self.grid.dx,
                             self.config.phantom.frame_rate)
        density = accumulate_density(tracks, self.grid, ulm.interp_factor, ulm.density_min_len)

        out_dir = self.path("ulm", tag)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [(f, x, z, c) for f, frame in enumerate(detections) for x, z, c in frame]
        pd.DataFrame(rows, columns=["frame", "x", "z", "correlation"]).to_csv(out_dir / "detections.csv", index=False)
        tracks_to_frame(tracks).to_csv(out_dir / "tracks.csv", index=False)
        write_tensor(out_dir / "density.ulmt", density.counts, REAL64)
        write_grid(out_dir / "grid.json", density.grid)
        self.logger.info(f"{tag}: {sum(map(len, detections))} detections, {len(tracks)} tracks")
        return tracks

    def load_tracks(self, tag: str) -> List[Track]:
        return tracks_from_frame(pd.read_csv(self.path("ulm", tag, "tracks.csv")), self.config.phantom.frame_rate)

    def load_density(self, tag: str) -> DensityMap:
        out_dir = self.path("ulm", tag)
        return DensityMap(grid=read_grid(out_dir / "grid.json"), counts=read_tensor(out_dir / "density.ulmt"))

    def realign(self, frames: Sequence[ChannelIQ], tracks: Sequence[Track],
                corrections: Optional[Sequence[CorrectionProfile]] = None) -> List[RealignedPatch]:
        ulm = self.config.ulm
        usable = [t for t in tracks if len(t) >= ulm.patch_frames]
        corrections = corrections if corrections is not None else [None] * len(usable)
        return [realign_hyperbola(frames, t, ulm.patch_samples, self.probe, self.scheme, ulm.patch_frames, c)
                for t, c in zip(usable, corrections)]

    # estimation and map

    def fit_tracks(self) -> List[Track]:
        frames, _ = self.load_sequence()
        tracks = select_fit_tracks(self.load_tracks("before"), len(frames), self.config.ulm.fit_fraction)
        return [t for t in tracks if len(t) >= self.config.ulm.patch_frames]

    def estimate(self) -> pd.DataFrame:
        """Estimate one aberration function per fitting track; writes estimates/estimates.csv."""
        frames, truth = self.load_sequence()
        tracks = self.fit_tracks()
        if not tracks:
            raise DomainError("no track is long enough to estimate an aberration")
        estimator = create_estimator(self.config.estimator, self.config, truth)
        estimates = estimator.estimate_all(self.realign(frames, tracks))
        rows = []
        for track, ab in zip(tracks, estimates):
            x, z = track.mean_position
            for n, (amp, phase) in enumerate(zip(ab.amplitude, ab.phase)):
                rows.append((track.track_id, x, z, n, amp, phase))
        df = pd.DataFrame(rows, columns=["track_id", "x", "z", "element", "amplitude", "phase_rad"])
        out_dir = self.path("estimates")
        out_dir.mkdir(parents=True, exist_ok=True)
        df.to_csv(out_dir / "estimates.csv", index=False)
        return df

    def load_estimates(self) -> List[Tuple[Tuple[float, float], AberrationFunction]]:
        df = pd.read_csv(self.path("estimates", "estimates.csv"))
        samples = []
        for _, group in df.sort_values(["track_id", "element"]).groupby("track_id", sort=True):
            ab = AberrationFunction.from_amplitude_phase(group["amplitude"].to_numpy(), group["phase_rad"].to_numpy())
            samples.append(((float(group["x"].iloc[0]), float(group["z"].iloc[0])), ab))
        return samples

    def build_map(self) -> AberrationMap:
        samples = self.load_estimates()
        ab_map = interpolate_aberration_map(samples, coarse_grid(self.grid, self.config.ulm.map_step),
                                            self.config.ulm.smoothness)
        out_dir = self.path("map")
        out_dir.mkdir(parents=True, exist_ok=True)
        write_tensor(out_dir / "aberration_map.ulmt", ab_map.values, COMPLEX128)
        write_grid(out_dir / "grid.json", ab_map.grid)
        return ab_map

    def load_map(self) -> AberrationMap:
        return AberrationMap(grid=read_grid(self.path("map", "grid.json")),
                             values=read_tensor(self.path("map", "aberration_map.ulmt")))

    def correction(self) -> Optional[CorrectionProfile]:
        """Per-pixel correction field from the aberration map; None for the identity estimator."""
        if self.config.estimator == "none":
            return None
        return correction_field_from_map(self.load_map(), self.grid, self.probe,
                                         transmit=self.config.simulation_mode == "exact")

    def track_correction(self, ab_map: AberrationMap, track: Track) -> CorrectionProfile:
        row, col = ab_map.grid.to_index(*track.mean_position)
        row = int(np.clip(np.round(row), 0, ab_map.grid.nz - 1))
        col = int(np.clip(np.round(col), 0, ab_map.grid.nx - 1))
        return global_correction(ab_map.at(row, col), self.probe, self.config.simulation_mode)

    # metrics

    def _frc_rows(self, tag: str, tracks: Sequence[Track]) -> List[Tuple[str, float, str]]:
        ulm = self.config.ulm
        half_a, half_b = split_tracks(tracks, self.config.seed)
        map_a = accumulate_density(half_a, self.grid, ulm.interp_factor, ulm.density_min_len)
        map_b = accumulate_density(half_b, self.grid, ulm.interp_factor, ulm.density_min_len)
        try:
            result = frc(map_a, map_b, self.config.metrics.frc_snr)
        except DomainError as e:
            self.logger.warning(f"FRC ({tag}) not computed: {e}")
            return [(f"frc_resolution_{tag}", float("nan"), "m")]
        curve = pd.DataFrame({"frequency": result.frequencies, "frc": result.frc, "threshold": result.threshold,
                              "ring_count": result.ring_counts})
        curve.to_csv(self.path("metrics", f"frc_{tag}.csv"), index=False)
        resolution = float("nan") if result.resolution is None else result.resolution
        return [(f"frc_resolution_{tag}", resolution, "m")]

    def _coherence_rows(self, frames: Sequence[ChannelIQ]) -> List[Tuple[str, float, str]]:
        tracks = self.fit_tracks()
        if not tracks:
            return []
        window = self.config.metrics.coherence_window
        before = [spatial_coherence(p, window) for p in self.realign(frames, tracks)]
        if self.config.estimator == "none":
            after = before
        else:
            ab_map = self.load_map()
            corrections = [self.track_correction(ab_map, t) for t in tracks]
            after = [spatial_coherence(p, window) for p in self.realign(frames, tracks, corrections)]
        return [
            ("coherence_auc_before", float(np.mean([c.auc for c in before])), "1"),
            ("coherence_auc_after", float(np.mean([c.auc for c in after])), "1"),
            ("coherence_auc_gain", coherence_auc_gain(before, after), "1"),
        ]

    def _image_rows(self) -> List[Tuple[str, float, str]]:
        """Contrast and PSF widths at each fitting track's first position."""
        lam = self.probe.wavelength
        xx, zz = self.grid.mesh()
        images = {tag: self.load_images(tag) for tag in TAGS}
        values: Dict[str, List[float]] = {}
        for track in self.fit_tracks():
            frame, x, z = int(track.frames[0]), track.x[0], track.z[0]
            distance = np.hypot(xx - x, zz - z)
            signal_roi, background_roi = distance <= lam, (distance >= 3 * lam) & (distance <= 6 * lam)
            for tag in TAGS:
                image = images[tag][frame]
                try:
                    values.setdefault(f"contrast_{tag}", []).append(contrast_ratio(image, signal_roi, background_roi))
                    lateral, axial = psf_widths(image, (x, z), lam)
                except DomainError as e:
                    self.logger.warning(f"Track {track.track_id} ({tag}) skipped for image metrics: {e}")
                    continue
                values.setdefault(f"lateral_width_{tag}", []).append(lateral)
                values.setdefault(f"axial_width_{tag}", []).append(axial)
        units = {"contrast": "dB", "lateral_width": "wavelength", "axial_width": "wavelength"}
        rows = []
        for name in sorted(values):
            rows.append((name, float(np.mean(values[name])), units[name.rsplit("_", 1)[0]]))
        if "contrast_before" in values and "contrast_after" in values:
            rows.append(("contrast_gain", float(np.mean(values["contrast_after"]) - np.mean(values["contrast_before"])),
                         "dB"))
        return rows

    def evaluate(self) -> pd.DataFrame:
        """Compute the selected metrics and write metrics/metrics.csv."""
        selections = set(self.config.metrics.selections)
        self.path("metrics").mkdir(parents=True, exist_ok=True)
        frames, truth = self.load_sequence()
        rows: List[Tuple[str, float, str]] = []
        for tag in TAGS:
            tracks = self.load_tracks(tag)
            rows.append((f"num_tracks_{tag}", float(len(tracks)), "count"))
            rows.append((f"density_total_{tag}", float(self.load_density(tag).counts.sum()), "count"))
            if "frc" in selections:
                rows.extend(self._frc_rows(tag, tracks))
            if "saturation" in selections:
                curve = saturation_curve(tracks, self.grid, self.config.ulm.interp_factor)
                write_curve(self.path("metrics", f"saturation_{tag}.csv"), [k for k, _ in curve],
                            [n for _, n in curve], ("tracks", "pixels"))
        if "frc" in selections:
            rows.append(("frc_snr", self.config.metrics.frc_snr, "1"))
            rows.append(("frc_snr_total_information", TOTAL_INFORMATION_SNR, "1"))
        if "coherence" in selections:
            rows.extend(self._coherence_rows(frames))
        if "contrast" in selections or "fwhm" in selections:
            rows.extend(r for r in self._image_rows()
                        if ("contrast" in selections or not r[0].startswith("contrast"))
                        and ("fwhm" in selections or "width" not in r[0]))
        return write_metric_rows(self.path("metrics", "metrics.csv"), rows, self.config.config_hash())

    def run(self) -> pd.DataFrame:
        """Run every stage; outputs of completed stages stay on disk when a later one fails."""
        self.config.write_snapshot(self.run_dir)
        self.open_log()
        try:
            self.logger.info(f"Run {self.config.config_hash()} in {self.run_dir} with estimator "
                             f"'{self.config.estimator}'")
            if self.input_dir is not None:
                self.run_stage("import", self.import_sequence)
            else:
                self.run_stage("simulate", self.simulate)
            self.run_stage("beamform", lambda: self.beamform("before"))
            self.run_stage("localize", lambda: self.localize("before"))
            if self.config.estimator != "none":
                self.run_stage("estimate", self.estimate)
                self.run_stage("map", self.build_map)
            self.run_stage("correct", lambda: self.beamform("after", self.correction()))
            self.run_stage("relocalize", lambda: self.localize("after"))
            return self.run_stage("metrics", self.evaluate)
        finally:
            self.close_log()


def run_pipeline(config: RunConfig, run_dir: Optional[Union[str, Path]] = None,
                 input_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Run every stage, simulating the sequence unless `input_dir` holds one."""
    return Pipeline(config, run_dir, input_dir).run()


def cmd_simulate(config: RunConfig, training: bool = False, count: Optional[int] = None) -> Path:
    """Simulate a phantom sequence, or a training dataset when `training` is set."""
    out_dir = Path(config.output_dir)
    config.write_snapshot(out_dir)
    if training:
        dataset_dir = out_dir / "dataset"
        write_training_dataset(dataset_dir, config, count, config.workers)
        return dataset_dir
    pipeline = Pipeline(config, out_dir)
    return pipeline.run_stage("simulate", pipeline.simulate)


def cmd_beamform(config: RunConfig, correction_csv: Optional[Union[str, Path]] = None) -> Path:
    """Beamform out_dir/sequence, optionally with a global correction read from CSV."""
    pipeline = Pipeline(config)
    correction = None
    tag = "before"
    if correction_csv is not None:
        correction = global_correction(read_aberration_csv(correction_csv), pipeline.probe, config.simulation_mode)
        tag = "after"
    return pipeline.run_stage("beamform", lambda: pipeline.beamform(tag, correction))


def cmd_estimate_patch(config: RunConfig, patch_path: Union[str, Path],
                       out_path: Optional[Union[str, Path]] = None) -> AberrationFunction:
    """Coherence-based estimate for one patch file; written as CSV next to it by default."""
    patch_path = Path(patch_path)
    data = read_tensor(patch_path)
    patch = RealignedPatch(data=data, track_ref=0, center_positions=np.zeros((data.shape[1], 2)))
    estimate = create_estimator("coherence", config).estimate(patch)
    write_aberration_csv(out_path or patch_path.with_suffix(".aberration.csv"), estimate)
    return estimate


def cmd_train(config: RunConfig) -> pd.DataFrame:
    """Train on config.dataset_dir with checkpoints under out_dir/checkpoints.

    Returns:
        pd.DataFrame: Loss history, also written to out_dir/history.csv
    """
    if config.dataset_dir is None:
        raise ConfigError("training needs dataset_dir")
    out_dir = Path(config.output_dir)
    config.write_snapshot(out_dir)
    loader = TrainingDatasetLoader(config.dataset_dir)
    train_set, val_set = loader.split("train"), loader.split("val")
    model = build_model(config.scale, config.seed, config.train.dropout_p, config.patch_dims())
    model, history = train(model, train_set, config.train, val_set, out_dir / "checkpoints")
    history.to_csv(out_dir / "history.csv", index=False)
    if val_set:
        evaluate_model(model, val_set).to_csv(out_dir / "evaluation.csv", index=False)
    return history


def cmd_infer(config: RunConfig, patch_dir: Union[str, Path]) -> List[AberrationFunction]:
    """Run the trained model on every patch_*.ulmt in patch_dir."""
    if config.model_checkpoint is None:
        raise ConfigError("inference needs model_checkpoint")
    model = load_model(config.model_checkpoint)
    out_dir = Path(config.output_dir) / "inference"
    estimates = []
    for path in sorted(Path(patch_dir).glob("patch_*.ulmt")):
        data = read_tensor(path)
        patch = RealignedPatch(data=data, track_ref=len(estimates), center_positions=np.zeros((data.shape[1], 2)))
        estimate = infer(model, patch)
        write_aberration_csv(out_dir / f"{path.stem}.csv", estimate)
        estimates.append(estimate)
    logger.info(f"Inferred {len(estimates)} aberration functions into {out_dir}")
    return estimates


def cmd_metrics(config: RunConfig, run_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    pipeline = Pipeline(config, run_dir)
    return pipeline.run_stage("metrics", pipeline.evaluate)


def cmd_pipeline(config: RunConfig, input_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    return run_pipeline(config, input_dir=input_dir)
