"""Training-set generation and loading for the aberration network.

Each sample is a realigned patch around one simulated bubble paired with the
aberration function used to simulate it. A dataset directory holds
patch_XXXXX.ulmt, target_XXXXX.ulmt and index.csv (sample, patch_file,
target_file, split).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.aberration import generate_aberration, read_aberration, write_aberration
from src.beamform import realign_hyperbola
from src.config import RunConfig
from src.exceptions import DomainError, ShapeMismatchError
from src.models import (AberrationFunction, ProbeGeometry, RealignedPatch, ScattererSet, ScattererTimeline, Track,
                        TransmitScheme)
from src.simulator import fov_duration, make_speckle, simulate_sequence
from src.tensor_io import COMPLEX128, read_tensor, write_tensor

logger = logging.getLogger(__name__)

INDEX_COLUMNS = ["sample", "patch_file", "target_file", "split"]


def simulate_patch(probe: ProbeGeometry, scheme: TransmitScheme, ab: Optional[AberrationFunction],
                   positions: np.ndarray, num_samples: int, extra_positions: Sequence[np.ndarray] = (),
                   speckle: Optional[ScattererSet] = None, noise_fraction: float = 0.0, rng_seed: int = 0,
                   mode: str = "fast", frame_rate: float = 1.0) -> RealignedPatch:
    """Simulate a short sequence and realign it along the first bubble's known path.

    Args:
        probe: Probe geometry
        scheme: Transmit sequence
        ab: Aberration applied during simulation
        positions: Guide bubble positions [frames x 2] (x, z)
        num_samples: Realignment window length
        extra_positions: Paths of further bubbles, each [frames x 2]
        speckle: Static background scatterers
        noise_fraction: Electronic noise level
        rng_seed: Noise seed
        mode: Simulation mode
        frame_rate: Frame rate stored on the track

    Returns:
        RealignedPatch: Patch of the guide bubble
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    paths = [positions] + [np.asarray(p, dtype=float).reshape(-1, 2) for p in extra_positions]
    nf = positions.shape[0]
    if any(p.shape[0] != nf for p in paths):
        raise ShapeMismatchError("all bubble paths must cover the same frames")
    speckle = speckle if speckle is not None else ScattererSet.empty()
    bubbles = [ScattererSet(x=[p[f, 0] for p in paths], z=[p[f, 1] for p in paths],
                            reflectivity=np.ones(len(paths))) for f in range(nf)]
    everything = np.concatenate(paths + [np.stack([speckle.x, speckle.z], axis=1)] if len(speckle) else paths)
    fov = (everything[:, 0].min(), everything[:, 0].max(), everything[:, 1].min(), everything[:, 1].max())
    timeline = ScattererTimeline(bubbles=bubbles, bubble_ids=[np.arange(len(paths))] * nf, speckle=speckle,
                                 frame_rate=frame_rate, fov=fov)
    frames = simulate_sequence(timeline, probe, scheme, ab, mode, noise_fraction, rng_seed,
                               duration=fov_duration(fov, probe, scheme))
    track = Track(0, np.arange(nf), positions[:, 0], positions[:, 1], frame_rate)
    return realign_hyperbola(frames, track, num_samples, probe, scheme, nf)


def random_path(rng: np.random.Generator, center: Tuple[float, float], num_frames: int, frame_rate: float,
                speed_range: Tuple[float, float] = (5e-3, 20e-3)) -> np.ndarray:
    """Straight constant-speed path through `center` with a random heading."""
    speed = rng.uniform(*speed_range)
    heading = rng.uniform(0, 2 * np.pi)
    step = speed / frame_rate * np.array([np.cos(heading), np.sin(heading)])
    offsets = (np.arange(num_frames) - (num_frames - 1) / 2)[:, None] * step[None, :]
    return np.asarray(center)[None, :] + offsets


def generate_sample(config: RunConfig, index: int) -> Tuple[RealignedPatch, AberrationFunction]:
    """Draw one (patch, aberration) pair; deterministic in (config.seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    probe = config.probe_geometry()
    scheme = config.transmit_scheme()
    grid = config.image_grid()
    lam = probe.wavelength
    ab = generate_aberration(config.aberration, probe, rng)

    width = (grid.nx - 1) * grid.dx
    height = (grid.nz - 1) * grid.dz
    center = (grid.x0 + width * rng.uniform(0.35, 0.65), grid.z0 + height * rng.uniform(0.35, 0.65))
    nf = config.ulm.patch_frames
    frame_rate = config.phantom.frame_rate
    guide = random_path(rng, center, nf, frame_rate)
    extra = []
    for _ in range(int(rng.integers(0, config.dataset.max_bubbles))):
        offset = rng.uniform(-2 * lam, 2 * lam, size=2)
        extra.append(random_path(rng, (center[0] + offset[0], center[1] + offset[1]), nf, frame_rate))

    speckle = None
    if config.dataset.speckle:
        half = config.dataset.patch_fov * lam
        fov = (center[0] - half, center[0] + half, max(center[1] - half, lam), center[1] + half)
        speckle = make_speckle(fov, lam, config.phantom.speckle_density, config.phantom.speckle_scale, rng)
    patch = simulate_patch(probe, scheme, ab, guide, config.ulm.patch_samples, extra, speckle,
                           config.phantom.noise_fraction, int(rng.integers(0, 2 ** 31 - 1)),
                           config.simulation_mode, frame_rate)
    patch.track_ref = index
    return patch, ab


def split_assignment(count: int, val_ratio: int, seed: int) -> np.ndarray:
    """'train'/'val' labels in a val_ratio:1 ratio, shuffled with a fixed seed."""
    num_val = count // (val_ratio + 1)
    labels = np.array(["train"] * (count - num_val) + ["val"] * num_val)
    return labels[np.random.default_rng(seed).permutation(count)]


def write_training_dataset(out_dir: Union[str, Path], config: RunConfig, count: Optional[int] = None,
                           workers: int = 1) -> pd.DataFrame:
    """Generate and write `count` patch/target pairs plus index.csv.

    Returns:
        pd.DataFrame: The written index
    """
    out_dir = Path(out_dir)
    count = config.dataset.count if count is None else count
    if count < 1:
        raise DomainError(f"dataset count must be >= 1, got {count}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create dataset directory {out_dir}: {e}")
        raise

    def build(index: int) -> Dict[str, object]:
        patch, ab = generate_sample(config, index)
        patch_file, target_file = f"patch_{index:05d}.ulmt", f"target_{index:05d}.ulmt"
        write_tensor(out_dir / patch_file, patch.data, COMPLEX128)
        write_aberration(out_dir / target_file, ab)
        return {"sample": index, "patch_file": patch_file, "target_file": target_file}

    logger.info(f"Generating {count} training samples in {out_dir}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(build, range(count)))
    index = pd.DataFrame(rows, columns=INDEX_COLUMNS[:3])
    index["split"] = split_assignment(count, config.dataset.val_ratio, config.seed)
    index.to_csv(out_dir / "index.csv", index=False)
    return index


class TrainingDatasetLoader:
    """Reads and validates a dataset directory written by write_training_dataset."""

    def __init__(self, dataset_dir: Union[str, Path]):
        self.dataset_dir = Path(dataset_dir)
        self.logger = logging.getLogger(__name__)
        index_path = self.dataset_dir / "index.csv"
        if not index_path.exists():
            raise DomainError(f"{self.dataset_dir} has no index.csv")
        self.index = pd.read_csv(index_path)
        self.validate_index()

    def validate_index(self) -> None:
        """Check columns, split labels and uniqueness of samples.

        Raises:
            DomainError: If the index is inconsistent
        """
        missing = set(INDEX_COLUMNS) - set(self.index.columns)
        if missing:
            raise DomainError(f"index.csv lacks columns {sorted(missing)}")
        bad = set(self.index["split"]) - {"train", "val"}
        if bad:
            raise DomainError(f"unknown split labels {sorted(bad)}")
        if self.index["sample"].duplicated().any():
            raise DomainError("index.csv lists a sample more than once")
        for column in ("patch_file", "target_file"):
            absent = [f for f in self.index[column] if not (self.dataset_dir / f).exists()]
            if absent:
                raise DomainError(f"{len(absent)} {column} entries are missing, e.g. {absent[0]}")

    def load_sample(self, row: pd.Series) -> Tuple[RealignedPatch, AberrationFunction]:
        data = read_tensor(self.dataset_dir / row["patch_file"])
        ab = read_aberration(self.dataset_dir / row["target_file"])
        if data.ndim != 4 or data.shape[3] != len(ab):
            raise ShapeMismatchError(f"sample {row['sample']}: patch {data.shape} and target {len(ab)} disagree")
        patch = RealignedPatch(data=data, track_ref=int(row["sample"]), center_positions=np.zeros((data.shape[1], 2)))
        return patch, ab

    def split(self, name: str) -> List[Tuple[RealignedPatch, AberrationFunction]]:
        rows = self.index[self.index["split"] == name].sort_values("sample")
        samples = [self.load_sample(row) for _, row in rows.iterrows()]
        dims = {p.dims for p, _ in samples}
        if len(dims) > 1:
            raise ShapeMismatchError(f"{name} split mixes patch dims {sorted(dims)}")
        self.logger.info(f"Loaded {len(samples)} {name} samples from {self.dataset_dir}")
        return samples

    @property
    def counts(self) -> Dict[str, int]:
        return self.index["split"].value_counts().to_dict()
