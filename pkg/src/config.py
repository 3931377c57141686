"""Run configuration: nested dataclasses, JSON files, environment overrides."""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union

import numpy as np
from dotenv import load_dotenv

from src.exceptions import ConfigError
from src.models import ImageGrid, ProbeGeometry, TransmitScheme

logger = logging.getLogger(__name__)

T = TypeVar("T")

ESTIMATORS = ("coherence", "cvcnn", "ground-truth", "none")
SIMULATION_MODES = ("exact", "fast")
# Spline knots across the aperture: 16 over 128 elements, 6 over the 16-element desk probe.
PAPER_SMOOTHING_POINTS = 16
DESK_SMOOTHING_POINTS = 6


@dataclass
class ProbeConfig:
    num_elements: int = 16
    center_frequency: float = 15.625e6
    sound_speed: float = 1540.0
    pitch: Optional[float] = None  # None -> one wavelength

    def to_probe(self) -> ProbeGeometry:
        pitch = self.pitch if self.pitch is not None else self.sound_speed / self.center_frequency
        return ProbeGeometry(self.num_elements, pitch, self.center_frequency, self.sound_speed)


@dataclass
class SchemeConfig:
    angles_deg: List[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0])
    pulse_cycles: int = 3

    def to_scheme(self) -> TransmitScheme:
        return TransmitScheme.from_degrees(self.angles_deg, self.pulse_cycles)


@dataclass
class GridConfig:
    """Beamforming grid in wavelengths relative to the probe center."""
    x_min: float = -16.0
    x_max: float = 16.0
    z_min: float = 16.0
    z_max: float = 48.0
    pixel_size: float = 0.5

    def to_grid(self, probe: ProbeGeometry) -> ImageGrid:
        lam = probe.wavelength
        nx = int(round((self.x_max - self.x_min) / self.pixel_size)) + 1
        nz = int(round((self.z_max - self.z_min) / self.pixel_size)) + 1
        return ImageGrid(x0=self.x_min * lam, z0=self.z_min * lam, dx=self.pixel_size * lam,
                         dz=self.pixel_size * lam, nx=nx, nz=nz)


@dataclass
class VesselConfig:
    path: List[List[float]]  # polyline vertices [[x, z], ...] in meters
    radius: float
    peak_speed: float


def _default_vessels() -> List[VesselConfig]:
    return [
        VesselConfig(path=[[-1.5e-3, 2.6e-3], [1.5e-3, 2.6e-3]], radius=100e-6, peak_speed=15e-3),
        VesselConfig(path=[[-1.2e-3, 3.3e-3], [1.2e-3, 4.2e-3]], radius=80e-6, peak_speed=10e-3),
    ]


@dataclass
class PhantomConfig:
    vessels: List[VesselConfig] = field(default_factory=_default_vessels)
    bubble_concentration: float = 25.0  # bubbles / mm^3
    bubble_reflectivity: float = 1.0
    frame_rate: float = 500.0
    num_frames: int = 64
    speckle_density: float = 10.0  # point sources per lambda^2
    speckle_scale: float = 0.01
    noise_fraction: float = 0.05
    rng_seed: int = 0


@dataclass
class AberrationConfig:
    phase_bound: float = 0.5
    amp_min: float = 0.5
    smoothing_points: int = DESK_SMOOTHING_POINTS
    rng_seed: int = 0


@dataclass
class CoherenceEstimatorConfig:
    upsample_factor: int = 8
    smoothing_span: float = 0.15
    max_lag: int = 2


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 25
    lr0: float = 1e-4
    lr_decay: float = 0.99
    l2_alpha: float = 1e-4
    dropout_p: float = 0.2
    rng_seed: int = 0


@dataclass
class UlmConfig:
    svd_cutoff: int = 1
    corr_threshold: float = 0.6
    max_link_dist: float = 2.0
    min_track_len: int = 16
    density_min_len: int = 25
    interp_factor: int = 10
    map_step: int = 8
    smoothness: Optional[float] = None  # None -> generalized cross-validation
    fit_fraction: float = 1.0
    patch_frames: int = 8
    patch_samples: int = 9


@dataclass
class MetricsConfig:
    frc_snr: float = 0.2071
    coherence_window: Optional[int] = None
    selections: List[str] = field(default_factory=lambda: ["coherence", "contrast", "fwhm", "frc", "saturation"])


@dataclass
class DatasetConfig:
    count: int = 2000
    val_ratio: int = 4  # train:val = val_ratio:1
    max_bubbles: int = 1
    patch_fov: float = 8.0  # half-width of the local speckle region, wavelengths
    speckle: bool = True


@dataclass
class RunConfig:
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    aberration: AberrationConfig = field(default_factory=AberrationConfig)
    coherence: CoherenceEstimatorConfig = field(default_factory=CoherenceEstimatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ulm: UlmConfig = field(default_factory=UlmConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    estimator: str = "coherence"
    simulation_mode: str = "fast"
    scale: str = "desk"
    model_checkpoint: Optional[str] = None
    dataset_dir: Optional[str] = None
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def validate(self) -> "RunConfig":
        """Check cross-field consistency.

        Raises:
            ConfigError: If any field is out of range
        """
        checks = [
            (self.estimator in ESTIMATORS, f"estimator must be one of {ESTIMATORS}, got '{self.estimator}'"),
            (self.simulation_mode in SIMULATION_MODES,
             f"simulation_mode must be one of {SIMULATION_MODES}, got '{self.simulation_mode}'"),
            (self.scale in ("desk", "paper"), f"scale must be 'desk' or 'paper', got '{self.scale}'"),
            (self.workers >= 1, f"workers must be >= 1, got {self.workers}"),
            (0 < self.aberration.phase_bound <= 0.5, f"phase_bound must be in (0, 0.5], got {self.aberration.phase_bound}"),
            (0 < self.aberration.amp_min <= 1, f"amp_min must be in (0, 1], got {self.aberration.amp_min}"),
            (self.aberration.smoothing_points >= 2, "smoothing_points must be >= 2"),
            (self.coherence.upsample_factor >= 1, "upsample_factor must be >= 1"),
            (0 < self.coherence.smoothing_span <= 1, "smoothing_span must be in (0, 1]"),
            (self.phantom.bubble_concentration > 0, "bubble_concentration must be positive"),
            (self.phantom.frame_rate > 0, "frame_rate must be positive"),
            (all(v.radius > 0 for v in self.phantom.vessels), "vessel radius must be positive"),
            (self.train.epochs > 0 and self.train.batch_size > 0, "epochs and batch_size must be positive"),
            (self.train.lr0 >= 0 and self.train.l2_alpha >= 0, "lr0 and l2_alpha must be non-negative"),
            (0 < self.train.lr_decay <= 1, f"lr_decay must be in (0, 1], got {self.train.lr_decay}"),
            (0 <= self.train.dropout_p < 1, "dropout_p must be in [0, 1)"),
            (self.ulm.patch_samples % 2 == 1, f"patch_samples must be odd, got {self.ulm.patch_samples}"),
            (0 < self.ulm.fit_fraction <= 1, f"fit_fraction must be in (0, 1], got {self.ulm.fit_fraction}"),
            (self.ulm.interp_factor >= 1, "interp_factor must be >= 1"),
            (self.dataset.count >= 1 and self.dataset.val_ratio >= 1, "dataset count and val_ratio must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.estimator == "cvcnn" and self.model_checkpoint is None:
            logger.warning("estimator 'cvcnn' without model_checkpoint; an untrained model will be used")
        return self

    def paper_scale(self) -> "RunConfig":
        """Return a copy switched to the full-size dimensions."""
        return replace(
            self,
            probe=replace(self.probe, num_elements=128),
            scheme=replace(self.scheme, angles_deg=[float(a) for a in np.linspace(-5.0, 5.0, 11)]),
            aberration=replace(self.aberration, smoothing_points=PAPER_SMOOTHING_POINTS),
            ulm=replace(self.ulm, patch_frames=16, patch_samples=17),
            dataset=replace(self.dataset, count=20000),
            scale="paper",
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]

    def write_snapshot(self, run_dir: Union[str, Path]) -> Path:
        run_dir = Path(run_dir)
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            path = run_dir / "config.snapshot"
            path.write_text(self.canonical_json())
        except OSError as e:
            logger.error(f"Cannot write config snapshot to {run_dir}: {e}")
            raise
        return path

    def probe_geometry(self) -> ProbeGeometry:
        return self.probe.to_probe()

    def transmit_scheme(self) -> TransmitScheme:
        return self.scheme.to_scheme()

    def image_grid(self) -> ImageGrid:
        return self.grid.to_grid(self.probe_geometry())

    def patch_dims(self) -> Tuple[int, int, int, int]:
        return (len(self.scheme.angles_deg), self.ulm.patch_frames, self.ulm.patch_samples, self.probe.num_elements)


def _build(cls: Type[T], data: Any, path: str) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"section '{path}' must be an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in '{path or 'root'}': {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub_path = f"{path}.{name}" if path else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub_path)
        elif name == "vessels":
            kwargs[name] = [_build_vessel(v, f"{sub_path}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _build_vessel(data: Any, path: str) -> VesselConfig:
    if not isinstance(data, dict) or set(data) != {"path", "radius", "peak_speed"}:
        raise ConfigError(f"'{path}' must have exactly the keys path, radius, peak_speed")
    return VesselConfig(path=[list(map(float, p)) for p in data["path"]],
                        radius=float(data["radius"]), peak_speed=float(data["peak_speed"]))


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    try:
        return _build(RunConfig, data, "")
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def apply_env_overrides(config: RunConfig) -> RunConfig:
    """Apply ULM_* environment variables (a .env file is honored)."""
    load_dotenv()
    overrides: Dict[str, Any] = {}
    try:
        if os.getenv("ULM_OUTPUT_DIR"):
            overrides["output_dir"] = os.getenv("ULM_OUTPUT_DIR")
        if os.getenv("ULM_WORKERS"):
            overrides["workers"] = int(os.getenv("ULM_WORKERS"))
        if os.getenv("ULM_SEED"):
            overrides["seed"] = int(os.getenv("ULM_SEED"))
    except ValueError as e:
        raise ConfigError(f"invalid environment override: {e}") from e
    return replace(config, **overrides) if overrides else config


def get_log_level(default: str = "INFO") -> str:
    load_dotenv()
    return os.getenv("ULM_LOG_LEVEL", default).upper()


def load_config(path: Optional[Union[str, Path]] = None, paper_scale: bool = False) -> RunConfig:
    """Load a run configuration.

    Args:
        path: JSON file or config.snapshot; None uses the built-in defaults
        paper_scale: Switch to full-size dimensions before applying the file

    Returns:
        RunConfig: Validated configuration with environment overrides applied

    Raises:
        ConfigError: If the file is missing, malformed or inconsistent
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    base = RunConfig().paper_scale() if paper_scale else RunConfig()
    config = _merge(base, data) if data else base
    return apply_env_overrides(config).validate()


def _merge(base: RunConfig, data: Dict[str, Any]) -> RunConfig:
    merged = base.to_dict()
    _deep_update(merged, data)
    return config_from_dict(merged)


def _deep_update(target: Dict[str, Any], update: Dict[str, Any]) -> None:
    for key, value in update.items():
        if key not in target:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(value, dict) and isinstance(target[key], dict):
            _deep_update(target[key], value)
        else:
            target[key] = value
