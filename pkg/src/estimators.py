"""Interchangeable per-track aberration estimators."""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence

from src.config import ESTIMATORS, CoherenceEstimatorConfig, RunConfig
from src.cvcnn import CvCnnModel, build_model, infer
from src.estimator_coherence import estimate_coherence_based
from src.exceptions import ConfigError, DomainError
from src.models import AberrationFunction, ProbeGeometry, RealignedPatch
from src.training import load_model


class AberrationEstimator(ABC):
    """Maps a realigned patch to an aberration function."""

    name = "base"

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    @abstractmethod
    def initialize(self, parameters: Dict[str, Any]) -> None:
        """Initialize the estimator.

        Args:
            parameters: Estimator-specific settings
        """

    @abstractmethod
    def estimate(self, patch: RealignedPatch) -> AberrationFunction:
        """Estimate the aberration seen by one patch.

        Args:
            patch: Realigned patch of a single track

        Returns:
            AberrationFunction: One complex value per element
        """

    def estimate_all(self, patches: Sequence[RealignedPatch]) -> List[AberrationFunction]:
        estimates = [self.estimate(p) for p in patches]
        self.logger.info(f"{self.name} estimator processed {len(estimates)} patches")
        return estimates


class CoherenceEstimator(AberrationEstimator):
    """Neighbouring-element delay estimation with robust smoothing."""

    name = "coherence"

    def initialize(self, parameters: Dict[str, Any]) -> None:
        self.probe: ProbeGeometry = parameters["probe"]
        self.config: CoherenceEstimatorConfig = parameters.get("config", CoherenceEstimatorConfig())

    def estimate(self, patch: RealignedPatch) -> AberrationFunction:
        return estimate_coherence_based(patch, self.probe, self.config)


class CvCnnEstimator(AberrationEstimator):
    """Complex-valued CNN inference, from an in-memory model or a checkpoint."""

    name = "cvcnn"

    def initialize(self, parameters: Dict[str, Any]) -> None:
        model: Optional[CvCnnModel] = parameters.get("model")
        checkpoint = parameters.get("checkpoint")
        if model is None and checkpoint is not None:
            model = load_model(checkpoint)
            self.logger.info(f"Loaded model from {checkpoint}")
        if model is None:
            model = build_model(parameters.get("scale", "desk"), int(parameters.get("seed", 0)),
                                input_dims=parameters.get("input_dims"))
            self.logger.warning("No trained model given; using freshly initialized weights")
        self.model = model.eval()

    def estimate(self, patch: RealignedPatch) -> AberrationFunction:
        return infer(self.model, patch)


class GroundTruthEstimator(AberrationEstimator):
    """Returns the known simulation aberration for every patch."""

    name = "ground-truth"

    def initialize(self, parameters: Dict[str, Any]) -> None:
        truth = parameters.get("truth")
        if truth is None:
            raise DomainError("ground-truth estimator needs the simulated aberration")
        self.truth: AberrationFunction = truth

    def estimate(self, patch: RealignedPatch) -> AberrationFunction:
        if patch.num_elements != len(self.truth):
            raise DomainError(f"patch has {patch.num_elements} elements, truth has {len(self.truth)}")
        return AberrationFunction(values=self.truth.values.copy())


class NoneEstimator(AberrationEstimator):
    """Identity estimate; leaves images unchanged."""

    name = "none"

    def initialize(self, parameters: Dict[str, Any]) -> None:
        pass

    def estimate(self, patch: RealignedPatch) -> AberrationFunction:
        return AberrationFunction.identity(patch.num_elements)


ESTIMATOR_CLASSES = {
    "coherence": CoherenceEstimator,
    "cvcnn": CvCnnEstimator,
    "ground-truth": GroundTruthEstimator,
    "none": NoneEstimator,
}


def create_estimator(name: str, config: RunConfig, truth: Optional[AberrationFunction] = None,
                     model: Optional[CvCnnModel] = None) -> AberrationEstimator:
    """Build and initialize the estimator selected by name.

    Raises:
        ConfigError: If the name is unknown
    """
    if name not in ESTIMATORS:
        raise ConfigError(f"estimator must be one of {ESTIMATORS}, got '{name}'")
    estimator = ESTIMATOR_CLASSES[name]()
    estimator.initialize({
        "probe": config.probe_geometry(),
        "config": config.coherence,
        "truth": truth,
        "model": model,
        "checkpoint": config.model_checkpoint,
        "scale": config.scale,
        "seed": config.seed,
        "input_dims": config.patch_dims(),
    })
    return estimator
