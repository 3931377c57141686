"""Minibatch Adam training with resumable, per-epoch checkpoints."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.complex_layers import complex_l2_loss
from src.config import TrainConfig
from src.cvcnn import CvCnnModel, aberration_target, build_model, parameter_norm, patch_to_input
from src.exceptions import DomainError, ShapeMismatchError, TrainingDivergedError
from src.models import AberrationFunction, RealignedPatch
from src.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]

Sample = Tuple[RealignedPatch, AberrationFunction]


class Adam:
    """Adam with real and imaginary parts of complex parameters treated as independent reals."""

    def __init__(self, model: CvCnnModel, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        for name, param, _ in model.named_parameters():
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)

    @staticmethod
    def _square(g: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(g):
            return g.real ** 2 + 1j * g.imag ** 2
        return g * g

    @staticmethod
    def _scaled(m_hat: np.ndarray, v_hat: np.ndarray, eps: float) -> np.ndarray:
        if np.iscomplexobj(m_hat):
            return m_hat.real / (np.sqrt(v_hat.real) + eps) + 1j * m_hat.imag / (np.sqrt(v_hat.imag) + eps)
        return m_hat / (np.sqrt(v_hat) + eps)

    def step(self, model: CvCnnModel, lr: float) -> None:
        self.step_count += 1
        bias1 = 1 - self.beta1 ** self.step_count
        bias2 = 1 - self.beta2 ** self.step_count
        for name, param, grad in model.named_parameters():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * self._square(grad)
            update = self._scaled(self.m[name] / bias1, self.v[name] / bias2, self.eps)
            param -= lr * update


def _stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    inputs = np.stack([patch_to_input(p) for p, _ in samples])
    targets = np.stack([aberration_target(ab) for _, ab in samples])
    return inputs, targets


def _check_dataset(model: CvCnnModel, samples: Sequence[Sample], name: str) -> None:
    for index, (patch, ab) in enumerate(samples):
        if patch.dims != model.preset.input_dims:
            raise ShapeMismatchError(f"{name} sample {index}: patch {patch.dims} vs model {model.preset.input_dims}")
        if len(ab) != model.num_elements:
            raise ShapeMismatchError(f"{name} sample {index}: target length {len(ab)} vs {model.num_elements}")


def l2_penalty(model: CvCnnModel, alpha: float) -> float:
    """alpha * ||Theta||^2; adds 2 alpha Theta to every gradient."""
    total = 0.0
    for _, param, grad in model.named_parameters():
        total += float(np.sum(np.abs(param) ** 2))
        if alpha:
            grad += 2 * alpha * param
    return alpha * total


def evaluate_loss(model: CvCnnModel, samples: Sequence[Sample], batch_size: int) -> float:
    if not samples:
        return float("nan")
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        for start in range(0, len(samples), batch_size):
            inputs, targets = _stack(samples[start:start + batch_size])
            loss, _ = complex_l2_loss(model.forward(inputs), targets)
            total += loss * inputs.shape[0]
    finally:
        model.train(was_training)
    return total / len(samples)


class Trainer:
    """Owns the model, optimizer and shuffling state between epochs."""

    def __init__(self, model: CvCnnModel, cfg: TrainConfig, checkpoint_dir: Optional[Union[str, Path]] = None):
        self.model = model
        self.cfg = cfg
        self.optimizer = Adam(model)
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.history: List[Dict[str, float]] = []
        self.epoch = 0
        self.logger = logging.getLogger(__name__)

    def learning_rate(self, epoch: int) -> float:
        return self.cfg.lr0 * self.cfg.lr_decay ** epoch

    def train_epoch(self, samples: Sequence[Sample]) -> float:
        model = self.model
        model.train()
        lr = self.learning_rate(self.epoch)
        order = self.rng.permutation(len(samples))
        total = 0.0
        for step, start in enumerate(range(0, len(samples), self.cfg.batch_size)):
            batch = [samples[i] for i in order[start:start + self.cfg.batch_size]]
            inputs, targets = _stack(batch)
            model.zero_grad()
            loss, grad = complex_l2_loss(model.forward(inputs), targets)
            if not np.isfinite(loss):
                diagnostics = {"parameter_norm": parameter_norm(model), "lr": lr}
                self.logger.error(f"Training diverged at epoch {self.epoch}, step {step}")
                raise TrainingDivergedError(self.epoch, step, diagnostics)
            model.backward(grad)
            l2_penalty(model, self.cfg.l2_alpha)
            self.optimizer.step(model, lr)
            total += loss * len(batch)
        return total / len(samples)

    def fit(self, train_set: Sequence[Sample], val_set: Sequence[Sample] = ()) -> pd.DataFrame:
        if not train_set:
            raise DomainError("training set is empty")
        _check_dataset(self.model, train_set, "train")
        _check_dataset(self.model, val_set, "validation")
        while self.epoch < self.cfg.epochs:
            lr = self.learning_rate(self.epoch)
            train_loss = self.train_epoch(train_set)
            val_loss = evaluate_loss(self.model, val_set, self.cfg.batch_size)
            self.history.append({"epoch": self.epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
            self.logger.info(f"Epoch {self.epoch}: train {train_loss:.4e}, val {val_loss:.4e}, lr {lr:.3e}")
            self.epoch += 1
            if self.checkpoint_dir is not None:
                save_checkpoint(self, self.checkpoint_dir)
        return self.history_frame()

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=HISTORY_COLUMNS)


def train(model: CvCnnModel, dataset: Sequence[Sample], cfg: TrainConfig, val_set: Sequence[Sample] = (),
          checkpoint_dir: Optional[Union[str, Path]] = None, resume: bool = True) -> Tuple[CvCnnModel, pd.DataFrame]:
    """Train the model and return it with its per-epoch loss history.

    Args:
        model: Network to train in place
        dataset: Training (patch, target) pairs
        cfg: Optimizer and schedule settings
        val_set: Validation pairs evaluated after every epoch
        checkpoint_dir: Where epoch_XXXX/ checkpoints are written
        resume: Continue from the latest checkpoint in checkpoint_dir

    Returns:
        Tuple of the trained model and a DataFrame (epoch, train_loss, val_loss, lr)

    Raises:
        TrainingDivergedError: If the loss becomes non-finite
    """
    trainer = Trainer(model, cfg, checkpoint_dir)
    if resume and checkpoint_dir is not None:
        latest = latest_checkpoint(checkpoint_dir)
        if latest is not None:
            load_checkpoint(trainer, latest)
            logger.info(f"Resuming from {latest} at epoch {trainer.epoch}")
    history = trainer.fit(dataset, val_set)
    return model, history


def _file_stem(name: str) -> str:
    return name.replace(".", "__")


def save_checkpoint(trainer: Trainer, checkpoint_dir: Union[str, Path]) -> Path:
    """Write epoch_XXXX/ with a manifest and one ULMT file per tensor."""
    model = trainer.model
    path = Path(checkpoint_dir) / f"epoch_{trainer.epoch:04d}"
    tensors: Dict[str, Dict[str, object]] = {}
    try:
        path.mkdir(parents=True, exist_ok=True)
        groups = [
            ("param", [(n, p) for n, p, _ in model.named_parameters()]),
            ("buffer", list(model.named_buffers())),
            ("adam_m", list(trainer.optimizer.m.items())),
            ("adam_v", list(trainer.optimizer.v.items())),
        ]
        for group, items in groups:
            for name, value in items:
                file_name = f"{group}__{_file_stem(name)}.ulmt"
                write_tensor(path / file_name, value)
                tensors[f"{group}:{name}"] = {"file": file_name, "shape": list(value.shape)}
        manifest = {
            "scale": model.preset.scale,
            "input_dims": list(model.preset.input_dims),
            "seed": model.seed,
            "dropout_p": model.dropout_p,
            "epoch": trainer.epoch,
            "optimizer_step": trainer.optimizer.step_count,
            "layers": model.layer_manifest(),
            "tensors": tensors,
            "rng": {
                "shuffle": trainer.rng.bit_generator.state,
                "dropout": {name: m.rng.bit_generator.state for name, m in model.dropout_layers()},
            },
            "history": trainer.history,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    return path


def latest_checkpoint(checkpoint_dir: Union[str, Path]) -> Optional[Path]:
    root = Path(checkpoint_dir)
    if not root.exists():
        return None
    candidates = sorted(p for p in root.glob("epoch_*") if (p / "manifest.json").exists())
    return candidates[-1] if candidates else None


def read_manifest(path: Union[str, Path]) -> Dict[str, object]:
    return json.loads((Path(path) / "manifest.json").read_text())


def _restore_tensors(model: CvCnnModel, path: Path, manifest: Dict[str, object],
                     optimizer: Optional[Adam] = None) -> None:
    for key, entry in manifest["tensors"].items():
        group, name = key.split(":", 1)
        value = read_tensor(path / entry["file"])
        if group in ("param", "buffer"):
            model.set_tensor(name, value)
        elif optimizer is not None:
            store = optimizer.m if group == "adam_m" else optimizer.v
            if name not in store or store[name].shape != value.shape:
                raise ShapeMismatchError(f"optimizer state '{name}' does not match the model")
            store[name] = value.astype(store[name].dtype)


def load_checkpoint(trainer: Trainer, path: Union[str, Path]) -> None:
    """Restore model, optimizer, RNG and history state into a trainer."""
    path = Path(path)
    manifest = read_manifest(path)
    model = trainer.model
    if tuple(manifest["input_dims"]) != model.preset.input_dims or manifest["scale"] != model.preset.scale:
        raise ShapeMismatchError(
            f"checkpoint {path} is for {manifest['scale']} {manifest['input_dims']}, "
            f"model is {model.preset.scale} {list(model.preset.input_dims)}"
        )
    _restore_tensors(model, path, manifest, trainer.optimizer)
    trainer.optimizer.step_count = int(manifest["optimizer_step"])
    trainer.epoch = int(manifest["epoch"])
    trainer.rng.bit_generator.state = manifest["rng"]["shuffle"]
    for name, layer in model.dropout_layers():
        layer.rng.bit_generator.state = manifest["rng"]["dropout"][name]
    trainer.history = list(manifest["history"])


def load_model(path: Union[str, Path]) -> CvCnnModel:
    """Rebuild a model from a checkpoint directory (or a directory of them) for inference."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        latest = latest_checkpoint(path)
        if latest is None:
            raise DomainError(f"no checkpoint found under {path}")
        path = latest
    manifest = read_manifest(path)
    model = build_model(manifest["scale"], int(manifest["seed"]), float(manifest["dropout_p"]),
                        tuple(manifest["input_dims"]))
    _restore_tensors(model, path, manifest)
    return model.eval()
