"""Complex-valued CNN mapping realigned patches to aberration functions."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.complex_layers import (AvgPool3d, ComplexBatchNorm, ComplexConv3d, ComplexConvTranspose3d, ComplexDropout,
                                ComplexLinear, Concat, CReLU, Flatten, GlobalAvgPool, Module, Sequential, Shape,
                                init_weights)
from src.exceptions import DomainError, ShapeMismatchError
from src.metrics import phase_rmse
from src.models import AberrationFunction, RealignedPatch, wrap_phase

logger = logging.getLogger(__name__)

MIN_AMPLITUDE = 1e-6


@dataclass(frozen=True)
class ArchitecturePreset:
    """Input extents and channel scaling for one model size."""
    scale: str
    input_dims: Tuple[int, int, int, int]  # angles, frames, samples, elements
    channel_divisor: int
    conv2_padding: Tuple[int, int, int]


PRESETS: Dict[str, ArchitecturePreset] = {
    "paper": ArchitecturePreset("paper", (11, 16, 17, 128), 1, (0, 0, 3)),
    "desk": ArchitecturePreset("desk", (3, 8, 9, 16), 8, (1, 1, 3)),
}


def conv_block(in_ch: int, out_ch: int, kernel, stride=1, padding=0) -> Sequential:
    """Convolution followed by complex batchnorm and CReLU."""
    return Sequential(
        ("conv", ComplexConv3d(in_ch, out_ch, kernel, stride, padding)),
        ("bn", ComplexBatchNorm(out_ch)),
        ("act", CReLU()),
    )


def deconv_block(in_ch: int, out_ch: int) -> Sequential:
    """Length-doubling transposed convolution along the element axis."""
    return Sequential(
        ("conv", ComplexConvTranspose3d(in_ch, out_ch, (1, 1, 3), (1, 1, 2), (0, 0, 1), (0, 0, 1))),
        ("bn", ComplexBatchNorm(out_ch)),
        ("act", CReLU()),
    )


class VNet1d(Module):
    """Two stride-2 downsampling stages and two upsampling stages with skip concatenation."""

    def __init__(self, channels: int, down: Tuple[int, int], up: Tuple[int, int]):
        super().__init__()
        self.down1 = conv_block(channels, down[0], (1, 1, 3), (1, 1, 2), (0, 0, 1))
        self.down2 = conv_block(down[0], down[1], (1, 1, 3), (1, 1, 2), (0, 0, 1))
        self.up1 = deconv_block(down[1], up[0])
        self.up2 = deconv_block(up[0] + down[0], up[1])

    def children(self) -> List[Tuple[str, Module]]:
        return [("down1", self.down1), ("down2", self.down2), ("up1", self.up1), ("up2", self.up2)]

    def output_shape(self, shape: Shape) -> Shape:
        d1 = self.down1.output_shape(shape)
        d2 = self.down2.output_shape(d1)
        u1 = self.up1.output_shape(d2)
        if u1[1:] != d1[1:]:
            raise ShapeMismatchError(f"up1 output {u1[1:]} does not match skip {d1[1:]}")
        u2 = self.up2.output_shape((u1[0] + d1[0],) + u1[1:])
        if u2[1:] != shape[1:]:
            raise ShapeMismatchError(f"up2 output {u2[1:]} does not match skip {shape[1:]}")
        return (u2[0] + shape[0],) + shape[1:]

    def forward(self, x: np.ndarray) -> np.ndarray:
        d1 = self.down1.forward(x)
        u1 = self.up1.forward(self.down2.forward(d1))
        u2 = self.up2.forward(np.concatenate([u1, d1], axis=1))
        self.cache = (u1.shape[1], u2.shape[1])
        return np.concatenate([u2, x], axis=1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        c_u1, c_u2 = self.cache
        g_u2, g_skip0 = grad[:, :c_u2], grad[:, c_u2:]
        g_cat = self.up2.backward(g_u2)
        g_u1, g_skip1 = g_cat[:, :c_u1], g_cat[:, c_u1:]
        g_d1 = self.down2.backward(self.up1.backward(g_u1)) + g_skip1
        return self.down1.backward(g_d1) + g_skip0


class CvCnnModel(Sequential):
    """Full network; input [batch x angles x frames x samples x elements]."""

    def __init__(self, preset: ArchitecturePreset, dropout_p: float = 0.2, seed: int = 0):
        self.preset = preset
        self.seed = seed
        self.dropout_p = dropout_p
        c = lambda n: max(1, n // preset.channel_divisor)
        n_angles, _, _, n_elements = preset.input_dims
        rng = np.random.default_rng(seed)
        dropout_seeds = rng.integers(0, 2 ** 63 - 1, size=3)

        inception = Concat(
            ("b1", Sequential(("reduce", conv_block(c(32), c(48), 1)),
                              ("conv5", conv_block(c(48), c(64), 5, padding=2)))),
            ("b2", Sequential(("reduce", conv_block(c(32), c(64), 1)),
                              ("conv3a", conv_block(c(64), c(96), 3, padding=1)),
                              ("conv3b", conv_block(c(96), c(96), 3, padding=1)))),
            ("b3", conv_block(c(32), c(64), 1)),
            ("b4", Sequential(("pool", AvgPool3d(3)), ("proj", conv_block(c(32), c(32), 1)))),
        )
        inception_out = c(64) + c(96) + c(64) + c(32)
        vnet_out = c(8) + c(16)
        super().__init__(
            ("conv1a", conv_block(n_angles, c(256), (3, 3, 7))),
            ("conv1b", conv_block(c(256), c(128), (2, 3, 4), stride=2)),
            ("conv1c", conv_block(c(128), c(32), 1)),
            ("drop1", ComplexDropout(dropout_p, int(dropout_seeds[0]))),
            ("inception", inception),
            ("drop2", ComplexDropout(dropout_p, int(dropout_seeds[1]))),
            ("conv2a", conv_block(inception_out, c(64), 3, padding=1)),
            ("conv2b", conv_block(c(64), c(32), 4, stride=2, padding=preset.conv2_padding)),
            ("conv2c", conv_block(c(32), c(32), 1)),
            ("drop3", ComplexDropout(dropout_p, int(dropout_seeds[2]))),
            ("conv2d", conv_block(c(32), c(16), 3, padding=1)),
            ("pool", GlobalAvgPool((2, 3))),
            ("vnet", VNet1d(c(16), (c(32), c(64)), (c(16), c(8)))),
            ("deconv1", deconv_block(vnet_out, c(64))),
            ("deconv2", deconv_block(c(64), c(128))),
            ("flatten", Flatten()),
        )
        flat = self._flat_features()
        self.layers.append(("fc", ComplexLinear(flat, n_elements)))
        init_weights(self, rng)
        self.check_shapes()

    def _flat_features(self) -> int:
        return Sequential.output_shape(self, self.preset.input_dims)[0]

    @property
    def num_elements(self) -> int:
        return self.preset.input_dims[3]

    def check_shapes(self) -> None:
        out = self.output_shape(self.preset.input_dims)
        if out != (self.num_elements,):
            raise ShapeMismatchError(f"model output {out} does not match {self.num_elements} elements")

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1:] != self.preset.input_dims:
            raise ShapeMismatchError(f"model expects input {self.preset.input_dims}, got {x.shape[1:]}")
        return super().forward(x)

    def dropout_layers(self) -> List[Tuple[str, ComplexDropout]]:
        return [(name, m) for name, m in self.modules() if isinstance(m, ComplexDropout)]

    def layer_manifest(self) -> List[Dict[str, object]]:
        return [{"name": name, "type": type(m).__name__} for name, m in self.modules() if name]


def build_model(scale: str = "desk", seed: int = 0, dropout_p: float = 0.2,
                input_dims: Optional[Tuple[int, int, int, int]] = None) -> CvCnnModel:
    """Build the network for a size preset, optionally overriding its input extents.

    Raises:
        DomainError: If the preset is unknown
        ShapeMismatchError: If the input extents break the shape chain; the
            message names the offending layer
    """
    if scale not in PRESETS:
        raise DomainError(f"unknown model scale '{scale}', expected one of {sorted(PRESETS)}")
    preset = PRESETS[scale]
    if input_dims is not None:
        preset = ArchitecturePreset(preset.scale, tuple(int(d) for d in input_dims), preset.channel_divisor,
                                    preset.conv2_padding)
    model = CvCnnModel(preset, dropout_p, seed)
    logger.info(f"Built {scale} model with {count_parameters(model)} real parameters for input {preset.input_dims}")
    return model


def count_parameters(model: Module) -> int:
    """Real degrees of freedom (complex entries count twice)."""
    return int(sum(p.size * (2 if np.iscomplexobj(p) else 1) for _, p, _ in model.named_parameters()))


def parameter_norm(model: Module) -> float:
    return float(np.sqrt(sum(np.sum(np.abs(p) ** 2) for _, p, _ in model.named_parameters())))


def patch_to_input(patch: RealignedPatch) -> np.ndarray:
    """RMS-normalized network input [angles x frames x samples x elements]."""
    data = patch.data
    rms = np.sqrt(np.mean(np.abs(data) ** 2))
    return data / rms if rms > 0 else data


def aberration_target(ab: AberrationFunction) -> np.ndarray:
    return ab.remove_piston().values


def output_to_aberration(values: np.ndarray) -> AberrationFunction:
    """Clamp amplitudes to (0, 1] and wrap phases."""
    amplitude = np.clip(np.abs(values), MIN_AMPLITUDE, 1.0)
    return AberrationFunction.from_amplitude_phase(amplitude, wrap_phase(np.angle(values)))


def infer(model: CvCnnModel, patch: RealignedPatch) -> AberrationFunction:
    """Evaluation-mode forward pass on one patch."""
    if patch.dims != model.preset.input_dims:
        raise ShapeMismatchError(f"patch dims {patch.dims} do not match model input {model.preset.input_dims}")
    was_training = model.training
    model.eval()
    try:
        output = model.forward(patch_to_input(patch)[None])[0]
    finally:
        model.train(was_training)
    return output_to_aberration(output)


def infer_batch(model: CvCnnModel, patches: Sequence[RealignedPatch]) -> List[AberrationFunction]:
    return [infer(model, p) for p in patches]


def evaluate_model(model: CvCnnModel, dataset: Sequence[Tuple[RealignedPatch, AberrationFunction]]) -> pd.DataFrame:
    """Piston-removed phase RMSE of the model on each held-out patch."""
    rows = []
    for index, (patch, truth) in enumerate(dataset):
        estimate = infer(model, patch)
        rows.append({"patch": index, "track_ref": patch.track_ref, "phase_rmse": phase_rmse(estimate, truth)})
    return pd.DataFrame(rows, columns=["patch", "track_ref", "phase_rmse"])
