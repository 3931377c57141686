"""Complex-valued network layers with explicit forward and backward passes.

Tensors are complex arrays [batch x channels x d1 x d2 x d3]. Gradients of
a real loss L use the convention G = dL/d(real) + i dL/d(imag) for both
activations and parameters.
"""

import logging
from itertools import product
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]
Shape = Tuple[int, ...]
SeedLike = Union[int, np.random.Generator, None]

SPATIAL_AXES = (2, 3, 4)


def _triple(value: Union[int, Sequence[int]]) -> Triple:
    if np.isscalar(value):
        return (int(value),) * 3
    values = tuple(int(v) for v in value)
    if len(values) != 3:
        raise ShapeMismatchError(f"expected three extents, got {values}")
    return values


def _block(op: Callable[[np.ndarray, np.ndarray], np.ndarray], ar: np.ndarray, ai: np.ndarray,
           br: np.ndarray, bi: np.ndarray) -> np.ndarray:
    """Complex bilinear product written with four real products."""
    return (op(ar, br) - op(ai, bi)) + 1j * (op(ar, bi) + op(ai, br))


def _as_generator(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def rayleigh_weights(shape: Shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """|W| ~ Rayleigh(1/sqrt(fan_in + fan_out)), phase ~ U(-pi, pi)."""
    sigma = 1.0 / np.sqrt(fan_in + fan_out)
    magnitude = rng.rayleigh(scale=sigma, size=shape)
    phase = rng.uniform(-np.pi, np.pi, size=shape)
    return magnitude * np.exp(1j * phase)


class Module:
    """Layer base: parameters, gradients, buffers and a cached forward pass."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = True
        self.cache = None

    def children(self) -> List[Tuple[str, "Module"]]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)
        for _, child in self.children():
            child.zero_grad()

    def init_weights(self, rng: np.random.Generator) -> None:
        for _, child in self.children():
            child.init_weights(rng)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value, self.grads.setdefault(name, np.zeros_like(value))
        for child_name, child in self.children():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for child_name, child in self.children():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for child_name, child in self.children():
            yield from child.modules(f"{prefix}{child_name}.")

    def set_tensor(self, qualified: str, value: np.ndarray) -> None:
        """Assign a parameter or buffer by its dotted name (shape-checked)."""
        head, _, rest = qualified.partition(".")
        if rest:
            for name, child in self.children():
                if name == head:
                    child.set_tensor(rest, value)
                    return
            raise KeyError(qualified)
        store = self.params if head in self.params else self.buffers
        if head not in store:
            raise KeyError(qualified)
        if store[head].shape != value.shape:
            raise ShapeMismatchError(f"tensor '{qualified}' has shape {store[head].shape}, checkpoint has {value.shape}")
        store[head][...] = value


class ComplexConv3d(Module):
    """3-D complex convolution Y = W * X + b computed with real block algebra."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1, padding=0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _triple(kernel_size)
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeMismatchError(f"invalid conv geometry k={self.kernel} s={self.stride} p={self.padding}")
        self.params = {
            "weight": np.zeros((out_channels, in_channels) + self.kernel, dtype=np.complex128),
            "bias": np.zeros(out_channels, dtype=np.complex128),
        }
        self.zero_grad()

    def init_weights(self, rng: np.random.Generator) -> None:
        volume = int(np.prod(self.kernel))
        self.params["weight"][...] = rayleigh_weights(self.params["weight"].shape, self.in_channels * volume,
                                                      self.out_channels * volume, rng)
        self.params["bias"][...] = 0

    def output_shape(self, shape: Shape) -> Shape:
        channels, *spatial = shape
        if channels != self.in_channels:
            raise ShapeMismatchError(f"expected {self.in_channels} input channels, got {channels}")
        out = []
        for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding):
            if n + 2 * p < k:
                raise ShapeMismatchError(f"extent {n} (padding {p}) is smaller than kernel {k}")
            out.append((n + 2 * p - k) // s + 1)
        return (self.out_channels, *out)

    def _windows(self, xp: np.ndarray, count: Sequence[int]) -> np.ndarray:
        win = sliding_window_view(xp, self.kernel, axis=SPATIAL_AXES)
        s1, s2, s3 = self.stride
        return win[:, :, ::s1, ::s2, ::s3][:, :, :count[0], :count[1], :count[2]]

    @staticmethod
    def _apply(win: np.ndarray, weight: np.ndarray) -> np.ndarray:
        out = np.tensordot(win, weight, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        return np.moveaxis(out, -1, 1)

    @staticmethod
    def _weight_grad(grad: np.ndarray, win: np.ndarray) -> np.ndarray:
        return np.tensordot(grad, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

    def _scatter(self, grad: np.ndarray, weight: np.ndarray, padded_shape: Shape) -> np.ndarray:
        dwin = np.tensordot(grad, weight, axes=([1], [0]))  # [B, n1, n2, n3, I, k1, k2, k3]
        dwin = np.moveaxis(dwin, 4, 1)
        out = np.zeros(padded_shape, dtype=dwin.dtype)
        n1, n2, n3 = grad.shape[2:]
        s1, s2, s3 = self.stride
        for a, b, c in product(*(range(k) for k in self.kernel)):
            out[:, :, a:a + s1 * (n1 - 1) + 1:s1, b:b + s2 * (n2 - 1) + 1:s2,
                c:c + s3 * (n3 - 1) + 1:s3] += dwin[..., a, b, c]
        return out

    def _pad(self, x: np.ndarray) -> np.ndarray:
        p1, p2, p3 = self.padding
        return np.pad(x, ((0, 0), (0, 0), (p1, p1), (p2, p2), (p3, p3)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        out_shape = self.output_shape(x.shape[1:])
        xp = self._pad(x)
        win = self._windows(xp, out_shape[1:])
        w = self.params["weight"]
        y = _block(self._apply, win.real, win.imag, w.real, w.imag)
        self.cache = (xp.shape, win)
        return y + self.params["bias"][None, :, None, None, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        padded_shape, win = self.cache
        w = self.params["weight"]
        self.grads["weight"] += _block(self._weight_grad, grad.real, grad.imag, win.real, -win.imag)
        self.grads["bias"] += grad.sum(axis=(0, 2, 3, 4))
        scatter = lambda g, k: self._scatter(g, k, padded_shape)
        dxp = _block(scatter, grad.real, grad.imag, w.real, -w.imag)
        p1, p2, p3 = self.padding
        return dxp[:, :, p1:padded_shape[2] - p1, p2:padded_shape[3] - p2, p3:padded_shape[4] - p3]


class ComplexConvTranspose3d(ComplexConv3d):
    """Transposed complex convolution; weight is [in x out x k1 x k2 x k3]."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1, padding=0, output_padding=0):
        super().__init__(out_channels, in_channels, kernel_size, stride, padding)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.output_padding = _triple(output_padding)
        if any(op >= s for op, s in zip(self.output_padding, self.stride)):
            raise ShapeMismatchError("output padding must be smaller than the stride")
        self.params = {
            "weight": np.zeros((in_channels, out_channels) + self.kernel, dtype=np.complex128),
            "bias": np.zeros(out_channels, dtype=np.complex128),
        }
        self.zero_grad()

    def output_shape(self, shape: Shape) -> Shape:
        channels, *spatial = shape
        if channels != self.in_channels:
            raise ShapeMismatchError(f"expected {self.in_channels} input channels, got {channels}")
        out = []
        for n, k, s, p, op in zip(spatial, self.kernel, self.stride, self.padding, self.output_padding):
            size = (n - 1) * s - 2 * p + k + op
            if size < 1:
                raise ShapeMismatchError(f"transposed conv output extent {size} < 1")
            out.append(size)
        return (self.out_channels, *out)

    def _full_shape(self, x: np.ndarray) -> Shape:
        full = [(n - 1) * s + k + op for n, k, s, op in
                zip(x.shape[2:], self.kernel, self.stride, self.output_padding)]
        return (x.shape[0], self.out_channels, *full)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out_shape = self.output_shape(x.shape[1:])
        full_shape = self._full_shape(x)
        w = self.params["weight"]
        scatter = lambda a, k: self._scatter(a, k, full_shape)
        y_full = _block(scatter, x.real, x.imag, w.real, w.imag)
        p1, p2, p3 = self.padding
        y = y_full[:, :, p1:p1 + out_shape[1], p2:p2 + out_shape[2], p3:p3 + out_shape[3]]
        self.cache = (x, full_shape)
        return y + self.params["bias"][None, :, None, None, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, full_shape = self.cache
        p1, p2, p3 = self.padding
        g_full = np.zeros(full_shape, dtype=np.complex128)
        g_full[:, :, p1:p1 + grad.shape[2], p2:p2 + grad.shape[3], p3:p3 + grad.shape[4]] = grad
        win = self._windows(g_full, x.shape[2:])
        w = self.params["weight"]
        self.grads["weight"] += _block(self._weight_grad, x.real, -x.imag, win.real, win.imag)
        self.grads["bias"] += grad.sum(axis=(0, 2, 3, 4))
        return _block(self._apply, win.real, win.imag, w.real, -w.imag)


def inverse_sqrt_2x2(vrr: np.ndarray, vri: np.ndarray, vii: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse principal square root of symmetric positive-definite 2x2 matrices.

    Returns the (rr, ri, ii) entries of the symmetric result.
    """
    s = np.sqrt(vrr * vii - vri ** 2)
    t = np.sqrt(vrr + vii + 2 * s)
    scale = 1.0 / (s * t)
    return (vii + s) * scale, -vri * scale, (vrr + s) * scale


class ComplexBatchNorm(Module):
    """Whitening batch normalization of the (real, imag) pair per channel."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, affine: bool = True):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        if affine:
            self.params = {
                "gamma_rr": np.full(channels, 1 / np.sqrt(2)),
                "gamma_ri": np.zeros(channels),
                "gamma_ii": np.full(channels, 1 / np.sqrt(2)),
                "beta": np.zeros(channels, dtype=np.complex128),
            }
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=np.complex128),
            "running_vrr": np.ones(channels),
            "running_vri": np.zeros(channels),
            "running_vii": np.ones(channels),
        }
        self.zero_grad()

    def init_weights(self, rng: np.random.Generator) -> None:
        if self.affine:
            self.params["gamma_rr"][...] = 1 / np.sqrt(2)
            self.params["gamma_ri"][...] = 0
            self.params["gamma_ii"][...] = 1 / np.sqrt(2)
            self.params["beta"][...] = 0

    def output_shape(self, shape: Shape) -> Shape:
        if shape[0] != self.channels:
            raise ShapeMismatchError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.output_shape(x.shape[1:])
        axes = (0,) + tuple(range(2, x.ndim))
        shape = (1, self.channels) + (1,) * (x.ndim - 2)
        if self.training:
            count = x.size // self.channels
            if count < 2:
                raise ShapeMismatchError("batchnorm training needs at least two values per channel")
            mean = x.mean(axis=axes)
            u = x - mean.reshape(shape)
            vrr = np.mean(u.real ** 2, axis=axes)
            vri = np.mean(u.real * u.imag, axis=axes)
            vii = np.mean(u.imag ** 2, axis=axes)
            m = self.momentum
            self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_vrr"][...] = (1 - m) * self.buffers["running_vrr"] + m * vrr
            self.buffers["running_vri"][...] = (1 - m) * self.buffers["running_vri"] + m * vri
            self.buffers["running_vii"][...] = (1 - m) * self.buffers["running_vii"] + m * vii
        else:
            mean = self.buffers["running_mean"]
            u = x - mean.reshape(shape)
            vrr, vri, vii = (self.buffers[k] for k in ("running_vrr", "running_vri", "running_vii"))
        vrr_e, vii_e = vrr + self.eps, vii + self.eps
        wrr, wri, wii = inverse_sqrt_2x2(vrr_e, vri, vii_e)
        r = lambda a: a.reshape(shape)
        xr = r(wrr) * u.real + r(wri) * u.imag
        xi = r(wri) * u.real + r(wii) * u.imag
        if self.affine:
            g = self.params
            yr = r(g["gamma_rr"]) * xr + r(g["gamma_ri"]) * xi
            yi = r(g["gamma_ri"]) * xr + r(g["gamma_ii"]) * xi
            y = yr + 1j * yi + r(g["beta"])
        else:
            y = xr + 1j * xi
        self.cache = (u, xr, xi, (wrr, wri, wii), (vrr_e, vri, vii_e), axes, shape, self.training)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        u, xr, xi, (wrr, wri, wii), (vrr, vri, vii), axes, shape, training = self.cache
        r = lambda a: a.reshape(shape)
        gr, gi = grad.real, grad.imag
        if self.affine:
            p = self.params
            self.grads["gamma_rr"] += np.sum(gr * xr, axis=axes)
            self.grads["gamma_ri"] += np.sum(gr * xi + gi * xr, axis=axes)
            self.grads["gamma_ii"] += np.sum(gi * xi, axis=axes)
            self.grads["beta"] += grad.sum(axis=axes)
            gr, gi = (r(p["gamma_rr"]) * gr + r(p["gamma_ri"]) * gi,
                      r(p["gamma_ri"]) * gr + r(p["gamma_ii"]) * gi)
        dur = r(wrr) * gr + r(wri) * gi
        dui = r(wri) * gr + r(wii) * gi
        if not training:
            return dur + 1j * dui

        count = u.size // self.channels
        # dL/dW accumulated over the batch, one 2x2 matrix per channel
        a = np.stack([
            np.stack([np.sum(gr * u.real, axis=axes), np.sum(gr * u.imag, axis=axes)], axis=-1),
            np.stack([np.sum(gi * u.real, axis=axes), np.sum(gi * u.imag, axis=axes)], axis=-1),
        ], axis=-2)
        w = np.stack([np.stack([wrr, wri], -1), np.stack([wri, wii], -1)], -2)
        d_sqrt = -w @ a @ w
        v = np.stack([np.stack([vrr, vri], -1), np.stack([vri, vii], -1)], -2)
        eigval, eigvec = np.linalg.eigh(v)
        root = np.sqrt(eigval)
        rotated = np.swapaxes(eigvec, -1, -2) @ d_sqrt @ eigvec
        d_cov = eigvec @ (rotated / (root[..., :, None] + root[..., None, :])) @ np.swapaxes(eigvec, -1, -2)
        sym = (d_cov + np.swapaxes(d_cov, -1, -2)) / count
        dur = dur + r(sym[:, 0, 0]) * u.real + r(sym[:, 0, 1]) * u.imag
        dui = dui + r(sym[:, 1, 0]) * u.real + r(sym[:, 1, 1]) * u.imag
        du = dur + 1j * dui
        return du - du.mean(axis=axes, keepdims=True)


def crelu(x: np.ndarray) -> np.ndarray:
    """Rectify real and imaginary parts independently."""
    return np.maximum(x.real, 0) + 1j * np.maximum(x.imag, 0)


class CReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.cache = (x.real > 0, x.imag > 0)
        return crelu(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        real_on, imag_on = self.cache
        return grad.real * real_on + 1j * grad.imag * imag_on


class ComplexDropout(Module):
    """Drops whole complex units; identity in evaluation mode."""

    def __init__(self, p: float = 0.2, seed: SeedLike = None):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = _as_generator(seed)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not self.training or self.p == 0:
            self.cache = None
            return x
        mask = (self.rng.random(x.shape) >= self.p) / (1 - self.p)
        self.cache = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self.cache is None else grad * self.cache


class AvgPool3d(Module):
    """Average pooling with stride 1 and zero same-padding (odd kernels)."""

    def __init__(self, kernel_size=3):
        super().__init__()
        self.kernel = _triple(kernel_size)
        if any(k % 2 == 0 for k in self.kernel):
            raise ShapeMismatchError(f"same-padded pooling needs odd kernels, got {self.kernel}")

    def _pool(self, x: np.ndarray) -> np.ndarray:
        pads = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in self.kernel]
        win = sliding_window_view(np.pad(x, pads), self.kernel, axis=SPATIAL_AXES)
        return win.mean(axis=(-3, -2, -1))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._pool(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self._pool(grad)


class GlobalAvgPool(Module):
    """Average over the given spatial axes, kept as singleton dimensions."""

    def __init__(self, axes: Tuple[int, ...] = (2, 3)):
        super().__init__()
        self.axes = axes

    def output_shape(self, shape: Shape) -> Shape:
        return tuple(1 if i + 1 in self.axes else n for i, n in enumerate(shape))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.cache = x.shape
        return x.mean(axis=self.axes, keepdims=True)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        shape = self.cache
        count = int(np.prod([shape[a] for a in self.axes]))
        return np.broadcast_to(grad, shape) / count


class Flatten(Module):
    def output_shape(self, shape: Shape) -> Shape:
        return (int(np.prod(shape)),)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self.cache)


class ComplexLinear(Module):
    """Fully connected complex layer y = W x + b."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "weight": np.zeros((out_features, in_features), dtype=np.complex128),
            "bias": np.zeros(out_features, dtype=np.complex128),
        }
        self.zero_grad()

    def init_weights(self, rng: np.random.Generator) -> None:
        self.params["weight"][...] = rayleigh_weights(self.params["weight"].shape, self.in_features,
                                                      self.out_features, rng)
        self.params["bias"][...] = 0

    def output_shape(self, shape: Shape) -> Shape:
        if shape != (self.in_features,):
            raise ShapeMismatchError(f"linear layer expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.output_shape(x.shape[1:])
        self.cache = x
        w = self.params["weight"]
        return _block(lambda a, b: a @ b.T, x.real, x.imag, w.real, w.imag) + self.params["bias"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self.cache
        w = self.params["weight"]
        self.grads["weight"] += _block(lambda g, a: g.T @ a, grad.real, grad.imag, x.real, -x.imag)
        self.grads["bias"] += grad.sum(axis=0)
        return _block(lambda g, k: g @ k, grad.real, grad.imag, w.real, -w.imag)


class Sequential(Module):
    def __init__(self, *layers: Tuple[str, Module]):
        super().__init__()
        self.layers = list(layers)

    def children(self) -> List[Tuple[str, Module]]:
        return self.layers

    def output_shape(self, shape: Shape) -> Shape:
        for name, layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeMismatchError as e:
                raise ShapeMismatchError(f"layer '{name}': {e}") from e
        return shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Concat(Module):
    """Parallel branches on one input, concatenated along channels."""

    def __init__(self, *branches: Tuple[str, Module]):
        super().__init__()
        self.branches = list(branches)

    def children(self) -> List[Tuple[str, Module]]:
        return self.branches

    def output_shape(self, shape: Shape) -> Shape:
        outs = []
        for name, branch in self.branches:
            try:
                outs.append(branch.output_shape(shape))
            except ShapeMismatchError as e:
                raise ShapeMismatchError(f"branch '{name}': {e}") from e
        if len({o[1:] for o in outs}) != 1:
            raise ShapeMismatchError(f"branch extents differ: {[o[1:] for o in outs]}")
        return (sum(o[0] for o in outs),) + outs[0][1:]

    def forward(self, x: np.ndarray) -> np.ndarray:
        outs = [branch.forward(x) for _, branch in self.branches]
        self.cache = [o.shape[1] for o in outs]
        return np.concatenate(outs, axis=1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        splits = np.cumsum(self.cache)[:-1]
        total = None
        for (_, branch), part in zip(self.branches, np.split(grad, splits, axis=1)):
            g = branch.backward(part)
            total = g if total is None else total + g
        return total


def complex_l2_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over the batch of (1/N) sum |pred - target|^2, with its gradient.

    Args:
        pred: Predictions [batch x N] (or [N])
        target: Targets with the same shape

    Returns:
        Tuple of the loss and dL/dpred in the real/imag gradient convention
    """
    pred = np.asarray(pred, dtype=np.complex128)
    target = np.asarray(target, dtype=np.complex128)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    diff = pred - target
    batch = 1 if diff.ndim == 1 else diff.shape[0]
    n = diff.shape[-1]
    loss = float(np.sum(np.abs(diff) ** 2) / (n * batch))
    return loss, 2 * diff / (n * batch)


def init_weights(layer: Module, rng_seed: SeedLike = None) -> Module:
    """Rayleigh-magnitude, uniform-phase initialization of every weight; zero biases."""
    layer.init_weights(_as_generator(rng_seed))
    return layer
