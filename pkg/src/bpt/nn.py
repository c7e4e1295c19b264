"""Layers built on :mod:`bpt.autodiff`.

``BinaryLinear`` has two forward paths.  While training (and whenever packed
weights are absent) it uses the dense expansion alpha*sign(W - mean W) and
beta*Bi(A) so that STE gradients reach the shadow weights.  After
:meth:`BinaryLinear.freeze` it evaluates the same product with packed bits
and xnor/popcount.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binarize import ROW, TENSOR, ScaledBinary, activation_scale, nonneg_binarize, sign_binarize
from .bitops import bgemm, pack_binary01, pack_signs


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules(prefix):
            for bname in getattr(mod, "_buffer_names", ()):
                yield (f"{mname}.{bname}" if mname else bname), getattr(mod, bname)

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class Linear(Module):
    binary = False

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = False):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Tensor(_uniform_init(rng, out_dim, in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


def sample_scales(x: np.ndarray) -> np.ndarray:
    """beta for each sample of a batch: mean |x| over all but the leading axis."""
    axes = tuple(range(1, x.ndim))
    return np.abs(x).mean(axis=axes, keepdims=True) if axes else np.abs(x)


class BinaryLinear(Module):
    """1-bit weights and activations with alpha/beta rescaling.

    Input is (B, ..., in); beta is computed per sample (leading axis).
    """

    binary = True

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator | None,
        signed_act: bool,
        threshold: float = 0.5,
        granularity: str = ROW,
        lane_width: int = 64,
    ):
        if granularity not in (ROW, TENSOR):
            raise ValueError(f"unknown alpha granularity {granularity!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.signed_act = signed_act
        self.threshold = threshold
        self.granularity = granularity
        self.lane_width = lane_width
        self.weight = (
            Tensor(_uniform_init(rng, out_dim, in_dim), requires_grad=True) if rng is not None else None
        )
        self.packed: ScaledBinary | None = None
        self.use_packed = False

    # -- weights ------------------------------------------------------------

    def weight_factors(self) -> tuple[Tensor, Tensor]:
        """(signs (out, in), alpha (out,)) of the current shadow weights."""
        w = self.weight
        centred = ad.sub(w, ad.mean(w, axis=1, keepdims=True))
        signs = ad.ste_binarize(centred, signed=True)
        if self.granularity == ROW:
            alpha = ad.mean(ad.abs_(w), axis=1)
        else:
            alpha = ad.mul(ad.mean(ad.abs_(w)), np.ones(self.out_dim))
        return signs, alpha

    def dense_weight(self) -> Tensor:
        signs, alpha = self.weight_factors()
        return ad.mul(ad.reshape(alpha, (self.out_dim, 1)), signs)

    def freeze(self):
        """Pack the current shadow weights; inference then runs on bits."""
        from .binarize import weight_binarize

        self.packed = weight_binarize(self.weight.data, self.granularity, self.lane_width)
        self.use_packed = True

    # -- forward ------------------------------------------------------------

    def __call__(self, x: Tensor) -> Tensor:
        if self.weight is None or (self.use_packed and not self.training):
            return self._packed_forward(x)
        return self._dense_forward(x)

    def _dense_forward(self, x: Tensor) -> Tensor:
        axes = tuple(range(1, x.ndim))
        beta = ad.mean(ad.abs_(x), axis=axes, keepdims=True)
        xb = ad.ste_binarize(x, signed=self.signed_act, threshold=self.threshold)
        signs, alpha = self.weight_factors()
        # scales applied after the exact +-1 product, in the packed kernel's order,
        # so both paths round identically
        return ad.mul(beta, ad.mul(ad.linear(xb, signs), alpha))

    def _packed_forward(self, x: Tensor) -> Tensor:
        if self.packed is None:
            raise RuntimeError("packed forward requested before freeze()")
        data = x.data
        rows = data.reshape(-1, self.in_dim)
        if self.signed_act:
            bits = pack_signs(sign_binarize(rows), self.lane_width)
        else:
            bits = pack_binary01(nonneg_binarize(rows, self.threshold), self.lane_width)
        acc = bgemm(bits, self.packed.bits).astype(np.float64)
        y = acc.reshape(*data.shape[:-1], self.out_dim)
        beta = sample_scales(data)
        return Tensor(beta * (y * self.packed.scale))


def make_linear(in_dim, out_dim, rng, binary: bool, signed_act: bool, **opts) -> Module:
    if binary:
        return BinaryLinear(in_dim, out_dim, rng, signed_act, **opts)
    return Linear(in_dim, out_dim, rng)


class LBR(Module):
    """Linear + BatchNorm + ReLU."""

    def __init__(self, in_dim, out_dim, rng, binary=False, signed_act=False, relu=True, **opts):
        self.linear = make_linear(in_dim, out_dim, rng, binary, signed_act, **opts)
        self.bn = BatchNorm(out_dim)
        self.relu = relu

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn(self.linear(x))
        return ad.relu(y) if self.relu else y


__all__ = [
    "Module", "Linear", "BatchNorm", "BinaryLinear", "LBR", "make_linear",
    "sample_scales", "activation_scale",
]
