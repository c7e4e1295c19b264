"""Weight/activation binarization with scale factors and the STE rule.

Weights are mean-centred per row before taking signs and rescaled by the
row's mean absolute value (alpha).  Activations are binarized with sign()
when signed, or thresholded to {1,0} when they come out of ReLU/softmax, and
rescaled by one scalar beta per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitops import BIN01, PM1, BitMatrix, DimensionError, bgemm, pack_binary01, pack_signs

ROW = "row"
TENSOR = "tensor"


def sign_binarize(x) -> np.ndarray:
    """+1 where x >= 0 (including -0.0), -1 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1, -1).astype(np.int8)


def nonneg_binarize(x, threshold=0.5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("nonneg_binarize got negative input; use sign_binarize for signed activations")
    return (x >= threshold).astype(np.int8)


def median_threshold(x, axis: int = -1) -> np.ndarray:
    """Per-row median threshold for the attention map (an extension; 0.5 is the default)."""
    return np.median(np.asarray(x, dtype=np.float64), axis=axis, keepdims=True)


def ste_mask(x) -> np.ndarray:
    return np.abs(np.asarray(x)) <= 1.0


def ste_grad(upstream, pre_binarization_input) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(pre_binarization_input, dtype=np.float64)
    if upstream.shape != x.shape:
        raise DimensionError(f"gradient shape {upstream.shape} != input shape {x.shape}")
    return np.where(ste_mask(x), upstream, 0.0)


@dataclass
class ScaledBinary:
    """Packed bits plus non-negative scales (per row, or a broadcast scalar)."""

    bits: BitMatrix
    scale: np.ndarray

    def dense(self) -> np.ndarray:
        return self.bits.unpack().astype(np.float64) * self.scale.reshape(-1, 1)


class LatentWeight:
    """Full-precision shadow weights (out x in) with a cached row mean."""

    def __init__(self, shadow):
        self._shadow = np.array(shadow, dtype=np.float64)
        if self._shadow.ndim != 2:
            raise DimensionError(f"shadow weights must be 2-D, got {self._shadow.shape}")
        self._refresh()

    def _refresh(self):
        self.cached_mean = self._shadow.mean(axis=1, keepdims=True)

    @property
    def shadow(self) -> np.ndarray:
        return self._shadow

    @shadow.setter
    def shadow(self, value):
        value = np.array(value, dtype=np.float64)
        if value.shape != self._shadow.shape:
            raise DimensionError(f"shape {value.shape} != {self._shadow.shape}")
        self._shadow = value
        self._refresh()

    def update(self, delta):
        self.shadow = self._shadow + delta

    @property
    def shape(self):
        return self._shadow.shape


def weight_signs(shadow: np.ndarray) -> np.ndarray:
    shadow = np.asarray(shadow, dtype=np.float64)
    return sign_binarize(shadow - shadow.mean(axis=1, keepdims=True))


def weight_scales(shadow: np.ndarray, granularity: str = ROW) -> np.ndarray:
    shadow = np.asarray(shadow, dtype=np.float64)
    if granularity == ROW:
        return np.abs(shadow).mean(axis=1)
    if granularity == TENSOR:
        return np.full(shadow.shape[0], np.abs(shadow).mean())
    raise ValueError(f"unknown alpha granularity {granularity!r}")


def weight_binarize(w: LatentWeight | np.ndarray, granularity: str = ROW, lane_width: int = 64) -> ScaledBinary:
    shadow = w.shadow if isinstance(w, LatentWeight) else np.asarray(w, dtype=np.float64)
    if isinstance(w, LatentWeight):
        signs = sign_binarize(shadow - w.cached_mean)
    else:
        signs = weight_signs(shadow)
    return ScaledBinary(pack_signs(signs, lane_width), weight_scales(shadow, granularity))


def activation_scale(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.abs(a).mean()) if a.size else 0.0


def activation_binarize(a, signed: bool, threshold=0.5, lane_width: int = 64) -> ScaledBinary:
    """Binarize an activation matrix (rows = tokens/points) with one beta."""
    a = np.asarray(a, dtype=np.float64)
    mat = a[None, :] if a.ndim == 1 else a
    if signed:
        bits = pack_signs(sign_binarize(mat), lane_width)
    else:
        bits = pack_binary01(nonneg_binarize(mat, threshold), lane_width)
    beta = activation_scale(a)
    return ScaledBinary(bits, np.full(mat.shape[0], beta))


def binary_linear(
    w: LatentWeight | ScaledBinary,
    a,
    signed_act: bool,
    threshold=0.5,
    granularity: str = ROW,
    lane_width: int = 64,
) -> np.ndarray:
    """Y = alpha * beta * (sign(W - mean W) (xnor/popcount) Bi(A)).

    ``a`` is (in,) or (M, in); the result is (out,) or (M, out).
    """
    sw = w if isinstance(w, ScaledBinary) else weight_binarize(w, granularity, lane_width)
    a = np.asarray(a, dtype=np.float64)
    mat = a[None, :] if a.ndim == 1 else a
    if mat.shape[1] != sw.bits.cols:
        raise DimensionError(f"activation width {mat.shape[1]} != weight in-dim {sw.bits.cols}")
    sa = activation_binarize(mat, signed_act, threshold, sw.bits.lane_width)
    acc = bgemm(sa.bits, sw.bits).astype(np.float64)
    y = acc * sw.scale[None, :] * sa.scale[:, None]
    return y[0] if a.ndim == 1 else y


def dense_binary_linear(w, a, signed_act: bool, threshold=0.5, granularity: str = ROW) -> np.ndarray:
    """Same product via dense float matmul of the expanded operands."""
    shadow = w.shadow if isinstance(w, LatentWeight) else np.asarray(w, dtype=np.float64)
    wb = weight_scales(shadow, granularity)[:, None] * weight_signs(shadow)
    a = np.asarray(a, dtype=np.float64)
    bits = sign_binarize(a) if signed_act else nonneg_binarize(a, threshold)
    ab = activation_scale(a) * bits
    return ab @ wb.T
