"""Affine int8 tensors and the integer kernels the networks are built from.

Layout is NCHW throughout. Accumulation is exact integer arithmetic; the only
floating point step is requantization, a single IEEE double multiply followed
by round-half-away-from-zero, so results are bit-exact on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

INT8_MIN, INT8_MAX = -128, 127


class QuantError(ValueError):
    """Invalid quantization parameters or kernel arguments."""


@dataclass(frozen=True)
class QParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise QuantError(f"scale must be positive and finite, got {self.scale}")
        if not INT8_MIN <= int(self.zero_point) <= INT8_MAX:
            raise QuantError(f"zero_point {self.zero_point} outside int8 range")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def real_min(self) -> float:
        return (INT8_MIN - self.zero_point) * self.scale

    @property
    def real_max(self) -> float:
        return (INT8_MAX - self.zero_point) * self.scale


@dataclass
class QuantTensor:
    data: np.ndarray
    qparams: QParams

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.int8:
            if data.size and (data.min() < INT8_MIN or data.max() > INT8_MAX):
                raise QuantError("tensor values outside int8 range")
            data = data.astype(np.int8)
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (self.qparams == other.qparams and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass
class ConvDesc:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    weights: np.ndarray  # int8, (out, in/groups, kh, kw)
    bias: np.ndarray  # int32, (out,), in units of input_scale * weight_scale
    weight_qparams: QParams
    output_qparams: QParams
    groups: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        g = self.groups
        if self.in_channels % g or self.out_channels % g:
            raise QuantError("channels not divisible by groups")
        n = self.out_channels * (self.in_channels // g) * kh * kw
        w = np.asarray(self.weights)
        if w.size != n:
            raise QuantError(f"weights length {w.size} != {n}")
        b = np.asarray(self.bias)
        if b.size != self.out_channels:
            raise QuantError(f"bias length {b.size} != out_channels {self.out_channels}")
        self.weights = w.astype(np.int8).reshape(self.out_channels, self.in_channels // g, kh, kw)
        self.bias = b.astype(np.int32).reshape(self.out_channels)

    def channel_block(self, start: int, stop: int) -> "ConvDesc":
        """Descriptor restricted to output channels [start, stop).

        Grouped convolutions only split on whole groups; for depthwise layers
        the matching input channels must be sliced by the caller.
        """
        g = self.groups
        if g == 1:
            return replace(self, out_channels=stop - start, weights=self.weights[start:stop],
                           bias=self.bias[start:stop])
        if g != self.in_channels or g != self.out_channels:
            raise QuantError("channel blocks only supported for dense or depthwise convolutions")
        n = stop - start
        return replace(self, in_channels=n, out_channels=n, groups=n,
                       weights=self.weights[start:stop], bias=self.bias[start:stop])


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, q: QParams) -> QuantTensor:
    """Map reals to int8 codes: clamp(round(x / scale) + zero_point)."""
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise QuantError(f"non-finite input element at flat index {idx}")
    codes = round_half_away(x / q.scale) + q.zero_point
    return QuantTensor(np.clip(codes, INT8_MIN, INT8_MAX).astype(np.int8), q)


def dequantize(t: QuantTensor) -> np.ndarray:
    return (t.data.astype(np.float64) - t.qparams.zero_point) * t.qparams.scale


def requantize_codes(acc: np.ndarray, multiplier: float, zero_point: int) -> np.ndarray:
    out = round_half_away(acc.astype(np.float64) * multiplier) + zero_point
    return np.clip(out, INT8_MIN, INT8_MAX).astype(np.int8)


def requantize(t: QuantTensor, out_q: QParams) -> QuantTensor:
    if t.qparams == out_q:
        return t
    centred = t.data.astype(np.int64) - t.qparams.zero_point
    return QuantTensor(requantize_codes(centred, t.qparams.scale / out_q.scale, out_q.zero_point), out_q)


def _require_4d(t: QuantTensor, what: str):
    if t.data.ndim != 4:
        raise QuantError(f"{what} expects an NCHW tensor, got shape {t.shape}")


def correlate(x: np.ndarray, w: np.ndarray, stride: tuple[int, int], groups: int = 1) -> np.ndarray:
    """Valid-mode 2-D cross-correlation, NCHW input, (O, C/groups, kh, kw) weights, float64 result."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise QuantError("output dimension < 1")
    xf = x.astype(np.float64, copy=False)
    wf = w.astype(np.float64, copy=False)
    win = np.lib.stride_tricks.sliding_window_view(xf, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]  # N C Ho Wo kh kw
    if groups == c == o:  # depthwise
        return np.einsum("nchwij,cij->nchw", win, wf[:, 0])
    og = o // groups
    out = np.empty((n, o, ho, wo), dtype=np.float64)
    for gi in range(groups):
        xs = win[:, gi * cg:(gi + 1) * cg]
        ws = wf[gi * og:(gi + 1) * og]
        cols = xs.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, cg * kh * kw)
        res = cols @ ws.reshape(og, cg * kh * kw).T  # N Ho Wo og
        out[:, gi * og:(gi + 1) * og] = res.transpose(0, 3, 1, 2)
    return out


def conv_accumulate(x: np.ndarray, w: np.ndarray, stride: tuple[int, int], groups: int = 1) -> np.ndarray:
    """Integer correlation of an already padded, zero-point-centred input.

    Products are summed in float64, which is exact while every partial sum
    stays below 2**53; an int8 layer would need > 2**37 taps to break that.
    """
    return correlate(x, w, stride, groups).astype(np.int64)


def conv2d_q(t: QuantTensor, desc: ConvDesc) -> QuantTensor:
    """Quantized 2-D convolution with int32 bias, requantized to ``desc.output_qparams``."""
    _require_4d(t, "conv2d_q")
    if t.shape[1] != desc.in_channels:
        raise QuantError(f"input has {t.shape[1]} channels, descriptor expects {desc.in_channels}")
    (kh, kw), (sh, sw), (ph, pw) = desc.kernel, desc.stride, desc.padding
    h, w = t.shape[2:]
    if (h + 2 * ph - kh) // sh + 1 < 1 or (w + 2 * pw - kw) // sw + 1 < 1:
        raise QuantError("output dimension < 1")
    if desc.weight_qparams.zero_point != 0:
        raise QuantError("weights must be symmetric (zero_point 0)")
    zp = t.qparams.zero_point
    x = t.data.astype(np.int64) - zp
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))  # zero after centring == zp code
    acc = conv_accumulate(x, desc.weights, desc.stride, desc.groups)
    acc += desc.bias.astype(np.int64).reshape(1, -1, 1, 1)
    mult = t.qparams.scale * desc.weight_qparams.scale / desc.output_qparams.scale
    return QuantTensor(requantize_codes(acc, mult, desc.output_qparams.zero_point), desc.output_qparams)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _leaky(x):
    return np.where(x >= 0, x, 0.1 * x)


ACTIVATION_FUNCS = {"silu": _silu, "leaky": _leaky}


@lru_cache(maxsize=4096)
def activation_lut(in_q: QParams, kind: str, out_q: QParams) -> np.ndarray:
    """256-entry table from input code (index = code + 128) to output code."""
    if kind not in ACTIVATION_FUNCS:
        raise QuantError(f"unsupported activation {kind!r}")
    codes = np.arange(INT8_MIN, INT8_MAX + 1, dtype=np.float64)
    real = ACTIVATION_FUNCS[kind]((codes - in_q.zero_point) * in_q.scale)
    lut = quantize(real, out_q).data
    lut.setflags(write=False)
    return lut


def act_q(t: QuantTensor, kind: str, out_q: QParams) -> QuantTensor:
    lut = activation_lut(t.qparams, kind, out_q)
    return QuantTensor(lut[t.data.astype(np.int16) + 128], out_q)


def maxpool2d(t: QuantTensor, kernel: int, stride: int, padding: int = 0) -> QuantTensor:
    """Max over int8 codes; padding uses the minimum code so it never wins."""
    _require_4d(t, "maxpool2d")
    x = t.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=INT8_MIN)
    h, w = x.shape[2:]
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise QuantError("output dimension < 1")
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return QuantTensor(win.max(axis=(4, 5)), t.qparams)


def upsample_nearest(t: QuantTensor, factor: int) -> QuantTensor:
    _require_4d(t, "upsample_nearest")
    return QuantTensor(t.data.repeat(factor, axis=2).repeat(factor, axis=3), t.qparams)


def concat_channels(*tensors: QuantTensor) -> QuantTensor:
    if not tensors:
        raise QuantError("nothing to concatenate")
    q = tensors[0].qparams
    for t in tensors:
        _require_4d(t, "concat_channels")
        if t.qparams != q:
            raise QuantError(f"concat qparams mismatch: {t.qparams} vs {q}; requantize first")
        if t.shape[0] != tensors[0].shape[0] or t.shape[2:] != tensors[0].shape[2:]:
            raise QuantError("concat requires equal N, H, W")
    return QuantTensor(np.concatenate([t.data for t in tensors], axis=1), q)


def slice_channels(t: QuantTensor, start: int, stop: int) -> QuantTensor:
    return QuantTensor(t.data[:, start:stop], t.qparams)


def add_q(a: QuantTensor, b: QuantTensor, out_q: QParams) -> QuantTensor:
    """Elementwise sum of two quantized tensors, rounded once into ``out_q``."""
    if a.shape != b.shape:
        raise QuantError(f"add shape mismatch {a.shape} vs {b.shape}")
    real = dequantize(a) + dequantize(b)
    codes = round_half_away(real / out_q.scale) + out_q.zero_point
    return QuantTensor(np.clip(codes, INT8_MIN, INT8_MAX).astype(np.int8), out_q)
