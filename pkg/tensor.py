"""
Dense tensor core: channel-first torch tensors with shape checks, zero
padding, multi-channel cross-correlation (no kernel flip), the adjoint filter
transform and the DCT1 binary format.

Tensors are either unbatched (C, *spatial) or batched (B, C, *spatial); the
spatial rank is always taken from the filter or the margin list.
"""
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from errors import (ChannelMismatchError, ConfigError, DivisionByZeroError, FormatError, KernelError,
                    NegativeInputError, ShapeMismatchError, StrideError)

SPATIAL_RANKS = (2, 3)
GELU_APPROXIMATION = "tanh"  # 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))

_CONV = {2: F.conv2d, 3: F.conv3d}
_CONV_T = {2: F.conv_transpose2d, 3: F.conv_transpose3d}


def check_same_shape(a, b, what="shape"):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(a.shape, b.shape, what)


def check_nonnegative(x, what="tensor", tolerance=0.0):
    """Raise with the first offending index if any element is below -tolerance."""
    if x.is_meta or x.numel() == 0:
        return
    bad = x < -tolerance
    if bool(bad.any()):
        index = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise NegativeInputError(what, index, float(x[index]))


# --- FILTERS ---

@dataclass(frozen=True)
class FilterTensor:
    """Filter of shape (C_out, C_in_per_group, k_1, ..., k_d) with odd k_i."""
    data: torch.Tensor

    def __post_init__(self):
        rank = self.data.dim() - 2
        if rank not in SPATIAL_RANKS:
            raise KernelError(f"filter must have spatial rank 2 or 3, got shape {tuple(self.data.shape)}")
        if any(k % 2 == 0 for k in self.kernel):
            raise KernelError(f"filter extents must be odd, got {self.kernel}")

    @property
    def rank(self):
        return self.data.dim() - 2

    @property
    def out_channels(self):
        return self.data.shape[0]

    @property
    def in_channels(self):
        return self.data.shape[1]

    @property
    def kernel(self):
        return tuple(self.data.shape[2:])

    @property
    def half_widths(self):
        return tuple(k // 2 for k in self.kernel)


def adjoint_filter(v, groups=1):
    """V⁻[d, c, m...] = V[c, d, K-1-m...], applied per channel group."""
    w = v.data
    c_out, c_in_g = w.shape[:2]
    if c_out % groups:
        raise ChannelMismatchError(c_out, f"a multiple of groups={groups}", "filter output channels")
    kernel = tuple(w.shape[2:])
    w = w.reshape(groups, c_out // groups, c_in_g, *kernel).transpose(1, 2)
    w = w.reshape(groups * c_in_g, c_out // groups, *kernel)
    return FilterTensor(torch.flip(w, dims=tuple(range(2, 2 + len(kernel)))))


# --- REDUCTIONS ---

def inner_product(a, b):
    check_same_shape(a, b)
    return torch.sum(a * b)


def frobenius_norm(a):
    return torch.sqrt(inner_product(a, a))


# --- PADDING AND CORRELATION ---

def pad_zero(x, margins):
    margins = tuple(int(m) for m in margins)
    if x.dim() - len(margins) not in (1, 2) or len(margins) not in SPATIAL_RANKS:
        raise ShapeMismatchError((len(margins),), (x.dim() - 1,), "margin count vs spatial rank")
    if any(m < 0 for m in margins):
        raise ConfigError(f"margins must be >= 0, got {margins}")
    pads = []
    for m in reversed(margins):
        pads.extend((m, m))
    return F.pad(x, pads, mode="constant", value=0.0)


def _normalize_stride(stride, rank):
    if isinstance(stride, int):
        stride = (stride,) * rank
    stride = tuple(int(s) for s in stride)
    if len(stride) != rank or any(s <= 0 for s in stride):
        raise StrideError(f"stride must be {rank} positive integers, got {stride}")
    return stride


def _check_input(s, rank, expected_channels):
    if s.dim() not in (rank + 1, rank + 2):
        raise ShapeMismatchError(s.shape, (expected_channels, *(["*"] * rank)), "input vs filter rank")
    channels = s.shape[-rank - 1]
    if channels != expected_channels:
        raise ChannelMismatchError(channels, expected_channels)


def cross_correlate(s, v, padding="same", stride=1, groups=1):
    """out[c, h...] = Σ_{d, m...} pad(s)[d, h·r + m...] · V[c, d, m...]; no kernel flip.

    With padding="same" the input is zero padded by the filter half widths, so
    stride 1 preserves the spatial shape and stride r gives ceil(extent / r).
    """
    rank = v.rank
    stride = _normalize_stride(stride, rank)
    _check_input(s, rank, v.in_channels * groups)
    if padding == "same":
        pad = v.half_widths
    elif padding == "valid":
        pad = (0,) * rank
    else:
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    return _CONV[rank](s, v.data, stride=stride, padding=pad, groups=groups)


def strided_correlate(x, weight, bias=None, stride=2):
    """Valid correlation with a (possibly even) kernel, used for downsampling."""
    rank = weight.dim() - 2
    stride = _normalize_stride(stride, rank)
    _check_input(x, rank, weight.shape[1])
    return _CONV[rank](x, weight, bias, stride=stride)


def transposed_correlate(x, weight, bias=None, stride=2):
    """Adjoint of strided_correlate; weight is (C_in, C_out, k...) and extents grow by the stride."""
    rank = weight.dim() - 2
    stride = _normalize_stride(stride, rank)
    _check_input(x, rank, weight.shape[0])
    return _CONV_T[rank](x, weight, bias, stride=stride)


# --- ELEMENTWISE ---

def _div(a, b, epsilon=None):
    if epsilon is not None:
        return (a + epsilon) / (b + epsilon)
    if not isinstance(b, torch.Tensor):
        b = torch.as_tensor(b, dtype=a.dtype)
    zero = b == 0
    if bool(zero.any()):
        raise DivisionByZeroError(torch.nonzero(zero)[0].tolist())
    return a / b


_ELEMENTWISE = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": _div,
    "relu": lambda a: torch.relu(a),
    "gelu": lambda a: F.gelu(a, approximate=GELU_APPROXIMATION),
    "square": lambda a: a * a,
    "scale": lambda a, c: a * c,
    "clamp_min": lambda a, c: torch.clamp(a, min=c),
}


def elementwise(op, *args, epsilon=None):
    """Pointwise op by name. `epsilon` opts div into (a + ε) / (b + ε)."""
    if op not in _ELEMENTWISE:
        raise ConfigError(f"unknown elementwise op {op!r}")
    if len(args) == 2 and isinstance(args[0], torch.Tensor) and isinstance(args[1], torch.Tensor):
        check_same_shape(args[0], args[1])
    if op == "div":
        return _div(*args, epsilon=epsilon)
    return _ELEMENTWISE[op](*args)


def safe_ratio(num, den):
    """num / den with every zero-denominator entry mapped to 0 (the 0/0 rule)."""
    positive = den > 0
    return torch.where(positive, num / torch.where(positive, den, torch.ones_like(den)), torch.zeros_like(num))


# --- DCT1 BINARY FORMAT ---

DCT1_MAGIC = b"DCT1"
_PRECISION_CODES = {torch.float32: 0, torch.float64: 1}
_PRECISION_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_NATIVE_DTYPES = {0: np.float32, 1: np.float64}


def encode_dct1(x):
    x = x.detach().cpu()
    if x.dtype not in _PRECISION_CODES:
        raise FormatError(f"DCT1 stores single or double precision, got {x.dtype}")
    code = _PRECISION_CODES[x.dtype]
    header = DCT1_MAGIC + struct.pack("<BB", code, x.dim())
    header += struct.pack(f"<{x.dim()}I", *x.shape)
    payload = np.ascontiguousarray(x.numpy(), dtype=_PRECISION_DTYPES[code]).tobytes()
    return header + payload


def decode_dct1(blob):
    if len(blob) < 6 or blob[:4] != DCT1_MAGIC:
        raise FormatError("not a DCT1 tensor (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _PRECISION_DTYPES:
        raise FormatError(f"unknown DCT1 precision code {code}")
    offset = 6 + 4 * rank
    if len(blob) < offset:
        raise FormatError("truncated DCT1 header")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    if any(extent == 0 for extent in shape):
        raise FormatError(f"DCT1 extents must be positive, got {shape}")
    dtype = _PRECISION_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    remaining = len(blob) - offset
    if remaining < expected:
        raise FormatError(f"truncated DCT1 payload: {remaining} of {expected} bytes")
    if remaining > expected:
        raise FormatError(f"{remaining - expected} trailing bytes after DCT1 payload")
    array = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape)
    return torch.from_numpy(array.astype(_NATIVE_DTYPES[code]))


def write_dct1(path, x):
    with open(path, "wb") as f:
        f.write(encode_dct1(x))


def read_dct1(path):
    with open(path, "rb") as f:
        return decode_dct1(f.read())
