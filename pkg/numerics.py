"""
Dense numeric kernels for the V2M engine.

This module holds the tensor conventions shared by every other module:
numpy ndarrays in row-major layout with dtype float32 or float64, the
exception hierarchy, the seeded random number generator, and the pure
elementwise / linear-algebra kernels (linear, softplus, layer_norm and the
activation functions used by the model).

Kernels accumulate in float64 internally and cast back to the promoted
input dtype, so long products of decay factors stay stable in f32 runs.
"""

import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np


logger = logging.getLogger(__name__)

# A Tensor is a C-contiguous numpy array of one of these dtypes.
Tensor = np.ndarray

DTYPES: Dict[str, type] = {
    'f32': np.float32,
    'f64': np.float64,
}


class V2MError(Exception):
    """Base class for all errors raised by the engine."""


class DimensionError(V2MError):
    """Shapes do not agree, grid is not square, or an extent is indivisible."""


class NonFiniteError(V2MError):
    """A public kernel produced NaN or Inf."""


class ContractError(V2MError):
    """A documented precondition was violated."""


class ConfigError(V2MError):
    """Invalid configuration key or value."""


class FormatError(V2MError):
    """A binary file does not follow its documented layout."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class TruncatedPayloadError(FormatError):
    """A binary file ends before its declared payload."""


class CountMismatchError(V2MError):
    """Paired files disagree on the number of items."""


class ShapeMismatchError(V2MError):
    """A stored tensor does not match the shape the model expects."""

    def __init__(self, name: str, expected, found=None):
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found) if found is not None else None
        detail = 'missing' if self.found is None else f"found {self.found}"
        super().__init__(f"tensor '{name}': expected shape {self.expected}, {detail}")


def as_dtype(precision: str):
    """
    Map a precision name to its numpy dtype.

    Args:
        precision: 'f32' or 'f64'

    Returns:
        numpy scalar type
    """
    try:
        return DTYPES[precision]
    except KeyError:
        raise ConfigError(f"unknown precision '{precision}', expected one of {sorted(DTYPES)}")


def result_dtype(*arrays) -> type:
    """Promoted float dtype of the given arrays (f64 wins over f32)."""
    for a in arrays:
        if a is not None and np.asarray(a).dtype == np.float64:
            return np.float64
    return np.float32


def check_finite(x: Tensor, what: str = 'tensor') -> Tensor:
    """
    Raise NonFiniteError if x contains NaN or Inf.

    Args:
        x: array to inspect
        what: label used in the error message

    Returns:
        x unchanged
    """
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        logger.error(f"{what}: {bad} non-finite values")
        raise NonFiniteError(f"{what} contains {bad} non-finite values")
    return x


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """
    Affine map over the last axis: y[..., o] = sum_i x[..., i] * w[i, o] + b[o].

    Args:
        x: input of shape (..., Din)
        w: weight of shape (Din, Dout)
        b: optional bias of shape (Dout,)

    Returns:
        Output of shape (..., Dout) in the promoted dtype of the inputs
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    dtype = result_dtype(x, w, b)
    lead = x.shape[:-1]
    y = np.matmul(x.reshape(-1, x.shape[-1]).astype(np.float64), w.astype(np.float64))
    if b is not None:
        y += b.astype(np.float64)
    y = y.reshape(lead + (w.shape[1],)).astype(dtype)
    return check_finite(y, 'linear')


def softplus(x: Tensor) -> Tensor:
    """Overflow-safe ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, stable for large |x|."""
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return x * sigmoid(x)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x: Tensor) -> Tensor:
    """Derivative of gelu with respect to its input."""
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Standardize over the last axis, then scale by gamma and shift by beta.

    Args:
        x: input of shape (..., D), D >= 1
        gamma: scale of shape (D,)
        beta: shift of shape (D,)
        eps: variance floor

    Returns:
        Normalized tensor, same shape and promoted dtype as x
    """
    xhat, _ = layer_norm_stats(x, eps)
    dtype = result_dtype(x, gamma, beta)
    return (xhat * gamma.astype(np.float64) + beta.astype(np.float64)).astype(dtype)


def layer_norm_stats(x: Tensor, eps: float) -> Tuple[Tensor, Tensor]:
    """Standardized x and the reciprocal standard deviation, both float64."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


class Rng:
    """
    Seeded random stream on numpy's Philox counter-based generator.

    Philox output depends only on (key, counter), so a given seed yields
    the same draw sequence on every platform. Gaussians are produced by
    Box-Muller from the generator's uniforms.
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, purpose: str) -> 'Rng':
        """
        Derive an independent stream for a named purpose.

        Args:
            purpose: label mixed into the derived key

        Returns:
            New Rng whose sequence does not depend on draws made from self
        """
        mixed = self.seed
        for ch in purpose.encode('utf-8'):
            mixed = (mixed * 1099511628211 + ch) % (2 ** 64)
        return Rng(mixed)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
        """Uniform draws in [low, high) as float64."""
        return low + (high - low) * self._gen.random(tuple(shape))

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n)."""
        return self._gen.permutation(n)

    def normal(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0,
               dtype=np.float64) -> Tensor:
        """Alias for rng_normal(self, ...)."""
        return rng_normal(self, shape, mean, std, dtype)


def rng_normal(rng: Rng, shape: Sequence[int], mean: float = 0.0, std: float = 1.0,
               dtype=np.float64) -> Tensor:
    """
    I.i.d. Gaussian draws via Box-Muller; advances rng.

    Args:
        rng: generator to draw from
        shape: output shape
        mean: distribution mean
        std: standard deviation, >= 0
        dtype: output dtype

    Returns:
        Tensor of the requested shape
    """
    if std < 0:
        raise ContractError(f"rng_normal: std must be >= 0, got {std}")
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.uniform((pairs,))  # (0, 1], keeps log finite
    u2 = rng.uniform((pairs,))
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    out = mean + std * z[:n]
    return out.reshape(shape).astype(dtype)
