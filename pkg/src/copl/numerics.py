"""Dense float64 helpers, a portable PRNG and a finite-difference checker.

Tensors are plain C-contiguous ``numpy.float64`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_NEG53 = 1.0 / (1 << 53)


class NumericsError(ValueError):
    pass


def as_tensor(x, shape=None) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and t.shape != tuple(shape):
        raise NumericsError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed with the SplitMix64 finalizer."""
    state = 0
    for p in parts:
        state = (state + _GOLDEN + (int(p) & _MASK64)) & _MASK64
        z = np.array([state], dtype=np.uint64)
        state = int(_mix64(z)[0])
    return state


class Rng:
    """SplitMix64 stream with a Box-Muller Gaussian transform.

    The k-th output is ``mix64(seed + k * GOLDEN)`` so blocks of draws are
    produced vectorised while staying bit-identical to a scalar loop.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GOLDEN)
            out = _mix64(z)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 bits of mantissa."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    def standard_normal(self, n: int) -> np.ndarray:
        n = int(n)
        pairs = (n + 1) // 2
        bits = self.next_u64(2 * pairs) >> np.uint64(11)
        u1 = (bits[0::2].astype(np.float64) + 1.0) * _TWO_NEG53  # (0, 1]
        u2 = bits[1::2].astype(np.float64) * _TWO_NEG53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high)."""
        if high <= 0:
            raise NumericsError("high must be positive")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def sample_gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise NumericsError("std must be non-negative")
    shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
    n = int(np.prod(shape, dtype=np.int64))
    z = rng.standard_normal(n)
    if std == 0:
        return np.full(shape, float(mean))
    return (mean + std * z).reshape(shape)


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise NumericsError("empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericsError("non-finite input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise NumericsError("length mismatch")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericsError("degenerate vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class GradCheckReport:
    errors: list[float]
    tolerance: float
    names: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    @property
    def worst(self) -> tuple[str, float]:
        i = int(np.argmax(self.errors))
        name = self.names[i] if i < len(self.names) else str(i)
        return name, self.errors[i]


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` with Euclidean norms over the tensor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    na, nn = np.linalg.norm(analytic), np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(na, nn, floor))


def numeric_grad(f: Callable[[], float], param: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``param``, perturbed in place."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericsError("non-finite objective")
        g[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic_grads: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-5,
    names: Sequence[str] = (),
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` takes no arguments and reads ``params`` by reference; each entry is
    perturbed in place and restored.
    """
    if h <= 0:
        raise NumericsError("step must be positive")
    if len(params) != len(analytic_grads):
        raise NumericsError("params and gradients differ in count")
    errors = []
    for p, a in zip(params, analytic_grads):
        if p.shape != np.shape(a):
            raise NumericsError("gradient shape mismatch")
        num = numeric_grad(f, p, h)
        errors.append(relative_error(a, num))
    return GradCheckReport(errors, tol, list(names))
