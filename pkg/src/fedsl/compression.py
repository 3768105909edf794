"""Client-side lightweighting: importance pruning, stochastic quantization, activation dropout."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedsl.errors import DimensionError, InputError


@dataclass(frozen=True)
class SparsitySchedule:
    """Cubic ramp from zero sparsity to ``rho_f`` over ``T`` rounds."""

    rho_f: float
    T: int

    def __post_init__(self):
        if not 0.0 <= self.rho_f < 1.0:
            raise InputError(f"rho_f must lie in [0, 1), got {self.rho_f}")
        if self.T < 1:
            raise InputError(f"T must be a positive integer, got {self.T}")

    def target(self, t: int) -> float:
        return target_sparsity(self, t)


def target_sparsity(schedule: SparsitySchedule, t: int) -> float:
    if not 1 <= t <= schedule.T:
        raise InputError(f"round {t} outside [1, {schedule.T}]")
    return schedule.rho_f + (t / schedule.T - 1.0) ** 3 * schedule.rho_f


@dataclass(frozen=True)
class QuantizerSpec:
    """``q`` bits per magnitude; ``q == 0`` disables quantization (pass-through)."""

    q: int

    def __post_init__(self):
        if self.q < 0:
            raise InputError(f"q must be >= 1 (or 0 for off), got {self.q}")

    @property
    def enabled(self) -> bool:
        return self.q > 0

    @property
    def knob_count(self) -> int:
        return 2**self.q

    @property
    def interval_count(self) -> int:
        return 2**self.q - 1


@dataclass(frozen=True)
class DropoutSpec:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise InputError(f"dropout probability must lie in [0, 1), got {self.p}")

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.p)


class PruneMask:
    """Binary keep-mask over a weight tensor (True = kept)."""

    def __init__(self, bits):
        self.bits = np.asarray(bits, dtype=bool)

    @classmethod
    def ones(cls, shape) -> "PruneMask":
        return cls(np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.bits.shape

    @property
    def sparsity(self) -> float:
        return float(np.count_nonzero(~self.bits)) / self.bits.size

    def copy(self) -> "PruneMask":
        return PruneMask(self.bits.copy())

    def __eq__(self, other):
        return isinstance(other, PruneMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"PruneMask(shape={self.shape}, sparsity={self.sparsity:.4f})"


def sparsity(tensor: np.ndarray) -> float:
    """Fraction of exactly-zero entries."""
    tensor = np.asarray(tensor)
    return float(tensor.size - np.count_nonzero(tensor)) / tensor.size


def importance(weights: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """First-order Taylor saliency ``|w * g|`` per weight."""
    weights = np.asarray(weights, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if weights.shape != grads.shape:
        raise DimensionError(f"weights {weights.shape} vs grads {grads.shape}")
    return np.abs(weights * grads)


def _prune_count(target: float, n: int) -> int:
    # smallest k with k / n >= target, robust to rounding in target * n
    k = math.ceil(target * n)
    while k > 0 and (k - 1) / n >= target:
        k -= 1
    while k < n and k / n < target:
        k += 1
    return k


def build_mask(scores: np.ndarray, target: float, existing: PruneMask | None = None) -> PruneMask:
    """Zero the ``ceil(target * N)`` least important entries, on top of ``existing`` zeros.

    Ties are broken by ascending flat index, so the result is deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= target < 1.0:
        raise InputError(f"target sparsity must lie in [0, 1), got {target}")
    if existing is None:
        existing = PruneMask.ones(scores.shape)
    if existing.shape != scores.shape:
        raise DimensionError(f"mask {existing.shape} vs importance {scores.shape}")
    k = _prune_count(target, scores.size)
    bits = existing.bits.copy()
    if k:
        order = np.argsort(scores.ravel(), kind="stable")
        bits.ravel()[order[:k]] = False
    return PruneMask(bits)


def apply_mask(mask: PruneMask, tensor: np.ndarray) -> np.ndarray:
    tensor = np.asarray(tensor, dtype=np.float64)
    if mask.shape != tensor.shape:
        raise DimensionError(f"mask {mask.shape} vs tensor {tensor.shape}")
    # np.where rather than a product: keeps pruned entries at +0.0
    return np.where(mask.bits, tensor, 0.0)


def quantization_range(grad: np.ndarray, support: np.ndarray | None = None) -> tuple[float, float]:
    """``(min |g|, max |g|)`` over the support (all entries if ``support`` is None)."""
    mags = np.abs(np.asarray(grad, dtype=np.float64))
    if support is not None:
        mags = mags[np.asarray(support, dtype=bool)]
    if mags.size == 0:
        return 0.0, 0.0
    return float(mags.min()), float(mags.max())


def quantize(
    grad: np.ndarray,
    spec: QuantizerSpec,
    rng: np.random.Generator,
    support: np.ndarray | None = None,
) -> np.ndarray:
    """Unbiased stochastic rounding of ``|g|`` onto ``2**q`` evenly spaced knobs.

    Knobs span ``[min|g|, max|g|]`` measured over ``support`` (e.g. the unpruned
    entries of a layer). Each magnitude is rounded to one of the two knobs that
    bracket it, up with probability proportional to its distance from the lower
    knob, and the sign is restored. Entries outside ``support`` are returned as
    they are. A degenerate range returns the input unchanged.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not spec.enabled:
        return grad.copy()
    if support is None:
        support = np.ones(grad.shape, dtype=bool)
    else:
        support = np.asarray(support, dtype=bool)
        if support.shape != grad.shape:
            raise DimensionError(f"support {support.shape} vs grad {grad.shape}")
    g_min, g_max = quantization_range(grad, support)
    if g_max == g_min:
        return grad.copy()

    levels = spec.interval_count
    step = (g_max - g_min) / levels
    mags = np.abs(grad[support])
    idx = np.floor((mags - g_min) / step)
    idx = np.clip(idx, 0, levels - 1)
    # floor can land one interval low when |g| sits on a knob
    idx = np.where((idx < levels - 1) & (mags >= g_min + (idx + 1) * step), idx + 1, idx)
    lower = g_min + idx * step
    upper = np.where(idx == levels - 1, g_max, g_min + (idx + 1) * step)
    p_up = (mags - lower) / step
    go_up = (rng.random(mags.shape) < p_up) | (mags >= upper)
    go_up &= mags > lower
    out = grad.copy()
    out[support] = np.sign(grad[support]) * np.where(go_up, upper, lower)
    return out


def dropout_forward(
    activations: np.ndarray, spec: DropoutSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Drop whole feature vectors (rows) with probability ``p``; rescale survivors.

    Returns the dropped activations and the boolean per-row keep mask.
    """
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 2:
        raise DimensionError(f"activations must be 2-D, got {activations.shape}")
    n = activations.shape[0]
    if spec.p == 0.0:
        keep = np.ones(n, dtype=bool)
    else:
        keep = rng.random(n) >= spec.p
    return _scale_rows(activations, keep, spec.scale), keep


def dropout_backward(upstream: np.ndarray, keep: np.ndarray, spec: DropoutSpec) -> np.ndarray:
    """Adjoint of :func:`dropout_forward` for a frozen keep mask."""
    upstream = np.asarray(upstream, dtype=np.float64)
    keep = np.asarray(keep, dtype=bool)
    if upstream.ndim != 2 or keep.shape != (upstream.shape[0],):
        raise DimensionError(f"keep mask {keep.shape} vs upstream {upstream.shape}")
    return _scale_rows(upstream, keep, spec.scale)


def _scale_rows(x, keep, scale):
    return np.where(keep[:, None], x * scale, 0.0)
