"""Number-format range emulation, gradient clipping and the optimizer schedule."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .nn_core import Parameter


@dataclass(frozen=True)
class FormatSpec:
    name: str
    max_abs: float
    mantissa_bits: int

    def __post_init__(self):
        if not self.max_abs > 0 or self.mantissa_bits < 1:
            raise ValueError(f"invalid format spec {self}")


FP16_RANGE = FormatSpec("fp16-range", 65504.0, 10)
BF16_RANGE = FormatSpec("bf16-range", 3.39e38, 7)
FP32 = FormatSpec("fp32", 3.4028234663852886e38, 23)
FORMATS = {f.name: f for f in (FP16_RANGE, BF16_RANGE, FP32)}


def emulate_format(values: np.ndarray, spec: FormatSpec) -> tuple[np.ndarray, int]:
    """Truncate mantissas to ``spec.mantissa_bits`` and flag range overflow.

    Returns the rounded array (same dtype as the input) and the number of
    entries whose magnitude exceeds ``spec.max_abs``; those entries become
    signed infinities. Subnormals are not modeled.
    """
    x = np.asarray(values, dtype=np.float64)
    mant, exp = np.frexp(x)
    scale = float(2 ** (spec.mantissa_bits + 1))
    with np.errstate(invalid="ignore", over="ignore"):
        rounded = np.ldexp(np.trunc(mant * scale) / scale, exp)
        over = ~(np.abs(rounded) <= spec.max_abs)
    over &= ~np.isnan(x)
    n_over = int(over.sum())
    if n_over:
        rounded = np.where(over, np.copysign(np.inf, x), rounded)
    out_dtype = values.dtype if isinstance(values, np.ndarray) and values.dtype.kind == "f" else np.float64
    with np.errstate(over="ignore"):
        return rounded.astype(out_dtype), n_over


@dataclass
class PrecisionPolicy:
    backbone_format: FormatSpec = FP32
    high_precision_islands: frozenset = frozenset({"loss", "center_update"})

    def __post_init__(self):
        if self.backbone_format is not FP32 and self.backbone_format.name != "fp32" and not self.high_precision_islands:
            raise ValueError("reduced backbone format requires at least one fp32 island")

    @property
    def reduced(self) -> bool:
        return self.backbone_format.name != "fp32"

    @classmethod
    def named(cls, name: str) -> "PrecisionPolicy":
        aliases = {"fp16": "fp16-range", "bf16": "bf16-range"}
        return cls(FORMATS[aliases.get(name, name)])


class FormatEmulator:
    """Callable installed on layers; rounds activations and tallies overflow per site."""

    def __init__(self, spec: FormatSpec):
        self.spec = spec
        self.overflows: Counter = Counter()

    def __call__(self, values: np.ndarray, site: str) -> np.ndarray:
        out, n = emulate_format(values, self.spec)
        if n:
            self.overflows[site] += n
        return out

    def reset(self) -> dict[str, int]:
        events = dict(self.overflows)
        self.overflows.clear()
        return events


def emulator_for(policy: PrecisionPolicy) -> FormatEmulator | None:
    return FormatEmulator(policy.backbone_format) if policy.reduced else None


class NonFiniteError(ArithmeticError):
    """Non-finite values met where finite ones are required."""


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        a64 = np.asarray(a, dtype=np.float64)
        total += float(np.dot(a64.ravel(), a64.ravel()))
    return math.sqrt(total)


def clip_global_norm(params: list[Parameter], max_norm: float = 3.0) -> tuple[float, bool]:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns ``(pre_clip_norm, finite)``. Non-finite gradients are left untouched
    and reported with ``finite=False``.
    """
    norm = global_norm(p.grad for p in params)
    if not math.isfinite(norm):
        return norm, False
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return norm, True


@dataclass
class LRSchedule:
    peak_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"invalid schedule lengths {self.warmup_steps}/{self.total_steps}")


def lr_at(step: int, schedule: LRSchedule) -> float:
    """Linear warmup to the peak, then cosine decay to ``min_lr``."""
    s = schedule
    if step >= s.total_steps:
        return s.min_lr
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    decay = s.total_steps - s.warmup_steps
    progress = (step - s.warmup_steps) / decay
    return s.min_lr + (s.peak_lr - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: list[Parameter],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.04,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decay_filter=lambda p: p.value.ndim >= 2,
) -> AdamWState:
    """One AdamW update in place, decoupled weight decay, bias-corrected moments."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.value.shape)
            state.v[p.name] = np.zeros(p.value.shape)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        new = p.value.astype(np.float64)
        if weight_decay and decay_filter(p):
            new *= 1.0 - lr * weight_decay
        new -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value[...] = new
    return state


def check_batch_floor(global_batch: int, floor: int = 1024) -> bool:
    """Warn when the effective batch is below the stability floor; return whether it passes."""
    if global_batch < floor:
        warnings.warn(
            f"global batch {global_batch} below the stability floor of {floor}; fine at toy scale, "
            "risky at full scale",
            stacklevel=2,
        )
        return False
    return True
