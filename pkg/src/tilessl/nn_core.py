"""Differentiable numeric primitives with hand-written backward passes.

Every layer follows the same protocol::

    y, cache = layer.forward(x)
    dx = layer.backward(dy, cache)   # accumulates into Parameter.grad

Caches are plain tuples, so one layer can be run forward several times
(e.g. global and local crops) before the matching backward calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ContractError(ValueError):
    """Raised when an operation receives arrays of incompatible shape."""


class ConfigError(ValueError):
    """Raised for invalid static configuration (dims, heads, sizes)."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ContractError(
                f"gradient shape {self.grad.shape} != value shape {self.value.shape} for {self.name}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) truncated to [-2 std, 2 std] by resampling."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Minimal container: subclasses list their parameters and children."""

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for value in self.__dict__.values():
            if isinstance(value, Parameter):
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
                    elif isinstance(item, Parameter):
                        params.append(item)
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ContractError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_precision(self, emulator) -> None:
        for value in self.__dict__.values():
            if isinstance(value, Module):
                value.set_precision(emulator)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_precision(emulator)


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------


def linear(x: np.ndarray, weight: Parameter | np.ndarray, bias: Parameter | np.ndarray | None = None) -> np.ndarray:
    w = weight.value if isinstance(weight, Parameter) else weight
    b = bias.value if isinstance(bias, Parameter) else bias
    if x.shape[-1] != w.shape[0]:
        raise ContractError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    y = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ContractError(f"linear: bias shape {b.shape} incompatible with weight shape {w.shape}")
        y = y + b
    return y


def softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = (logits - logits.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = (logits - logits.max(axis=axis, keepdims=True)) / temperature
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean soft-target cross-entropy over leading axes and its logit gradient."""
    logp = log_softmax(logits)
    n = int(np.prod(logits.shape[:-1]))
    loss = float(-(targets * logp).sum() / n)
    grad = (np.exp(logp) * targets.sum(axis=-1, keepdims=True) - targets) / n
    return loss, grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=DEFAULT_DTYPE, std: float = 0.02):
        self.weight = Parameter(f"{name}.weight", trunc_normal(rng, (d_in, d_out), std, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out, dtype=dtype)) if bias else None
        self.name = name
        self.emulator = None

    def set_precision(self, emulator) -> None:
        self.emulator = emulator

    def forward(self, x):
        y = linear(x, self.weight, self.bias)
        if self.emulator is not None:
            y = self.emulator(y, self.name)
        return y, x

    def backward(self, dy, cache):
        x = cache
        w = self.weight.value
        self.weight.grad += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        if self.bias is not None:
            self.bias.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dx = dy @ w.T
        if self.emulator is not None:
            dx = self.emulator(dx, self.name + ".grad")
        return dx


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, dtype=DEFAULT_DTYPE, eps: float = 1e-6):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        return xhat * self.gamma.value + self.beta.value, (xhat, rstd)

    def backward(self, dy, cache):
        xhat, rstd = cache
        d = xhat.shape[-1]
        flat_dy = dy.reshape(-1, d)
        self.gamma.grad += (flat_dy * xhat.reshape(-1, d)).sum(axis=0)
        self.beta.grad += flat_dy.sum(axis=0)
        g = dy * self.gamma.value
        return rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class MLP(Module):
    def __init__(self, name: str, dim: int, hidden: int, rng, dtype=DEFAULT_DTYPE):
        self.fc1 = Linear(f"{name}.fc1", dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, dim, rng, dtype=dtype)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a = gelu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, cache):
        c1, h, c2 = cache
        da = self.fc2.backward(dy, c2)
        return self.fc1.backward(da * gelu_grad(h), c1)


class Attention(Module):
    """Multi-head self-attention; optional rotary embedding on a token slice.

    ``rope`` is a callable pair ``(rotate, unrotate)`` acting on arrays of
    shape ``[..., n_rot, head_dim]``; it is applied to queries and keys of
    tokens ``[rope_start:]`` only.
    """

    def __init__(self, name: str, dim: int, heads: int, rng, dtype=DEFAULT_DTYPE):
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(f"{name}.qkv", dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(f"{name}.proj", dim, dim, rng, dtype=dtype)
        self.emulator = None

    def set_precision(self, emulator) -> None:
        super().set_precision(emulator)
        self.emulator = emulator

    def forward(self, x, rope=None, rope_start: int = 0):
        *lead, n, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv, c_qkv = self.qkv.forward(x)
        qkv = qkv.reshape(*lead, n, 3, h, hd)
        q = np.moveaxis(qkv[..., 0, :, :], -2, -3)  # [..., h, n, hd]
        k = np.moveaxis(qkv[..., 1, :, :], -2, -3)
        v = np.moveaxis(qkv[..., 2, :, :], -2, -3)
        if rope is not None:
            q = q.copy()
            k = k.copy()
            q[..., rope_start:, :] = rope[0](q[..., rope_start:, :])
            k[..., rope_start:, :] = rope[0](k[..., rope_start:, :])
        scale = 1.0 / math.sqrt(hd)
        scores = (q @ np.swapaxes(k, -1, -2)) * scale
        if self.emulator is not None:
            scores = self.emulator(scores, "attn_scores")
        p = softmax(scores)
        o = p @ v  # [..., h, n, hd]
        merged = np.moveaxis(o, -3, -2).reshape(*lead, n, d)
        y, c_proj = self.proj.forward(merged)
        return y, (c_qkv, q, k, v, p, c_proj, rope, rope_start)

    def backward(self, dy, cache):
        c_qkv, q, k, v, p, c_proj, rope, rope_start = cache
        *lead, h, n, hd = q.shape
        d = h * hd
        dmerged = self.proj.backward(dy, c_proj)
        do = np.moveaxis(dmerged.reshape(*lead, n, h, hd), -2, -3)
        dp = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ do
        dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(hd)
        dscores *= scale
        dq = dscores @ k
        dk = np.swapaxes(dscores, -1, -2) @ q
        if rope is not None:
            dq[..., rope_start:, :] = rope[1](dq[..., rope_start:, :])
            dk[..., rope_start:, :] = rope[1](dk[..., rope_start:, :])
        dqkv = np.stack([np.moveaxis(t, -3, -2) for t in (dq, dk, dv)], axis=-3)  # [..., n, 3, h, hd]
        return self.qkv.backward(dqkv.reshape(*lead, n, 3 * d), c_qkv)


class Block(Module):
    """Pre-norm transformer block: x + attn(ln1 x); x + mlp(ln2 x)."""

    def __init__(self, name: str, dim: int, heads: int, rng, mlp_ratio: int = 4, dtype=DEFAULT_DTYPE):
        self.ln1 = LayerNorm(f"{name}.ln1", dim, dtype)
        self.attn = Attention(f"{name}.attn", dim, heads, rng, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", dim, dtype)
        self.mlp = MLP(f"{name}.mlp", dim, mlp_ratio * dim, rng, dtype)

    def forward(self, x, rope=None, rope_start: int = 0):
        a, c_ln1 = self.ln1.forward(x)
        a, c_attn = self.attn.forward(a, rope, rope_start)
        x = x + a
        m, c_ln2 = self.ln2.forward(x)
        m, c_mlp = self.mlp.forward(m)
        return x + m, (c_ln1, c_attn, c_ln2, c_mlp)

    def backward(self, dy, cache):
        c_ln1, c_attn, c_ln2, c_mlp = cache
        dx = dy + self.ln2.backward(self.mlp.backward(dy, c_mlp), c_ln2)
        return dx + self.ln1.backward(self.attn.backward(dx, c_attn), c_ln1)


def attention_block(tokens: np.ndarray, block: Block, rope=None, rope_start: int = 0) -> np.ndarray:
    """Forward one pre-norm block over a token array ``[..., N, d]``."""
    return block.forward(tokens, rope, rope_start)[0]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    worst: float

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(
    loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
    arrays: dict[str, np.ndarray],
    eps: float = 1e-4,
    max_entries: int | None = 40,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    stencil: int = 5,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads`` evaluates the scalar loss at the current contents of
    ``arrays`` (mutated in place during probing) and returns the analytic
    gradient for each named array. At most ``max_entries`` coordinates per
    array are probed (all when None). ``stencil`` is 3 (two-point central)
    or 5 (four-point central, fourth-order accurate).
    """
    if stencil == 3:
        offsets, coeffs, denom = (1, -1), (1.0, -1.0), 2.0
    elif stencil == 5:
        offsets, coeffs, denom = (2, 1, -1, -2), (-1.0, 8.0, -8.0, 1.0), 12.0
    else:
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    rng = rng or np.random.default_rng(0)
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    errors: dict[str, float] = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            acc = 0.0
            for off, coef in zip(offsets, coeffs):
                flat[i] = orig + off * eps
                acc += coef * loss_and_grads()[0]
            flat[i] = orig
            numeric[j] = acc / (denom * eps)
        errors[name] = _rel_err(analytic[name].reshape(-1)[idx], numeric, floor)
    return GradReport(errors, max(errors.values(), default=0.0))


def module_grad_check(
    module: Module,
    forward_loss: Callable[[], tuple[float, Sequence]],
    backward: Callable[[Sequence], dict[str, np.ndarray]],
    inputs: dict[str, np.ndarray] | None = None,
    params: Iterable[Parameter] | None = None,
    **kwargs,
) -> GradReport:
    """grad_check over a module's parameters plus optional input arrays.

    ``forward_loss`` returns ``(loss, state)``; ``backward(state)`` must run the
    module's backward pass (accumulating parameter grads) and return input
    gradients keyed like ``inputs``.
    """
    params = list(params if params is not None else module.parameters())
    inputs = inputs or {}

    def fn():
        module.zero_grad()
        loss, state = forward_loss()
        grads = dict(backward(state))
        for p in params:
            grads[p.name] = p.grad.copy()
        return loss, grads

    arrays = dict(inputs)
    arrays.update({p.name: p.value for p in params})
    return grad_check(fn, arrays, **kwargs)
