"""Patch tokenization at a sampled patch size with pseudo-inverse weight resizing."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .nn_core import DEFAULT_DTYPE, Module, Parameter, trunc_normal


class NumericalError(ArithmeticError):
    pass


def bilinear_matrix_1d(n_in: int, n_out: int, antialias: bool = False) -> np.ndarray:
    """Dense ``[n_out, n_in]`` bilinear resize with half-pixel centers.

    Out-of-range taps clamp to the edge. With ``antialias`` the triangle
    kernel widens by the downsampling factor, so each output averages its
    whole input footprint (used for image crops, not for weight resizing).
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    scale = n_out / n_in
    support = min(scale, 1.0) if antialias else 1.0
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    j = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(j[None, :] - centers[:, None]) * support)
    return w / w.sum(axis=1, keepdims=True)


@lru_cache(maxsize=32)
def bilinear_matrix_2d(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out**2, n_in**2]`` resize acting on row-major flattened patches."""
    r = bilinear_matrix_1d(n_in, n_out)
    m = np.kron(r, r)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=32)
def pi_resize_matrix(native: int, target: int) -> np.ndarray:
    """``M`` with ``w_target = M @ w_native``; ``M = pinv(B).T``."""
    if native == target:
        m = np.eye(native * native)
    else:
        b = bilinear_matrix_2d(native, target)
        s = np.linalg.svd(b, compute_uv=False)
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericalError(f"resize {native}->{target} is ill-conditioned (cond={cond:.3e})")
        m = np.linalg.pinv(b).T
    m.setflags(write=False)
    return m


@lru_cache(maxsize=32)
def interp_resize_matrix(native: int, target: int) -> np.ndarray:
    m = np.eye(native * native) if native == target else bilinear_matrix_2d(native, target).copy()
    m.setflags(write=False)
    return m


@dataclass
class PatchEmbedWeights:
    native_size: int
    weights: np.ndarray  # [native**2, C, D]
    bias: np.ndarray  # [D]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[2]


def pi_resize(weights: PatchEmbedWeights, target_size: int, mode: str = "pi") -> PatchEmbedWeights:
    """Resize patch-embedding weights to a new patch side.

    ``mode="pi"`` keeps ``<w_new, B x> = <w, x>`` where B is the bilinear
    resize from native to target (exact when upsampling); ``mode="interp"``
    resizes the kernel itself by bilinear interpolation.
    """
    if target_size < 1:
        raise ValueError(f"target size must be >= 1, got {target_size}")
    if target_size == weights.native_size:
        return PatchEmbedWeights(target_size, weights.weights, weights.bias)
    m = resize_matrix(weights.native_size, target_size, mode)
    src = weights.weights
    w = (m @ src.astype(np.float64).reshape(src.shape[0], -1)).reshape(-1, *src.shape[1:]).astype(src.dtype)
    return PatchEmbedWeights(target_size, w, weights.bias)


def resize_matrix(native: int, target: int, mode: str = "pi") -> np.ndarray:
    if mode == "pi":
        return pi_resize_matrix(native, target)
    if mode == "interp":
        return interp_resize_matrix(native, target)
    raise ValueError(f"unknown resize mode {mode!r}")


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., (H/p)*(W/p), p*p, C]`` in row-major order."""
    *lead, h, w, c = pixels.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ValueError(f"tile extent H={h}, W={w} not divisible by patch size p={p}")
    x = pixels.reshape(*lead, h // p, p, w // p, p, c)
    x = np.moveaxis(x, -4, -3)  # [..., H/p, W/p, p, p, C]
    return x.reshape(*lead, (h // p) * (w // p), p * p, c)


def unpatchify(patches: np.ndarray, h: int, w: int, patch_size: int) -> np.ndarray:
    *lead, _, _, c = patches.shape
    p = patch_size
    x = patches.reshape(*lead, h // p, w // p, p, p, c)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h, w, c)


def embed_tiles(tile_pixels: np.ndarray, weights: PatchEmbedWeights, patch_size: int | None = None) -> np.ndarray:
    """Project non-overlapping patches to tokens ``[..., N, D]``."""
    p = weights.native_size if patch_size is None else patch_size
    if p != weights.native_size:
        weights = pi_resize(weights, p)
    patches = patchify(tile_pixels, p)
    flat = patches.reshape(*patches.shape[:-2], -1)
    return flat @ weights.weights.reshape(-1, weights.embed_dim) + weights.bias


@dataclass
class PatchSizeSchedule:
    sizes: list[int] = field(default_factory=lambda: [8, 16, 32])
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if not self.sizes:
            raise ValueError("patch size schedule needs at least one size")
        if self.distribution != "uniform":
            raise ValueError(f"unsupported distribution {self.distribution!r}")

    def check_tile(self, tile_side: int) -> None:
        bad = [s for s in self.sizes if tile_side % s]
        if bad:
            raise ValueError(f"patch sizes {bad} do not divide tile side {tile_side}")


def sample_patch_size(schedule: PatchSizeSchedule, step: int) -> int:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    rng = np.random.default_rng([schedule.seed, step])
    return int(schedule.sizes[int(rng.integers(len(schedule.sizes)))])


class PatchEmbed(Module):
    """Trainable patch embedding stored at ``native_size``."""

    def __init__(self, name: str, native_size: int, channels: int, dim: int, rng,
                 dtype=DEFAULT_DTYPE, resize_mode: str = "pi"):
        self.native_size = native_size
        self.resize_mode = resize_mode
        fan_in = native_size * native_size * channels
        # scale so token variance does not depend on the native size
        std = 0.02 * np.sqrt(768.0 / fan_in) if fan_in > 768 else 0.02
        self.weight = Parameter(f"{name}.weight", trunc_normal(rng, (native_size**2, channels, dim), std, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim, dtype=dtype))

    def as_weights(self) -> PatchEmbedWeights:
        return PatchEmbedWeights(self.native_size, self.weight.value, self.bias.value)

    def forward(self, pixels, patch_size: int):
        patches = patchify(pixels, patch_size)
        if patch_size == self.native_size:
            w = self.weight.value
            m = None
        else:
            m = resize_matrix(self.native_size, patch_size, self.resize_mode).astype(self.weight.value.dtype)
            src = self.weight.value
            w = (m @ src.reshape(src.shape[0], -1)).reshape(-1, *src.shape[1:])
        flat = patches.reshape(*patches.shape[:-2], -1)
        tokens = flat @ w.reshape(-1, w.shape[-1]) + self.bias.value
        return tokens, (flat, m, w.shape)

    def backward(self, dy, cache):
        flat, m, wshape = cache
        d = dy.shape[-1]
        dw = (flat.reshape(-1, flat.shape[-1]).T @ dy.reshape(-1, d)).reshape(wshape)
        if m is not None:
            dw = (m.T @ dw.reshape(dw.shape[0], -1)).reshape(-1, *dw.shape[1:])
        self.weight.grad += dw
        self.bias.grad += dy.reshape(-1, d).sum(axis=0)
        return None
