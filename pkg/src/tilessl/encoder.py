"""Vision transformer encoder: patch tokens + CLS + registers through pre-norm blocks."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .flexi_embed import PatchEmbed
from .nn_core import DEFAULT_DTYPE, Block, ConfigError, LayerNorm, Module, Parameter, trunc_normal
from .rope2d import DEFAULT_BASE, cached_table, grid_rope

# Pixel statistics used to normalize [0, 1] tiles before the encoder.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    registers: int = 0
    patch_sizes: list[int] = field(default_factory=lambda: [8, 16, 32])
    patch_mode: str = "flexible"  # "flexible" | "fixed"
    rope: bool = True
    rope_base: float = DEFAULT_BASE
    tile_side: int = 96
    channels: int = 3
    mlp_ratio: int = 4
    resize_mode: str = "pi"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.registers < 0:
            raise ConfigError("register count must be >= 0")
        if self.patch_mode not in ("flexible", "fixed"):
            raise ConfigError(f"unknown patch mode {self.patch_mode!r}")
        if self.patch_mode == "fixed" and len(self.patch_sizes) != 1:
            raise ConfigError("fixed patch mode takes exactly one patch size")
        for p in self.patch_sizes:
            if self.tile_side % p:
                raise ConfigError(f"patch size {p} does not divide tile side {self.tile_side}")
        if self.rope and self.head_dim % 4:
            raise ConfigError(f"head_dim {self.head_dim} must be divisible by 4 when rope is on")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def native_patch(self) -> int:
        return max(self.patch_sizes)

    def token_count(self, patch_size: int, tile_side: int | None = None) -> int:
        side = self.tile_side if tile_side is None else tile_side
        return 1 + self.registers + (side // patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


PRESETS = {
    "small-flex": dict(embed_dim=64, depth=4, heads=4, registers=0, patch_sizes=[8, 16, 32],
                       patch_mode="flexible", tile_side=96),
    "large-fixed": dict(embed_dim=128, depth=6, heads=8, registers=4, patch_sizes=[8],
                        patch_mode="fixed", tile_side=96),
    # p=14 does not divide 96; this one exists for token-accounting checks
    "large-fixed-224": dict(embed_dim=64, depth=2, heads=4, registers=4, patch_sizes=[14],
                            patch_mode="fixed", tile_side=224),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return EncoderConfig(**base)


@dataclass
class TokenSequence:
    cls: np.ndarray
    registers: np.ndarray
    patches: np.ndarray
    patch_grid: tuple[int, int]

    def __len__(self) -> int:
        return 1 + len(self.registers) + len(self.patches)


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    return (pixels - PIXEL_MEAN) / PIXEL_STD


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        self.patch_embed = PatchEmbed("patch_embed", config.native_patch, config.channels, d, rng, dtype,
                                      config.resize_mode)
        self.cls_token = Parameter("cls_token", trunc_normal(rng, (d,), 0.02, dtype))
        self.register_tokens = Parameter("register_tokens", trunc_normal(rng, (config.registers, d), 0.02, dtype))
        self.mask_token = Parameter("mask_token", np.zeros(d, dtype=dtype))
        self.blocks = [Block(f"blocks.{i}", d, config.heads, rng, config.mlp_ratio, dtype)
                       for i in range(config.depth)]
        self.norm = LayerNorm("norm", d, dtype)

    def check_patch_size(self, patch_size: int, h: int, w: int) -> None:
        if patch_size not in self.config.patch_sizes:
            raise ConfigError(f"patch size {patch_size} not in configured sizes {self.config.patch_sizes}")
        if h % patch_size or w % patch_size:
            raise ConfigError(f"patch size {patch_size} does not divide input {h}x{w}")

    def forward(self, pixels: np.ndarray, patch_size: int, mask: np.ndarray | None = None):
        """Encode normalized pixels ``[B, H, W, C]`` to tokens ``[B, 1 + R + N, D]``.

        ``mask`` (``[B, N]`` bool) replaces the selected patch embeddings by
        the learned mask token before the transformer blocks.
        """
        b, h, w, _ = pixels.shape
        self.check_patch_size(patch_size, h, w)
        gh, gw = h // patch_size, w // patch_size
        patches, c_embed = self.patch_embed.forward(pixels.astype(self.dtype, copy=False), patch_size)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != patches.shape[:2]:
                raise ValueError(f"mask shape {mask.shape} != patch grid {patches.shape[:2]}")
            patches = np.where(mask[..., None], self.mask_token.value, patches)
        r = self.config.registers
        d = self.config.embed_dim
        special = np.concatenate([self.cls_token.value[None], self.register_tokens.value.reshape(r, d)], axis=0)
        x = np.concatenate([np.broadcast_to(special, (b, 1 + r, d)), patches], axis=1)
        rope = None
        if self.config.rope:
            rope = grid_rope(cached_table(gh, gw, self.config.head_dim, float(self.config.rope_base)))
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x, rope, 1 + r)
            caches.append(c)
        out, c_norm = self.norm.forward(x)
        return out, (c_embed, mask, caches, c_norm, (gh, gw))

    def backward(self, dout: np.ndarray, cache) -> None:
        c_embed, mask, caches, c_norm, _ = cache
        dx = self.norm.backward(dout, c_norm)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(dx, c)
        r = self.config.registers
        self.cls_token.grad += dx[:, 0].sum(axis=0)
        if r:
            self.register_tokens.grad += dx[:, 1:1 + r].sum(axis=0)
        dpatch = dx[:, 1 + r:]
        if mask is not None:
            self.mask_token.grad += dpatch[mask].sum(axis=0)
            dpatch = np.where(mask[..., None], 0, dpatch)
        self.patch_embed.backward(dpatch, c_embed)

    def encode(self, tile: np.ndarray, patch_size: int) -> TokenSequence:
        """Encode one normalized tile ``[H, W, C]``."""
        out, cache = self.forward(tile[None], patch_size)
        r = self.config.registers
        return TokenSequence(out[0, 0], out[0, 1:1 + r], out[0, 1 + r:], cache[-1])

    def split(self, tokens: np.ndarray):
        """(cls, registers, patches) views of a batched token array."""
        r = self.config.registers
        return tokens[:, 0], tokens[:, 1:1 + r], tokens[:, 1 + r:]


def forward(tile_pixels: np.ndarray, encoder: Encoder, patch_size: int) -> TokenSequence:
    return encoder.encode(tile_pixels, patch_size)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def count_flops(config: EncoderConfig, patch_size: int, tile_side: int | None = None,
                special_tokens: bool = True) -> dict[str, float]:
    """Multiply-accumulate counts of one forward pass over one tile.

    ``attention`` is the token-mixing part (QK^T and PV, quadratic in the
    sequence length); ``linear`` covers qkv/proj/MLP (linear in it).
    """
    side = config.tile_side if tile_side is None else tile_side
    if side % patch_size:
        raise ConfigError(f"patch size {patch_size} does not divide tile side {side}")
    n_patch = (side // patch_size) ** 2
    n = n_patch + (1 + config.registers if special_tokens else 0)
    d = config.embed_dim
    per_block_linear = n * (4 * d * d + 2 * config.mlp_ratio * d * d)
    per_block_attn = 2 * n * n * d
    embed = n_patch * patch_size * patch_size * config.channels * d
    linear = config.depth * per_block_linear
    attention = config.depth * per_block_attn
    return {"tokens": n, "embed": float(embed), "linear": float(linear), "attention": float(attention),
            "total": float(embed + linear + attention)}


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TSSLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``magic | u32 version | u32 header_len | header JSON | f32le payload``.

    The header lists ``{"name", "shape"}`` entries in payload order plus a
    free-form ``meta`` object.
    """
    entries = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    offset = 16 + hlen
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(e["shape"])
        params[e["name"]] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return params, header["meta"]


def module_state(module: Module) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in module.named_parameters().items()}


def load_state(module: Module, state: dict[str, np.ndarray], strict: bool = True) -> None:
    named = module.named_parameters()
    for name, p in named.items():
        if name not in state:
            if strict:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            continue
        if state[name].shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.value.shape}")
        p.value[...] = state[name]
