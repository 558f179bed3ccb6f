"""Synthetic slides and multi-magnification tile sampling.

A slide is generated at the base resolution (0.25 µm/px). Coarser levels
(0.5, 1.0, 2.0 µm/px) are box-filter averages of the base pixels, so any
tile is the exact mean of the base pixels it covers.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nn_core import ConfigError

log = logging.getLogger(__name__)

BASE_MPP = 0.25
MPP_LEVELS = (0.25, 0.5, 1.0, 2.0)
TILE_SIZES = (275, 550)
STAIN_MODES = ("he", "ihc", "special")
N_TEXTURE_CLASSES = 4

# (background-ish, foreground) RGB anchors per stain family
_PALETTES = {
    "he": ((0.93, 0.72, 0.84), (0.42, 0.20, 0.55)),
    "ihc": ((0.85, 0.86, 0.92), (0.48, 0.30, 0.16)),
    "special": ((0.80, 0.90, 0.88), (0.15, 0.35, 0.60)),
}


class IntegrityError(IOError):
    pass


@dataclass
class SyntheticSlide:
    base: np.ndarray  # [E, E, 3] uint8 at 0.25 µm/px
    tissue_mask: np.ndarray  # [E, E] bool
    artifact_mask: np.ndarray  # [E, E] bool
    slide_id: str
    seed: int
    stain: str
    texture_class: int
    _levels: dict = field(default_factory=dict, repr=False)

    @property
    def extent(self) -> int:
        return self.base.shape[0]

    def level(self, mpp: float) -> np.ndarray:
        """Float32 pixels in [0, 1] at ``mpp`` (box-filtered from the base)."""
        f = level_factor(mpp)
        if f not in self._levels:
            base = self.base.astype(np.float64) / 255.0
            self._levels[f] = box_downsample(base, f).astype(np.float32)
        return self._levels[f]

    def mask_level(self, mpp: float) -> tuple[np.ndarray, np.ndarray]:
        """(all-tissue, any-artifact) masks pooled to the level grid."""
        f = level_factor(mpp)
        key = ("mask", f)
        if key not in self._levels:
            e = (self.extent // f) * f
            t = self.tissue_mask[:e, :e].reshape(e // f, f, e // f, f).all(axis=(1, 3))
            a = self.artifact_mask[:e, :e].reshape(e // f, f, e // f, f).any(axis=(1, 3))
            self._levels[key] = (t, a)
        return self._levels[key]


@dataclass
class TileRecord:
    pixels: np.ndarray | None
    slide_id: str
    mpp: float
    tile_size: int
    origin: tuple[int, int]  # (x, y) at base resolution
    seed: int = 0
    label: int = -1
    pixel_path: str | None = None

    def __post_init__(self):
        if self.mpp not in MPP_LEVELS:
            raise ValueError(f"mpp {self.mpp} not in {MPP_LEVELS}")
        if self.tile_size not in TILE_SIZES:
            raise ValueError(f"tile size {self.tile_size} not in {TILE_SIZES}")
        self.origin = (int(self.origin[0]), int(self.origin[1]))

    @property
    def footprint(self) -> int:
        """Side length covered at base resolution."""
        return self.tile_size * level_factor(self.mpp)

    @property
    def physical_side_um(self) -> float:
        return self.tile_size * self.mpp


def level_factor(mpp: float) -> int:
    if mpp not in MPP_LEVELS:
        raise ValueError(f"mpp {mpp} not in {MPP_LEVELS}")
    return int(round(mpp / BASE_MPP))


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[:2]
    h, w = (h // factor) * factor, (w // factor) * factor
    x = img[:h, :w].reshape(h // factor, factor, w // factor, factor, *img.shape[2:])
    return x.mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# slide synthesis
# ---------------------------------------------------------------------------


def _smooth_field(rng, extent: int, cell: int) -> np.ndarray:
    """Gaussian-RBF interpolation of white noise on a ``cell``-spaced lattice."""
    m = extent // cell + 4
    coarse = rng.standard_normal((m, m))
    pos = (np.arange(extent) + 0.5) / cell + 2.0
    interp = np.exp(-0.5 * ((pos[:, None] - np.arange(m)[None, :]) / 0.7) ** 2)
    interp /= interp.sum(axis=1, keepdims=True)
    return interp @ coarse @ interp.T


def _texture(rng, extent: int, cls: int) -> np.ndarray:
    """Values in [0, 1]; classes differ in structure, not in mean intensity."""
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float32)
    warp = _smooth_field(rng, extent, 128).astype(np.float32)
    if cls in (0, 1):
        theta = rng.uniform(-0.25, 0.25) + (0.0 if cls == 0 else np.pi / 2)
        period = rng.uniform(10.0, 14.0)
        phase = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + 1.5 * warp
        tex = 0.5 + 0.5 * np.sin(phase)
    else:
        # sparse blobs: small dense nuclei (2) or large sparse ones (3)
        density, sigma = (0.012, 1.6) if cls == 2 else (0.0015, 4.5)
        impulses = (rng.random((extent, extent)) < density).astype(np.float32)
        tex = ndimage.gaussian_filter(impulses, sigma)
        tex = tex / (np.percentile(tex, 99.5) + 1e-9)
        tex = np.clip(tex, 0.0, 1.0)
        tex = tex - tex.mean() + 0.5
    fine = rng.standard_normal((extent, extent)).astype(np.float32) * 0.05
    return np.clip(tex + fine, 0.0, 1.0)


def _artifacts(rng, extent: int, fraction: float) -> tuple[np.ndarray, list[tuple[str, np.ndarray]]]:
    mask = np.zeros((extent, extent), dtype=bool)
    regions = []
    if fraction <= 0:
        return mask, regions
    target = fraction * extent * extent
    yy, xx = np.mgrid[0:extent, 0:extent]
    kinds = ("pen", "fold", "blur")
    while mask.sum() < target:
        kind = kinds[int(rng.integers(3))]
        cy, cx = rng.uniform(0, extent, size=2)
        if kind == "pen":
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(0.01, 0.02) * extent
            length = rng.uniform(0.2, 0.5) * extent
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            region = (np.abs(u) < length / 2) & (np.abs(v) < width / 2)
        elif kind == "fold":
            a, b = rng.uniform(0.05, 0.15, size=2) * extent
            region = ((xx - cx) / a) ** 2 + ((yy - cy) / (b / 3)) ** 2 < 1
        else:
            rad = rng.uniform(0.04, 0.1) * extent
            region = (xx - cx) ** 2 + (yy - cy) ** 2 < rad**2
        regions.append((kind, region))
        mask |= region
    return mask, regions


def synth_slide(seed: int, extent: int = 2048, tissue_fraction: float = 0.6, artifact_fraction: float = 0.03,
                texture_class: int | None = None, stain: str | None = None, slide_id: str | None = None,
                min_extent: int = 2 * max(TILE_SIZES)) -> SyntheticSlide:
    """Procedural slide with blob-shaped tissue, a stain palette and artifact regions.

    ``extent`` must be at least ``min_extent`` (twice the largest tile side at
    base resolution by default).
    """
    if extent < min_extent:
        raise ConfigError(f"slide extent {extent} below minimum {min_extent}")
    if not 0 < tissue_fraction <= 1 or not 0 <= artifact_fraction < 1:
        raise ConfigError("fractions must satisfy 0 < tissue <= 1 and 0 <= artifact < 1")
    rng = np.random.default_rng([seed, 0x511DE])
    if texture_class is None:
        texture_class = int(rng.integers(N_TEXTURE_CLASSES))
    if stain is None:
        stain = STAIN_MODES[int(rng.integers(len(STAIN_MODES)))]

    blob = _smooth_field(rng, extent, max(extent // 8, 16))
    tissue = blob >= np.quantile(blob, 1.0 - tissue_fraction)
    artifact, regions = _artifacts(rng, extent, artifact_fraction)

    tex = _texture(rng, extent, texture_class)
    bg_anchor, fg_anchor = (np.array(c) for c in _PALETTES[stain])
    hue_shift = rng.uniform(-0.08, 0.08, size=3)
    fg = np.clip(fg_anchor + hue_shift, 0, 1)
    bg = np.clip(bg_anchor + hue_shift / 2, 0, 1)
    img = bg[None, None, :] * (1 - tex[..., None]) + fg[None, None, :] * tex[..., None]
    glass = np.full(3, 0.95) + rng.normal(0, 0.01, size=3)
    img = np.where(tissue[..., None], img, glass[None, None, :])
    for kind, region in regions:
        if kind == "pen":
            ink = np.array([0.1, 0.3, 0.2]) if rng.random() < 0.5 else np.array([0.1, 0.1, 0.5])
            img[region] = 0.3 * img[region] + 0.7 * ink
        elif kind == "fold":
            img[region] = img[region] * 0.6
        else:
            rows, cols = np.nonzero(region)
            y0, y1 = max(rows.min() - 8, 0), rows.max() + 9
            x0, x1 = max(cols.min() - 8, 0), cols.max() + 9
            blurred = ndimage.uniform_filter(img[y0:y1, x0:x1], size=(9, 9, 1))
            sub = region[y0:y1, x0:x1]
            img[y0:y1, x0:x1][sub] = blurred[sub]
    base = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return SyntheticSlide(base, tissue, artifact, slide_id or f"slide{seed:05d}", seed, stain, texture_class)


# ---------------------------------------------------------------------------
# tile sampling
# ---------------------------------------------------------------------------


def _window_sum(mask: np.ndarray, size: int) -> np.ndarray:
    ii = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


def valid_origins(slide: SyntheticSlide, mpp: float, tile_size: int) -> np.ndarray:
    """Level-grid origins ``[(row, col), ...]`` of tiles fully in tissue and artifact-free."""
    tissue, artifact = slide.mask_level(mpp)
    if tile_size > tissue.shape[0]:
        return np.zeros((0, 2), dtype=np.int64)
    full = _window_sum(tissue, tile_size) == tile_size * tile_size
    clean = _window_sum(artifact, tile_size) == 0
    return np.argwhere(full & clean)


def sample_tiles(slide: SyntheticSlide, mpp: float, tile_size: int, count: int, seed: int = 0,
                 with_pixels: bool = True) -> list[TileRecord]:
    """Draw ``count`` tiles uniformly (with replacement) over valid origins."""
    level_factor(mpp)
    if tile_size not in TILE_SIZES:
        raise ValueError(f"tile size {tile_size} not in {TILE_SIZES}")
    if count <= 0:
        return []
    origins = valid_origins(slide, mpp, tile_size)
    if len(origins) == 0:
        log.warning("slide %s: no valid origin for mpp=%s tile=%s (footprint %d px at base)",
                    slide.slide_id, mpp, tile_size, tile_size * level_factor(mpp))
        return []
    rng = np.random.default_rng([seed, slide.seed, int(mpp * 100), tile_size])
    picks = origins[rng.integers(0, len(origins), size=count)]
    f = level_factor(mpp)
    level = slide.level(mpp) if with_pixels else None
    tiles = []
    for row, col in picks:
        pix = level[row:row + tile_size, col:col + tile_size].copy() if with_pixels else None
        tiles.append(TileRecord(pix, slide.slide_id, mpp, tile_size, (int(col) * f, int(row) * f), seed,
                                slide.texture_class))
    return tiles


def tile_masks_ok(slide: SyntheticSlide, tile: TileRecord) -> bool:
    x, y = tile.origin
    f = tile.footprint
    return bool(slide.tissue_mask[y:y + f, x:x + f].all() and not slide.artifact_mask[y:y + f, x:x + f].any()
                and y + f <= slide.extent and x + f <= slide.extent)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_FORMAT = "tilessl-manifest"
MANIFEST_VERSION = 1
PIXEL_FORMATS = ("raw-f32le", "png8")


def write_manifest(tiles: list[TileRecord], path: str | Path, pixel_format: str = "raw-f32le") -> Path:
    """JSON-lines manifest: header line, then one record per tile.

    Pixel files live next to the manifest in ``<stem>_pixels/``; raw files
    hold channel-major little-endian float32 planes.
    """
    if pixel_format not in PIXEL_FORMATS:
        raise ValueError(f"pixel format must be one of {PIXEL_FORMATS}")
    path = Path(path)
    pix_dir = path.parent / f"{path.stem}_pixels"
    if tiles:
        pix_dir.mkdir(parents=True, exist_ok=True)
    ext = ".f32" if pixel_format == "raw-f32le" else ".png"
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "pixel_format": pixel_format,
                  "count": len(tiles)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, t in enumerate(tiles):
            rel = None
            if t.pixels is not None:
                rel = f"{pix_dir.name}/{i:06d}_{t.slide_id}{ext}"
                _write_pixels(path.parent / rel, t.pixels, pixel_format)
            rec = {"slide_id": t.slide_id, "mpp": t.mpp, "tile_size": t.tile_size, "origin_x": t.origin[0],
                   "origin_y": t.origin[1], "pixel_path": rel, "seed": t.seed, "label": t.label}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _write_pixels(path: Path, pixels: np.ndarray, pixel_format: str) -> None:
    if pixel_format == "raw-f32le":
        planes = np.ascontiguousarray(np.moveaxis(pixels, -1, 0), dtype="<f4")
        path.write_bytes(planes.tobytes())
    else:
        from PIL import Image

        Image.fromarray(np.clip(np.round(pixels * 255), 0, 255).astype(np.uint8), "RGB").save(path)


def read_pixels(path: Path, tile_size: int, pixel_format: str) -> np.ndarray:
    if pixel_format == "raw-f32le":
        data = np.fromfile(path, dtype="<f4")
        if data.size % (tile_size * tile_size):
            raise IntegrityError(f"{path}: size {data.size} is not a multiple of {tile_size}^2")
        return np.moveaxis(data.reshape(-1, tile_size, tile_size), 0, -1).astype(np.float32)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def read_manifest(path: str | Path, load_pixels: bool = True) -> list[TileRecord]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise IntegrityError(f"{path}: empty manifest (missing header)")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise IntegrityError(f"{path}: not a tile manifest")
    fmt = header["pixel_format"]
    tiles = []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        pix = None
        if rec.get("pixel_path"):
            full = path.parent / rec["pixel_path"]
            if not full.exists():
                raise IntegrityError(f"{path}:{lineno}: record {rec['slide_id']}@({rec['origin_x']},"
                                     f"{rec['origin_y']}) references missing file {rec['pixel_path']}")
            if load_pixels:
                pix = read_pixels(full, rec["tile_size"], fmt)
        tiles.append(TileRecord(pix, rec["slide_id"], rec["mpp"], rec["tile_size"],
                                (rec["origin_x"], rec["origin_y"]), rec["seed"], rec.get("label", -1),
                                rec.get("pixel_path")))
    if header.get("count", len(tiles)) != len(tiles):
        raise IntegrityError(f"{path}: header count {header['count']} != {len(tiles)} records")
    return tiles


def load_tile_pixels(manifest_path: str | Path, tile: TileRecord, pixel_format: str = "raw-f32le") -> np.ndarray:
    return read_pixels(Path(manifest_path).parent / tile.pixel_path, tile.tile_size, pixel_format)


def make_corpus(n_slides: int, tiles_per_stratum: int, seed: int = 0, extent: int = 2048,
                mpps=MPP_LEVELS, sizes=TILE_SIZES, **slide_kw) -> tuple[list[TileRecord], dict]:
    """Tiles from ``n_slides`` slides (texture classes assigned round-robin).

    Returns the tiles and the per-(mpp, tile_size) counts.
    """
    tiles: list[TileRecord] = []
    counts = {(m, s): 0 for m in mpps for s in sizes}
    for i in range(n_slides):
        slide = synth_slide(seed * 1000 + i, extent, texture_class=i % N_TEXTURE_CLASSES, **slide_kw)
        for m in mpps:
            for s in sizes:
                got = sample_tiles(slide, m, s, tiles_per_stratum, seed=seed)
                counts[(m, s)] += len(got)
                tiles.extend(got)
    return tiles, counts


def env_output_root() -> Path:
    return Path(os.environ.get("TILESSL_OUTPUT", "runs"))
