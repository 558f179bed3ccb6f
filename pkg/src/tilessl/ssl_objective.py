"""Self-distillation objective: multi-crop views, CLS and masked-patch losses,
EMA teacher, centering and the step-indexed schedules."""

from __future__ import annotations

import copy
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import Encoder, EncoderConfig, normalize_pixels
from .flexi_embed import PatchSizeSchedule, bilinear_matrix_1d, sample_patch_size
from .nn_core import (DEFAULT_DTYPE, ConfigError, Linear, Module, Parameter, gelu, gelu_grad, log_softmax, softmax,
                      trunc_normal)
from .precision import (
    AdamWState,
    FormatEmulator,
    LRSchedule,
    NonFiniteError,
    PrecisionPolicy,
    adamw_step,
    clip_global_norm,
    emulator_for,
    global_norm,
    lr_at,
)

# ---------------------------------------------------------------------------
# projection head
# ---------------------------------------------------------------------------


class PrototypeLayer(Module):
    """Bias-free projection onto unit-norm prototype columns.

    With an L2-normalized input the logits are cosine similarities in
    [-1, 1], so the temperatures alone set how peaked the outputs are.
    """

    def __init__(self, name: str, d_in: int, prototypes: int, rng, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(f"{name}.weight", trunc_normal(rng, (d_in, prototypes), 0.02, dtype))
        self.name = name
        self.emulator = None

    def set_precision(self, emulator) -> None:
        self.emulator = emulator

    def forward(self, u):
        w = self.weight.value
        norm = np.sqrt((w * w).sum(axis=0, keepdims=True) + 1e-12)
        wn = w / norm
        y = u @ wn
        if self.emulator is not None:
            y = self.emulator(y, self.name)
        return y, (u, wn, norm)

    def backward(self, dy, cache):
        u, wn, norm = cache
        dwn = u.reshape(-1, u.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        self.weight.grad += (dwn - wn * (dwn * wn).sum(axis=0, keepdims=True)) / norm
        du = dy @ wn.T
        if self.emulator is not None:
            du = self.emulator(du, self.name + ".grad")
        return du


class ProjectionHead(Module):
    """MLP -> L2-normalized bottleneck -> cosine logits against K prototypes."""

    def __init__(self, name: str, dim: int, prototypes: int = 1024, hidden: int = 256, bottleneck: int = 64,
                 rng=None, dtype=DEFAULT_DTYPE):
        if prototypes < 2:
            raise ConfigError("prototype count must be >= 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(f"{name}.fc1", dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, hidden, rng, dtype=dtype)
        self.fc3 = Linear(f"{name}.fc3", hidden, bottleneck, rng, dtype=dtype)
        self.prototypes = PrototypeLayer(f"{name}.prototypes", bottleneck, prototypes, rng, dtype)
        self.prototype_count = prototypes

    def forward(self, x):
        h1, c1 = self.fc1.forward(x)
        a1 = gelu(h1)
        h2, c2 = self.fc2.forward(a1)
        a2 = gelu(h2)
        z, c3 = self.fc3.forward(a2)
        norm = np.sqrt((z * z).sum(axis=-1, keepdims=True) + 1e-12)
        u = z / norm
        logits, c4 = self.prototypes.forward(u)
        return logits, (c1, h1, c2, h2, c3, u, norm, c4)

    def backward(self, dlogits, cache):
        c1, h1, c2, h2, c3, u, norm, c4 = cache
        du = self.prototypes.backward(dlogits, c4)
        dz = (du - u * (du * u).sum(axis=-1, keepdims=True)) / norm
        da2 = self.fc3.backward(dz, c3)
        da1 = self.fc2.backward(da2 * gelu_grad(h2), c2)
        return self.fc1.backward(da1 * gelu_grad(h1), c1)


# ---------------------------------------------------------------------------
# losses (always evaluated in float64)
# ---------------------------------------------------------------------------


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite logits reached the loss")


def teacher_targets(teacher_logits: np.ndarray, center, teacher_temp: float) -> np.ndarray:
    t = np.asarray(teacher_logits, dtype=np.float64)
    c = np.zeros(t.shape[-1]) if center is None else np.asarray(center, dtype=np.float64)
    return softmax(t - c, teacher_temp)


def dino_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, student_temp: float, teacher_temp: float,
              center=None) -> tuple[float, np.ndarray]:
    """Cross-entropy between centered/sharpened teacher views and student views.

    Shapes are ``[V_s, ..., K]`` and ``[V_t, ..., K]``; teacher view ``i`` is
    not paired with student view ``i``. The result is the mean over view
    pairs and any batch axes, and the gradient w.r.t. ``student_logits``.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    _check_finite(s, teacher_logits)
    t = teacher_targets(teacher_logits, center, teacher_temp)
    vs, vt = s.shape[0], t.shape[0]
    if s.shape[1:] != t.shape[1:]:
        raise ValueError(f"student {s.shape} and teacher {t.shape} logits disagree beyond the view axis")
    logp = log_softmax(s, student_temp)
    p = np.exp(logp)
    batch = int(np.prod(s.shape[1:-1], dtype=np.int64))
    n_pairs = 0
    total = 0.0
    target_sum = np.zeros_like(s)
    pair_count = np.zeros(vs)
    for i in range(vt):
        for j in range(vs):
            if i == j:
                continue
            total += float(-(t[i] * logp[j]).sum())
            target_sum[j] += t[i]
            pair_count[j] += 1
            n_pairs += 1
    if n_pairs == 0:
        raise ValueError("no student/teacher view pairs")
    denom = n_pairs * batch
    shape = (vs,) + (1,) * (s.ndim - 1)
    grad = (pair_count.reshape(shape) * p - target_sum) / (student_temp * denom)
    return total / denom, grad


def _masked_ce(student_logits, targets, weights, student_temp):
    logp = log_softmax(np.asarray(student_logits, dtype=np.float64), student_temp)
    w = weights[:, None]
    loss = float(-(w * targets * logp).sum())
    grad = w * (np.exp(logp) - targets) / student_temp
    return loss, grad


def ibot_loss(student_patch_logits: np.ndarray, teacher_patch_logits: np.ndarray, mask: np.ndarray,
              student_temp: float, teacher_temp: float, center=None) -> tuple[float, np.ndarray, bool]:
    """Patch-level distillation over student-masked positions.

    Inputs are ``[..., N, K]`` logits and a ``[..., N]`` mask. Each image's
    loss is its mean over masked positions; images are then averaged. Returns
    ``(loss, grad_student, empty)`` with ``empty`` set (and loss 0) when no
    position is masked.
    """
    s = np.asarray(student_patch_logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} != patch layout {s.shape[:-1]}")
    grad = np.zeros(s.shape, dtype=np.float64)
    if not mask.any():
        return 0.0, grad, True
    _check_finite(s, teacher_patch_logits)
    weights = position_weights(mask)
    t = teacher_targets(np.asarray(teacher_patch_logits)[mask], center, teacher_temp)
    loss, g = _masked_ce(s[mask], t, weights, student_temp)
    grad[mask] = g
    return loss, grad, False


def position_weights(mask: np.ndarray) -> np.ndarray:
    """Per-masked-position weights: 1/(masked in image) / (images with a mask)."""
    m = mask.reshape(-1, mask.shape[-1])
    counts = m.sum(axis=1)
    n_img = int((counts > 0).sum())
    per_img = np.where(counts > 0, 1.0 / np.maximum(counts, 1) / max(n_img, 1), 0.0)
    return np.broadcast_to(per_img[:, None], m.shape)[m]


# ---------------------------------------------------------------------------
# teacher and centering
# ---------------------------------------------------------------------------


def update_teacher(teacher_params: dict[str, np.ndarray], student_params: dict[str, np.ndarray],
                   momentum: float) -> dict[str, np.ndarray]:
    """In-place EMA: teacher <- m * teacher + (1 - m) * student."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    if teacher_params.keys() != student_params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher_params.items():
        s = student_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: teacher {t.shape} vs student {s.shape}")
        t[...] = momentum * t.astype(np.float64) + (1.0 - momentum) * s.astype(np.float64)
    return teacher_params


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """``m * c + (1 - m) * mean(teacher_logits over all leading axes)`` in float64."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"center momentum must lie in [0, 1], got {momentum}")
    logits = np.asarray(teacher_logits, dtype=np.float64)
    k = logits.shape[-1]
    rows = logits.reshape(-1, k)
    if rows.shape[0] == 0:
        raise ValueError("cannot update the center from an empty batch")
    return momentum * np.asarray(center, dtype=np.float64) + (1.0 - momentum) * rows.mean(axis=0)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass
class Schedules:
    total_steps: int = 500
    warmup_steps: int = 50
    peak_lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_frac: float = 0.1
    momentum_start: float = 0.992
    momentum_end: float = 1.0
    center_momentum: float = 0.9
    mask_ratio: float = 0.3
    clip_norm: float = 3.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.student_temp <= 0 or self.teacher_temp_start <= 0 or self.teacher_temp_end <= 0:
            raise ValueError("temperatures must be positive")
        if not (0 <= self.momentum_start <= 1 and 0 <= self.momentum_end <= 1):
            raise ValueError("teacher momentum must lie in [0, 1]")
        if self.peak_lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be non-negative")

    @property
    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.peak_lr, max(self.total_steps, 1), min(self.warmup_steps, max(self.total_steps, 1)),
                          self.min_lr)

    def lr(self, step: int) -> float:
        return lr_at(step, self.lr_schedule)

    def teacher_temp(self, step: int) -> float:
        warm = self.teacher_temp_warmup_frac * self.total_steps
        if warm <= 0 or step >= warm:
            return self.teacher_temp_end
        return self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * step / warm

    def momentum(self, step: int) -> float:
        progress = min(step / max(self.total_steps, 1), 1.0)
        return self.momentum_end - (self.momentum_end - self.momentum_start) * 0.5 * (1 + math.cos(math.pi * progress))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# multi-crop views
# ---------------------------------------------------------------------------


@dataclass
class CropConfig:
    global_crop: int = 192  # side in tile pixels
    local_crop: int = 96
    n_local: int = 4
    global_out: int = 96  # side fed to the encoder
    local_out: int = 32
    flip_prob: float = 0.5
    jitter: float = 0.3
    # per-view channel mixing strength in [0, 1] (stain augmentation) and grayscale
    color_mix: float = 0.5
    grayscale_prob: float = 0.3


@dataclass
class CropView:
    pixels: np.ndarray  # [out, out, C] in [0, 1]
    origin: tuple[int, int]
    side: int
    flipped: bool
    gains: tuple[float, ...]


@dataclass
class CropSet:
    global_views: list[CropView]
    local_views: list[CropView]
    source: str

    @property
    def n_views(self) -> int:
        return len(self.global_views) + len(self.local_views)


def tile_key(tile) -> int:
    key = f"{tile.slide_id}|{tile.mpp}|{tile.tile_size}|{tile.origin[0]}|{tile.origin[1]}"
    return zlib.crc32(key.encode())


def sample_crop_origin(rng: np.random.Generator, tile_side: int, crop_side: int) -> tuple[int, int]:
    span = tile_side - crop_side + 1
    y, x = rng.integers(0, span, size=2)
    return int(y), int(x)


def resize_image(img: np.ndarray, out_side: int) -> np.ndarray:
    h, w, _ = img.shape
    ry = bilinear_matrix_1d(h, out_side, antialias=True)
    rx = bilinear_matrix_1d(w, out_side, antialias=True)
    rows = np.tensordot(ry, img.astype(np.float64), axes=(1, 0))  # [out, w, C]
    return np.swapaxes(np.swapaxes(rows, 1, 2) @ rx.T, 1, 2)


def _view(rng, pixels, crop, out, cfg: CropConfig) -> CropView:
    side = pixels.shape[0]
    y, x = sample_crop_origin(rng, side, crop)
    patch = resize_image(pixels[y:y + crop, x:x + crop], out)
    flipped = bool(rng.random() < cfg.flip_prob)
    if flipped:
        patch = patch[:, ::-1]
    c = pixels.shape[2]
    s = cfg.jitter
    brightness = rng.uniform(1 - s, 1 + s)
    contrast = rng.uniform(1 - s, 1 + s)
    channel = rng.uniform(1 - s / 2, 1 + s / 2, size=c)
    mean = patch.mean()
    patch = ((patch - mean) * contrast + mean) * brightness * channel
    if cfg.color_mix > 0:
        # blend toward a random row-stochastic matrix: hue moves, polarity never flips
        alpha = rng.uniform(0.0, cfg.color_mix)
        mix = (1.0 - alpha) * np.eye(c) + alpha * rng.dirichlet(np.ones(c), size=c)
        patch = patch @ mix
    if rng.random() < cfg.grayscale_prob:
        patch = np.repeat(patch.mean(axis=-1, keepdims=True), c, axis=-1)
    gains = (float(brightness), float(contrast), *map(float, channel))
    return CropView(np.clip(patch, 0.0, 1.0).astype(np.float32), (y, x), crop, flipped, gains)


def make_crops(tile, crop_config: CropConfig | None = None, seed: int = 0) -> CropSet:
    """Two global and ``n_local`` local views of a tile, seeded by (seed, tile identity)."""
    cfg = crop_config or CropConfig()
    pixels = np.asarray(tile.pixels)
    side = min(pixels.shape[:2])
    if not side >= cfg.global_crop > cfg.local_crop:
        raise ConfigError(f"need tile side {side} >= global crop {cfg.global_crop} > local crop {cfg.local_crop}")
    rng = np.random.default_rng([seed, tile_key(tile)])
    globals_ = [_view(rng, pixels, cfg.global_crop, cfg.global_out, cfg) for _ in range(2)]
    locals_ = [_view(rng, pixels, cfg.local_crop, cfg.local_out, cfg) for _ in range(cfg.n_local)]
    return CropSet(globals_, locals_, f"{tile.slide_id}@{tile.origin}")


def block_mask(rng: np.random.Generator, grid_h: int, grid_w: int, ratio: float) -> np.ndarray:
    """Union of random rectangles covering ``round(ratio * N)`` patches exactly."""
    n = grid_h * grid_w
    target = int(round(ratio * n))
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    while mask.sum() < target:
        remaining = target - int(mask.sum())
        area = int(rng.integers(1, remaining + 1))
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
        bh = int(np.clip(round(math.sqrt(area * aspect)), 1, grid_h))
        bw = int(np.clip(round(math.sqrt(area / aspect)), 1, grid_w))
        y = int(rng.integers(0, grid_h - bh + 1))
        x = int(rng.integers(0, grid_w - bw + 1))
        block = np.zeros_like(mask)
        block[y:y + bh, x:x + bw] = True
        new = block & ~mask
        if new.sum() > remaining:
            idx = np.flatnonzero(new)
            keep = rng.choice(idx, size=remaining, replace=False)
            new = np.zeros(n, dtype=bool)
            new[keep] = True
            new = new.reshape(grid_h, grid_w)
        mask |= new
    return mask.reshape(-1)


# ---------------------------------------------------------------------------
# student / teacher towers
# ---------------------------------------------------------------------------


@dataclass
class HeadConfig:
    prototypes: int = 1024
    hidden: int = 256
    bottleneck: int = 64
    share_heads: bool = False


class SSLModel(Module):
    """Encoder plus DINO (CLS) and iBOT (patch) projection heads."""

    def __init__(self, config: EncoderConfig, head: HeadConfig | None = None, seed: int = 0, dtype=DEFAULT_DTYPE):
        head = head or HeadConfig()
        self.head_config = head
        self.encoder = Encoder(config, seed=seed, dtype=dtype)
        rng = np.random.default_rng([seed, 1])
        self.dino_head = ProjectionHead("dino_head", config.embed_dim, head.prototypes, head.hidden,
                                        head.bottleneck, rng, dtype)
        if head.share_heads:
            self.ibot_head = self.dino_head
        else:
            self.ibot_head = ProjectionHead("ibot_head", config.embed_dim, head.prototypes, head.hidden,
                                            head.bottleneck, rng, dtype)

    def parameters(self):
        seen, out = set(), []
        for p in super().parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_parameters().items()}


@dataclass
class TeacherState:
    model: SSLModel
    center: np.ndarray
    patch_center: np.ndarray
    momentum: float = 0.992
    center_momentum: float = 0.9

    @classmethod
    def from_student(cls, student: SSLModel, center_momentum: float = 0.9) -> "TeacherState":
        k = student.head_config.prototypes
        model = copy.deepcopy(student)
        model.set_precision(None)
        return cls(model, np.zeros(k), np.zeros(k), center_momentum=center_momentum)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.model.state()


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    total_loss: float
    dino_loss: float
    ibot_loss: float
    grad_norm: float
    lr: float
    patch_size: int
    teacher_temp: float
    momentum: float
    clipped_norm: float = math.nan
    aborted: bool = False
    ibot_empty: bool = False
    overflow: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def stack_views(batch: list[CropSet]) -> tuple[np.ndarray, np.ndarray | None]:
    """``[V_global, B, H, W, C]`` and ``[V_local, B, h, w, C]`` normalized arrays."""
    g = np.stack([[v.pixels for v in cs.global_views] for cs in batch], axis=1)
    n_local = {len(cs.local_views) for cs in batch}
    if len(n_local) != 1:
        raise ValueError("all crop sets in a batch need the same number of local views")
    loc = None
    if n_local.pop():
        loc = np.stack([[v.pixels for v in cs.local_views] for cs in batch], axis=1)
        loc = normalize_pixels(loc).astype(np.float32)
    return normalize_pixels(g).astype(np.float32), loc


class Trainer:
    """Owns student, teacher, optimizer state and schedules for ``train_step``."""

    def __init__(self, student: SSLModel, schedules: Schedules, patch_schedule: PatchSizeSchedule | None = None,
                 policy: PrecisionPolicy | None = None, seed: int = 0):
        self.student = student
        self.teacher = TeacherState.from_student(student, schedules.center_momentum)
        self.schedules = schedules
        cfg = student.encoder.config
        self.patch_schedule = patch_schedule or PatchSizeSchedule(list(cfg.patch_sizes), seed=seed)
        self.policy = policy or PrecisionPolicy()
        self.emulator: FormatEmulator | None = emulator_for(self.policy)
        student.set_precision(self.emulator)
        self.teacher.model.set_precision(self.emulator)
        self.opt_state = AdamWState()
        self.seed = seed

    def step(self, batch: list[CropSet], step: int) -> StepMetrics:
        return train_step(batch, self, step)


def _finite_params(params) -> bool:
    return all(np.all(np.isfinite(p.grad)) for p in params)


def train_step(batch: list[CropSet], trainer: Trainer, step: int) -> StepMetrics:
    """One optimization step of the student plus EMA/center updates of the teacher."""
    if not batch:
        raise ValueError("empty batch")
    sch = trainer.schedules
    student, teacher = trainer.student, trainer.teacher
    enc = student.encoder
    p = sample_patch_size(trainer.patch_schedule, step)
    lr = sch.lr(step)
    t_temp = sch.teacher_temp(step)
    mom = sch.momentum(step)
    if trainer.emulator is not None:
        trainer.emulator.reset()

    glob, loc = stack_views(batch)
    vg, b = glob.shape[:2]
    gflat = glob.reshape(vg * b, *glob.shape[2:])
    gh, gw = gflat.shape[1] // p, gflat.shape[2] // p
    n_patch = gh * gw
    r = enc.config.registers

    rng = np.random.default_rng([trainer.seed, step, 7])
    mask = np.stack([block_mask(rng, gh, gw, sch.mask_ratio) for _ in range(vg * b)])

    metrics = StepMetrics(step, math.nan, math.nan, math.nan, math.nan, lr, p, t_temp, mom)

    def abort(events):
        metrics.aborted = True
        metrics.overflow = events
        student.zero_grad()
        return metrics

    # teacher tower: unmasked global views only
    t_model = teacher.model
    t_tok, _ = t_model.encoder.forward(gflat, p)
    t_cls_logits, _ = t_model.dino_head.forward(t_tok[:, 0])
    t_patch = t_tok[:, 1 + r:]
    t_patch_logits, _ = t_model.ibot_head.forward(t_patch[mask])

    # student tower
    student.zero_grad()
    s_tok, c_enc_g = enc.forward(gflat, p, mask)
    s_cls_g, c_head_g = student.dino_head.forward(s_tok[:, 0])
    s_patch_logits, c_ibot = student.ibot_head.forward(s_tok[:, 1 + r:][mask])
    s_cls = [s_cls_g.reshape(vg, b, -1)]
    c_enc_l = c_head_l = None
    if loc is not None:
        vl = loc.shape[0]
        lflat = loc.reshape(vl * b, *loc.shape[2:])
        l_tok, c_enc_l = enc.forward(lflat, p)
        s_cls_l, c_head_l = student.dino_head.forward(l_tok[:, 0])
        s_cls.append(s_cls_l.reshape(vl, b, -1))
    s_all = np.concatenate(s_cls, axis=0)

    events = trainer.emulator.reset() if trainer.emulator is not None else {}
    if events:
        return abort(events)
    try:
        d_loss, d_grad = dino_loss(s_all, t_cls_logits.reshape(vg, b, -1), sch.student_temp, t_temp, teacher.center)
        weights = position_weights(mask)
        i_targets = teacher_targets(t_patch_logits, teacher.patch_center, t_temp)
        if weights.size:
            i_loss, i_grad = _masked_ce(s_patch_logits, i_targets, weights, sch.student_temp)
        else:
            i_loss, i_grad = 0.0, np.zeros_like(s_patch_logits, dtype=np.float64)
            metrics.ibot_empty = True
    except NonFiniteError:
        return abort({"loss": 1})

    dt = enc.dtype
    d_grad = d_grad.astype(dt)
    dg = d_grad[:vg].reshape(vg * b, -1)
    dtok = np.zeros_like(s_tok)
    dtok[:, 0] = student.dino_head.backward(dg, c_head_g)
    dpatch = np.zeros((vg * b, n_patch, dtok.shape[-1]), dtype=dt)
    dpatch[mask] = student.ibot_head.backward(i_grad.astype(dt), c_ibot)
    dtok[:, 1 + r:] = dpatch
    enc.backward(dtok, c_enc_g)
    if loc is not None:
        dl = d_grad[vg:].reshape(-1, d_grad.shape[-1])
        dltok = np.zeros((dl.shape[0], l_tok.shape[1], l_tok.shape[2]), dtype=dt)
        dltok[:, 0] = student.dino_head.backward(dl, c_head_l)
        enc.backward(dltok, c_enc_l)

    events = trainer.emulator.reset() if trainer.emulator is not None else {}
    params = student.parameters()
    if events or not _finite_params(params):
        return abort(events or {"grad": 1})

    grad_norm, _ = clip_global_norm(params, sch.clip_norm)
    metrics.clipped_norm = global_norm(p.grad for p in params)
    adamw_step(params, trainer.opt_state, lr, sch.weight_decay, sch.betas, sch.adam_eps)

    update_teacher(teacher.params, student.state(), mom)
    teacher.center = update_center(teacher.center, t_cls_logits, teacher.center_momentum)
    if t_patch_logits.shape[0]:
        teacher.patch_center = update_center(teacher.patch_center, t_patch_logits, teacher.center_momentum)
    teacher.momentum = mom

    metrics.dino_loss = d_loss
    metrics.ibot_loss = i_loss
    metrics.total_loss = d_loss + i_loss
    metrics.grad_norm = grad_norm
    return metrics


def cls_embedding_std(encoder: Encoder, pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-dimension std of CLS outputs over a batch of normalized tiles."""
    out, _ = encoder.forward(pixels, patch_size)
    return out[:, 0].astype(np.float64).std(axis=0)


def overflow_probe(spec, pre_activation: float = 1e5, dim: int = 64, seed: int = 0) -> int:
    """Run a projection head on an input crafted so its first-layer
    pre-activations reach ``pre_activation`` in magnitude; return the number
    of overflowing values under format ``spec``."""
    head = ProjectionHead("probe_head", dim, prototypes=16, hidden=32, bottleneck=8,
                          rng=np.random.default_rng(seed), dtype=np.float32)
    w = head.fc1.weight.value.astype(np.float64)
    x = np.sign(w[:, 0])
    x *= pre_activation / np.abs(x @ w[:, 0]) * 1.5
    emulator = FormatEmulator(spec)
    head.set_precision(emulator)
    with np.errstate(invalid="ignore", over="ignore"):
        head.forward(x[None].astype(np.float32))
    return sum(emulator.overflows.values())
