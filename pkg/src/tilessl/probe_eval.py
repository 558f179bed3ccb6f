"""Frozen-embedding evaluation: linear probes, ridge-on-PCA regression, gated-attention MIL."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import Encoder, normalize_pixels
from .flexi_embed import NumericalError
from .nn_core import Module, Parameter, log_softmax, softmax, trunc_normal
from .ssl_objective import resize_image

CLS = "cls"
CLS_PLUS_MEAN_PATCH = "cls+mean_patch"
MODES = (CLS, CLS_PLUS_MEAN_PATCH)


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray  # [N, D]
    labels: np.ndarray | None = None  # [N] int
    targets: np.ndarray | None = None  # [N, T] float
    groups: np.ndarray | None = None  # [N] slide ids
    mode: str = CLS

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise ValueError(f"embedding rows must be 2-D, got shape {self.rows.shape}")
        n = len(self.rows)
        for name in ("labels", "targets", "groups"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v)
                if len(v) != n:
                    raise ValueError(f"{name} has {len(v)} entries for {n} rows")
                setattr(self, name, v)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, idx) -> "EmbeddingMatrix":
        pick = lambda v: None if v is None else v[idx]
        return EmbeddingMatrix(self.rows[idx], pick(self.labels), pick(self.targets), pick(self.groups), self.mode)


def prepare_tiles(tiles, side: int, crop: int | None = 192) -> np.ndarray:
    """Center-crop each tile to ``crop`` (matching the training global view)
    and resize to ``side``; returns normalized ``[N, side, side, C]``."""
    out = []
    for t in tiles:
        px = np.asarray(getattr(t, "pixels", t), dtype=np.float64)
        if px.ndim != 3:
            raise ValueError(f"tile pixels must be [H, W, C], got shape {px.shape}")
        h, w, _ = px.shape
        c = min(h, w) if crop is None else min(crop, h, w)
        y0, x0 = (h - c) // 2, (w - c) // 2
        px = px[y0:y0 + c, x0:x0 + c]
        out.append(px if c == side else resize_image(px, side))
    return normalize_pixels(np.stack(out)).astype(np.float32)


def embed_pixels(encoder: Encoder, pixels: np.ndarray, patch_size: int, mode: str = CLS,
                 batch_size: int = 32) -> np.ndarray:
    """Embeddings of normalized ``[N, H, W, C]`` pixels."""
    if mode not in MODES:
        raise ValueError(f"unknown embedding mode {mode!r}; choose from {MODES}")
    if len(pixels) == 0:
        raise ValueError("no tiles to embed")
    chunks = []
    for i in range(0, len(pixels), batch_size):
        tokens, _ = encoder.forward(pixels[i:i + batch_size], patch_size)
        cls, _, patches = encoder.split(tokens.astype(np.float64))
        if mode == CLS:
            chunks.append(cls)
        else:
            chunks.append(np.concatenate([cls, patches.mean(axis=1)], axis=1))
    return np.concatenate(chunks)


def extract_embeddings(encoder: Encoder, tiles, mode: str = CLS, patch_size: int | None = None,
                       labels=None, groups=None, crop: int | None = 192, batch_size: int = 32) -> EmbeddingMatrix:
    """Frozen-encoder embeddings; registers never enter the patch mean."""
    tiles = list(tiles)
    if not tiles:
        raise ValueError("no tiles to embed")
    if mode not in MODES:
        raise ValueError(f"unknown embedding mode {mode!r}; choose from {MODES}")
    p = min(encoder.config.patch_sizes) if patch_size is None else patch_size
    if labels is None and all(getattr(t, "label", None) is not None for t in tiles):
        labels = [t.label for t in tiles]
    if groups is None and all(hasattr(t, "slide_id") for t in tiles):
        groups = [t.slide_id for t in tiles]
    pixels = prepare_tiles(tiles, encoder.config.tile_side, crop)
    rows = embed_pixels(encoder, pixels, p, mode, batch_size)
    return EmbeddingMatrix(rows, None if labels is None else np.asarray(labels, dtype=np.int64),
                           groups=None if groups is None else np.asarray(groups), mode=mode)


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    k = n_classes or int(max(y_true.max(initial=-1), y_pred.max(initial=-1)) + 1)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over classes present in ``y_true``."""
    cm = confusion_matrix(y_true, y_pred)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValueError("no samples to score")
    return float(np.mean(np.diag(cm)[present] / support[present]))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted per-class F1 over classes present in ``y_true``."""
    cm = confusion_matrix(y_true, y_pred)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0
    if not present.any():
        raise ValueError("no samples to score")
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(np.mean(f1[present]))


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    lr: float = 0.5
    max_iter: int = 3000
    tol: float = 1e-6  # on the gradient max-norm
    l2: float = 1e-4
    seed: int = 0


@dataclass
class LogisticModel:
    weight: np.ndarray  # [D, K]
    bias: np.ndarray  # [K]
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray
    iterations: int
    converged: bool

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x), axis=1)]


def fit_logistic(x: np.ndarray, y: np.ndarray, config: ProbeConfig | None = None) -> LogisticModel:
    """Multinomial logistic regression by full-batch gradient descent on
    standardized features."""
    cfg = config or ProbeConfig()
    x = np.asarray(x, dtype=np.float64)
    classes, yi = np.unique(np.asarray(y), return_inverse=True)
    if len(classes) < 2:
        raise ValueError(f"linear probe needs >= 2 classes in train, got {classes.tolist()}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (x - mean) / scale
    n, d = z.shape
    k = len(classes)
    onehot = np.eye(k)[yi]
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 1e-3, (d, k))
    b = np.zeros(k)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        p = softmax(z @ w + b)
        g = (p - onehot) / n
        gw = z.T @ g + cfg.l2 * w
        gb = g.sum(axis=0)
        w -= cfg.lr * gw
        b -= cfg.lr * gb
        if max(np.abs(gw).max(), np.abs(gb).max()) < cfg.tol:
            converged = True
            break
    return LogisticModel(w, b, mean, scale, classes, it, converged)


def linear_probe(train: EmbeddingMatrix, test: EmbeddingMatrix, config: ProbeConfig | None = None) -> dict:
    if train.labels is None or test.labels is None:
        raise ValueError("linear probe needs labels on both splits")
    if train.dim != test.dim:
        raise ValueError(f"train dim {train.dim} != test dim {test.dim}")
    model = fit_logistic(train.rows, train.labels, config)
    pred = model.predict(test.rows)
    return {"balanced_accuracy": balanced_accuracy(test.labels, pred),
            "macro_f1": macro_f1(test.labels, pred),
            "iterations": model.iterations, "converged": model.converged}


# ---------------------------------------------------------------------------
# ridge regression on PCA features
# ---------------------------------------------------------------------------

def pearson_r(a, b) -> tuple[float, bool]:
    """Correlation and a degenerate flag (zero variance gives r = 0)."""
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    sa, sb = np.sqrt(a @ a), np.sqrt(b @ b)
    if sa < 1e-12 * max(1.0, np.abs(a).max(initial=0)) or sb == 0 or sa == 0:
        return 0.0, True
    if sb < 1e-12 * max(1.0, np.abs(b).max(initial=0)):
        return 0.0, True
    return float(a @ b / (sa * sb)), False


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # [k, D]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(x: np.ndarray, dims: int) -> PCA:
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= dims <= x.shape[1]:
        raise ValueError(f"pca_dims must be in [1, {x.shape[1]}], got {dims}")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:dims]
    if len(comps) < dims:  # fewer samples than requested dims
        comps = np.concatenate([comps, np.zeros((dims - len(comps), x.shape[1]))])
    # fix signs so results do not depend on the LAPACK build
    signs = np.sign(comps[np.arange(dims), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1
    return PCA(mean, comps * signs[:, None])


def fit_ridge(z: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge with an unpenalized intercept."""
    if lam < 0:
        raise ValueError(f"ridge lambda must be >= 0, got {lam}")
    zm, ym = z.mean(axis=0), y.mean(axis=0)
    zc, yc = z - zm, y - ym
    gram = zc.T @ zc + lam * np.eye(z.shape[1])
    s = np.linalg.svd(gram, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise NumericalError(f"degenerate feature covariance (smallest singular value {s[-1]:.3e}) "
                             f"with lambda={lam}; use lambda > 0 or fewer PCA dims")
    w = np.linalg.solve(gram, zc.T @ yc)
    return w, ym - zm @ w


def ridge_pca_probe(train: EmbeddingMatrix, test: EmbeddingMatrix, pca_dims: int = 64,
                    ridge_lambda: float = 1.0) -> dict:
    """Mean Pearson r over target dimensions; PCA is fit on train only."""
    if train.targets is None or test.targets is None:
        raise ValueError("ridge probe needs targets on both splits")
    ytr = np.asarray(train.targets, dtype=np.float64).reshape(len(train), -1)
    yte = np.asarray(test.targets, dtype=np.float64).reshape(len(test), -1)
    pca = fit_pca(train.rows, pca_dims)
    w, b = fit_ridge(pca.transform(train.rows), ytr, ridge_lambda)
    pred = pca.transform(test.rows) @ w + b
    rs, flags = zip(*(pearson_r(pred[:, j], yte[:, j]) for j in range(yte.shape[1])))
    return {"pearson_r": float(np.mean(rs)), "per_target": list(rs), "degenerate": list(flags),
            "predictions": pred}


# ---------------------------------------------------------------------------
# gated-attention MIL
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ABMIL(Module):
    """Gated attention pooling of tile embeddings followed by a linear classifier."""

    def __init__(self, dim: int, hidden: int, n_classes: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(dim)
        self.V = Parameter("abmil.V", trunc_normal(rng, (dim, hidden), std, dtype))
        self.U = Parameter("abmil.U", trunc_normal(rng, (dim, hidden), std, dtype))
        self.w = Parameter("abmil.w", trunc_normal(rng, (hidden,), 1.0 / np.sqrt(hidden), dtype))
        self.C = Parameter("abmil.C", trunc_normal(rng, (dim, n_classes), std, dtype))
        self.c = Parameter("abmil.c", np.zeros(n_classes, dtype=dtype))

    def forward_bag(self, h: np.ndarray):
        h = np.asarray(h, dtype=self.V.value.dtype)
        if h.ndim != 2 or len(h) == 0:
            raise ValueError(f"a slide needs >= 1 tile embedding, got shape {h.shape}")
        t = np.tanh(h @ self.V.value)
        s = _sigmoid(h @ self.U.value)
        scores = (t * s) @ self.w.value
        a = softmax(scores)
        z = a @ h
        logits = z @ self.C.value + self.c.value
        return logits, a, (h, t, s, a, z)

    def backward_bag(self, dlogits: np.ndarray, cache) -> None:
        h, t, s, a, z = cache
        self.C.grad += np.outer(z, dlogits)
        self.c.grad += dlogits
        dz = self.C.value @ dlogits
        da = h @ dz
        dscore = a * (da - a @ da)
        gate = t * s
        self.w.grad += gate.T @ dscore
        dgate = np.outer(dscore, self.w.value)
        self.V.grad += h.T @ (dgate * s * (1 - t * t))
        self.U.grad += h.T @ (dgate * t * s * (1 - s))


def group_bags(emb: EmbeddingMatrix) -> tuple[list[np.ndarray], np.ndarray, list]:
    """Split rows by group id; a bag's label is its first tile's label."""
    if emb.groups is None:
        raise ValueError("MIL needs group ids")
    ids = list(dict.fromkeys(emb.groups.tolist()))
    bags, labels = [], []
    for g in ids:
        sel = emb.groups == g
        bags.append(emb.rows[sel])
        labels.append(emb.labels[sel][0] if emb.labels is not None else -1)
    return bags, np.asarray(labels), ids


def abmil_aggregate(bags, model: ABMIL) -> tuple[np.ndarray, list[np.ndarray]]:
    """Slide logits ``[S, K]`` and per-slide attention weights."""
    logits, weights = [], []
    for h in bags:
        lg, a, _ = model.forward_bag(h)
        logits.append(lg)
        weights.append(a)
    return np.stack(logits), weights


def abmil_loss(bags, labels, model: ABMIL, backward: bool = True) -> float:
    """Mean cross-entropy over slides; accumulates gradients when ``backward``."""
    total = 0.0
    n = len(bags)
    for h, y in zip(bags, labels):
        logits, _, cache = model.forward_bag(h)
        logp = log_softmax(logits)
        total -= logp[y]
        if backward:
            d = np.exp(logp)
            d[y] -= 1.0
            model.backward_bag(d / n, cache)
    return total / n


@dataclass
class MILConfig:
    hidden: int = 32
    lr: float = 1e-2
    epochs: int = 200
    weight_decay: float = 1e-4
    seed: int = 0


def train_abmil(bags, labels, n_classes: int, config: MILConfig | None = None) -> tuple[ABMIL, list[float]]:
    """Full-batch Adam on the slide cross-entropy over frozen embeddings."""
    from .precision import AdamWState, adamw_step

    cfg = config or MILConfig()
    model = ABMIL(bags[0].shape[1], cfg.hidden, n_classes, cfg.seed)
    params = model.parameters()
    state = AdamWState()
    history = []
    for _ in range(cfg.epochs):
        model.zero_grad()
        history.append(abmil_loss(bags, labels, model))
        adamw_step(params, state, cfg.lr, weight_decay=cfg.weight_decay)
    return model, history


# ---------------------------------------------------------------------------
# repeated runs and reporting
# ---------------------------------------------------------------------------

RESULT_FIELDS = ("task", "mode", "metric", "mean", "std", "runs")


@dataclass
class RunSummary:
    task: str
    mode: str
    metric: str
    values: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    def row(self) -> dict:
        return {"task": self.task, "mode": self.mode, "metric": self.metric,
                "mean": self.mean, "std": self.std, "runs": len(self.values)}


def repeat_probe(fn, n_runs: int, seed: int = 0) -> dict[str, list[float]]:
    """Call ``fn(run_seed)`` ``n_runs`` times and collect its numeric outputs."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    out: dict[str, list[float]] = {}
    for r in range(n_runs):
        res = fn(seed + r)
        for k, v in res.items():
            if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool):
                out.setdefault(k, []).append(float(v))
    return out


def results_csv(summaries: list[RunSummary]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for s in summaries:
        writer.writerow(s.row())
    return buf.getvalue()


def split_by_group(emb: EmbeddingMatrix, test_fraction: float = 0.3, seed: int = 0, stratify: bool = False):
    """Train/test split with whole groups on one side, falling back to rows.

    With ``stratify`` (and labels present) each class contributes
    ``round(test_fraction * its groups)`` groups, at least one, to the test
    side, so every class is scored. A group's class is its first row's label.
    When some class has a single group the plain split is used with a warning.
    """
    rng = np.random.default_rng(seed)
    if stratify and emb.labels is not None and emb.groups is not None:
        first = dict(zip(emb.groups.tolist()[::-1], emb.labels.tolist()[::-1]))
        per_class = {c: sorted(g for g, y in first.items() if y == c) for c in sorted(set(first.values()))}
        if min(len(v) for v in per_class.values()) < 2:
            warnings.warn("a class has a single group; stratified split not possible, using a plain split")
            return split_by_group(emb, test_fraction, seed)
        test_ids: set = set()
        for ids in per_class.values():
            rng.shuffle(ids)
            n_test = min(len(ids) - 1, max(1, int(round(test_fraction * len(ids)))))
            test_ids.update(ids[:n_test])
        mask = np.array([g in test_ids for g in emb.groups.tolist()])
        return emb.subset(~mask), emb.subset(mask)
    if emb.groups is not None and len(set(emb.groups.tolist())) >= 4:
        ids = np.array(sorted(set(emb.groups.tolist())), dtype=object)
        rng.shuffle(ids)
        n_test = max(1, int(round(test_fraction * len(ids))))
        test_ids = set(ids[:n_test].tolist())
        mask = np.array([g in test_ids for g in emb.groups.tolist()])
    else:
        perm = rng.permutation(len(emb))
        mask = np.zeros(len(emb), dtype=bool)
        mask[perm[:max(1, int(round(test_fraction * len(emb))))]] = True
    return emb.subset(~mask), emb.subset(mask)
