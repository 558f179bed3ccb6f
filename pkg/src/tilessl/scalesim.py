"""Throughput model for multi-node data-parallel training.

Gradient buckets, ring all-reduce timing and compute/communication overlap
are simulated event by event on a single serialized link per rank. An FSDP
variant charges per-unit all-gathers and reduce-scatters instead.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .encoder import EncoderConfig, count_flops
from .nn_core import ConfigError

MiB = 1 << 20
GB = 1e9

# AdamW touches param, grad and two moments; seconds per gradient byte.
OPTIMIZER_SECONDS_PER_BYTE = 4e-12


@dataclass(frozen=True)
class ClusterSpec:
    nodes: int = 1
    gpus_per_node: int = 8
    intra_node_bw: float = 300 * GB
    inter_node_bw: float = 25 * GB
    intra_latency: float = 5e-6
    inter_latency: float = 30e-6
    rdma: bool = False
    rdma_bw_multiplier: float = 2.0
    rdma_latency_reduction: float = 0.5
    # nodes under one leaf switch; past that, traffic crosses an oversubscribed
    # spine and loses bandwidth per extra node (host-staged copies suffer most)
    nodes_per_leaf: int = 2
    contention: float = 3.0
    rdma_contention: float = 0.05
    hierarchical: bool = False
    gpu_memory: float = 141 * GB
    name: str = "cluster"

    def __post_init__(self):
        if self.nodes < 1:
            raise ConfigError(f"nodes must be >= 1, got {self.nodes}")
        if self.nodes_per_leaf < 1:
            raise ConfigError(f"nodes_per_leaf must be >= 1, got {self.nodes_per_leaf}")
        if self.gpus_per_node < 1:
            raise ConfigError(f"gpus_per_node must be >= 1, got {self.gpus_per_node}")
        for f in ("intra_node_bw", "inter_node_bw", "rdma_bw_multiplier", "gpu_memory"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be > 0, got {getattr(self, f)}")
        for f in ("intra_latency", "inter_latency", "contention", "rdma_contention"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be >= 0, got {getattr(self, f)}")
        if not 0 <= self.rdma_latency_reduction < 1:
            raise ConfigError(f"rdma_latency_reduction must be in [0, 1), got {self.rdma_latency_reduction}")

    @property
    def world_size(self) -> int:
        return self.nodes * self.gpus_per_node

    def with_nodes(self, nodes: int) -> "ClusterSpec":
        return replace(self, nodes=nodes)

    def effective_inter_bw(self) -> float:
        mult = self.rdma_bw_multiplier if self.rdma else 1.0
        kappa = self.rdma_contention if self.rdma else self.contention
        return self.inter_node_bw * mult / (1.0 + kappa * max(0, self.nodes - self.nodes_per_leaf))

    def inter_hop_latency(self) -> float:
        return self.inter_latency * ((1.0 - self.rdma_latency_reduction) if self.rdma else 1.0)

    def bottleneck(self) -> tuple[float, float]:
        """(bandwidth, per-hop latency) of a flat ring spanning the cluster."""
        if self.nodes > 1:
            return self.effective_inter_bw(), self.inter_hop_latency()
        return self.intra_node_bw, self.intra_latency


@dataclass(frozen=True)
class ModelProfile:
    """Per-rank costs of one training step.

    ``layer_bytes`` and ``layer_backward`` are ordered by backward completion
    (last forward layer first). ``layer_unit`` maps each layer to its FSDP
    wrapping unit, numbered in forward order.
    """

    name: str
    layer_bytes: tuple[float, ...]
    layer_backward: tuple[float, ...]
    layer_unit: tuple[int, ...]
    forward_time: float
    teacher_forward_time: float = 0.0
    local_batch: int = 1
    optimizer_time: float | None = None

    def __post_init__(self):
        n = len(self.layer_bytes)
        if n == 0:
            raise ConfigError("layer_bytes must not be empty")
        if len(self.layer_backward) != n or len(self.layer_unit) != n:
            raise ConfigError("layer_bytes, layer_backward and layer_unit must have equal length")
        if min(self.layer_bytes) <= 0:
            raise ConfigError("layer_bytes entries must be > 0")
        if min(self.layer_backward) <= 0:
            raise ConfigError("layer_backward entries must be > 0")
        if self.forward_time <= 0:
            raise ConfigError(f"forward_time must be > 0, got {self.forward_time}")
        if self.teacher_forward_time < 0:
            raise ConfigError("teacher_forward_time must be >= 0")
        if self.local_batch < 1:
            raise ConfigError(f"local_batch must be >= 1, got {self.local_batch}")
        if self.optimizer_time is None:
            object.__setattr__(self, "optimizer_time", OPTIMIZER_SECONDS_PER_BYTE * self.total_bytes)

    @property
    def total_bytes(self) -> float:
        return float(sum(self.layer_bytes))

    @property
    def backward_time(self) -> float:
        return float(sum(self.layer_backward))

    @property
    def compute_time(self) -> float:
        return self.forward_time + self.teacher_forward_time + self.backward_time + self.optimizer_time

    def units(self) -> list[tuple[float, float]]:
        """(param bytes, backward time) per unit in forward order."""
        n_units = max(self.layer_unit) + 1
        b = [0.0] * n_units
        t = [0.0] * n_units
        for nbytes, bwd, u in zip(self.layer_bytes, self.layer_backward, self.layer_unit):
            b[u] += nbytes
            t[u] += bwd
        return list(zip(b, t))


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "DDP"  # DDP | FSDP
    bucket_cap_bytes: float = 25 * MiB
    gradient_as_bucket_view: bool = False
    bucket_copy_overhead: float = 1.5e-3  # seconds per bucket with view off
    fsdp_unit_overhead: float = 5e-3  # seconds per unit per collective phase
    fsdp_forward_prefetch: bool = False

    def __post_init__(self):
        if self.kind not in ("DDP", "FSDP"):
            raise ConfigError(f"kind must be DDP or FSDP, got {self.kind!r}")
        if not self.bucket_cap_bytes > 0:
            raise ConfigError(f"bucket_cap_bytes must be > 0, got {self.bucket_cap_bytes}")
        if self.bucket_copy_overhead < 0 or self.fsdp_unit_overhead < 0:
            raise ConfigError("overheads must be >= 0")


DEFAULT_DDP = StrategyConfig()
TUNED_DDP = StrategyConfig(bucket_cap_bytes=360 * MiB, gradient_as_bucket_view=True)
DEFAULT_FSDP = StrategyConfig(kind="FSDP")


def partition_buckets(layer_sizes, cap: float) -> list[list[int]]:
    """Greedy buckets of layer indices in readiness order."""
    if not cap > 0:
        raise ValueError(f"bucket cap must be > 0, got {cap}")
    buckets: list[list[int]] = []
    current: list[int] = []
    filled = 0.0
    for i, size in enumerate(layer_sizes):
        if current and filled + size > cap:
            buckets.append(current)
            current, filled = [], 0.0
        current.append(i)
        filled += size
    if current:
        buckets.append(current)
    return buckets


def allreduce_time(nbytes: float, cluster: ClusterSpec, world_size: int | None = None) -> float:
    w = cluster.world_size if world_size is None else world_size
    if w < 1:
        raise ValueError(f"world_size must be >= 1, got {w}")
    if w == 1 or nbytes == 0:
        return 0.0
    if cluster.hierarchical and cluster.nodes > 1 and cluster.gpus_per_node > 1:
        g, n = cluster.gpus_per_node, cluster.nodes
        intra = (g - 1) / g * nbytes / cluster.intra_node_bw + (g - 1) * cluster.intra_latency
        inter = 2 * (n - 1) / n * (nbytes / g) / cluster.effective_inter_bw() \
            + 2 * (n - 1) * cluster.inter_hop_latency()
        return 2 * intra + inter
    bw, lat = cluster.bottleneck()
    return 2 * (w - 1) / w * nbytes / bw + 2 * (w - 1) * lat


def gather_time(nbytes: float, cluster: ClusterSpec, world_size: int | None = None) -> float:
    """All-gather or reduce-scatter of a tensor whose full size is ``nbytes``."""
    w = cluster.world_size if world_size is None else world_size
    if w <= 1 or nbytes == 0:
        return 0.0
    bw, lat = cluster.bottleneck()
    return (w - 1) / w * nbytes / bw + (w - 1) * lat


def _simulate_ddp(cluster: ClusterSpec, model: ModelProfile, strategy: StrategyConfig):
    fwd = model.forward_time + model.teacher_forward_time
    buckets = partition_buckets(model.layer_bytes, strategy.bucket_cap_bytes)
    if cluster.world_size == 1:
        return fwd + model.backward_time, 0.0, len(buckets)
    ready, t = [], fwd
    for b in model.layer_backward:
        t += b
        ready.append(t)
    link_free, comm = 0.0, 0.0
    for bucket in buckets:
        nbytes = sum(model.layer_bytes[i] for i in bucket)
        dur = allreduce_time(nbytes, cluster)
        if not strategy.gradient_as_bucket_view:
            dur += strategy.bucket_copy_overhead
        link_free = max(ready[bucket[-1]], link_free) + dur
        comm += dur
    return max(ready[-1], link_free), comm, len(buckets)


def _simulate_fsdp(cluster: ClusterSpec, model: ModelProfile, strategy: StrategyConfig):
    units = model.units()
    total_bwd = model.backward_time
    fwd_share = [bt / total_bwd for _, bt in units]
    if cluster.world_size == 1:
        return model.forward_time + model.teacher_forward_time + total_bwd, 0.0, len(units)
    over = strategy.fsdp_unit_overhead
    t, link_free, comm = 0.0, 0.0, 0.0

    def issue(at, dur):
        nonlocal link_free, comm
        link_free = max(at, link_free) + dur
        comm += dur
        return link_free

    # teacher then student forward, each unit gathered before it runs
    for total in (model.teacher_forward_time, model.forward_time):
        if total == 0:
            continue
        pending = None
        for u, (nbytes, _) in enumerate(units):
            dur = gather_time(nbytes, cluster) + over
            if strategy.fsdp_forward_prefetch and pending is not None:
                done = pending
            else:
                done = issue(t, dur)
            start = max(t, done)
            if strategy.fsdp_forward_prefetch and u + 1 < len(units):
                pending = issue(start, gather_time(units[u + 1][0], cluster) + over)
            t = start + total * fwd_share[u]
    # backward: re-gather (prefetched one unit ahead), then reduce-scatter
    order = list(range(len(units)))[::-1]
    gathered = issue(t, gather_time(units[order[0]][0], cluster) + over)
    for k, u in enumerate(order):
        start = max(t, gathered)
        if k + 1 < len(order):
            gathered = issue(start, gather_time(units[order[k + 1]][0], cluster) + over)
        t = start + units[u][1]
        issue(t, gather_time(units[u][0], cluster))
    return max(t, link_free), comm, len(units)


def simulate_step(cluster: ClusterSpec, model: ModelProfile, strategy: StrategyConfig) -> dict:
    """One step of data-parallel training on ``cluster``.

    ``comm_fraction`` is the share of the step not covered by compute.
    """
    if strategy.kind == "DDP":
        busy, comm, n_buckets = _simulate_ddp(cluster, model, strategy)
        opt = model.optimizer_time
    else:
        busy, comm, n_buckets = _simulate_fsdp(cluster, model, strategy)
        opt = model.optimizer_time / cluster.world_size
    step = busy + opt
    compute = model.forward_time + model.teacher_forward_time + model.backward_time + opt
    return {
        "step_time": step,
        "images_per_second": cluster.world_size * model.local_batch / step,
        "comm_fraction": max(0.0, step - compute) / step,
        "bucket_count": n_buckets,
        "compute_time": compute,
        "comm_time": comm,
    }


def scaling_curve(cluster: ClusterSpec, model: ModelProfile, strategy: StrategyConfig,
                  node_counts) -> list[dict]:
    node_counts = list(node_counts)
    if not node_counts:
        raise ValueError("node_counts must not be empty")
    base = simulate_step(cluster.with_nodes(1), model, strategy)["images_per_second"]
    rows = []
    for n in node_counts:
        r = simulate_step(cluster.with_nodes(n), model, strategy)
        rows.append({
            "nodes": n,
            "throughput": r["images_per_second"],
            "efficiency": 1.0 if n == 1 else r["images_per_second"] / (n * base),
            "comm_fraction": r["comm_fraction"],
        })
    return rows


CSV_FIELDS = ("nodes", "throughput", "efficiency", "comm_fraction")


def curve_to_csv(rows: list[dict], extra: dict | None = None) -> str:
    extra = extra or {}
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[*extra, *CSV_FIELDS], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**extra, **{k: row[k] for k in CSV_FIELDS}})
    return buf.getvalue()


def memory_bytes(model: ModelProfile, strategy: StrategyConfig, world_size: int) -> float:
    """Parameter-state bytes per rank: weights, grads, two moments, teacher."""
    total = model.total_bytes
    if strategy.kind == "DDP":
        return 5 * total
    largest = max(b for b, _ in model.units())
    return 5 * total / world_size + 2 * largest


def compare_ddp_fsdp(cluster: ClusterSpec, model: ModelProfile, ddp: StrategyConfig = TUNED_DDP,
                     fsdp: StrategyConfig = DEFAULT_FSDP) -> float:
    """Tuned-DDP over FSDP throughput on ``cluster``."""
    for s in (ddp, fsdp):
        need = memory_bytes(model, s, cluster.world_size)
        if need > cluster.gpu_memory:
            raise ValueError(f"{model.name} needs {need / GB:.1f} GB per rank under {s.kind}, "
                             f"over {cluster.gpu_memory / GB:.1f} GB")
    a = simulate_step(cluster, model, ddp)["images_per_second"]
    b = simulate_step(cluster, model, fsdp)["images_per_second"]
    return a / b


# ---------------------------------------------------------------------------
# profiles derived from encoder FLOP counts
# ---------------------------------------------------------------------------

# sustained matmul throughput per GPU; attention runs slower (memory bound softmax)
GPU_FLOPS = 400e12
ATTENTION_SLOWDOWN = 4.5


def _block_tensors(d: int, mlp_ratio: int) -> list[tuple[str, int]]:
    h = mlp_ratio * d
    # forward order; reversed for backward readiness
    return [("norm1.w", d), ("norm1.b", d), ("qkv.w", 3 * d * d), ("qkv.b", 3 * d),
            ("proj.w", d * d), ("proj.b", d), ("norm2.w", d), ("norm2.b", d),
            ("fc1.w", d * h), ("fc1.b", h), ("fc2.w", h * d), ("fc2.b", d)]


def vit_profile(name: str, embed_dim: int, depth: int, heads: int, patch_size: int, local_batch: int,
                global_side: int = 224, local_side: int = 112, n_global: int = 2, n_local: int = 8,
                registers: int = 4, mlp_ratio: int = 4, prototypes: int = 65536, head_hidden: int = 2048,
                head_bottleneck: int = 256, grad_bytes: int = 4, gpu_flops: float = GPU_FLOPS,
                attention_slowdown: float = ATTENTION_SLOWDOWN) -> ModelProfile:
    """Self-distillation step costs for a ViT with multi-crop views.

    Student runs all views forward and backward, the teacher only the global
    views forward. One FLOP is half a multiply-accumulate.
    """
    cfg = EncoderConfig(embed_dim=embed_dim, depth=depth, heads=heads, registers=registers,
                        patch_sizes=[patch_size], patch_mode="fixed", rope=False, tile_side=global_side,
                        mlp_ratio=mlp_ratio)

    def view_cost(side):
        f = count_flops(cfg, patch_size, tile_side=side)
        lin = 2 * (f["linear"] + f["embed"]) / gpu_flops
        att = 2 * f["attention"] * attention_slowdown / gpu_flops
        return lin, att

    g_lin, g_att = view_cost(global_side)
    l_lin, l_att = view_cost(local_side)
    student_fwd = local_batch * (n_global * (g_lin + g_att) + n_local * (l_lin + l_att))
    teacher_fwd = local_batch * n_global * (g_lin + g_att)
    backward = 2 * student_fwd
    att_share = (n_global * g_att + n_local * l_att) / (n_global * (g_lin + g_att) + n_local * (l_lin + l_att))

    # forward-order units: patch embed, blocks, heads
    units: list[list[tuple[str, int]]] = [[("patch_embed.w", patch_size * patch_size * 3 * embed_dim),
                                           ("patch_embed.b", embed_dim), ("tokens", (1 + registers) * embed_dim)]]
    units += [_block_tensors(embed_dim, mlp_ratio) for _ in range(depth)]
    head = [("fc1", embed_dim * head_hidden), ("fc2", head_hidden * head_hidden),
            ("fc3", head_hidden * head_bottleneck), ("prototypes", head_bottleneck * prototypes)]
    units.append([(f"dino.{n}", c) for n, c in head] + [(f"ibot.{n}", c) for n, c in head])

    block_params = sum(c for _, c in units[1])
    per_block = backward * (1 - att_share) / depth
    per_block_att = backward * att_share / depth
    layer_bytes, layer_bwd, layer_unit = [], [], []
    for u in range(len(units) - 1, -1, -1):
        for tname, count in reversed(units[u]):
            layer_bytes.append(float(count * grad_bytes))
            layer_unit.append(u)
            if 1 <= u <= depth:
                t = per_block * count / block_params + (per_block_att if tname == "qkv.w" else 0.0)
            else:
                # embed and heads: a token's worth of work, kept positive
                t = 2 * count * local_batch * 2 / gpu_flops
            layer_bwd.append(t)
    return ModelProfile(name=name, layer_bytes=tuple(layer_bytes), layer_backward=tuple(layer_bwd),
                        layer_unit=tuple(layer_unit), forward_time=student_fwd,
                        teacher_forward_time=teacher_fwd, local_batch=local_batch)


PROFILES = {
    "vit-b-like": dict(embed_dim=768, depth=12, heads=12, patch_size=14, local_batch=512),
    "vit-g-14-like": dict(embed_dim=1536, depth=40, heads=24, patch_size=14, local_batch=32),
    "vit-g-8-like": dict(embed_dim=1536, depth=40, heads=24, patch_size=8, local_batch=32),
}

CLUSTERS = {
    "h200": dict(name="h200"),
    "h200-rdma": dict(name="h200-rdma", rdma=True),
}


def profile(name: str, **overrides) -> ModelProfile:
    try:
        kw = dict(PROFILES[name])
    except KeyError:
        raise ConfigError(f"unknown model profile {name!r}; choose from {sorted(PROFILES)}") from None
    kw.update(overrides)
    return vit_profile(name, **kw)


def cluster(name: str, **overrides) -> ClusterSpec:
    try:
        kw = dict(CLUSTERS[name])
    except KeyError:
        raise ConfigError(f"unknown cluster {name!r}; choose from {sorted(CLUSTERS)}") from None
    kw.update(overrides)
    return ClusterSpec(**kw)


# ---------------------------------------------------------------------------
# JSON spec files
# ---------------------------------------------------------------------------

def _from_dict(cls, data: dict, what: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{what}: unknown field {key!r}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{what}: {e}") from None


def cluster_from_dict(data: dict) -> ClusterSpec:
    data = dict(data)
    base = data.pop("preset", None)
    if base is not None:
        return cluster(base, **data)
    return _from_dict(ClusterSpec, data, "cluster")


def strategy_from_dict(data: dict) -> StrategyConfig:
    data = dict(data)
    if "bucket_cap_mb" in data:
        data["bucket_cap_bytes"] = float(data.pop("bucket_cap_mb")) * MiB
    return _from_dict(StrategyConfig, data, "strategy")


def model_from_dict(data: dict) -> ModelProfile:
    data = dict(data)
    base = data.pop("preset", None)
    if base is not None:
        return profile(base, **data)
    for key in ("layer_bytes", "layer_backward", "layer_unit"):
        if key in data:
            data[key] = tuple(data[key])
    if "layer_unit" not in data and "layer_bytes" in data:
        data["layer_unit"] = tuple(range(len(data["layer_bytes"])))[::-1]
    return _from_dict(ModelProfile, data, "model")


def to_dict(obj) -> dict:
    return asdict(obj)


@dataclass
class Experiment:
    """A named sweep: one cluster template, several (model, strategy) curves."""

    name: str
    cluster: ClusterSpec
    curves: list[tuple[str, ModelProfile, StrategyConfig, ClusterSpec]] = field(default_factory=list)
    node_counts: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    compare: ClusterSpec | None = None
    compare_model: ModelProfile | None = None


def load_experiment(path_or_data) -> Experiment:
    """Parse ``{"name", "cluster", "node_counts", "curves": [...], "compare": {...}}``."""
    if isinstance(path_or_data, (str, Path)):
        try:
            data = json.loads(Path(path_or_data).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path_or_data}: invalid JSON ({e})") from None
    else:
        data = path_or_data
    if not isinstance(data, dict):
        raise ConfigError("experiment must be a JSON object")
    for key in ("name", "cluster", "curves"):
        if key not in data:
            raise ConfigError(f"experiment: missing field {key!r}")
    base = cluster_from_dict(data["cluster"])
    exp = Experiment(name=data["name"], cluster=base, node_counts=list(data.get("node_counts", [1, 2, 3, 4])))
    if not exp.node_counts or any(not isinstance(n, int) or n < 1 for n in exp.node_counts):
        raise ConfigError("experiment: node_counts must be positive integers")
    for i, c in enumerate(data["curves"]):
        if "model" not in c:
            raise ConfigError(f"curves[{i}]: missing field 'model'")
        cl = replace(base, **c["cluster"]) if "cluster" in c else base
        exp.curves.append((c.get("label", f"curve{i}"), model_from_dict(c["model"]),
                           strategy_from_dict(c.get("strategy", {})), cl))
    if "compare" in data:
        cmp = data["compare"]
        exp.compare = cluster_from_dict(cmp.get("cluster", {"preset": "h200-rdma"}))
        exp.compare_model = model_from_dict(cmp.get("model", {"preset": "vit-g-14-like"}))
    return exp


PRESET_DIR = Path(__file__).with_name("presets")


def preset_experiment(name: str) -> Experiment:
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        avail = sorted(p.stem for p in PRESET_DIR.glob("*.json"))
        raise ConfigError(f"unknown simulation preset {name!r}; choose from {avail}")
    return load_experiment(path)


def run_experiment(exp: Experiment) -> tuple[str, float | None]:
    """CSV of every curve plus the DDP/FSDP ratio when requested."""
    parts = []
    header_done = False
    for label, model, strategy, cl in exp.curves:
        rows = scaling_curve(cl, model, strategy, exp.node_counts)
        text = curve_to_csv(rows, extra={"curve": label})
        if header_done:
            text = text.split("\n", 1)[1]
        header_done = True
        parts.append(text)
    ratio = None
    if exp.compare is not None:
        ratio = compare_ddp_fsdp(exp.compare, exp.compare_model)
    return "".join(parts), ratio
