"""Command-line entry point: make-corpus, train, embed, probe, simulate, report.

Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.
The resolved settings are written to ``<out_dir>/<command>_config.json``
before any work starts.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import encoder as enc_mod
from . import probe_eval as pe
from . import scalesim as ss
from . import tile_corpus as tc
from .flexi_embed import NumericalError, PatchSizeSchedule
from .nn_core import ConfigError
from .precision import NonFiniteError, PrecisionPolicy, check_batch_floor
from .ssl_objective import CropConfig, HeadConfig, Schedules, SSLModel, Trainer, make_crops

log = logging.getLogger("tilessl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
METRICS_FORMAT = "tilessl-metrics"


class OverflowStorm(ArithmeticError):
    pass


def _floats(s):
    return [float(x) for x in s]


def _ints(s):
    return [int(x) for x in s]


# name -> (default, type, help); list types take nargs="+"
SETTINGS = {
    "make-corpus": {
        "seed": (0, int, "corpus seed"),
        "n_slides": (8, int, "synthetic slides"),
        "tiles_per_stratum": (16, int, "tiles per (mpp, tile_size) per slide"),
        "extent": (2048, int, "slide side in base pixels"),
        "mpps": (list(tc.MPP_LEVELS), _floats, "magnification levels (um/px)"),
        "sizes": (list(tc.TILE_SIZES), _ints, "tile sides in pixels"),
        "pixel_format": ("raw-f32le", str, "raw-f32le or png8"),
        "manifest_name": ("corpus.jsonl", str, "manifest file name"),
    },
    "train": {
        "manifest": (None, str, "corpus manifest"),
        "seed": (0, int, "training seed"),
        "preset": ("small-flex", str, "encoder preset"),
        "steps": (500, int, "optimizer steps"),
        "batch_size": (8, int, "tiles per step"),
        "prototypes": (1024, int, "prototype count K"),
        "n_local": (4, int, "local crops per tile"),
        "peak_lr": (1e-3, float, "peak learning rate"),
        "warmup_steps": (None, int, "linear warmup (default steps // 10)"),
        "precision": ("fp32", str, "fp32, bf16 or fp16 range emulation"),
        "crafted_overflow": (False, bool, "scale the CLS head input layer to force overflow"),
        "overflow_threshold": (5, int, "aborted steps tolerated before failing"),
        "mpp": (0.25, float, "train on tiles at this mpp only"),
    },
    "embed": {
        "manifest": (None, str, "corpus manifest"),
        "checkpoint": (None, str, "encoder checkpoint"),
        "mode": ("both", str, "cls, cls+mean_patch or both"),
        "patch_size": (None, int, "patch size (default smallest configured)"),
        "mpp": (0.25, float, "embed tiles at this mpp only"),
    },
    "probe": {
        "manifest": (None, str, "labeled corpus manifest"),
        "checkpoint": (None, str, "encoder checkpoint"),
        "mode": ("both", str, "cls, cls+mean_patch or both"),
        "tasks": (["linear"], lambda s: list(s), "linear, ridge and/or abmil"),
        "n_runs": (5, int, "repeated runs (mean/std)"),
        "seed": (0, int, "probe seed"),
        "patch_size": (None, int, "patch size (default smallest configured)"),
        "compare_random": (False, bool, "also probe a randomly initialized encoder"),
        "test_fraction": (0.3, float, "held-out fraction of slides"),
        "pca_dims": (64, int, "ridge PCA dimensions"),
        "ridge_lambda": (1.0, float, "ridge penalty"),
        "mpp": (0.25, float, "probe tiles at this mpp only"),
    },
    "simulate": {
        "preset": ("fig2", str, "bundled experiment (fig2, fig3)"),
        "spec": (None, str, "experiment JSON file (overrides preset)"),
        "node_counts": (None, _ints, "node counts to sweep"),
    },
    "report": {
        "run_dir": (None, str, "directory holding command outputs (default out_dir)"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilessl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, spec in SETTINGS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON file of settings")
        p.add_argument("--out-dir", dest="out_dir", help="output directory (default $TILESSL_OUTPUT/<command>)")
        for name, (default, typ, help_) in spec.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_)
            elif typ in (_floats, _ints) or name == "tasks":
                elem = {_floats: float, _ints: int}.get(typ, str)
                p.add_argument(flag, dest=name, nargs="+", type=elem, default=None, help=help_)
            else:
                p.add_argument(flag, dest=name, type=typ, default=None, help=f"{help_} (default {default})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    spec = SETTINGS[command]
    cfg = {k: v[0] for k, v in spec.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        for k, v in loaded.items():
            if k == "out_dir":
                continue
            if k not in spec:
                raise ConfigError(f"unknown setting {k!r} for {command}")
            cfg[k] = v
        if "out_dir" in loaded and args.out_dir is None:
            args.out_dir = loaded["out_dir"]
    for k in spec:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["out_dir"] = str(Path(args.out_dir) if args.out_dir else tc.env_output_root() / command)
    return cfg


def prepare_out_dir(cfg: dict, command: str) -> Path:
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{command.replace('-', '_')}_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from None
    return out


def _require(cfg: dict, key: str) -> Path:
    if not cfg.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    path = Path(cfg[key])
    if not path.exists():
        raise ConfigError(f"{key} {path} does not exist")
    return path


def manifest_digest(path: Path) -> str:
    """SHA-256 over the manifest and every pixel file it references."""
    h = hashlib.sha256(path.read_bytes())
    for t in tc.read_manifest(path, load_pixels=False):
        if t.pixel_path:
            h.update((path.parent / t.pixel_path).read_bytes())
    return h.hexdigest()


def open_metrics(path: Path, command: str, meta: dict):
    fh = open(path, "w", encoding="utf-8")
    fh.write(json.dumps({"format": METRICS_FORMAT, "version": 1, "command": command, **meta}, sort_keys=True) + "\n")
    return fh


def read_metrics(path: Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty metrics file")
    return json.loads(lines[0]), [json.loads(x) for x in lines[1:]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_corpus(cfg: dict, out: Path) -> Path:
    if cfg["pixel_format"] not in tc.PIXEL_FORMATS:
        raise ConfigError(f"pixel_format must be one of {tc.PIXEL_FORMATS}")
    for m in cfg["mpps"]:
        if m not in tc.MPP_LEVELS:
            raise ConfigError(f"mpp {m} not in {tc.MPP_LEVELS}")
    for s in cfg["sizes"]:
        if s not in tc.TILE_SIZES:
            raise ConfigError(f"tile size {s} not in {tc.TILE_SIZES}")
    if cfg["tiles_per_stratum"] < 0 or cfg["n_slides"] < 0:
        raise ConfigError("n_slides and tiles_per_stratum must be >= 0")
    tiles, counts = tc.make_corpus(cfg["n_slides"], cfg["tiles_per_stratum"], cfg["seed"], cfg["extent"],
                                   cfg["mpps"], cfg["sizes"])
    path = tc.write_manifest(tiles, out / cfg["manifest_name"], cfg["pixel_format"])
    print(f"strata {len(counts)}")
    for (m, s), n in sorted(counts.items()):
        print(f"mpp={m} tile_size={s} tiles={n}")
    print(f"manifest {path}")
    print(f"digest {manifest_digest(path)}")
    return path


def _load_tiles(cfg: dict, key: str = "manifest"):
    path = _require(cfg, key)
    try:
        tiles = tc.read_manifest(path)
    except (tc.IntegrityError, json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"bad manifest {path}: {e}") from None
    picked = [t for t in tiles if t.mpp == cfg["mpp"]]
    if not picked:
        raise ConfigError(f"manifest {path} has no tiles at mpp {cfg['mpp']}")
    return picked


def cmd_train(cfg: dict, out: Path) -> Path:
    tiles = _load_tiles(cfg)
    if cfg["steps"] < 0:
        raise ConfigError("steps must be >= 0")
    if cfg["batch_size"] < 1 or cfg["batch_size"] > len(tiles):
        raise ConfigError(f"batch_size must be in [1, {len(tiles)}]")
    try:
        policy = PrecisionPolicy.named(cfg["precision"])
    except (KeyError, ValueError):
        raise ConfigError(f"precision must be fp32, bf16 or fp16, got {cfg['precision']!r}") from None
    enc_cfg = enc_mod.preset(cfg["preset"])
    check_batch_floor(cfg["batch_size"])
    warm = cfg["warmup_steps"] if cfg["warmup_steps"] is not None else max(1, cfg["steps"] // 10)
    sched = Schedules(total_steps=max(1, cfg["steps"]), warmup_steps=warm, peak_lr=cfg["peak_lr"])
    student = SSLModel(enc_cfg, HeadConfig(prototypes=cfg["prototypes"]), seed=cfg["seed"])
    if cfg["crafted_overflow"]:
        student.dino_head.fc1.weight.value *= np.float32(1e6)
    trainer = Trainer(student, sched, PatchSizeSchedule(list(enc_cfg.patch_sizes), seed=cfg["seed"]),
                      policy, seed=cfg["seed"])
    crops = CropConfig(n_local=cfg["n_local"])
    rng = np.random.default_rng([cfg["seed"], 11])
    aborted = 0
    ckpt = out / "checkpoint.tssl"
    meta = {"encoder": enc_cfg.to_dict(), "seed": cfg["seed"], "precision": cfg["precision"]}
    with open_metrics(out / "metrics.jsonl", "train", {"steps": cfg["steps"], "seed": cfg["seed"]}) as fh:
        for step in range(cfg["steps"]):
            idx = rng.choice(len(tiles), cfg["batch_size"], replace=False)
            batch = [make_crops(tiles[i], crops, seed=cfg["seed"] * 100003 + step) for i in idx]
            m = trainer.step(batch, step)
            fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")
            if m.aborted:
                aborted += 1
                log.warning("step %d aborted: %s", step, m.overflow)
                if aborted > cfg["overflow_threshold"]:
                    fh.flush()
                    raise OverflowStorm(f"{aborted} aborted steps (threshold {cfg['overflow_threshold']}) under "
                                        f"{cfg['precision']} range; last overflow sites {m.overflow}")
            elif not math.isfinite(m.total_loss):
                raise NonFiniteError(f"non-finite loss at step {step}")
    meta["steps_done"] = cfg["steps"]
    meta["aborted_steps"] = aborted
    enc_mod.save_checkpoint(ckpt, enc_mod.module_state(student.encoder), meta)
    print(f"checkpoint {ckpt}")
    print(f"aborted_steps {aborted}")
    return ckpt


def load_encoder(path: Path) -> enc_mod.Encoder:
    try:
        state, meta = enc_mod.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from None
    if "encoder" not in meta:
        raise ConfigError(f"checkpoint {path} lacks an encoder config")
    encoder = enc_mod.Encoder(enc_mod.EncoderConfig.from_dict(meta["encoder"]), seed=meta.get("seed", 0))
    enc_mod.load_state(encoder, state)
    return encoder


def _modes(mode: str) -> list[str]:
    if mode == "both":
        return list(pe.MODES)
    if mode not in pe.MODES:
        raise ConfigError(f"mode must be one of {pe.MODES} or 'both', got {mode!r}")
    return [mode]


def cmd_embed(cfg: dict, out: Path) -> list[Path]:
    encoder = load_encoder(_require(cfg, "checkpoint"))
    tiles = _load_tiles(cfg)
    paths = []
    for mode in _modes(cfg["mode"]):
        e = pe.extract_embeddings(encoder, tiles, mode, cfg["patch_size"])
        path = out / f"embeddings_{mode.replace('+', '_')}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slide_id", "label", *[f"e{i}" for i in range(e.dim)]])
            for g, y, row in zip(e.groups, e.labels, e.rows):
                w.writerow([g, int(y), *[repr(float(v)) for v in row]])
        print(f"{mode} {len(e)}x{e.dim} -> {path}")
        paths.append(path)
    return paths


def tile_targets(tiles) -> np.ndarray:
    """Toy regression targets per tile: mean intensity of each channel."""
    return np.stack([np.asarray(t.pixels, dtype=np.float64).mean(axis=(0, 1)) for t in tiles])


def cmd_probe(cfg: dict, out: Path) -> Path:
    ckpt = _require(cfg, "checkpoint")
    tiles = _load_tiles(cfg)
    encoders = {"": load_encoder(ckpt)}
    if cfg["compare_random"]:
        encoders["random-"] = enc_mod.Encoder(encoders[""].config, seed=cfg["seed"] + 12345)
    tasks = cfg["tasks"]
    for t in tasks:
        if t not in ("linear", "ridge", "abmil"):
            raise ConfigError(f"unknown probe task {t!r}")
    targets = tile_targets(tiles) if "ridge" in tasks else None
    summaries: list[pe.RunSummary] = []
    for prefix, encoder in encoders.items():
        for mode in _modes(cfg["mode"]):
            emb = pe.extract_embeddings(encoder, tiles, mode, cfg["patch_size"])
            emb.targets = targets
            for task in tasks:
                def run(seed, task=task, emb=emb):
                    tr, te = pe.split_by_group(emb, cfg["test_fraction"], seed, stratify=True)
                    if task == "linear":
                        return pe.linear_probe(tr, te, pe.ProbeConfig(seed=seed))
                    if task == "ridge":
                        dims = min(cfg["pca_dims"], emb.dim)
                        return pe.ridge_pca_probe(tr, te, dims, cfg["ridge_lambda"])
                    bags, labels, _ = pe.group_bags(tr)
                    tbags, tlabels, _ = pe.group_bags(te)
                    k = int(emb.labels.max()) + 1
                    model, _ = pe.train_abmil(bags, labels, k, pe.MILConfig(seed=seed))
                    logits, _ = pe.abmil_aggregate(tbags, model)
                    pred = logits.argmax(axis=1)
                    return {"balanced_accuracy": pe.balanced_accuracy(tlabels, pred),
                            "macro_f1": pe.macro_f1(tlabels, pred)}
                values = pe.repeat_probe(run, cfg["n_runs"], cfg["seed"])
                for metric in ("balanced_accuracy", "macro_f1", "pearson_r"):
                    if metric in values:
                        summaries.append(pe.RunSummary(prefix + task, mode, metric, values[metric]))
    text = pe.results_csv(summaries)
    path = out / "probe.csv"
    path.write_text(text)
    sys.stdout.write(text)
    return path


def cmd_simulate(cfg: dict, out: Path) -> Path:
    if cfg["spec"]:
        exp = ss.load_experiment(_require(cfg, "spec"))
    else:
        exp = ss.preset_experiment(cfg["preset"])
    if cfg["node_counts"]:
        if any(n < 1 for n in cfg["node_counts"]):
            raise ConfigError("node_counts must be >= 1")
        exp.node_counts = list(cfg["node_counts"])
    text, ratio = ss.run_experiment(exp)
    path = out / f"scaling_{exp.name}.csv"
    path.write_text(text)
    sys.stdout.write(text)
    if ratio is not None:
        (out / f"ddp_fsdp_{exp.name}.json").write_text(json.dumps({"tuned_ddp_over_fsdp": ratio}, indent=2))
        print(f"tuned_ddp_over_fsdp {ratio:.4f}")
    return path


def cmd_report(cfg: dict, out: Path) -> Path:
    """Collect train metrics, probe rows and scaling tables under ``run_dir``."""
    root = Path(cfg["run_dir"] or cfg["out_dir"])
    if not root.exists():
        raise ConfigError(f"run_dir {root} does not exist")
    report: dict = {"run_dir": str(root)}
    for mpath in sorted(root.rglob("metrics.jsonl")):
        _, rows = read_metrics(mpath)
        done = [r for r in rows if not r["aborted"]]
        tail = done[-50:]
        report.setdefault("train", []).append({
            "path": str(mpath), "steps": len(rows), "aborted": len(rows) - len(done),
            "final_dino_loss_mean": float(np.mean([r["dino_loss"] for r in tail])) if tail else None,
            "max_clipped_norm": max((r["clipped_norm"] for r in done), default=None),
        })
    for ppath in sorted(root.rglob("probe.csv")):
        with open(ppath) as fh:
            report.setdefault("probe", []).extend(dict(r, path=str(ppath)) for r in csv.DictReader(fh))
    for spath in sorted(root.rglob("scaling_*.csv")):
        with open(spath) as fh:
            report.setdefault("scaling", []).extend(dict(r, path=str(spath)) for r in csv.DictReader(fh))
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"report {path}")
    return path


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train": cmd_train,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = resolve(args.command, args)
        out = prepare_out_dir(cfg, args.command)
        COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OverflowStorm, NonFiniteError, NumericalError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
