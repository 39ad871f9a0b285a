"""Command-line front end.

Exit codes: 0 success, 1 run failure, 2 usage error or missing input file.
Every command that writes a run directory drops a FAILED marker there if it
dies part-way.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import experiments as X
from . import model as M
from .augment import preset
from .data import DataError, gen_shapes, gen_synthetic, read_manifest
from .ensemble import EnsembleSpec, evaluate, predict_proba

log = logging.getLogger("fundusnet")

DEFAULT_SEEDS = [2023, 2024, 2025]


class UsageError(Exception):
    pass


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict], cfg_hash: str, seeds: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header) + ["config_hash", "seeds"])
        for r in rows:
            cells = [f"{r[h]:.4f}" if isinstance(r[h], float) else r[h] for h in header]
            w.writerow(cells + [cfg_hash, " ".join(map(str, seeds))])


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_dir(args, command: str, cfg_hash: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{command}-{cfg_hash[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    return out


def _load_config(args) -> dict:
    if args.config is None:
        return C.resolve({})
    if not Path(args.config).is_file():
        raise UsageError(f"config not found: {args.config}")
    return C.load(args.config)


def _save_config(out: Path, cfg: dict) -> str:
    h = C.config_hash(cfg)
    _write_json(out / "config.json", cfg)
    return h


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.shapes:
        m = gen_shapes(args.n, args.resolution, args.seed, out)
    else:
        m = gen_synthetic(args.n, args.resolution, args.difficulty, args.seed, out)
    print(f"wrote {len(m)} images and {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.manifest is not None:
        cfg["data"]["manifest"] = str(Path(args.manifest).resolve())
    h = C.config_hash(cfg)
    out = _run_dir(args, "train", h)
    with _failure_marker(out):
        _save_config(out, cfg)
        data = X.prepare_data(cfg, out)
        mc = X.model_config(cfg)
        pipe = preset(cfg["pipelines"]["preset"], mc.resolution, X.augment_options(cfg))
        model, record = X.train_model(cfg, data, cfg["train"]["seed"], pipe, model_cfg=mc, checkpoint_path=out / "model.crpl")
        report = X.heldout([(model, pipe.eval())], data)
        _write_json(out / "run_record.json", {**json.loads(record.to_json()), "config_hash": h})
        _write_json(out / "eval_report.json", {"auroc": report.auroc, "per_image_cpu_seconds": report.per_image_cpu_seconds,
                                               "n_images": report.n_images, "config_hash": h})
    print(f"checkpoint {out / 'model.crpl'}  selected epoch {record.selected_epoch}  held-out AUROC {report.auroc:.4f}")
    return 0


def cmd_eval(args) -> int:
    for p in (args.ensemble, args.manifest):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    spec = EnsembleSpec.load(args.ensemble)
    manifest = read_manifest(args.manifest)
    report = evaluate(spec, manifest, include_decode=args.include_decode, keep_member_probs=args.dump_members)
    text = report.to_json(ensemble=spec.to_dict(), manifest=str(args.manifest))
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text if args.out is None else f"AUROC {report.auroc:.4f}  {report.per_image_cpu_seconds * 1000:.2f} ms/image -> {args.out}")
    return 0


def cmd_ablate_augment(args) -> int:
    cfg = _load_config(args)
    h = C.config_hash(cfg)
    out = _run_dir(args, "ablate-augment", h)
    with _failure_marker(out):
        _save_config(out, cfg)
        rows = X.ablate_augment(cfg, args.seeds, out, factorial=args.factorial)
        _write_csv(out / "ablate_augment.csv", ["augment", "CC", "RR", "RF", "CJ", "auroc", "cpu_time"], rows, h, args.seeds)
        _write_json(out / "ablate_augment.json", {"rows": rows, "config_hash": h, "seeds": args.seeds})
    print((out / "ablate_augment.csv").read_text(), end="")
    return 0


def cmd_ablate_ensemble(args) -> int:
    cfg = _load_config(args)
    h = C.config_hash(cfg)
    out = _run_dir(args, "ablate-ensemble", h)
    with _failure_marker(out):
        _save_config(out, cfg)
        data = X.prepare_data(cfg, out)
        members = X.train_members(cfg, data, out)
        rows = X.ablate_ensemble(members, data, repeats=args.repeats)
        seeds = [cfg["train"]["seed"] + int(m.get("seed_offset", i)) for i, m in enumerate(cfg["ensemble"]["members"])]
        _write_csv(out / "ablate_ensemble.csv", ["model1", "model2", "model3", "auroc", "cpu_time"], rows, h, seeds)
        _write_json(out / "ablate_ensemble.json", {"rows": rows, "config_hash": h, "seeds": seeds})
        if (out / "member1.crpl").exists():
            _write_json(out / "ensemble.json", {"members": [
                {"checkpoint": f"member{i + 1}.crpl", "pipeline": m.get("pipeline", "A")}
                for i, m in enumerate(cfg["ensemble"]["members"])]})
    print((out / "ablate_ensemble.csv").read_text(), end="")
    return 0


def cmd_compare_backbones(args) -> int:
    cfg = _load_config(args)
    h = C.config_hash(cfg)
    out = _run_dir(args, "compare-backbones", h)
    with _failure_marker(out):
        _save_config(out, cfg)
        rows = X.compare_backbones(cfg, args.presets, args.seeds, out)
        header = ["model"] + [f"seed{s}" for s in args.seeds] + ["mean", "params"]
        _write_csv(out / "compare_backbones.csv", header, rows, h, args.seeds)
    print((out / "compare_backbones.csv").read_text(), end="")
    return 0


def cmd_bench(args) -> int:
    """Single-threaded per-image inference time for a checkpoint or an untrained preset."""
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model = M.load(args.checkpoint)
    else:
        model = M.build(M.preset_config(args.preset), seed=0)
    res = model.config.resolution
    pipe = preset(args.pipeline, res, mode="eval")
    rng = np.random.default_rng(0)
    images = rng.random((args.n + args.warmup, 3, res, res), dtype=np.float32)
    times = []
    with threadpool_limits(limits=1):
        for img in images:
            t0 = time.perf_counter()
            for _ in range(args.members):
                predict_proba(model, pipe, img)
            times.append(time.perf_counter() - t0)
    result = {
        "model": args.checkpoint or args.preset,
        "resolution": res,
        "members": args.members,
        "params": M.count_parameters(model),
        "per_image_cpu_seconds": float(np.mean(times[args.warmup:])),
        "n_images": args.n,
    }
    print(json.dumps(result, indent=2))
    return 0


class _failure_marker:
    def __init__(self, out: Path):
        self.out = out

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            (self.out / "FAILED").write_text(f"{exc_type.__name__}: {exc}\n", encoding="utf-8")
        return False


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fundusnet", description="Train, evaluate and ablate compact retinal image classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--difficulty", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=2024)
    s.add_argument("--shapes", action="store_true", help="4-class shapes set for pretraining instead")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model and score it on the held-out set")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--manifest", help="override data.manifest")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate an ensemble on a manifest")
    s.add_argument("--ensemble", required=True, help="JSON with a members list of {checkpoint, pipeline}")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="write the report JSON here")
    s.add_argument("--include-decode", action="store_true", help="count image decoding in the timing")
    s.add_argument("--dump-members", action="store_true", help="include per-member probabilities")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate-augment", help="cumulative augmentation grid")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, nargs="+", default=DEFAULT_SEEDS)
    s.add_argument("--factorial", action="store_true", help="all 8 on/off combinations instead of the 4 cumulative rows")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate_augment)

    s = sub.add_parser("ablate-ensemble", help="train three members and score all 7 subsets")
    s.add_argument("--config")
    s.add_argument("--repeats", type=int, default=1, help="timing runs per image and subset; the fastest counts")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate_ensemble)

    s = sub.add_parser("compare-backbones", help="model presets x seeds on a 50/50 split")
    s.add_argument("--config")
    s.add_argument("--presets", nargs="+", default=["desk"], choices=sorted(M.PRESETS))
    s.add_argument("--seeds", type=int, nargs="+", default=DEFAULT_SEEDS)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare_backbones)

    s = sub.add_parser("bench", help="time single-image inference")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--preset", default="desk", choices=sorted(M.PRESETS))
    s.add_argument("--pipeline", default="A", choices=["A", "B", "C"])
    s.add_argument("--members", type=int, default=1, help="forward passes per image")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, C.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, M.CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
