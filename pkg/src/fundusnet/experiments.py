"""Experiment drivers shared by the CLI and the acceptance suite.

Each driver takes a resolved run config (see ``config.py``) and a working
directory, and returns plain row dicts ready for CSV.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from . import train as TR
from .augment import AugmentOptions, AugmentPipeline, preset
from .data import DatasetManifest, SplitSpec, gen_synthetic, load_images, read_manifest, split
from .ensemble import EvalReport, evaluate_members, evaluate_subsets

log = logging.getLogger(__name__)

# (label, rotation, flip, jitter); cumulative, in the ablation table's order
AUGMENT_ROWS: Tuple[Tuple[str, bool, bool, bool], ...] = (
    ("-", False, False, False),
    ("RR", True, False, False),
    ("RR+RF", True, True, False),
    ("RR+RF+CJ", True, True, True),
)

ENSEMBLE_SUBSETS: Tuple[Tuple[int, ...], ...] = ((0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2))


def factorial_rows() -> Tuple[Tuple[str, bool, bool, bool], ...]:
    rows = []
    for rr, rf, cj in itertools.product((False, True), repeat=3):
        name = "+".join(n for n, on in (("RR", rr), ("RF", rf), ("CJ", cj)) if on) or "-"
        rows.append((name, rr, rf, cj))
    return tuple(sorted(rows, key=lambda r: (r[1] + r[2] + r[3], not r[1], not r[2])))


@dataclass
class Prepared:
    train: DatasetManifest
    test: DatasetManifest
    train_images: Dict[int, np.ndarray]
    test_images: List[np.ndarray]


def prepare_data(cfg: dict, work_dir: Path, force_split: bool = False) -> Prepared:
    """Materialize the train/held-out pair described by the data section.

    With ``force_split`` the training data is split 50/50 (or by
    ``train_fraction``) even when a held-out set would otherwise be used.
    """
    d = cfg["data"]
    work_dir = Path(work_dir)
    if d["manifest"] is not None:
        full = read_manifest(d["manifest"], num_classes=max(2, cfg["model"]["num_outputs"]))
    else:
        full = gen_synthetic(d["synthetic_n"], d["resolution"], d["difficulty"], d["data_seed"], work_dir / "data" / "train")
    if force_split or (d["manifest"] is not None and d["test_manifest"] is None):
        train, test = split(full, SplitSpec(d["train_fraction"], d["split_seed"]))
    elif d["test_manifest"] is not None:
        train, test = full, read_manifest(d["test_manifest"], num_classes=max(2, cfg["model"]["num_outputs"]))
    else:
        train = full
        test = gen_synthetic(d["synthetic_test_n"], d["resolution"], d["difficulty"], d["test_seed"], work_dir / "data" / "test")
    train_images = dict(zip((s.id for s in train.samples), load_images(train)))
    return Prepared(train, test, train_images, load_images(test))


def augment_options(cfg: dict, rotation: Optional[bool] = None, flip: Optional[bool] = None, jitter: Optional[bool] = None) -> AugmentOptions:
    p = cfg["pipelines"]
    return AugmentOptions(
        rotation=p["rotation"] if rotation is None else rotation,
        flip=p["flip"] if flip is None else flip,
        jitter=p["jitter"] if jitter is None else jitter,
        max_deg=float(p["max_degrees"]),
        hflip_p=float(p["flip_p"]),
        vflip_p=float(p["flip_p"]),
        brightness=tuple(p["brightness"]),
        contrast=tuple(p["contrast"]),
        saturation=tuple(p["saturation"]),
        hue=tuple(p["hue"]),
    )


def model_config(cfg: dict, preset_name: Optional[str] = None) -> M.ModelConfig:
    m = cfg["model"]
    overrides = {} if m["resolution"] is None else {"resolution": int(m["resolution"])}
    return M.preset_config(preset_name or m["preset"], num_outputs=m["num_outputs"], **overrides)


def train_model(
    cfg: dict,
    data: Prepared,
    seed: int,
    pipeline: AugmentPipeline,
    model_cfg: Optional[M.ModelConfig] = None,
    checkpoint_path: Optional[Path] = None,
) -> Tuple[M.Model, TR.RunRecord]:
    t = cfg["train"]
    mc = model_cfg or model_config(cfg)
    if cfg["model"]["init_from"] is not None:
        model = M.load_for_finetune(cfg["model"]["init_from"], mc.num_outputs, seed=seed)
    else:
        model = M.build(mc, seed=seed)
    tc = TR.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=seed, pipeline=pipeline, selection=t["selection"])
    val = data.test if t["selection"] == "val" else None
    val_images = dict(zip((s.id for s in data.test.samples), data.test_images)) if val is not None else None
    record = TR.fit(model, data.train, tc, images=data.train_images, val_manifest=val, val_images=val_images,
                    checkpoint_path=None if checkpoint_path is None else str(checkpoint_path))
    return model, record


def heldout(members: Sequence[Tuple[M.Model, AugmentPipeline]], data: Prepared) -> EvalReport:
    return evaluate_members(members, data.test_images, data.test.labels)


def ablate_augment(
    cfg: dict,
    seeds: Sequence[int],
    work_dir: Path,
    factorial: bool = False,
    data: Optional[Prepared] = None,
    grid: Optional[Sequence[Tuple[str, bool, bool, bool]]] = None,
) -> List[dict]:
    """One model per (row, seed); rows add random transforms cumulatively on top of resize + center crop."""
    data = data or prepare_data(cfg, work_dir)
    res = model_config(cfg).resolution
    if grid is None:
        grid = factorial_rows() if factorial else AUGMENT_ROWS
    rows = []
    for name, rr, rf, cj in grid:
        aurocs, times = [], []
        for seed in seeds:
            pipe = preset(cfg["pipelines"]["preset"], res, augment_options(cfg, rotation=rr, flip=rf, jitter=cj))
            model, _ = train_model(cfg, data, seed, pipe)
            rep = heldout([(model, pipe.eval())], data)
            log.info("augment row %s seed %d auroc %.4f", name, seed, rep.auroc)
            aurocs.append(rep.auroc)
            times.append(rep.per_image_cpu_seconds)
        rows.append({
            "augment": name, "CC": 1, "RR": int(rr), "RF": int(rf), "CJ": int(cj),
            "auroc": float(np.mean(aurocs)), "cpu_time": float(np.mean(times)),
            "auroc_per_seed": aurocs,
        })
    return rows


def train_members(cfg: dict, data: Prepared, work_dir: Path) -> List[Tuple[M.Model, AugmentPipeline]]:
    """Load or train every ensemble member; trained ones are saved as member<i>.crpl."""
    res = model_config(cfg).resolution
    out = []
    for i, m in enumerate(cfg["ensemble"]["members"]):
        name = m.get("pipeline", "A")
        if m.get("checkpoint"):
            model = M.load(m["checkpoint"])
        else:
            seed = cfg["train"]["seed"] + int(m.get("seed_offset", i))
            pipe = preset(name, res, augment_options(cfg))
            model, _ = train_model(cfg, data, seed, pipe, checkpoint_path=Path(work_dir) / f"member{i + 1}.crpl")
        out.append((model.eval(), preset(name, model.config.resolution, mode="eval")))
    return out


def ablate_ensemble(members: Sequence[Tuple[M.Model, AugmentPipeline]], data: Prepared, repeats: int = 1) -> List[dict]:
    """AUROC and per-image time for every non-empty member subset, timed side by side."""
    if len(members) != 3:
        raise ValueError(f"the ensemble grid needs exactly 3 members, got {len(members)}")
    reports = evaluate_subsets(members, ENSEMBLE_SUBSETS, data.test_images, data.test.labels, repeats=repeats)
    return [
        {
            "model1": int(0 in subset), "model2": int(1 in subset), "model3": int(2 in subset),
            "auroc": rep.auroc, "cpu_time": rep.per_image_cpu_seconds,
        }
        for subset, rep in zip(ENSEMBLE_SUBSETS, reports)
    ]


def format_params(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def compare_backbones(cfg: dict, presets: Sequence[str], seeds: Sequence[int], work_dir: Path) -> List[dict]:
    data = prepare_data(cfg, work_dir, force_split=True)
    rows = []
    for name in presets:
        mc = model_config(cfg, name)
        pipe = preset(cfg["pipelines"]["preset"], mc.resolution, augment_options(cfg))
        row = {"model": name}
        aurocs = []
        for seed in seeds:
            model, _ = train_model(cfg, data, seed, pipe, model_cfg=mc)
            aurocs.append(heldout([(model, pipe.eval())], data).auroc)
            row[f"seed{seed}"] = aurocs[-1]
        row["mean"] = float(np.mean(aurocs))
        row["params"] = format_params(M.count_parameters(M.build(mc)))
        rows.append(row)
    return rows
