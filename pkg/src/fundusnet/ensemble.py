"""Soft-voting ensembles, AUROC and the per-image CPU-time harness."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from . import model as M
from . import tensor as T
from .augment import AugmentPipeline, apply_pipeline, preset
from .data import DatasetManifest, load_image, load_images

PIPELINE_NAMES = ("A", "B", "C")
WARMUP_IMAGES = 3


def predict_logit(model: M.Model, pipeline: AugmentPipeline, image: np.ndarray) -> float:
    x = apply_pipeline(pipeline.eval(), image, 0, 0, 0)
    with T.no_grad():
        return float(model(T.Tensor(x[None]), training=False).data[0, 0])


def predict_proba(model: M.Model, pipeline: AugmentPipeline, image: np.ndarray) -> float:
    """Positive-class probability, sigmoid of the single logit.

    A two-logit softmax gives the same value for the logit difference, so the
    single-logit head is the canonical binary form.
    """
    return float(expit(predict_logit(model, pipeline, image)))


def soft_vote(probs: Sequence[float]) -> float:
    """Arithmetic mean of member probabilities.

    Computed as an offset from the first member so identical members return
    that probability exactly.
    """
    if len(probs) == 0:
        raise ValueError("soft_vote needs at least one probability")
    p = [float(v) for v in probs]
    if any(not 0.0 <= v <= 1.0 for v in p):
        raise ValueError("probabilities must lie in [0, 1]")
    return p[0] + math.fsum(v - p[0] for v in p) / len(p)


def hard_label(probs: Sequence[float], threshold: float = 0.5) -> int:
    return int(soft_vote(probs) >= threshold)


def auroc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum.

    Ties count one half, so this equals the trapezoidal ROC area.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError(f"labels and scores must be 1-D and equal length, got {y.shape} and {s.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUROC needs both classes, got {n_pos} positive and {n_neg} negative")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class EnsembleMember:
    checkpoint: str
    pipeline: str = "A"
    resolution: Optional[int] = None

    def __post_init__(self):
        if self.pipeline not in PIPELINE_NAMES:
            raise ValueError(f"member pipeline must be one of {PIPELINE_NAMES}, got {self.pipeline!r}")


@dataclass(frozen=True)
class EnsembleSpec:
    members: Tuple[EnsembleMember, ...]
    voting: str = "soft"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.voting != "soft":
            raise ValueError(f"only soft voting is supported, got {self.voting!r}")

    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "EnsembleSpec":
        unknown = set(d) - {"members", "voting"}
        if unknown:
            raise ValueError(f"unknown ensemble keys: {sorted(unknown)}")
        members = []
        for m in d["members"]:
            extra = set(m) - {"checkpoint", "pipeline", "resolution"}
            if extra:
                raise ValueError(f"unknown ensemble member keys: {sorted(extra)}")
            ckpt = Path(m["checkpoint"])
            if base is not None and not ckpt.is_absolute():
                ckpt = base / ckpt
            members.append(EnsembleMember(str(ckpt), m.get("pipeline", "A"), m.get("resolution")))
        return cls(tuple(members), d.get("voting", "soft"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnsembleSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base=path.parent)

    def to_dict(self) -> dict:
        return {"members": [asdict(m) for m in self.members], "voting": self.voting}


@dataclass
class EvalReport:
    auroc: float
    per_image_cpu_seconds: float
    n_images: int
    n_members: int = 1
    probabilities: List[float] = field(default_factory=list)
    member_probabilities: Optional[List[List[float]]] = None

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2)

    def csv_row(self) -> List[str]:
        return [f"{self.auroc:.4f}", f"{self.per_image_cpu_seconds:.4f}"]


def load_members(spec: EnsembleSpec) -> List[Tuple[M.Model, AugmentPipeline]]:
    out = []
    for member in spec.members:
        model = M.load(member.checkpoint)
        res = model.config.resolution
        if member.resolution is not None and member.resolution != res:
            raise ValueError(
                f"{member.checkpoint}: pipeline resolution {member.resolution} does not match model resolution {res}"
            )
        out.append((model.eval(), preset(member.pipeline, res, mode="eval")))
    return out


def evaluate_members(
    members: Sequence[Tuple[M.Model, AugmentPipeline]],
    images: Sequence[Union[np.ndarray, Path, str]],
    labels: Sequence[int],
    warmup: int = WARMUP_IMAGES,
    keep_member_probs: bool = False,
) -> EvalReport:
    """Score every image with every member, soft-vote, time it and compute AUROC.

    Per-image time covers eval preprocessing plus forward passes of all
    members, single-threaded.  When ``images`` are paths, decoding is timed
    too.  The first ``warmup`` images are excluded from the mean.
    """
    if not members:
        raise ValueError("no ensemble members")
    for model, _ in members:
        model.eval()
    probs, times, per_member = [], [], []
    with threadpool_limits(limits=1):
        for item in images:
            t0 = time.perf_counter()
            img = load_image(item) if isinstance(item, (str, Path)) else item
            member_p = [predict_proba(model, pipe, img) for model, pipe in members]
            p = soft_vote(member_p)
            times.append(time.perf_counter() - t0)
            probs.append(p)
            per_member.append(member_p)
    timed = times[warmup:] if len(times) > warmup else times
    return EvalReport(
        auroc=auroc(labels, probs),
        per_image_cpu_seconds=float(np.mean(timed)),
        n_images=len(probs),
        n_members=len(members),
        probabilities=probs,
        member_probabilities=per_member if keep_member_probs else None,
    )


def evaluate_subsets(
    members: Sequence[Tuple[M.Model, AugmentPipeline]],
    subsets: Sequence[Sequence[int]],
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    warmup: int = WARMUP_IMAGES,
    repeats: int = 1,
) -> List[EvalReport]:
    """``evaluate_members`` for several member subsets, timed side by side.

    Each image runs through every subset back to back (starting subset rotates
    per image), so machine-load drift lands on all subsets alike.  With
    ``repeats`` > 1 an image's time for a subset is the fastest of its runs.
    Probabilities and AUROC are identical to separate ``evaluate_members`` calls.
    """
    if not members or not subsets:
        raise ValueError("no ensemble members")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for model, _ in members:
        model.eval()
    k = len(subsets)
    probs = [[] for _ in range(k)]
    times = [[] for _ in range(k)]
    with threadpool_limits(limits=1):
        for n, img in enumerate(images):
            best = [float("inf")] * k
            for r in range(repeats):
                for j in range(k):
                    idx = (n + r + j) % k
                    t0 = time.perf_counter()
                    p = soft_vote([predict_proba(*members[i], img) for i in subsets[idx]])
                    best[idx] = min(best[idx], time.perf_counter() - t0)
                    if r == 0:
                        probs[idx].append(p)
            for idx in range(k):
                times[idx].append(best[idx])
    reports = []
    for idx, subset in enumerate(subsets):
        timed = times[idx][warmup:] if len(times[idx]) > warmup else times[idx]
        reports.append(EvalReport(
            auroc=auroc(labels, probs[idx]),
            per_image_cpu_seconds=float(np.mean(timed)),
            n_images=len(probs[idx]),
            n_members=len(subset),
            probabilities=probs[idx],
        ))
    return reports


def evaluate(spec: EnsembleSpec, manifest: DatasetManifest, include_decode: bool = False, keep_member_probs: bool = False) -> EvalReport:
    members = load_members(spec)
    if include_decode:
        images = [manifest.resolve(s) for s in manifest.samples]
    else:
        images = load_images(manifest)
    return evaluate_members(members, images, manifest.labels, keep_member_probs=keep_member_probs)


def reports_csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
