"""Constant learning-rate Adam training with lowest-loss epoch selection."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit, log_softmax

from . import model as M
from . import tensor as T
from .augment import AugmentPipeline, RngStream, apply_pipeline, derive_seed, preset
from .data import DatasetManifest, load_images
from .tensor import Tensor

log = logging.getLogger(__name__)

_SHUFFLE_STREAM = 0x5348554C


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits.

    Uses max(z, 0) - z*y + log(1 + exp(-|z|)), which is finite for any
    finite logit.
    """
    y = np.asarray(labels, dtype=logits.dtype).reshape(-1)
    z = logits.data.reshape(-1)
    if z.shape != y.shape:
        raise T.ShapeError(f"bce_loss: {z.size} logits for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce_loss labels must be 0 or 1")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    shape = logits.shape

    def bw(g):
        return ((g * (expit(z) - y) / n).astype(logits.dtype).reshape(shape),)

    return T.make_op("bce", np.asarray(per.mean(), dtype=logits.dtype), (logits,), bw)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over (N, K) logits and integer labels."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data
    n, k = z.shape
    if y.shape != (n,) or y.min() < 0 or y.max() >= k:
        raise ValueError(f"cross_entropy_loss: labels must be {n} integers in [0, {k})")
    logp = log_softmax(z, axis=1)
    loss = -logp[np.arange(n), y].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), y] -= 1
        return ((g * d / n).astype(logits.dtype),)

    return T.make_op("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def loss_for(model: M.Model, logits: Tensor, labels) -> Tensor:
    return bce_loss(logits, labels) if model.config.num_outputs == 1 else cross_entropy_loss(logits, labels)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]]) -> Dict[str, Tensor]:
    """One bias-corrected Adam update in place; no schedule, no weight decay."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype)
    return params


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 2024
    pipeline: Optional[AugmentPipeline] = None
    # "train": lowest mean training loss; "val": lowest loss on the held-out manifest
    selection: str = "train"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.selection not in ("train", "val"):
            raise ValueError(f"selection must be 'train' or 'val', got {self.selection!r}")


@dataclass
class RunRecord:
    epoch_losses: List[float]
    selected_epoch: int
    cpu_seconds: float
    checkpoint_path: Optional[str] = None
    lr_per_epoch: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def epoch_order(ids: Sequence[int], seed: int, epoch: int) -> List[int]:
    return RngStream(derive_seed(seed, _SHUFFLE_STREAM, epoch)).shuffle(list(ids))


def _batch(pipeline: AugmentPipeline, images: Dict[int, np.ndarray], ids: Sequence[int], seed: int, epoch: int) -> np.ndarray:
    return np.stack([apply_pipeline(pipeline, images[i], seed, epoch, i) for i in ids])


def _fill_cache(manifest: DatasetManifest, images: Optional[Dict[int, np.ndarray]]) -> Dict[int, np.ndarray]:
    images = {} if images is None else images
    missing = [s for s in manifest.samples if s.id not in images]
    if missing:
        images.update(zip((s.id for s in missing), load_images(DatasetManifest(missing, manifest.root))))
    return images


def mean_loss(model: M.Model, manifest: DatasetManifest, images: Dict[int, np.ndarray], pipeline: AugmentPipeline, batch_size: int = 64) -> float:
    """Eval-mode loss over a manifest with deterministic preprocessing."""
    model.eval()
    pipe = pipeline.eval()
    total = 0.0
    with T.no_grad():
        for start in range(0, len(manifest), batch_size):
            chunk = manifest.samples[start : start + batch_size]
            x = _batch(pipe, images, [s.id for s in chunk], 0, 0)
            logits = model(Tensor(x), training=False)
            total += loss_for(model, logits, [s.label for s in chunk]).item() * len(chunk)
    return total / len(manifest)


def fit(
    model: M.Model,
    train_manifest: DatasetManifest,
    config: TrainConfig,
    images: Optional[Dict[int, np.ndarray]] = None,
    val_manifest: Optional[DatasetManifest] = None,
    checkpoint_path: Optional[str] = None,
    val_images: Optional[Dict[int, np.ndarray]] = None,
) -> RunRecord:
    """Train ``model`` in place and restore the weights of its lowest-loss epoch.

    Each epoch visits the samples in an order keyed by (seed, epoch); the
    last partial batch is kept.  Augmentation for sample ``i`` in epoch ``e``
    is keyed by (seed, e, i).  Image caches are keyed by sample id, so the
    held-out set gets its own.
    """
    if len(train_manifest) == 0:
        raise ValueError("training manifest is empty")
    if config.selection == "val" and val_manifest is None:
        raise ValueError("selection='val' needs a val_manifest")
    pipeline = config.pipeline or preset("B", model.config.resolution)
    images = _fill_cache(train_manifest, images)
    if val_manifest is not None:
        val_images = _fill_cache(val_manifest, val_images)
    labels = {s.id: s.label for s in train_manifest.samples}
    ids = [s.id for s in train_manifest.samples]

    params = dict(model.named_parameters())
    state = AdamState(lr=config.lr)
    cpu0 = time.process_time()
    losses: List[float] = []
    val_losses: List[float] = []
    lrs: List[float] = []
    best_score, best_state = None, None
    for epoch in range(config.epochs):
        model.train()
        order = epoch_order(ids, config.seed, epoch)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch_ids = order[start : start + config.batch_size]
            x = Tensor(_batch(pipeline, images, batch_ids, config.seed, epoch))
            logits = model(x, training=True)
            loss = loss_for(model, logits, [labels[i] for i in batch_ids])
            model.zero_grad()
            T.backward(loss)
            adam_step(state, params, {k: p.grad for k, p in params.items()})
            total += loss.item() * len(batch_ids)
        losses.append(total / len(order))
        lrs.append(state.lr)
        score = losses[-1]
        if val_manifest is not None:
            val_losses.append(mean_loss(model, val_manifest, val_images, pipeline, config.batch_size))
            if config.selection == "val":
                score = val_losses[-1]
        log.info("epoch %d loss %.5f%s", epoch, losses[-1], f" val {val_losses[-1]:.5f}" if val_losses else "")
        # strict improvement keeps the first epoch on ties
        if best_score is None or score < best_score:
            best_score, best_state, best_epoch = score, model.state_dict(), epoch
    model.load_state_dict(best_state)
    model.eval()
    record = RunRecord(
        epoch_losses=losses,
        selected_epoch=best_epoch,
        cpu_seconds=time.process_time() - cpu0,
        lr_per_epoch=lrs,
        val_losses=val_losses,
    )
    if checkpoint_path is not None:
        M.save(model, checkpoint_path)
        record.checkpoint_path = str(checkpoint_path)
    return record
