"""Image decoding, CSV manifests, seeded splits and synthetic datasets.

A manifest is a two-column UTF-8 CSV with header ``path,label``.  Relative
paths resolve against the directory that holds the manifest file.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial import cKDTree

from .augment import RngStream, derive_seed

PathLike = Union[str, Path]

# stream tags keep label assignment, splitting and per-sample rendering independent
_LABEL_STREAM = 0x4C41424C
_SPLIT_STREAM = 0x53504C54
_SHAPE_STREAM = 0x53484150


class DataError(RuntimeError):
    """Raised for unreadable images or malformed manifests."""


@dataclass(frozen=True)
class Sample:
    image_path: Path
    label: int
    id: int


@dataclass
class DatasetManifest:
    samples: List[Sample]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.image_path)
        return p if p.is_absolute() else self.root / p

    def subset(self, ids: Sequence[int]) -> "DatasetManifest":
        by_id = {s.id: s for s in self.samples}
        return DatasetManifest([by_id[i] for i in ids], self.root)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_image(path: PathLike) -> np.ndarray:
    """Decode a PNG or JPEG into a (3, H, W) float32 array in [0, 1], RGB order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise DataError(f"unsupported image format {im.format} in {path}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) uint8 with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(img: np.ndarray, path: PathLike) -> None:
    """Write a float (3, H, W) image or a uint8 (H, W, 3) array as PNG."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def read_manifest(path: PathLike, num_classes: int = 2) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    samples = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["path", "label"]:
            raise DataError(f"{path}: header must be 'path,label', got {reader.fieldnames}")
        for i, row in enumerate(reader):
            try:
                label = int(row["label"])
            except ValueError:
                raise DataError(f"{path}:{i + 2}: label {row['label']!r} is not an integer") from None
            if not 0 <= label < num_classes:
                raise DataError(f"{path}:{i + 2}: label {label} outside 0..{num_classes - 1}")
            samples.append(Sample(Path(row["path"]), label, i))
    return DatasetManifest(samples, path.parent)


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "label"])
        for s in manifest.samples:
            p = Path(s.image_path)
            if p.is_absolute():
                try:
                    p = p.relative_to(path.parent.resolve())
                except ValueError:
                    pass
            w.writerow([p.as_posix(), s.label])


def load_images(manifest: DatasetManifest) -> List[np.ndarray]:
    """Decode every sample, naming the failing sample id on error."""
    out = []
    for s in manifest.samples:
        try:
            out.append(load_image(manifest.resolve(s)))
        except DataError as exc:
            raise DataError(f"sample {s.id}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 2023
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def _take(n: int, fraction: float) -> int:
    k = int(math.floor(fraction * n + 0.5))
    return min(max(k, 1), n - 1) if n >= 2 else k


def split(manifest: DatasetManifest, spec: SplitSpec) -> Tuple[DatasetManifest, DatasetManifest]:
    """Deterministic partition into (train, held-out), each kept in manifest order.

    With stratification each class is shuffled by its own seeded stream and
    contributes ``round(fraction * n_class)`` samples to the train side.
    """
    if len(manifest) < 2:
        raise DataError("need at least 2 samples to split")
    train_ids = set()
    if spec.stratified:
        classes = sorted({s.label for s in manifest.samples})
        if len(classes) < 2:
            raise DataError(f"stratified split needs both classes, found only {classes}")
        for c in classes:
            ids = [s.id for s in manifest.samples if s.label == c]
            rng = RngStream(derive_seed(spec.seed, _SPLIT_STREAM, c))
            train_ids.update(rng.shuffle(ids)[: _take(len(ids), spec.train_fraction)])
    else:
        ids = [s.id for s in manifest.samples]
        rng = RngStream(derive_seed(spec.seed, _SPLIT_STREAM))
        train_ids.update(rng.shuffle(ids)[: _take(len(ids), spec.train_fraction)])
    train = [s for s in manifest.samples if s.id in train_ids]
    held = [s for s in manifest.samples if s.id not in train_ids]
    if not train or not held:
        raise DataError("split produced an empty partition")
    return DatasetManifest(train, manifest.root), DatasetManifest(held, manifest.root)


# ---------------------------------------------------------------------------
# synthetic fundus-like images
# ---------------------------------------------------------------------------


def _balanced_labels(n: int, seed: int, num_classes: int = 2) -> List[int]:
    labels = [i % num_classes for i in range(n)]
    return RngStream(derive_seed(seed, _LABEL_STREAM)).shuffle(labels)


def _bezier(p0, p1, p2, steps: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, steps)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _distance_to_polyline(yy, xx, pts, cutoff: float) -> np.ndarray:
    # distance to the sampled points (dense enough for thin strokes); inf beyond cutoff
    d, _ = cKDTree(pts).query(np.stack([yy.ravel(), xx.ravel()], axis=1), distance_upper_bound=cutoff)
    return d.reshape(yy.shape)


def render_fundus(resolution: int, positive: bool, difficulty: float, rng: np.random.Generator) -> np.ndarray:
    """Render one synthetic fundus image as (3, R, R) floats in [0, 1].

    Every image has a dark surround, a vignetted orange disc, an optic disc
    and dark vessel arcs.  Positive images also carry 1 to 5 small bright or
    dark lesion blobs whose amplitude is proportional to ``1 - difficulty``.
    """
    r_px = float(resolution)
    yy, xx = np.meshgrid(np.arange(resolution, dtype=np.float64), np.arange(resolution, dtype=np.float64), indexing="ij")
    cy = (r_px - 1) / 2 + rng.uniform(-0.03, 0.03) * r_px
    cx = (r_px - 1) / 2 + rng.uniform(-0.03, 0.03) * r_px
    radius = rng.uniform(0.40, 0.46) * r_px
    dist = np.hypot(yy - cy, xx - cx)
    inside = np.clip(radius - dist + 0.5, 0.0, 1.0)

    base = np.array([rng.uniform(0.72, 0.88), rng.uniform(0.32, 0.42), rng.uniform(0.10, 0.18)])
    shade = 1.0 - 0.35 * (dist / radius) ** 2
    phase = rng.uniform(0, 2 * np.pi, size=2)
    freq = rng.uniform(1.0, 2.5, size=2) * 2 * np.pi / r_px
    shade = shade + 0.04 * np.cos(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1])
    img = base[:, None, None] * shade[None]

    # optic disc: broad pale spot, the same for both classes
    ang = rng.uniform(0, 2 * np.pi)
    od = np.array([cy + 0.45 * radius * np.sin(ang), cx + 0.45 * radius * np.cos(ang)])
    od_sigma = 0.07 * r_px
    od_blob = np.exp(-((yy - od[0]) ** 2 + (xx - od[1]) ** 2) / (2 * od_sigma**2))
    img = img + np.array([0.15, 0.25, 0.2])[:, None, None] * od_blob[None]

    # vessels: thin dark arcs leaving the optic disc
    width = max(0.012 * r_px, 0.6)
    vessel = np.zeros_like(dist)
    for _ in range(int(rng.integers(4, 7))):
        a1 = rng.uniform(0, 2 * np.pi)
        end = np.array([cy + 0.9 * radius * np.sin(a1), cx + 0.9 * radius * np.cos(a1)])
        mid = (od + end) / 2 + rng.normal(0, 0.2 * radius, size=2)
        pts = _bezier(od, mid, end, steps=max(48, 2 * resolution))
        d = _distance_to_polyline(yy, xx, pts, cutoff=4 * width)
        vessel = np.maximum(vessel, np.exp(-((d / width) ** 2)))
    img = img * (1.0 - 0.35 * vessel)[None]

    if positive:
        amp = 0.8 * (1.0 - difficulty)
        for _ in range(int(rng.integers(1, 6))):
            rho = radius * 0.8 * math.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * np.pi)
            ly, lx = cy + rho * math.sin(phi), cx + rho * math.cos(phi)
            sigma = rng.uniform(0.04, 0.065) * r_px
            blob = np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * sigma**2))
            if rng.uniform() < 0.5:
                # exudate: bright yellow
                img = img + amp * np.array([0.8, 1.0, 0.35])[:, None, None] * blob[None]
            else:
                # haemorrhage: dark red
                img = img * (1.0 - amp * 1.2 * blob)[None]

    img = img + rng.normal(0.0, 0.015, size=img.shape)
    img = np.clip(img, 0.0, 1.0) * inside[None]
    return img.astype(np.float32)


def gen_synthetic(n: int, resolution: int, difficulty: float, seed: int, out_dir: PathLike) -> DatasetManifest:
    """Write ``n`` synthetic PNGs and ``manifest.csv`` into ``out_dir``.

    Labels are balanced (within one) and the whole dataset is a pure function
    of ``(n, resolution, difficulty, seed)``.
    """
    if resolution < 32:
        raise ValueError(f"resolution must be >= 32, got {resolution}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must be in [0, 1], got {difficulty}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    labels = _balanced_labels(n, seed)
    samples = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng(derive_seed(seed, i))
        img = render_fundus(resolution, bool(label), difficulty, rng)
        name = f"img_{i:05d}.png"
        try:
            save_image(img, out / name)
        except OSError as exc:
            raise DataError(f"cannot write {out / name}: {exc}") from exc
        samples.append(Sample(Path(name), label, i))
    manifest = DatasetManifest(samples, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


SHAPES = ("circle", "square", "triangle", "cross")


def render_shape(resolution: int, kind: int, rng: np.random.Generator) -> np.ndarray:
    r_px = float(resolution)
    yy, xx = np.meshgrid(np.arange(resolution, dtype=np.float64), np.arange(resolution, dtype=np.float64), indexing="ij")
    size = rng.uniform(0.18, 0.3) * r_px
    cy, cx = rng.uniform(size, r_px - size, size=2)
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        mask = np.hypot(dy, dx) <= size
    elif kind == 1:
        mask = (np.abs(dy) <= size * 0.85) & (np.abs(dx) <= size * 0.85)
    elif kind == 2:
        mask = (dy <= size * 0.7) & (dy >= 2 * np.abs(dx) - size)
    else:
        arm = size * 0.3
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= size)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= size))
    bg = rng.uniform(0.0, 0.5, size=3)
    fg = rng.uniform(0.5, 1.0, size=3)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_shapes(n: int, resolution: int, seed: int, out_dir: PathLike) -> DatasetManifest:
    """Four-class shape dataset (circle/square/triangle/cross) used for pretraining."""
    if resolution < 32:
        raise ValueError(f"resolution must be >= 32, got {resolution}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = _balanced_labels(n, derive_seed(seed, _SHAPE_STREAM), num_classes=len(SHAPES))
    samples = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng(derive_seed(seed, _SHAPE_STREAM, i))
        name = f"shape_{i:05d}.png"
        save_image(render_shape(resolution, label, rng), out / name)
        samples.append(Sample(Path(name), label, i))
    manifest = DatasetManifest(samples, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
