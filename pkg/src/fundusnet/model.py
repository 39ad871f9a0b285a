"""Compound-scalable MBConv classifier family and its checkpoint format.

Layout: 3x3/2 stem conv + BN + SiLU, a stack of MBConv blocks (1x1 expand,
depthwise kxk, squeeze-excitation, 1x1 project, residual when the shape is
preserved), a 1x1 head conv + BN + SiLU, global average pooling and a linear
classifier.  The classifier emits raw logits; the sigmoid is applied by the
loss or the predictor.

Checkpoint layout (all integers little-endian)::

    b"CRPL"  u32 version  u32 len  <canonical config JSON>
    u32 n_tensors
    n_tensors x [u32 len <utf-8 name>  u32 ndim  u32 dims[ndim]  f32 data]
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"CRPL"
FORMAT_VERSION = 1
CLASSIFIER_PREFIX = "classifier."

# (expansion, kernel, out_channels, repeats, stride)
B0_STAGES: Tuple[Tuple[int, int, int, int, int], ...] = (
    (1, 3, 16, 1, 1),
    (6, 3, 24, 2, 2),
    (6, 5, 40, 2, 2),
    (6, 3, 80, 3, 2),
    (6, 5, 112, 3, 1),
    (6, 5, 192, 4, 2),
    (6, 3, 320, 1, 1),
)


class CheckpointError(ValueError):
    """Raised for corrupt, mismatched or unknown-version checkpoints."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``width_mult`` scales stage output channels (rounded to the nearest
    multiple of 8, minimum 8); ``depth_mult`` scales repeats with ceil.
    ``stem_channels`` and ``head_channels`` are used as given.
    """

    width_mult: float = 1.0
    depth_mult: float = 1.0
    resolution: int = 224
    stage_table: Tuple[Tuple[int, int, int, int, int], ...] = B0_STAGES
    stem_channels: int = 32
    head_channels: int = 1280
    use_se: bool = True
    se_ratio: float = 0.25
    num_outputs: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_table", tuple(tuple(int(v) for v in row) for row in self.stage_table))
        self.validate()

    def validate(self) -> None:
        if not self.width_mult > 0 or not self.depth_mult > 0:
            raise ValueError(f"width_mult and depth_mult must be positive, got {self.width_mult}, {self.depth_mult}")
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")
        if self.stem_channels < 1 or self.head_channels < 1 or self.num_outputs < 1:
            raise ValueError("stem_channels, head_channels and num_outputs must be >= 1")
        if not self.stage_table:
            raise ValueError("stage_table is empty")
        for row in self.stage_table:
            if len(row) != 5:
                raise ValueError(f"stage row must be (expansion, kernel, out, repeats, stride), got {row}")
            e, k, c, r, s = row
            if e < 1 or k < 1 or k % 2 == 0 or c < 1 or r < 1 or s not in (1, 2):
                raise ValueError(f"invalid stage row {row}")
        if self.use_se and not 0 < self.se_ratio <= 1:
            raise ValueError(f"se_ratio must be in (0, 1], got {self.se_ratio}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_table"] = [list(r) for r in self.stage_table]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def round_channels(c: float) -> int:
    """Nearest multiple of 8 (halves round up), never below 8."""
    return max(8, int(c + 4) // 8 * 8)


def scaled_repeats(r: int, depth_mult: float) -> int:
    return int(math.ceil(depth_mult * r))


def b0(num_outputs: int = 1) -> ModelConfig:
    return ModelConfig(num_outputs=num_outputs)


def b1(num_outputs: int = 1) -> ModelConfig:
    return ModelConfig(width_mult=1.0, depth_mult=1.1, resolution=240, num_outputs=num_outputs)


def b2(num_outputs: int = 1) -> ModelConfig:
    return ModelConfig(width_mult=1.1, depth_mult=1.2, resolution=260, head_channels=1408, num_outputs=num_outputs)


def desk(num_outputs: int = 1) -> ModelConfig:
    """Small preset for single-core runs at 64x64."""
    return ModelConfig(width_mult=0.25, depth_mult=0.5, resolution=64, stem_channels=8, head_channels=64, num_outputs=num_outputs)


PRESETS = {"b0": b0, "b1": b1, "b2": b2, "desk": desk}


def preset_config(name: str, num_outputs: int = 1, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name](num_outputs)
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Module:
    """Container with named parameters (trainable leaves) and buffers."""

    _buffer_names: Tuple[str, ...] = ()
    training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, list) and v and isinstance(v[0], Module):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, each in registration order; arrays are copies."""
        sd = {name: p.data.copy() for name, p in self.named_parameters()}
        sd.update({name: b.copy() for name, b in self.named_buffers()})
        return sd

    def load_state_dict(self, sd: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        if set(sd) != expected:
            missing, extra = sorted(expected - set(sd)), sorted(set(sd) - expected)
            raise CheckpointError(f"tensor names differ from the model: missing {missing}, unexpected {extra}")
        for name, arr in sd.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} does not match model {target.shape}")
            target[...] = arr

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            for name, v in vars(m).items():
                if isinstance(v, Tensor) and v.requires_grad:
                    v.data = v.data.astype(dtype)
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, groups=1, bias=False, rng=None):
        self.stride, self.groups, self.padding = stride, groups, kernel // 2
        fan_out = (cout // groups) * kernel * kernel
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_out), size=(cout, cin // groups, kernel, kernel)))
        if bias:
            self.bias = _param(np.zeros(cout))
        else:
            self.bias = None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.weight = _param(np.ones(c))
        self.bias = _param(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin, fout, rng):
        bound = 1.0 / math.sqrt(fin)
        self.weight = _param(rng.uniform(-bound, bound, size=(fout, fin)))
        self.bias = _param(rng.uniform(-bound, bound, size=fout))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    def __init__(self, cin, cout, kernel, stride=1, groups=1, act=True, bn=(0.1, 1e-5), rng=None):
        self.conv = Conv2d(cin, cout, kernel, stride, groups, rng=rng)
        self.bn = BatchNorm2d(cout, *bn)
        self.act = act

    def forward(self, x):
        x = self.bn(self.conv(x))
        return T.silu(x) if self.act else x


class SqueezeExcite(Module):
    def __init__(self, channels, squeeze, rng):
        self.reduce = Conv2d(channels, squeeze, 1, bias=True, rng=rng)
        self.expand = Conv2d(squeeze, channels, 1, bias=True, rng=rng)

    def forward(self, x):
        s = T.global_avg_pool(x)
        s = T.sigmoid(self.expand(T.silu(self.reduce(s))))
        return T.mul(x, s)


class MBConv(Module):
    def __init__(self, cin, cout, expansion, kernel, stride, se_ratio, bn, rng):
        mid = cin * expansion
        self.use_residual = stride == 1 and cin == cout
        self.expand = ConvBNAct(cin, mid, 1, bn=bn, rng=rng) if expansion != 1 else None
        self.depthwise = ConvBNAct(mid, mid, kernel, stride, groups=mid, bn=bn, rng=rng)
        self.se = SqueezeExcite(mid, max(1, int(cin * se_ratio)), rng) if se_ratio else None
        self.project = ConvBNAct(mid, cout, 1, act=False, bn=bn, rng=rng)

    def forward(self, x):
        h = self.expand(x) if self.expand is not None else x
        h = self.depthwise(h)
        if self.se is not None:
            h = self.se(h)
        h = self.project(h)
        return T.add(h, x) if self.use_residual else h


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        bn = (config.bn_momentum, config.bn_eps)
        self.stem = ConvBNAct(3, config.stem_channels, 3, 2, bn=bn, rng=rng)
        blocks = []
        cin = config.stem_channels
        for e, k, c, r, s in config.stage_table:
            cout = round_channels(c * config.width_mult)
            for i in range(scaled_repeats(r, config.depth_mult)):
                stride = s if i == 0 else 1
                se_ratio = config.se_ratio if config.use_se else 0.0
                block = MBConv(cin, cout, e, k, stride, se_ratio, bn, rng)
                # residual only when the block preserves shape
                assert block.use_residual == (stride == 1 and cin == cout)
                blocks.append(block)
                cin = cout
        self.blocks = blocks
        self.head = ConvBNAct(cin, config.head_channels, 1, bn=bn, rng=rng)
        self.classifier = Linear(config.head_channels, config.num_outputs, rng)

    def forward(self, x, training: Optional[bool] = None) -> Tensor:
        """(N, 3, R, R) -> (N, num_outputs) logits."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        res = self.config.resolution
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (res, res):
            raise T.ShapeError(f"expected input (N, 3, {res}, {res}), got {x.shape}")
        if training is not None:
            self.train(training)
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        h = self.head(h)
        h = T.flatten(T.global_avg_pool(h))
        return self.classifier(h)


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = model.config.to_json().encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg]
    sd = model.state_dict()
    parts.append(struct.pack("<I", len(sd)))
    for name, arr in sd.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(model: Model, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(path: Union[str, Path]) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    """Parse and verify a checkpoint file into (config, named float32 arrays)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    off = 8

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, body, off)
        off += struct.calcsize(fmt)
        return vals

    (clen,) = take("<I")
    config = ModelConfig.from_dict(json.loads(body[off : off + clen].decode("utf-8")))
    off += clen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes")
    return config, tensors


def load(path: Union[str, Path]) -> Model:
    config, tensors = read_checkpoint(path)
    model = build(config)
    model.load_state_dict(tensors)
    return model


def load_for_finetune(path: Union[str, Path], new_num_outputs: int, seed: int = 0) -> Model:
    """Load a checkpoint for fine-tuning with a ``new_num_outputs`` head.

    All tensors are kept when the head size is unchanged.  Otherwise the
    classifier is freshly initialized (from ``seed``) and everything else is
    copied bit-exactly.
    """
    config, tensors = read_checkpoint(path)
    if new_num_outputs == config.num_outputs:
        model = build(config)
        model.load_state_dict(tensors)
        return model
    model = build(replace(config, num_outputs=new_num_outputs), seed=seed)
    head = {k: v for k, v in model.state_dict().items() if k.startswith(CLASSIFIER_PREFIX)}
    body = {k: v for k, v in tensors.items() if not k.startswith(CLASSIFIER_PREFIX)}
    model.load_state_dict({**body, **head})
    return model
