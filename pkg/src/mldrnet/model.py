"""MldrNet and baseline architectures, model configs and checkpoint files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndcore
from .fusion import Fusion, check_kind
from .layers import AvgPool2d, Conv2d, Dropout, Flatten, Linear, MaxPool2d, ReLU

ARCHS = ("mldrnet", "alexnet_like", "acnn", "tcnn")
DEFAULT_TRUNK = (16, 32, 32, 32, 32, 32)
TRUNK_KERNELS = (11, 5, 5, 5, 5, 5)


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "mldrnet"
    depth: int = 4
    fusion: str = "mean"
    n_classes: int = 8
    input_size: int = 64
    trunk_channels: tuple = DEFAULT_TRUNK[:4]
    branch_hidden: int = 128
    reduce_channels: int = 128
    dropout_rate: float = 0.0
    seed: int = 0
    first_stride: int = 2
    # channel / FC width divisor for the baseline architectures
    width_divisor: int = 16
    # fixed pixel standardization applied before the first conv
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        check_kind(self.fusion)
        if self.arch == "mldrnet":
            if not 2 <= self.depth <= 6:
                raise ValueError(f"depth must be in 2..6, got {self.depth}")
            if len(self.trunk_channels) != self.depth:
                raise ValueError(f"trunk_channels has {len(self.trunk_channels)} entries, depth is {self.depth}")
        for name in ("n_classes", "input_size", "branch_hidden", "reduce_channels",
                     "first_stride", "width_divisor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {self.n_classes}")
        if any(c < 1 for c in self.trunk_channels):
            raise ValueError(f"trunk_channels must be positive, got {self.trunk_channels}")
        if not self.input_std > 0:
            raise ValueError(f"input_std must be positive, got {self.input_std}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def desk_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(**overrides)
    if "trunk_channels" not in overrides:
        cfg.trunk_channels = DEFAULT_TRUNK[:cfg.depth]
    return cfg.validate()


def full_config(**overrides) -> ModelConfig:
    """Full-width preset: 375x375 crops, AlexNet-width trunk, stride-4 first stage."""
    base = dict(input_size=375, trunk_channels=(96, 256, 384, 256), first_stride=4,
                branch_hidden=128, width_divisor=1)
    base.update(overrides)
    return ModelConfig(**base).validate()


def mldrnet_trace(config: ModelConfig) -> list[dict]:
    """Per-stage conv/pool spatial sizes; raises ShapeError on underflow."""
    size = config.input_size
    trace = []
    for t in range(config.depth):
        kernel = TRUNK_KERNELS[t]
        stride = config.first_stride if t == 0 else 1
        row = {"stage": t + 1, "in": size, "kernel": kernel, "stride": stride, "pad": 2,
               "channels": config.trunk_channels[t]}
        conv = (size + 4 - kernel) // stride + 1
        row["conv"] = conv
        row["pool"] = conv // 2 if conv >= 2 else 0
        trace.append(row)
        if kernel > size + 4 or conv < 2:
            sizes = ", ".join(f"stage {r['stage']}: in {r['in']} conv {r['conv']} pool {r['pool']}"
                              for r in trace)
            raise ShapeError(f"spatial size underflow for depth {config.depth} at "
                             f"input_size {config.input_size} ({sizes})")
        size = row["pool"]
    return trace


class Model:
    """Shared plumbing: parameter iteration, train/eval mode, kink signatures."""

    def __init__(self, config: ModelConfig):
        self.config = config
        seq = np.random.SeedSequence(config.seed)
        init_seq, drop_seq = seq.spawn(2)
        self.init_rng = np.random.Generator(np.random.PCG64(init_seq))
        self.rng = np.random.Generator(np.random.PCG64(drop_seq))
        self._named_layers: list[tuple[str, object]] = []
        self._forward_done = False

    def _add(self, name, layer):
        self._named_layers.append((name, layer))
        return layer

    @property
    def layers(self):
        return [layer for _, layer in self._named_layers]

    def named_parameters(self):
        for name, layer in self._named_layers:
            yield from layer.named_parameters(prefix=name + ".")

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def parameter_count(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def train(self, mode=True):
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def kink_signature(self) -> bytes:
        return b"".join(layer.kink_signature() for layer in self.layers)

    @property
    def input_grad(self) -> bool:
        return self._first_conv.input_grad

    @input_grad.setter
    def input_grad(self, value: bool):
        self._first_conv.input_grad = value

    def _check_images(self, images):
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ValueError(f"expected images of shape [N, 3, {s}, {s}], got {images.shape}")
        return (images - self.config.input_mean) / self.config.input_std

    def _input_grad(self, g):
        return None if g is None else g / self.config.input_std


def _run(layers, x):
    for layer in layers:
        x = layer.forward(x)
    return x


def _run_back(layers, g):
    for layer in reversed(layers):
        g = layer.backward(g)
    return g


class MldrNet(Model):
    """Conv trunk with a classification branch after every stage and a fusion head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.trace = mldrnet_trace(config)
        super().__init__(config)
        rng, n = self.init_rng, config.n_classes
        self.stages, self.branches = [], []
        in_ch = 3
        for t, row in enumerate(self.trace):
            ch = row["channels"]
            stage = [
                self._add(f"trunk.{t}.conv", Conv2d(in_ch, ch, row["kernel"], row["stride"], 2, rng,
                                                    input_grad=t > 0)),
                self._add(f"trunk.{t}.relu", ReLU()),
                self._add(f"trunk.{t}.pool", MaxPool2d(2, 2)),
            ]
            self.stages.append(stage)
            in_ch = ch
        for t, row in enumerate(self.trace):
            branch = [
                self._add(f"branch.{t}.reduce", Conv2d(row["channels"], config.reduce_channels, 1, 1, 0, rng)),
                self._add(f"branch.{t}.relu0", ReLU()),
                self._add(f"branch.{t}.gap", AvgPool2d(None)),
                self._add(f"branch.{t}.flatten", Flatten()),
                self._add(f"branch.{t}.fc1", Linear(config.reduce_channels, config.branch_hidden, rng)),
                self._add(f"branch.{t}.relu1", ReLU()),
            ]
            if config.dropout_rate > 0:
                branch.append(self._add(f"branch.{t}.dropout", Dropout(config.dropout_rate, self.rng)))
            branch.append(self._add(f"branch.{t}.fc2", Linear(config.branch_hidden, n, rng)))
            self.branches.append(branch)
        self.fusion = Fusion(config.fusion)
        self.concat_head = None
        if config.fusion == "concat":
            self.concat_head = self._add("head", Linear(config.depth * n, n, rng))
        self._first_conv = self.stages[0][0]

    def forward(self, images):
        images = ndcore.as_tensor(images)
        h = self._check_images(images)
        branch_logits = []
        for stage, branch in zip(self.stages, self.branches):
            h = _run(stage, h)
            branch_logits.append(_run(branch, h))
        fused = self.fusion.forward(branch_logits)
        if self.concat_head is not None:
            fused = self.concat_head.forward(fused)
        self._forward_done = True
        return branch_logits, fused

    def backward(self, grad_logits):
        """Populate parameter grads; returns the input gradient when ``input_grad`` is set."""
        if not self._forward_done:
            raise RuntimeError("model backward called before forward")
        g = ndcore.as_tensor(grad_logits)
        if self.concat_head is not None:
            g = self.concat_head.backward(g)
        tap_grads = [_run_back(branch, gb) for branch, gb in zip(self.branches, self.fusion.backward(g))]
        g_tap = tap_grads[-1]
        for t in range(len(self.stages) - 1, -1, -1):
            g_in = _run_back(self.stages[t], g_tap)
            if t > 0:
                g_tap = g_in + tap_grads[t - 1]
        return self._input_grad(g_in)


# desk-scale layouts for the baselines; widths are full widths // width_divisor
_ALEXNET_CONVS = [(96, 11, 2), (256, 5, 2), (384, 3, 1), (384, 3, 1), (256, 3, 1)]
_ALEXNET_POOL_AFTER = {0, 1, 4}
_ACNN_CONVS = [(96, 11, 2), (256, 5, 2), (384, 3, 1), (256, 3, 1)]
_TCNN_CONVS = [(96, 11, 2), (256, 5, 2)]


class SequentialNet(Model):
    """Single-path baselines: alexnet_like, acnn and tcnn (energy layer)."""

    def __init__(self, config: ModelConfig):
        config.validate()
        super().__init__(config)
        rng, div = self.init_rng, config.width_divisor
        arch = config.arch
        if arch == "alexnet_like":
            convs, pools, fcs = _ALEXNET_CONVS, _ALEXNET_POOL_AFTER, (4096, 4096)
        elif arch == "acnn":
            convs, pools, fcs = _ACNN_CONVS, {0, 1}, (1000, 256)
        elif arch == "tcnn":
            convs, pools, fcs = _TCNN_CONVS, {0}, (4096, 4096)
        else:
            raise ValueError(f"SequentialNet does not build arch {arch!r}")
        self.path = []
        in_ch, size = 3, config.input_size
        trace = []
        for t, (width, kernel, pad) in enumerate(convs):
            ch = max(1, width // div)
            stride = config.first_stride if t == 0 else 1
            if kernel > size + 2 * pad:
                raise ShapeError(f"{arch}: spatial size underflow at conv {t + 1} (trace {trace}, in {size})")
            size = (size + 2 * pad - kernel) // stride + 1
            self.path += [self._add(f"conv{t}", Conv2d(in_ch, ch, kernel, stride, pad, rng, input_grad=t > 0)),
                          self._add(f"relu{t}", ReLU())]
            if t in pools:
                if size < 3:
                    raise ShapeError(f"{arch}: spatial size underflow at pool {t + 1} (trace {trace}, in {size})")
                self.path.append(self._add(f"pool{t}", MaxPool2d(3, 2)))
                size = (size - 3) // 2 + 1
            trace.append(size)
            in_ch = ch
        if arch == "tcnn":
            # energy layer: average over the whole remaining map
            self.path.append(self._add("energy", AvgPool2d(None)))
            size = 1
        self.trace = trace
        self.path.append(self._add("flatten", Flatten()))
        feat = in_ch * size * size
        for i, width in enumerate(fcs):
            w = max(1, width // div)
            self.path += [self._add(f"fc{i}", Linear(feat, w, rng)), self._add(f"fc{i}.relu", ReLU())]
            if config.dropout_rate > 0:
                self.path.append(self._add(f"fc{i}.dropout", Dropout(config.dropout_rate, self.rng)))
            feat = w
        self.path.append(self._add("out", Linear(feat, config.n_classes, rng)))
        self._first_conv = self.path[0]
        self.fusion = None

    def forward(self, images):
        images = ndcore.as_tensor(images)
        logits = _run(self.path, self._check_images(images))
        self._forward_done = True
        return [logits], logits

    def backward(self, grad_logits):
        if not self._forward_done:
            raise RuntimeError("model backward called before forward")
        return self._input_grad(_run_back(self.path, ndcore.as_tensor(grad_logits)))


def build(config: ModelConfig) -> Model:
    config.validate()
    if config.arch == "mldrnet":
        return MldrNet(config)
    return SequentialNet(config)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MLDR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save(model: Model, path, velocity=None, epoch: int = 0, meta=None):
    """Write parameters, optimizer velocity and bookkeeping to ``path``.

    Layout: b"MLDR", u32 version, u32 header length + UTF-8 JSON header
    (config, epoch, dropout rng state, meta), u32 tensor count, then per tensor
    u32 name length, name, u32 rank, u64 extents, float64 LE data.
    """
    header = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "rng_state": model.rng.bit_generator.state,
        "meta": meta or {},
    }
    text = json.dumps(header, sort_keys=True).encode()
    tensors = [("param/" + name, p) for name, p, _ in model.named_parameters()]
    tensors += [("velocity/" + name, v) for name, v in sorted((velocity or {}).items())]
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text,
              struct.pack("<I", len(tensors))]
    chunks += [_pack_tensor(name, arr) for name, arr in tensors]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    config = ModelConfig.from_dict(header["config"])
    model = build(config)
    params = model.parameters()
    (count,) = r.unpack("<I")
    velocity, seen = {}, set()
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, pname = name.partition("/")
        if pname not in params:
            raise CheckpointShapeError(f"{path}: tensor {name!r} does not exist in the configured model")
        if tuple(shape) != params[pname].shape:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {tuple(shape)}, "
                                       f"config implies {params[pname].shape}")
        if kind == "param":
            params[pname][...] = arr
            seen.add(pname)
        elif kind == "velocity":
            velocity[pname] = arr.copy()
        else:
            raise CheckpointError(f"{path}: unknown tensor group {kind!r}")
    missing = set(params) - seen
    if missing:
        raise CheckpointShapeError(f"{path}: missing parameters {sorted(missing)}")
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    model.rng.bit_generator.state = header["rng_state"]
    return Checkpoint(model, velocity, header["epoch"], header.get("meta", {}))
