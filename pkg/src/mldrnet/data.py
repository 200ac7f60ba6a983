"""Datasets: record-file I/O, split/noise/fold protocols, crops and a synthetic generator."""

from __future__ import annotations

import colorsys
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

EMOTIONS = ("amusement", "awe", "contentment", "excitement", "anger", "disgust", "fear", "sadness")


class DatasetError(ValueError):
    pass


class CorruptHeaderError(DatasetError):
    pass


class TruncatedRecordError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


def default_class_names(n: int) -> tuple:
    if n == len(EMOTIONS):
        return EMOTIONS
    return tuple(f"class{i}" for i in range(n))


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # [3, H, W], values in [0, 1]
    label: int
    id: str


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    class_names: tuple = EMOTIONS

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        n = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < n:
                raise LabelRangeError(f"sample {s.id!r}: label {s.label} outside 0..{n - 1}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self, idx=None) -> np.ndarray:
        picked = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in picked]) if picked else np.zeros((0, 3, 0, 0))

    def labels(self, idx=None) -> np.ndarray:
        picked = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.array([s.label for s in picked], dtype=np.int64)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.class_names)

    @property
    def image_size(self) -> int:
        return self.samples[0].image.shape[-1] if self.samples else 0


# ------------------------------------------------------------------ record files

MAGIC = b"MLDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIHHB")


def store(dataset: Dataset, path):
    """Write ``dataset`` as an MLDS record file; pixels are quantized to 8 bits."""
    if dataset.samples:
        c, h, w = dataset.samples[0].image.shape
    else:
        c, h, w = 3, 0, 0
    chunks = [_HEADER.pack(MAGIC, VERSION, len(dataset), dataset.n_classes, h, w, c)]
    for s in dataset.samples:
        if s.image.shape != (c, h, w):
            raise DatasetError(f"sample {s.id!r} has shape {s.image.shape}, expected {(c, h, w)}")
        raw_id = s.id.encode()
        pixels = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        chunks.append(struct.pack("<BH", s.label, len(raw_id)) + raw_id + pixels.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load(path, class_names=None) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        return Dataset([], class_names or EMOTIONS)
    if len(data) < _HEADER.size:
        raise CorruptHeaderError(f"{path}: header is {len(data)} bytes, need {_HEADER.size}")
    magic, version, count, n_classes, h, w, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    if n_classes < 1 or n_classes > 256:
        raise CorruptHeaderError(f"{path}: implausible class count {n_classes}")
    names = tuple(class_names) if class_names else default_class_names(n_classes)
    if len(names) != n_classes:
        raise CorruptHeaderError(f"{path}: {len(names)} class names for {n_classes} classes")
    npix = c * h * w
    pos = _HEADER.size
    samples = []
    for k in range(count):
        if pos + 3 > len(data):
            raise TruncatedRecordError(f"{path}: record {k} truncated")
        label, id_len = struct.unpack_from("<BH", data, pos)
        pos += 3
        if pos + id_len + npix > len(data):
            raise TruncatedRecordError(f"{path}: record {k} truncated")
        sid = data[pos:pos + id_len].decode()
        pos += id_len
        if label >= n_classes:
            raise LabelRangeError(f"{path}: record {k} ({sid!r}) has label {label}, n_classes {n_classes}")
        pixels = np.frombuffer(data, dtype=np.uint8, count=npix, offset=pos)
        pos += npix
        samples.append(Sample(pixels.reshape(c, h, w) / 255.0, int(label), sid))
    if pos != len(data):
        raise DatasetError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return Dataset(samples, names)


# ------------------------------------------------------------------ protocols

def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def split_sizes(count: int, fractions) -> tuple:
    """(train, test, val) sizes: test/val are floor(count*f), at least 1 when f > 0; train takes the rest."""
    f_train, f_test, f_val = fractions
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    sizes = []
    for f in (f_test, f_val):
        k = math.floor(count * f + 1e-9)
        if f > 0 and count > 0:
            k = max(k, 1)
        sizes.append(k)
    test, val = sizes
    train = count - test - val
    if train < 0:
        raise ValueError(f"cannot split {count} samples at {fractions}")
    return train, test, val


def split(dataset: Dataset, fractions=(0.8, 0.15, 0.05), seed=0):
    """Seeded shuffle into disjoint (train, test, val) datasets."""
    n_train, n_test, _ = split_sizes(len(dataset), fractions)
    perm = _rng(seed).permutation(len(dataset))
    return (dataset.subset(perm[:n_train]),
            dataset.subset(perm[n_train:n_train + n_test]),
            dataset.subset(perm[n_train + n_test:]))


def make_noisy(well: Dataset, extra: Dataset) -> Dataset:
    """Training set built from the well-labeled set plus extra, unverified samples."""
    if well.class_names != extra.class_names:
        raise ValueError(f"class names differ: {well.class_names} vs {extra.class_names}")
    return Dataset(well.samples + extra.samples, well.class_names)


def inject_label_noise(dataset: Dataset, rate: float, seed=0) -> Dataset:
    """Relabel round(rate * count) samples, chosen at random, to a different random class."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must be in [0, 1], got {rate}")
    n = dataset.n_classes
    rng = _rng(seed)
    k = int(round(rate * len(dataset)))
    chosen = rng.choice(len(dataset), size=k, replace=False) if k else []
    samples = list(dataset.samples)
    for i in sorted(int(j) for j in chosen):
        s = samples[i]
        # uniform over the n-1 wrong classes
        new = (s.label + 1 + int(rng.integers(n - 1))) % n
        samples[i] = replace(s, label=new)
    return Dataset(samples, dataset.class_names)


def crops(image, crop_size: int) -> list:
    """Center crop followed by top-left, top-right, bottom-left, bottom-right crops."""
    image = np.asarray(image)
    s = image.shape[-1]
    if crop_size > s or crop_size > image.shape[-2]:
        raise ValueError(f"crop size {crop_size} exceeds image size {image.shape[-2:]}")
    h = image.shape[-2]
    cy, cx = (h - crop_size) // 2, (s - crop_size) // 2
    offsets = [(cy, cx), (0, 0), (0, s - crop_size), (h - crop_size, 0), (h - crop_size, s - crop_size)]
    return [image[..., y:y + crop_size, x:x + crop_size].copy() for y, x in offsets]


def kfold(dataset: Dataset, k: int, seed=0) -> list:
    """k (train, test) pairs over near-equal disjoint folds; earlier folds take the remainder."""
    n = len(dataset)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    perm = _rng(seed).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    bounds = np.cumsum([0] + sizes)
    pairs = []
    for i in range(k):
        test_idx = perm[bounds[i]:bounds[i + 1]]
        train_idx = np.concatenate([perm[:bounds[i]], perm[bounds[i + 1]:]])
        pairs.append((dataset.subset(train_idx), dataset.subset(test_idx)))
    return pairs


def one_vs_all(dataset: Dataset, positive_class: int) -> Dataset:
    n = dataset.n_classes
    if not 0 <= positive_class < n:
        raise ValueError(f"positive class {positive_class} outside 0..{n - 1}")
    samples = [replace(s, label=int(s.label == positive_class)) for s in dataset.samples]
    return Dataset(samples, ("other", dataset.class_names[positive_class]))


# ------------------------------------------------------------------ synthetic data

@dataclass
class SynthSpec:
    count: int
    image_size: int = 64
    cue_mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    noise_sigma: float = 0.05
    seed: int = 0
    n_classes: int = 8
    # render every sample without its cue (chance-level control)
    blank_cues: bool = False

    def validate(self):
        if self.count < 0:
            raise ValueError(f"count must be non-negative, got {self.count}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be at least 16, got {self.image_size}")
        if len(self.cue_mix) != 3 or min(self.cue_mix) < 0 or abs(sum(self.cue_mix) - 1.0) > 1e-9:
            raise ValueError(f"cue_mix must be three non-negative weights summing to 1, got {self.cue_mix}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 2 <= self.n_classes <= 8:
            raise ValueError(f"synthetic data supports 2..8 classes, got {self.n_classes}")
        return self


_HUES = [colorsys.hsv_to_rgb(i / 8, 0.85, 0.95) for i in range(8)]
# eight thirds-grid cells, centre cell excluded
_THIRDS = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)]
_BACKGROUND = 0.5


def _disc(yy, xx, cy, cx, radius):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _low_cue(label, s, yy, xx, rng):
    # dominant hue plus stripe frequency, random orientation and phase
    freq = (3, 5)[label % 2] / s
    theta = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    color = np.array(_HUES[label])[:, None, None]
    return color * (0.55 + 0.45 * stripes)


def _mid_cue(label, s, yy, xx, rng):
    # bright region in one of eight thirds-grid cells
    r, c = _THIRDS[label]
    cy = (2 * r + 1) * s / 6 + rng.uniform(-s / 32, s / 32)
    cx = (2 * c + 1) * s / 6 + rng.uniform(-s / 32, s / 32)
    img = np.full((3, s, s), _BACKGROUND)
    img[:, _disc(yy, xx, cy, cx, s / 10)] = 0.95
    return img


def _high_cue(label, s, yy, xx, rng):
    # large triangle marked at its vertices: one white vertex, two black ones;
    # the class is the rotation (multiples of 45 degrees)
    radius = 0.26 * s
    margin = radius + s / 16
    cy, cx = rng.uniform(margin, s - margin, size=2)
    base = label * math.pi / 4
    img = np.full((3, s, s), _BACKGROUND)
    dot = s / 22
    for v, value in enumerate((1.0, 0.0, 0.0)):
        ang = base + v * 2 * math.pi / 3
        img[:, _disc(yy, xx, cy - radius * math.sin(ang), cx + radius * math.cos(ang), dot)] = value
    return img


_CUES = (_low_cue, _mid_cue, _high_cue)


def synth(spec: SynthSpec) -> Dataset:
    """Seed-deterministic images whose label is carried by one low-, mid- or high-level cue.

    Labels are assigned round-robin.  Each sample draws its cue level from
    ``cue_mix``; the other levels are absent (flat grey), so a model that cannot
    read a level is at chance on the samples carrying it.
    """
    spec.validate()
    rng = _rng(spec.seed)
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    levels = rng.choice(3, size=spec.count, p=np.asarray(spec.cue_mix, dtype=np.float64))
    samples = []
    for i in range(spec.count):
        label = i % spec.n_classes
        level = int(levels[i])
        img = _CUES[level](label, s, yy, xx, rng)
        if spec.blank_cues:
            img = np.full((3, s, s), _BACKGROUND)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        samples.append(Sample(img, label, f"synth-{spec.seed}-{i:06d}-L{level}"))
    return Dataset(samples, default_class_names(spec.n_classes))
