"""Synthetic segmentation data and the SETF tensor container.

SETF layout (all integers little-endian)::

    b"SETF" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | dtype u8 | rank u8
               | extents u64 * rank | raw payload

dtype codes: 0 = float64, 1 = uint32.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

MAGIC = b"SETF"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<u4"): 1}


class TensorFileError(ValueError):
    pass


class TensorFileVersionError(TensorFileError):
    pass


class TensorFileCorruptError(TensorFileError):
    pass


# -----------------------------------------------------------------------------
# Tensor files
# -----------------------------------------------------------------------------


def _encode(named: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "ui":
            if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
                raise TensorFileError(f"entry {name!r}: integer values do not fit in u32")
            arr = arr.astype("<u4", copy=False)
        else:
            raise TensorFileError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise TensorFileError(f"entry name too long: {name[:40]!r}...")
        if arr.ndim > 255:
            raise TensorFileError(f"entry {name!r}: rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor_file(path, named: Dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` (float -> f64, integer -> u32)."""
    if len(set(named)) != len(named):
        raise TensorFileError("entry names must be unique")
    atomic_write_bytes(path, _encode(named))


def read_tensor_file(path) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    return decode_tensor_file(buf, source=str(path))


def decode_tensor_file(buf: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    pos = 0
    entry = "<header>"

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TensorFileCorruptError(
                f"{source}: truncated while reading {entry} at byte offset {pos} "
                f"(needed {n} bytes, {len(buf) - pos} left)"
            )
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise TensorFileCorruptError(f"{source}: bad magic bytes, not a SETF file")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise TensorFileVersionError(f"{source}: unsupported SETF version {version} (this reader handles {VERSION})")

    out: Dict[str, np.ndarray] = {}
    for k in range(count):
        entry = f"entry #{k} name"
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFileCorruptError(f"{source}: entry #{k} name is not valid UTF-8") from exc
        entry = f"entry {name!r}"
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise TensorFileCorruptError(f"{source}: entry {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        entry = f"payload of entry {name!r}"
        payload = take(nbytes)
        if name in out:
            raise TensorFileCorruptError(f"{source}: duplicate entry {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if pos != len(buf):
        raise TensorFileCorruptError(f"{source}: {len(buf) - pos} trailing bytes after last entry")
    return out


# -----------------------------------------------------------------------------
# Synthetic dataset
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    num_train: int = 200
    num_val: int = 25
    num_test: int = 25
    size: int = 32
    num_classes: int = 4
    shapes_per_image: Tuple[int, int] = (3, 6)
    intensity_separation: float = 1.0
    noise_std: float = 0.08
    class_size_skew: float = 1.5
    label_noise: float = 0.0
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.size < 16 or self.size % 16:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        if min(self.num_train, self.num_val, self.num_test) < 1:
            raise ValueError("every split needs at least one sample")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"shapes_per_image must be a range lo <= hi with lo >= 1, got {self.shapes_per_image}")
        if not 0 < self.intensity_separation <= 1:
            raise ValueError(f"intensity_separation must lie in (0, 1], got {self.intensity_separation}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.class_size_skew < 1:
            raise ValueError(f"class_size_skew must be >= 1, got {self.class_size_skew}")
        if not 0 <= self.label_noise < 1:
            raise ValueError(f"label_noise must lie in [0, 1), got {self.label_noise}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d


@dataclass
class SegmentationSample:
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    label: np.ndarray  # (H, W) int64 in [0, K)


@dataclass
class Dataset:
    train: List[SegmentationSample] = field(default_factory=list)
    val: List[SegmentationSample] = field(default_factory=list)
    test: List[SegmentationSample] = field(default_factory=list)

    def split(self, name: str) -> List[SegmentationSample]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


BASE_AREA_FRACTION = 0.12
MAX_REGEN_ATTEMPTS = 5


def class_levels(num_classes: int, separation: float) -> np.ndarray:
    """Mean intensity per class; background is 0."""
    return np.arange(num_classes) * (separation / (num_classes - 1))


def _paint_shape(label: np.ndarray, cls: int, area: float, rng: np.random.Generator) -> None:
    size = label.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0, size, size=2)
    if rng.random() < 0.5:
        aspect = rng.uniform(0.5, 2.0)
        hh = max(1.0, np.sqrt(area * aspect))
        ww = max(1.0, area / hh)
        mask = (np.abs(yy + 0.5 - cy) <= hh / 2) & (np.abs(xx + 0.5 - cx) <= ww / 2)
    else:
        r = max(1.0, np.sqrt(area / np.pi))
        mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    label[mask] = cls


def _make_sample(spec: DatasetSpec, rng: np.random.Generator, extra_shapes: int) -> SegmentationSample:
    size, k = spec.size, spec.num_classes
    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1)) + extra_shapes
    fg = np.arange(1, k)
    classes = list(fg[: min(n_shapes, k - 1)])
    classes += list(rng.integers(1, k, size=n_shapes - len(classes)))
    base = BASE_AREA_FRACTION * size * size
    areas = [base * spec.class_size_skew ** (-(c - 1)) * rng.uniform(0.7, 1.3) for c in classes]
    # largest first: later (smaller) shapes occlude earlier ones
    order = sorted(range(n_shapes), key=lambda i: -areas[i])
    label = np.zeros((size, size), dtype=np.int64)
    for i in order:
        _paint_shape(label, int(classes[i]), areas[i], rng)
    levels = class_levels(k, spec.intensity_separation)
    image = levels[label] + rng.normal(0.0, spec.noise_std, size=label.shape) if spec.noise_std else levels[label]
    image = np.clip(image, 0.0, 1.0)[None]
    return SegmentationSample(image=image.astype(np.float64), label=label)


def _corrupt_labels(label: np.ndarray, fraction: float, k: int, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(label.shape) < fraction
    shift = rng.integers(1, k, size=label.shape)
    return np.where(flip, (label + shift) % k, label)


def generate_synthetic_dataset(spec: DatasetSpec) -> Dataset:
    """Generate train/val/test splits deterministically from ``spec.seed``.

    Non-background class c has mean intensity c * separation / (K - 1) and
    shape area proportional to skew**-(c - 1). If some class ends up absent
    from the training split, generation restarts with extra shapes per image.
    """
    for attempt in range(MAX_REGEN_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        ds = Dataset()
        for split, count in (("train", spec.num_train), ("val", spec.num_val), ("test", spec.num_test)):
            samples = ds.split(split)
            for _ in range(count):
                samples.append(_make_sample(spec, rng, extra_shapes=attempt))
        if spec.label_noise > 0:
            for s in ds.train:
                s.label = _corrupt_labels(s.label, spec.label_noise, spec.num_classes, rng)
        counts = np.bincount(np.concatenate([s.label.ravel() for s in ds.train]), minlength=spec.num_classes)
        missing = [c for c in range(spec.num_classes) if counts[c] == 0]
        if not missing:
            return ds
    raise ValueError(
        f"classes {missing} absent from the training split after {MAX_REGEN_ATTEMPTS} attempts; "
        f"increase num_train or shapes_per_image, or lower class_size_skew"
    )


def split_to_arrays(samples: List[SegmentationSample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return images, labels


def save_split(path, samples: List[SegmentationSample]) -> None:
    named: Dict[str, np.ndarray] = {}
    for i, s in enumerate(samples):
        named[f"image/{i}"] = s.image
        named[f"label/{i}"] = s.label.astype(np.uint32)
    write_tensor_file(path, named)


def load_split(path) -> List[SegmentationSample]:
    named = read_tensor_file(path)
    n = sum(1 for k in named if k.startswith("image/"))
    out = []
    for i in range(n):
        try:
            image, label = named[f"image/{i}"], named[f"label/{i}"]
        except KeyError as exc:
            raise TensorFileCorruptError(f"{path}: missing dataset entry {exc.args[0]!r}") from None
        out.append(SegmentationSample(image=image, label=label.astype(np.int64)))
    return out


def save_dataset(directory, ds: Dataset) -> None:
    for name in ("train", "val", "test"):
        save_split(Path(directory) / f"{name}.setf", ds.split(name))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    return Dataset(*(load_split(d / f"{name}.setf") for name in ("train", "val", "test")))


# -----------------------------------------------------------------------------
# Batching
# -----------------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Shuffled index batches for one epoch; the last batch may be short."""
    if n < 1:
        raise ValueError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(
    samples: List[SegmentationSample], batch_size: int, seed: int, epoch: int
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    images, labels = split_to_arrays(samples)
    for idx in batch_indices(len(samples), batch_size, seed, epoch):
        yield images[idx], labels[idx]
