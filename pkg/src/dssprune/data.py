"""MNIST IDX loading, MNIST-M style target synthesis and batching.

Dataset container layout (all integers little-endian)::

    magic    4 bytes  b"DSDS"
    version  uint32   1
    N, c, h, w        uint32 x 4
    tag_len  uint32, followed by tag_len bytes of UTF-8 domain tag
    pixels   N*c*h*w float32
    labels   N int32
"""
from __future__ import annotations

import enum
import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CONTAINER_MAGIC = b"DSDS"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [N, c, h, w] in [0, 1]
    labels: np.ndarray  # int64 [N]
    domain_tag: str = "source"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be [N, c, h, w], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, start: int, stop: int | None = None) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.domain_tag)

    def validate(self, class_count: int) -> None:
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError(f"{self.domain_tag}: pixel values must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= class_count):
            raise InputError(f"{self.domain_tag}: labels must lie in [0, {class_count})")

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i4").tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------------ IDX


def _read_header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError(f"{what}: stream truncated at byte {len(buf)} while reading the magic number")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(buf) < need:
        raise FormatError(f"{what}: stream truncated at byte {len(buf)} inside the {need}-byte header")
    return struct.unpack_from(">" + "I" * ndim, buf, 4)


def parse_idx_images(buf: bytes) -> np.ndarray:
    """Decode an IDX3 image stream into float32 ``[N, 1, rows, cols]`` scaled to [0, 1]."""
    n, rows, cols = _read_header(buf, IDX_IMAGES_MAGIC, 3, "idx images")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise FormatError(f"idx images: stream truncated at byte {len(buf)}, expected {need} bytes")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return (pixels.astype(np.float32) / np.float32(255)).reshape(n, 1, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (n,) = _read_header(buf, IDX_LABELS_MAGIC, 1, "idx labels")
    if len(buf) < 8 + n:
        raise FormatError(f"idx labels: stream truncated at byte {len(buf)}, expected {8 + n} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def encode_idx_images(pixels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx_images` for uint8 ``[N, rows, cols]`` arrays."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx_pair(images_path, labels_path, domain_tag: str = "source") -> Dataset:
    images = parse_idx_images(_read_maybe_gzip(Path(images_path)))
    labels = parse_idx_labels(_read_maybe_gzip(Path(labels_path)))
    return Dataset(images, labels, domain_tag)


def find_idx_files(directory) -> list[tuple[Path, Path]]:
    """Locate ``(images, labels)`` IDX pairs in a directory, training files first.

    Matches the usual ``<prefix>-images-idx3-ubyte[.gz]`` /
    ``<prefix>-labels-idx1-ubyte[.gz]`` naming (and the ``.``-separated
    variant); ``t10k`` files sort after everything else.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"MNIST directory not found: {directory}")
    pairs = []
    for img in sorted(directory.iterdir()):
        name = img.name
        for sep in ("-", "."):
            token = f"{sep}images{sep}idx3{sep}ubyte"
            if token in name:
                lab = directory / name.replace(token, f"{sep}labels{sep}idx1{sep}ubyte")
                if lab.exists():
                    pairs.append((img, lab))
    if not pairs:
        raise FileNotFoundError(f"no IDX image/label files in {directory}")
    pairs.sort(key=lambda p: (p[0].name.startswith("t10k"), p[0].name))
    return pairs


def load_mnist(directory, train_size: int, eval_size: int) -> tuple[Dataset, Dataset]:
    """Grayscale train/eval splits.

    With a separate ``t10k`` pair present the eval split comes from it;
    otherwise both splits are consecutive slices of the single pair.
    """
    pairs = find_idx_files(directory)
    first = load_idx_pair(*pairs[0])
    if len(pairs) > 1 and pairs[-1][0].name.startswith("t10k"):
        test = load_idx_pair(*pairs[-1])
        if len(first) < train_size or len(test) < eval_size:
            raise InputError(f"requested {train_size}/{eval_size} samples, files hold {len(first)}/{len(test)}")
        return first.subset(0, train_size), test.subset(0, eval_size)
    if len(first) < train_size + eval_size:
        raise InputError(f"requested {train_size}+{eval_size} samples but {pairs[0][0]} holds {len(first)}")
    return first.subset(0, train_size), first.subset(train_size, train_size + eval_size)


# ----------------------------------------------------------------- synthesis


class BackgroundMode(str, enum.Enum):
    IMAGE_DIRECTORY = "images"
    PROCEDURAL = "procedural"


@dataclass(frozen=True)
class BackgroundSource:
    mode: BackgroundMode = BackgroundMode.PROCEDURAL
    path: str | None = None
    seed: int = 0
    bank_size: int = 32
    bank_resolution: int = 128


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled ``cells x cells`` uniform noise covering ``size x size``."""
    grid = rng.random((cells + 1, cells + 1))
    pos = np.linspace(0, cells, size, endpoint=False)
    i = pos.astype(int)
    f = pos - i
    f = f * f * (3 - 2 * f)
    rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def procedural_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Seeded multi-scale coloured noise image, float64 ``[3, size, size]`` in [0, 1]."""
    out = np.zeros((3, size, size))
    for cells, weight in ((2, 1.0), (4, 0.6), (8, 0.35), (16, 0.2), (32, 0.12)):
        base = _value_noise(rng, size, cells)
        # shared luminance plus per-channel tint gives coloured regions, not grey noise
        tint = rng.uniform(0.2, 1.0, size=3)
        for ch in range(3):
            out[ch] += weight * (0.5 * base + 0.5 * _value_noise(rng, size, cells)) * tint[ch]
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return (out - lo) / np.maximum(hi - lo, 1e-12)


def _background_bank(bg: BackgroundSource) -> list[np.ndarray]:
    if bg.mode is BackgroundMode.PROCEDURAL:
        rng = np.random.default_rng([bg.seed, 0x7E87])
        return [procedural_texture(rng, bg.bank_resolution) for _ in range(bg.bank_size)]

    from PIL import Image, UnidentifiedImageError

    if not bg.path or not Path(bg.path).is_dir():
        raise ConfigError(f"background directory not found: {bg.path}")
    bank = []
    for p in sorted(Path(bg.path).iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError):
            continue
        bank.append(arr.transpose(2, 0, 1))
    if not bank:
        raise ConfigError(f"background directory {bg.path} contains no decodable colour images")
    return bank


def synth_mnistm(
    mnist: Dataset, bg: BackgroundSource | None = None, seed: int = 0, index_offset: int = 0
) -> Dataset:
    """Blend each digit over a random colour patch: ``out = |patch - digit|`` per channel.

    Sample ``i`` draws from its own RNG stream keyed by
    ``(seed, index_offset + i)``, so output does not depend on processing
    order and disjoint slices of one source get disjoint streams.
    """
    bg = bg or BackgroundSource()
    n, c, h, w = mnist.images.shape
    if c != 1:
        raise InputError(f"synth_mnistm expects grayscale digits, got {c} channels")
    bank = _background_bank(bg)
    usable = [b for b in bank if b.shape[1] >= h and b.shape[2] >= w]
    if not usable:
        raise ConfigError(f"no background image is at least {h}x{w}")
    out = np.empty((n, 3, h, w), dtype=np.float32)
    for idx in range(n):
        rng = np.random.default_rng([seed, index_offset + idx])
        src = usable[rng.integers(len(usable))]
        y = rng.integers(src.shape[1] - h + 1)
        x = rng.integers(src.shape[2] - w + 1)
        patch = src[:, y : y + h, x : x + w].astype(np.float32)
        out[idx] = np.abs(patch - mnist.images[idx])
    return Dataset(out, mnist.labels.copy(), "target")


def grayscale_to_rgb(ds: Dataset) -> Dataset:
    if ds.images.shape[1] != 1:
        raise InputError(f"expected a single-channel dataset, got {ds.images.shape[1]} channels")
    return Dataset(np.repeat(ds.images, 3, axis=1), ds.labels.copy(), ds.domain_tag)


def make_batches(
    ds: Dataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` covering every sample once; the last batch may be short."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = None if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        if order is None:
            yield ds.images[start : start + batch_size], ds.labels[start : start + batch_size]
        else:
            sel = order[start : start + batch_size]
            yield ds.images[sel], ds.labels[sel]


# ---------------------------------------------------------------- container


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    tag = ds.domain_tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, n, c, h, w, len(tag)))
        f.write(tag)
        f.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, version, n, c, h, w, tag_len = _HEADER.unpack_from(buf, 0)
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a dataset container (magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    off = _HEADER.size
    pix = n * c * h * w * 4
    need = off + tag_len + pix + n * 4
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    tag = buf[off : off + tag_len].decode("utf-8")
    off += tag_len
    images = np.frombuffer(buf, dtype="<f4", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off + pix).astype(np.int64)
    return Dataset(images.astype(np.float32), labels, tag)
