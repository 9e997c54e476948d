"""Per-channel saliency scores for conv layers.

The domain similarity score of channel ``i`` is the inner product of the
mean normalized activation map of that channel under two domains::

    S_i = < mean_x gamma(T(x^1)_i), mean_x gamma(T(x^2)_i) >

where ``gamma`` flattens a map row-major and scales it to unit Euclidean
norm (all-zero maps stay zero). Low scores mark channels whose responses
differ most between the domains.

Stats file layout (little-endian)::

    magic b"DSST", version uint32, layer_count uint32
    per layer:  id_len uint32 + id bytes, tag_len uint32 + tag bytes,
                channels uint32, map_size uint32, sample_count uint64,
                channels*map_size float64 rows
"""
from __future__ import annotations

import enum
import itertools
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import FormatError, InputError
from .model import ModelSpec, channel_count, forward

STATS_MAGIC = b"DSST"
STATS_VERSION = 1


class Method(str, enum.Enum):
    DSS = "DSS"
    L2 = "L2"
    REVERSE_DSS = "ReverseDSS"
    RANDOM = "Random"

    @classmethod
    def parse(cls, value: "str | Method") -> "Method":
        if isinstance(value, Method):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "").replace(".", "")
        aliases = {"dss": cls.DSS, "l2": cls.L2, "reversedss": cls.REVERSE_DSS, "revdss": cls.REVERSE_DSS,
                   "random": cls.RANDOM}
        if key not in aliases:
            raise InputError(f"unknown score method {value!r}; choose from {[m.value for m in cls]}")
        return aliases[key]


@dataclass
class ActivationStats:
    """Mean normalized activation map per channel, for one domain."""

    domain_tag: str
    sample_count: int
    means: dict[str, np.ndarray] = field(default_factory=dict)  # layer_id -> [channels, h*w]


@dataclass(frozen=True)
class SaliencyScore:
    layer_id: str
    values: np.ndarray
    method: Method

    def __len__(self) -> int:
        return len(self.values)


def gamma(feature_map) -> np.ndarray:
    """Flatten row-major and scale to unit norm; the zero map maps to zero."""
    v = np.asarray(feature_map, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.zeros_like(v)


def _gamma_rows(maps: np.ndarray) -> np.ndarray:
    """Batched gamma over the trailing axis of ``[..., h*w]``."""
    norms = np.sqrt(np.einsum("...k,...k->...", maps, maps))
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms[..., None] > 0, maps / safe[..., None], 0.0)


def collect_stats(
    model: ModelSpec,
    ds: Dataset,
    layers: Iterable[str] | None = None,
    sample_cap: int | None = None,
    batch_size: int = 250,
) -> ActivationStats:
    """Monte Carlo estimate of the mean normalized map per channel.

    Uses the first ``min(N, sample_cap)`` samples in dataset order. Sums are
    accumulated in float64 batch by batch, so memory stays bounded.
    """
    layers = list(model.prunable_layers if layers is None else layers)
    n = len(ds) if sample_cap is None else min(len(ds), int(sample_cap))
    if n <= 0:
        raise InputError(f"cannot collect activation statistics from an empty dataset ({ds.domain_tag})")
    if tuple(ds.shape) != tuple(model.input_shape):
        raise InputError(f"dataset shape {ds.shape} does not match model input {model.input_shape}")

    sums: dict[str, np.ndarray] = {}
    for start in range(0, n, batch_size):
        batch = ds.images[start : min(start + batch_size, n)]
        _, caps = forward(model, batch, capture=layers)
        for lid in layers:
            maps = caps[lid].data
            rows = _gamma_rows(maps.reshape(maps.shape[0], maps.shape[1], -1).astype(np.float64))
            acc = rows.sum(axis=0)
            sums[lid] = acc if lid not in sums else sums[lid] + acc
    return ActivationStats(ds.domain_tag, n, {lid: s / n for lid, s in sums.items()})


def _layer_means(stats: ActivationStats, layer_id: str) -> np.ndarray:
    if layer_id not in stats.means:
        raise InputError(f"stats for domain {stats.domain_tag!r} have no layer {layer_id!r}")
    if stats.sample_count <= 0:
        raise InputError(f"stats for domain {stats.domain_tag!r} are empty")
    return stats.means[layer_id]


def dss_scores(src: ActivationStats, tgt: ActivationStats, layer_id: str) -> SaliencyScore:
    a = _layer_means(src, layer_id)
    b = _layer_means(tgt, layer_id)
    if a.shape != b.shape:
        raise InputError(
            f"{layer_id}: source stats have shape {a.shape} but target stats {b.shape}; "
            "were they collected from different model versions?"
        )
    return SaliencyScore(layer_id, np.einsum("ik,ik->i", a, b), Method.DSS)


def multi_domain_dss(stats: Sequence[ActivationStats], layer_id: str) -> SaliencyScore:
    """Mean DSS over all unordered pairs of the given domains."""
    if len(stats) < 2:
        raise InputError(f"multi-domain DSS needs at least two domains, got {len(stats)}")
    pairs = [dss_scores(a, b, layer_id).values for a, b in itertools.combinations(stats, 2)]
    return SaliencyScore(layer_id, np.mean(pairs, axis=0), Method.DSS)


def l2_scores(model: ModelSpec, layer_id: str) -> SaliencyScore:
    """Frobenius norm of each output channel's kernel (bias excluded)."""
    channel_count(model, layer_id)
    w = model.layer(layer_id).params["weight"].data.astype(np.float64)
    return SaliencyScore(layer_id, np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1)), Method.L2)


def reverse_scores(s: SaliencyScore) -> SaliencyScore:
    return SaliencyScore(s.layer_id, -s.values, Method.REVERSE_DSS)


def random_scores(model: ModelSpec, layer_id: str, seed: int) -> SaliencyScore:
    c = channel_count(model, layer_id)
    rng = np.random.default_rng([seed, zlib.crc32(layer_id.encode())])
    return SaliencyScore(layer_id, rng.random(c), Method.RANDOM)


def score_layers(
    model: ModelSpec,
    method: Method | str,
    src: ActivationStats | None = None,
    tgt: ActivationStats | None = None,
    seed: int = 0,
    layers: Iterable[str] | None = None,
) -> dict[str, SaliencyScore]:
    method = Method.parse(method)
    out = {}
    for lid in model.prunable_layers if layers is None else layers:
        if method in (Method.DSS, Method.REVERSE_DSS):
            if src is None or tgt is None:
                raise InputError(f"{method.value} scores need source and target activation stats")
            s = dss_scores(src, tgt, lid)
            out[lid] = reverse_scores(s) if method is Method.REVERSE_DSS else s
        elif method is Method.L2:
            out[lid] = l2_scores(model, lid)
        else:
            out[lid] = random_scores(model, lid, seed)
    return out


# --------------------------------------------------------------------- I/O


def save_stats(stats: ActivationStats, path) -> None:
    tag = stats.domain_tag.encode("utf-8")
    parts = [STATS_MAGIC, struct.pack("<II", STATS_VERSION, len(stats.means))]
    for lid, rows in stats.means.items():
        lid_b = lid.encode("utf-8")
        c, k = rows.shape
        parts += [
            struct.pack("<I", len(lid_b)), lid_b,
            struct.pack("<I", len(tag)), tag,
            struct.pack("<IIQ", c, k, stats.sample_count),
            np.ascontiguousarray(rows, dtype="<f8").tobytes(),
        ]
    Path(path).write_bytes(b"".join(parts))


def load_stats(path) -> ActivationStats:
    buf = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated at byte {len(buf)} (needed {pos + nbytes})")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    if take(4) != STATS_MAGIC:
        raise FormatError(f"{path}: not an activation stats file")
    version, count = struct.unpack("<II", take(8))
    if version != STATS_VERSION:
        raise FormatError(f"{path}: unsupported stats version {version}")
    tag, samples, means = None, None, {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        lid = take(n).decode("utf-8")
        (n,) = struct.unpack("<I", take(4))
        layer_tag = take(n).decode("utf-8")
        c, k, layer_samples = struct.unpack("<IIQ", take(16))
        if tag is not None and (layer_tag, layer_samples) != (tag, samples):
            raise FormatError(f"{path}: layers disagree on domain tag or sample count")
        tag, samples = layer_tag, layer_samples
        means[lid] = np.frombuffer(take(8 * c * k), dtype="<f8").reshape(c, k).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return ActivationStats(tag or "", samples or 0, means)
