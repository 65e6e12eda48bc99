"""Feature-level synthetic datasets where the class signal is local.

Each sample is a P x d_img patch matrix. Up to ``foreground`` patches are
noisy copies of the class prototype; the rest are drawn from a clutter pool
shared by every class, so clutter carries no label information.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimensionMismatch, RecordLengthMismatch
from .numerics import Rng, mix_seed

CACHE_MAGIC = b"CPFC1"
_HEADER = struct.Struct("<4I")
_LABEL = struct.Struct("<I")

_PROTO_STREAM = 0x9A07
_POOL_STREAM = 0xC177
_SAMPLE_STREAM = 0x5A3E
_SPLIT_STREAM = 0x5B17
_SHOT_STREAM = 0x5407


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetDescriptor:
    num_classes: int = 8
    split_fraction: float = 0.5
    patches: int = 9
    d_img: int = 16
    foreground: int = 3
    clutter_pool_size: int = 32
    noise_sigma: float = 0.3
    salience: float = 1.0
    samples_per_class: int = 50
    seed: int = 0
    clutter_seed: int | None = None  # defaults to seed; share it across a transfer pair

    def __post_init__(self):
        if self.num_classes < 2:
            raise DescriptorError("num_classes must be at least 2")
        if not 0 <= self.foreground <= self.patches:
            raise DescriptorError(
                f"foreground patch count f={self.foreground} must satisfy 0 <= f <= P={self.patches}")
        if self.patches < 1 or self.d_img < 1:
            raise DescriptorError("patches and d_img must be positive")
        if not 0.0 <= self.salience <= 1.0:
            raise DescriptorError("salience must lie in [0, 1]")
        if not 0.0 <= self.split_fraction <= 1.0:
            raise DescriptorError("split_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise DescriptorError("noise_sigma must be non-negative")
        if self.clutter_pool_size < 1 and self.foreground < self.patches:
            raise DescriptorError("clutter_pool_size must be positive")
        if self.samples_per_class < 0:
            raise DescriptorError("samples_per_class must be non-negative")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def transfer_target(self, seed: int) -> "DatasetDescriptor":
        """Same feature space and clutter pool, fresh prototypes."""
        return replace(self, seed=seed, clutter_seed=self.pool_seed)

    @property
    def pool_seed(self) -> int:
        return self.seed if self.clutter_seed is None else self.clutter_seed


@dataclass(frozen=True)
class ClassSpec:
    id: int
    prototype: np.ndarray
    split: str  # "base" | "new"


@dataclass(frozen=True, eq=False)
class Sample:
    label: int
    patches: np.ndarray
    foreground_mask: np.ndarray | None = None  # diagnostics only


@dataclass(eq=False)
class Dataset:
    num_classes: int
    samples: list[Sample]
    classes: list[ClassSpec] = field(default_factory=list)
    descriptor: DatasetDescriptor | None = None
    indices: np.ndarray | None = None  # positions in the parent dataset, for subsets

    @property
    def patches_per_sample(self) -> int:
        return self.samples[0].patches.shape[0] if self.samples else (
            self.descriptor.patches if self.descriptor else 0)

    @property
    def d_img(self) -> int:
        return self.samples[0].patches.shape[1] if self.samples else (
            self.descriptor.d_img if self.descriptor else 0)

    @property
    def base_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.split == "base"]

    @property
    def new_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.split == "new"]

    @property
    def prototypes(self) -> np.ndarray:
        return np.array([c.prototype for c in sorted(self.classes, key=lambda c: c.id)])

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.num_classes, [self.samples[i] for i in idx], self.classes,
                       self.descriptor, idx)

    def where(self, labels) -> "Dataset":
        labels = set(labels)
        return self.subset([i for i, s in enumerate(self.samples) if s.label in labels])

    def same_features(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes and len(self) == len(other)
                and all(a.label == b.label and a.patches.shape == b.patches.shape
                        and a.patches.tobytes() == b.patches.tobytes()
                        for a, b in zip(self.samples, other.samples)))


def split_classes(desc: DatasetDescriptor) -> tuple[list[int], list[int]]:
    K = desc.num_classes
    n_base = int(round(K * desc.split_fraction))
    order = Rng(mix_seed(desc.seed, _SPLIT_STREAM, K)).permutation(K)
    return sorted(int(c) for c in order[:n_base]), sorted(int(c) for c in order[n_base:])


def generate(desc: DatasetDescriptor) -> Dataset:
    K, P, D, f = desc.num_classes, desc.patches, desc.d_img, desc.foreground
    protos = Rng(mix_seed(desc.seed, _PROTO_STREAM)).standard_normal(K * D).reshape(K, D)
    pool = Rng(mix_seed(desc.pool_seed, _POOL_STREAM)).standard_normal(
        desc.clutter_pool_size * D).reshape(desc.clutter_pool_size, D)
    base, _ = split_classes(desc)
    base = set(base)
    classes = [ClassSpec(c, protos[c], "base" if c in base else "new") for c in range(K)]

    rng = Rng(mix_seed(desc.seed, _SAMPLE_STREAM))
    samples = []
    for c in range(K):
        for _ in range(desc.samples_per_class):
            salient = rng.uniform(1)[0] < desc.salience
            mask = np.zeros(P, dtype=bool)
            if salient and f:
                mask[rng.permutation(P)[:f]] = True
            patches = np.empty((P, D))
            n_clutter = int(P - mask.sum())
            patches[mask] = protos[c]
            if n_clutter:
                patches[~mask] = pool[rng.integers(desc.clutter_pool_size, n_clutter)]
            patches += desc.noise_sigma * rng.standard_normal(P * D).reshape(P, D)
            mask.setflags(write=False)
            patches.setflags(write=False)
            samples.append(Sample(c, patches, mask))
    return Dataset(K, samples, classes, desc)


def sample_kshot(dataset: Dataset, k: int, seed: int) -> Dataset:
    """k samples from every base class; new classes are never touched."""
    chosen = []
    for c in dataset.base_ids:
        idx = [i for i, s in enumerate(dataset.samples) if s.label == c]
        if len(idx) < k:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than k={k}")
        perm = Rng(mix_seed(seed, _SHOT_STREAM, c)).permutation(len(idx))
        chosen.extend(idx[j] for j in perm[:k])
    return dataset.subset(sorted(chosen))


def complement(dataset: Dataset, subset: Dataset) -> Dataset:
    taken = set(int(i) for i in subset.indices)
    return dataset.subset([i for i in range(len(dataset)) if i not in taken])


# CPFC1 feature cache

def dumps_cache(dataset: Dataset) -> bytes:
    P, D = dataset.patches_per_sample, dataset.d_img
    parts = [CACHE_MAGIC, _HEADER.pack(dataset.num_classes, P, D, len(dataset))]
    for s in dataset.samples:
        if s.patches.shape != (P, D):
            raise DimensionMismatch("all samples must share P x d_img")
        parts.append(_LABEL.pack(s.label))
        parts.append(np.ascontiguousarray(s.patches, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_cache(blob: bytes) -> Dataset:
    if blob[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise BadMagic("bad magic")
    off = len(CACHE_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise RecordLengthMismatch("record length mismatch: truncated header")
    K, P, D, N = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if K < 1 or P < 1 or D < 1:
        raise DimensionMismatch(f"inconsistent header dims K={K} P={P} d_img={D}")
    rec = _LABEL.size + 8 * P * D
    if len(blob) - off != N * rec:
        raise RecordLengthMismatch(
            f"record length mismatch: header implies {N} records of {rec} bytes, "
            f"payload has {len(blob) - off} bytes")
    samples = []
    for _ in range(N):
        (label,) = _LABEL.unpack_from(blob, off)
        if label >= K:
            raise DimensionMismatch(f"label {label} outside 0..{K - 1}")
        patches = np.frombuffer(blob, dtype="<f8", count=P * D, offset=off + _LABEL.size)
        samples.append(Sample(int(label), patches.astype(np.float64).reshape(P, D)))
        off += rec
    return Dataset(K, samples)


def save_feature_cache(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dumps_cache(dataset))


def load_feature_cache(path) -> Dataset:
    return loads_cache(Path(path).read_bytes())


def attach_classes(features: Dataset, reference: Dataset) -> Dataset:
    """Give loaded features the class specs of a generated reference dataset."""
    if features.num_classes != reference.num_classes:
        raise DimensionMismatch("class count differs from the descriptor")
    if features.samples and (features.patches_per_sample, features.d_img) != (
            reference.patches_per_sample, reference.d_img):
        raise DimensionMismatch("patch geometry differs from the descriptor")
    return Dataset(features.num_classes, features.samples, reference.classes,
                   reference.descriptor)
