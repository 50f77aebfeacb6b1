"""Synthetic zero-shot datasets and the ZADT binary container.

Images are noisy linear renderings of their class prototype, so concept
information can be decoded from pixels::

    image = clip(b + c * G @ clip(s_y + jitter, 0, 1) + noise, 0, 1)

``jitter`` is optional per-image Gaussian variation of the concept scores, so training
images cover concept directions outside the span of the seen prototypes.
``G`` is shared by all classes. Each concept owns a sparse non-negative
texture over one patch, stamped onto a random subset of patch positions, and
``G`` is scaled so no pixel sums past 1. ``b`` and ``c`` set the background
level and contrast. Pixel values
and prototypes are always rounded to float32 so a save/load round-trip is
exact.

ZADT layout (little-endian)::

    b"ZADT"  u32 version  u32 n_tensors
    per tensor: u8 name_len, name (utf-8), u32 ndim, u32 extents[ndim],
                f32 payload[prod(extents)]  (row-major)
    trailer:    u32 n  u32 labels[n]  u32 split[n]
                u32 n_seen  u32 seen_ids[..]  u32 n_unseen  u32 unseen_ids[..]

Split tags are 0 = train, 1 = test-seen, 2 = test-unseen.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DatasetError, SemanticSpace

MAGIC = b"ZADT"
VERSION = 1

TRAIN, TEST_SEEN, TEST_UNSEEN = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", TEST_SEEN: "test-seen", TEST_UNSEEN: "test-unseen"}


class FormatError(ValueError):
    pass


class IntegrityError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ImputationError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_seen: int
    n_unseen: int
    d_s: int
    image_side: int = 8
    channels: int = 3
    train_per_class: int = 20
    test_seen_per_class: int = 10
    test_unseen_per_class: int = 20
    noise_sigma: float = 0.05
    contrast: float = 1.0
    background: float = 0.0
    concept_jitter: float = 0.15
    missing_rate: float = 0.0
    proto_beta: float = 0.5
    proto_rank: int | None = None
    proto_concentration: float = 0.5
    mix_density: float = 0.25
    presence: float = 0.5
    patch: int = 4
    min_angle_deg: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_seen < 2 or self.n_unseen < 1 or self.d_s < 2:
            raise ValueError("need n_seen >= 2, n_unseen >= 1 and d_s >= 2")
        if self.image_side % self.patch:
            raise ValueError(f"image_side {self.image_side} is not a multiple of patch {self.patch}")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")

    @property
    def n_pixels(self) -> int:
        return self.image_side**2 * self.channels


# low-contrast 16x16 renderings shared by every preset
_RENDER = dict(
    image_side=16, contrast=0.3, background=0.35, noise_sigma=0.03, concept_jitter=0.0,
    proto_beta=2.0, presence=0.5, mix_density=0.5, min_angle_deg=10.0,
)

PRESETS: dict[str, dict] = {
    "mini-awa2": dict(_RENDER, n_seen=8, n_unseen=2, d_s=16, missing_rate=0.02),
    "mini-cub": dict(_RENDER, n_seen=12, n_unseen=4, d_s=32),
    "mini-sun": dict(_RENDER, n_seen=20, n_unseen=4, d_s=24, train_per_class=12, test_unseen_per_class=15),
}


def preset(name: str, seed: int = 7, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SyntheticSpec(**{**PRESETS[name], "seed": seed, **overrides})


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    space: SemanticSpace
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise DatasetError("images, labels and splits differ in length")

    def check_partitions(self) -> None:
        seen = np.isin(self.labels, self.space.seen_ids)
        unseen = np.isin(self.labels, self.space.unseen_ids)
        if np.any(~(seen | unseen)):
            raise DatasetError("labels outside the semantic space")
        if np.any(~seen[self.splits == TRAIN]) or np.any(~seen[self.splits == TEST_SEEN]):
            raise DatasetError("train/test-seen split contains unseen classes")
        if np.any(~unseen[self.splits == TEST_UNSEEN]):
            raise DatasetError("test-unseen split contains seen classes")

    def subset(self, mask) -> Dataset:
        return Dataset(self.images[mask], self.labels[mask], self.splits[mask], self.space, dict(self.meta))

    def split(self, *tags: int) -> Dataset:
        return self.subset(np.isin(self.splits, tags))

    def test(self) -> Dataset:
        return self.split(TEST_SEEN, TEST_UNSEEN)

    def stats(self) -> dict:
        protos = self.space.prototypes
        return {
            "semantic_dim": self.space.n_concepts,
            "semantic_range": f"[{protos.min():.2f},{protos.max():.2f}]",
            "n_seen": int(self.space.seen_ids.size),
            "n_unseen": int(self.space.unseen_ids.size),
            "n_images": int(len(self.labels)),
            "n_train": int(np.sum(self.splits == TRAIN)),
            "n_test_unseen": int(np.sum(self.splits == TEST_UNSEEN)),
            "n_test_seen": int(np.sum(self.splits == TEST_SEEN)),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.space.prototypes, other.space.prototypes)
            and np.array_equal(self.space.seen_ids, other.space.seen_ids)
            and np.array_equal(self.space.unseen_ids, other.space.unseen_ids)
        )


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _draw_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_seen + spec.n_unseen
    floor = np.cos(np.deg2rad(spec.min_angle_deg))
    for _ in range(1000):
        if spec.proto_rank:
            # convex mixtures of shared archetypes: every class lives in one low-rank span
            archetypes = rng.beta(spec.proto_beta, spec.proto_beta, size=(spec.proto_rank, spec.d_s))
            weights = rng.dirichlet(np.full(spec.proto_rank, spec.proto_concentration), size=n)
            protos = weights @ archetypes
        else:
            protos = rng.beta(spec.proto_beta, spec.proto_beta, size=(n, spec.d_s))
        unit = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        cos = unit @ unit.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() <= floor:
            return protos
    raise ValueError("could not draw prototypes meeting the angular floor; lower min_angle_deg")


def _mixing_matrix(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Patch-separable G: concept j paints texture t_j into the patches where it is present."""
    side, p, ch = spec.image_side, spec.patch, spec.channels
    grid = side // p
    texture = np.abs(rng.standard_normal((p * p * ch, spec.d_s)))
    texture *= rng.random(texture.shape) < spec.mix_density
    texture[:, texture.sum(axis=0) == 0] = 1.0
    present = rng.random((grid * grid, spec.d_s)) < spec.presence
    present[rng.integers(grid * grid, size=spec.d_s), np.arange(spec.d_s)] = True
    # g[patch, pixel-in-patch, concept], then scattered back to image order
    g = present[:, None, :] * texture[None, :, :]
    g = g.reshape(grid, grid, p, p, ch, spec.d_s).transpose(0, 2, 1, 3, 4, 5)
    g = g.reshape(spec.n_pixels, spec.d_s)
    return g / g.sum(axis=1).max()


def generate(spec: SyntheticSpec) -> Dataset:
    if spec.d_s > spec.n_pixels:
        raise ValueError(f"infeasible spec: {spec.d_s} concepts exceed {spec.n_pixels} pixels")
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.n_seen + spec.n_unseen
    protos = _draw_prototypes(spec, rng)
    order = rng.permutation(n_classes)
    seen_ids = np.sort(order[: spec.n_seen])
    unseen_ids = np.sort(order[spec.n_seen :])
    mixing = _mixing_matrix(spec, rng)

    labels, splits = [], []
    for tag, classes, count in (
        (TRAIN, seen_ids, spec.train_per_class),
        (TEST_SEEN, seen_ids, spec.test_seen_per_class),
        (TEST_UNSEEN, unseen_ids, spec.test_unseen_per_class),
    ):
        for c in classes:
            labels += [int(c)] * count
            splits += [tag] * count
    labels = np.array(labels)
    codes = protos[labels] + spec.concept_jitter * rng.standard_normal((len(labels), spec.d_s))
    clean = spec.background + spec.contrast * (np.clip(codes, 0.0, 1.0) @ mixing.T)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    side = spec.image_side
    images = _f32(np.clip(noisy, 0.0, 1.0)).reshape(-1, side, side, spec.channels)

    observed = protos.copy()
    if spec.missing_rate > 0:
        observed[rng.random(observed.shape) < spec.missing_rate] = -1.0
    space = SemanticSpace(_f32(impute_missing(observed)), seen_ids, unseen_ids)
    ds = Dataset(images, labels, np.array(splits), space)
    ds.check_partitions()
    return ds


def impute_missing(prototypes: np.ndarray) -> np.ndarray:
    """Replace ``-1`` entries by the per-dimension mean of observed values."""
    protos = np.array(prototypes, dtype=np.float64)
    missing = protos == -1.0
    if not missing.any():
        return protos
    observed = np.where(missing, 0.0, protos)
    counts = (~missing).sum(axis=0)
    if np.any(counts == 0):
        dims = np.flatnonzero(counts == 0).tolist()
        raise ImputationError(f"concept dimensions {dims} are missing for every class")
    means = observed.sum(axis=0) / counts
    return np.where(missing, means[None, :], protos)


def impute_space(space: SemanticSpace) -> SemanticSpace:
    return SemanticSpace(impute_missing(space.prototypes), space.seen_ids, space.unseen_ids, space.concept_names)


def load_concept_csv(path, seen_ids, unseen_ids) -> SemanticSpace:
    """Read a class-by-concept matrix with a header row of concept names.

    ``-1`` marks a missing entry. Matrices on a 0-100 scale are divided by 100.
    """
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{path}: empty concept file")
    names, body = rows[0], [r for r in rows[1:] if r]
    try:
        values = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if values.ndim != 2 or values.shape[1] != len(names):
        raise FormatError(f"{path}: rows do not match the {len(names)}-column header")
    missing = values == -1.0
    if np.any(values[~missing] < 0):
        raise FormatError(f"{path}: negative concept value other than -1")
    if values[~missing].max(initial=0.0) > 1.0:
        values = np.where(missing, -1.0, values / 100.0)
    return SemanticSpace(impute_missing(values), seen_ids, unseen_ids, concept_names=names)


# ------------------------------------------------------------------ container

def write_container(
    path,
    tensors: dict[str, np.ndarray],
    labels=(),
    splits=(),
    seen_ids=(),
    unseen_ids=(),
) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 255:
            raise ValueError(f"tensor name too long: {name!r}")
        arr = np.asarray(arr)
        buf += struct.pack("<B", len(raw)) + raw
        buf += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    for block in ((labels, splits), (seen_ids,), (unseen_ids,)):
        n = len(block[0])
        buf += struct.pack("<I", n)
        for arr in block:
            if len(arr) != n:
                raise ValueError("labels and splits differ in length")
            buf += np.asarray(arr, dtype="<u4").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"file truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def u32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a ZADT file (bad magic)")
    version, count = r.u32(2)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: container version {version} unsupported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<B", r.take(1))
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not utf-8") from None
        ndim = r.u32()
        if ndim > 16:
            raise FormatError(f"{path}: implausible tensor rank {ndim}")
        shape = (r.u32(ndim),) if ndim == 1 else tuple(r.u32(ndim)) if ndim else ()
        size = math.prod(shape)
        payload = np.frombuffer(r.take(4 * size), dtype="<f4")
        if not np.all(np.isfinite(payload)):
            raise FormatError(f"{path}: tensor {name!r} holds non-finite values")
        tensors[name] = payload.astype(np.float64).reshape(shape)
    n = r.u32()
    labels, splits = r.u32_array(n), r.u32_array(n)
    seen = r.u32_array(r.u32())
    unseen = r.u32_array(r.u32())
    if r.pos != len(data):
        raise IntegrityError(f"{path}: {len(data) - r.pos} trailing bytes")
    return tensors, {"labels": labels, "splits": splits, "seen_ids": seen, "unseen_ids": unseen}


def save(dataset: Dataset, path) -> None:
    write_container(
        path,
        {"images": dataset.images, "prototypes": dataset.space.prototypes},
        dataset.labels,
        dataset.splits,
        dataset.space.seen_ids,
        dataset.space.unseen_ids,
    )


def load(path) -> Dataset:
    tensors, blocks = read_container(path)
    for key in ("images", "prototypes"):
        if key not in tensors:
            raise FormatError(f"{path}: missing tensor {key!r}")
    try:
        space = SemanticSpace(tensors["prototypes"], blocks["seen_ids"], blocks["unseen_ids"])
        ds = Dataset(tensors["images"], blocks["labels"], blocks["splits"], space)
        ds.check_partitions()
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ds
