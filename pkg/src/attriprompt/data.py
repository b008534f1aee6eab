"""Synthetic attribute-composition images and the ATPD1 dataset format.

Every class is a (color, shape, texture) triple. Novel classes are held-out
combinations whose individual attribute values all occur in some base class.

ATPD1 layout (little-endian)::

    b"ATPD1" | u32 image_size | u32 channels | u32 n_classes
    n_classes x (u16 name_len | utf-8 name)
    records: i32 class index | channels*image_size*image_size f32 pixels

The few-shot split is stored next to the dataset in ``<file>.split`` as
``key = value`` lines.
"""

from __future__ import annotations

import itertools
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import parse_key_values
from .errors import ConfigError, FormatError, GenerationError
from .vocab import COLORS, SHAPES, TEXTURES

DATASET_MAGIC = b"ATPD1"

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "magenta": (0.8, 0.1, 0.8),
    "cyan": (0.1, 0.8, 0.85),
}
TEXTURE_LOW = 0.35


@dataclass
class SyntheticSpec:
    n_colors: int = 3
    n_shapes: int = 3
    n_textures: int = 2
    n_novel: int = 4
    image_size: int = 32
    noise_std: float = 0.05
    samples_per_class: int = 20
    shots: int = 8
    seed: int = 0

    def validate(self) -> None:
        limits = (("n_colors", len(COLORS)), ("n_shapes", len(SHAPES)), ("n_textures", len(TEXTURES)))
        for name, cap in limits:
            if not 1 <= getattr(self, name) <= cap:
                raise ConfigError(f"{name} must lie in [1, {cap}]")
        if sum(getattr(self, name) >= 2 for name, _ in limits) < 2:
            raise ConfigError("at least two attribute factors need two or more values")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not 1 <= self.shots < self.samples_per_class:
            raise ConfigError("need 1 <= shots < samples_per_class so that every class has test images")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")


@dataclass
class FewShotSplit:
    base_classes: list[int]
    novel_classes: list[int]
    shots: int
    train_indices: list[int]
    test_indices: list[int]

    def validate(self, labels: np.ndarray) -> None:
        if set(self.base_classes) & set(self.novel_classes):
            raise FormatError("base and novel classes overlap")
        base = set(self.base_classes)
        if any(int(labels[i]) not in base for i in self.train_indices):
            raise FormatError("training indices reference non-base classes")


@dataclass
class Dataset:
    class_names: list[str]
    images: np.ndarray  # [n, C, H, W] float32
    labels: np.ndarray  # [n] int

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = size * rng.uniform(0.28, 0.38)
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        w = r * 0.35
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise GenerationError(f"unknown shape {shape!r}")


def _texture(texture: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    phase = int(rng.integers(0, 4))
    if texture == "solid":
        return np.ones((size, size))
    if texture == "striped":
        return np.where(((xx + yy + phase) // 3) % 2 == 0, 1.0, TEXTURE_LOW)
    if texture == "checkered":
        return np.where(((xx + phase) // 4 + (yy + phase) // 4) % 2 == 0, 1.0, TEXTURE_LOW)
    if texture == "dotted":
        return np.where(((xx + phase) % 4 < 2) & ((yy + phase) % 4 < 2), 1.0, TEXTURE_LOW)
    raise GenerationError(f"unknown texture {texture!r}")


def render(color: str, shape: str, texture: str, size: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One [3, size, size] image and its boolean shape mask."""
    mask = _shape_mask(shape, size, rng)
    mod = _texture(texture, size, rng) * mask
    rgb = np.asarray(PALETTE[color])[:, None, None] * mod[None]
    if noise_std > 0:
        rgb = rgb + rng.normal(0.0, noise_std, size=rgb.shape)
    return rgb, mask


def class_triples(spec: SyntheticSpec) -> list[tuple[str, str, str]]:
    return list(itertools.product(COLORS[: spec.n_colors], SHAPES[: spec.n_shapes], TEXTURES[: spec.n_textures]))


def choose_novel(triples: Sequence[tuple[str, str, str]], n_novel: int, seed: int) -> list[int]:
    """Pick ``n_novel`` classes to hold out so every attribute value stays in some base class."""
    order = np.random.default_rng([seed, 10]).permutation(len(triples))
    novel: list[int] = []
    for idx in order:
        if len(novel) == n_novel:
            break
        trial = set(novel) | {int(idx)}
        base = [t for i, t in enumerate(triples) if i not in trial]
        if all({t[f] for t in base} == {t[f] for t in triples} for f in range(3)):
            novel.append(int(idx))
    if len(novel) < n_novel:
        raise GenerationError(
            f"cannot hold out {n_novel} classes while keeping every attribute value in a base class"
        )
    return sorted(novel)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, FewShotSplit]:
    spec.validate()
    triples = class_triples(spec)
    if not 1 <= spec.n_novel < len(triples):
        raise GenerationError(f"n_novel must lie in [1, {len(triples) - 1}]")
    novel = choose_novel(triples, spec.n_novel, spec.seed)
    rng = np.random.default_rng([spec.seed, 11])
    n = len(triples) * spec.samples_per_class
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for c, (color, shape, texture) in enumerate(triples):
        for s in range(spec.samples_per_class):
            i = c * spec.samples_per_class + s
            images[i] = render(color, shape, texture, spec.image_size, spec.noise_std, rng)[0]
            labels[i] = c
    base = [c for c in range(len(triples)) if c not in novel]
    train, test = [], []
    for c in range(len(triples)):
        first = c * spec.samples_per_class
        if c in base:
            train.extend(range(first, first + spec.shots))
        test.extend(range(first + spec.shots, first + spec.samples_per_class))
    names = [" ".join(t) for t in triples]
    return Dataset(names, images, labels), FewShotSplit(base, novel, spec.shots, train, test)


def load_spec(path: str | Path) -> SyntheticSpec:
    spec = SyntheticSpec()
    for key, raw in parse_key_values(Path(path).read_text()).items():
        if not hasattr(spec, key):
            raise ConfigError(f"unknown synthetic spec key {key!r}")
        typ = type(getattr(spec, key))
        try:
            setattr(spec, key, typ(raw))
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# files


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_bytes(ds: Dataset) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<III", ds.image_size, ds.channels, len(ds.class_names))]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    pixels = ds.images.reshape(len(ds), -1).astype("<f4")
    labels = ds.labels.astype("<i4")
    rec = np.empty(len(ds), dtype=[("label", "<i4"), ("pixels", "<f4", pixels.shape[1])])
    rec["label"] = labels
    rec["pixels"] = pixels
    parts.append(rec.tobytes())
    return b"".join(parts)


def save_dataset(path: str | Path, ds: Dataset) -> None:
    atomic_write(path, dataset_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:5] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic, expected ATPD1")
    pos = 5
    if len(blob) < pos + 12:
        raise FormatError(f"{path}: truncated header")
    size, channels, n_classes = struct.unpack_from("<III", blob, pos)
    pos += 12
    names = []
    for c in range(n_classes):
        if len(blob) < pos + 2:
            raise FormatError(f"{path}: truncated class list at class {c}")
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if len(blob) < pos + ln:
            raise FormatError(f"{path}: truncated class list at class {c}")
        names.append(blob[pos : pos + ln].decode("utf-8"))
        pos += ln
    n_pix = channels * size * size
    rec_size = 4 + 4 * n_pix
    body = len(blob) - pos
    if n_pix == 0 or body % rec_size:
        raise FormatError(f"{path}: record section of {body} bytes is not a whole number of {rec_size}-byte records")
    n = body // rec_size
    rec = np.frombuffer(blob, dtype=[("label", "<i4"), ("pixels", "<f4", n_pix)], count=n, offset=pos)
    labels = rec["label"].astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise FormatError(f"{path}: record label outside the class list")
    images = rec["pixels"].astype(np.float32).reshape(n, channels, size, size)
    return Dataset(names, images, labels)


def split_path(data_path: str | Path) -> Path:
    return Path(str(data_path) + ".split")


def split_text(split: FewShotSplit) -> str:
    def ints(xs):
        return " ".join(str(int(x)) for x in xs)

    return (
        f"base = {ints(split.base_classes)}\n"
        f"novel = {ints(split.novel_classes)}\n"
        f"shots = {split.shots}\n"
        f"train = {ints(split.train_indices)}\n"
        f"test = {ints(split.test_indices)}\n"
    )


def save_split(path: str | Path, split: FewShotSplit) -> None:
    atomic_write(path, split_text(split).encode("utf-8"))


def load_split(path: str | Path) -> FewShotSplit:
    kv = parse_key_values(Path(path).read_text())
    missing = {"base", "novel", "shots", "train", "test"} - kv.keys()
    if missing:
        raise FormatError(f"{path}: split file lacks {sorted(missing)}")
    try:
        ints = {k: [int(x) for x in kv[k].split()] for k in ("base", "novel", "train", "test")}
        return FewShotSplit(ints["base"], ints["novel"], int(kv["shots"]), ints["train"], ints["test"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_generated(out: str | Path, ds: Dataset, split: FewShotSplit) -> None:
    save_dataset(out, ds)
    save_split(split_path(out), split)


def load_with_split(path: str | Path) -> tuple[Dataset, FewShotSplit]:
    ds = load_dataset(path)
    sp = split_path(path)
    if not sp.exists():
        raise FormatError(f"{path}: missing split file {sp}")
    split = load_split(sp)
    split.validate(ds.labels)
    return ds, split
