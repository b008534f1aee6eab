"""ATPC1 checkpoint files: config echo, seed and named float64 tensor sections.

Layout (all little-endian)::

    b"ATPC1"
    u32 config length, config text (utf-8, ``key = value`` lines)
    u64 seed
    u32 section count
    per section: u16 name length, name, u8 ndim, u32 dims..., f64 data

Loading parses and validates the whole file before any model object is built,
so a damaged file never yields partial state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import RunConfig, config_from_text
from .data import atomic_write
from .encoders import DualEncoder, backbone_shapes
from .errors import ConfigError, FormatError
from .training import TRAINABLE_NAMES, SGD, AttriPromptModel

CHECKPOINT_MAGIC = b"ATPC1"
STEP_SECTION = "trainer.step"


@dataclass
class TrainingState:
    model: AttriPromptModel
    optimizer: SGD
    step: int


def state_sections(model: AttriPromptModel, optimizer: SGD, step: int) -> list[tuple[str, np.ndarray]]:
    sections = [(f"backbone.{name}", t.data) for name, t in model.backbone.items()]
    trainables = model.trainables()
    sections += [(name, trainables[name].data) for name in TRAINABLE_NAMES]
    sections += [(f"velocity.{name}", optimizer.velocity[name]) for name in TRAINABLE_NAMES]
    sections.append((STEP_SECTION, np.array(float(step))))
    return sections


def checkpoint_bytes(model: AttriPromptModel, optimizer: SGD, step: int) -> bytes:
    config = model.config.to_text().encode("utf-8")
    sections = state_sections(model, optimizer, step)
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(config)), config]
    out.append(struct.pack("<QI", model.config.seed, len(sections)))
    for name, arr in sections:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path: str | Path, model: AttriPromptModel, optimizer: SGD, step: int) -> None:
    atomic_write(path, checkpoint_bytes(model, optimizer, step))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> tuple[str, int, dict[str, np.ndarray]]:
    """(config text, seed, ordered sections) from raw bytes."""
    r = _Reader(buf)
    if r.take(len(CHECKPOINT_MAGIC), "header") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic in header: not an ATPC1 checkpoint")
    (n_config,) = r.unpack("<I", "header")
    try:
        config_text = r.take(n_config, "config").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config section is not valid utf-8") from None
    seed, n_sections = r.unpack("<QI", "header")
    sections: dict[str, np.ndarray] = {}
    for i in range(n_sections):
        (n_name,) = r.unpack("<H", f"section #{i} name")
        name = r.take(n_name, f"section #{i} name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", name)
        dims = r.unpack(f"<{ndim}I", name)
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * count, name), dtype="<f8").astype(np.float64).reshape(dims)
        if name in sections:
            raise FormatError(f"duplicate section {name}")
        sections[name] = data
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last section")
    return config_text, seed, sections


def _expected_shapes(config: RunConfig) -> dict[str, tuple]:
    mc, rc = config.model, config.retrieval
    shapes = {f"backbone.{n}": s for n, s in backbone_shapes(mc).items()}
    trainable = {
        "pool.prompts": (rc.pool_size, rc.prompt_len, mc.d_txt),
        "pool.keys": (rc.pool_size, mc.d_vis),
        "head.vision.alpha": (mc.d_embed,),
        "head.vision.beta": (mc.d_embed,),
        "head.text.alpha": (mc.d_embed,),
        "head.text.beta": (mc.d_embed,),
    }
    shapes.update(trainable)
    shapes.update({f"velocity.{n}": trainable[n] for n in TRAINABLE_NAMES})
    shapes[STEP_SECTION] = ()
    return shapes


def state_from_bytes(buf: bytes) -> TrainingState:
    config_text, seed, sections = parse_checkpoint(buf)
    try:
        config = config_from_text(config_text)
    except ConfigError as exc:
        raise FormatError(f"config section: {exc}") from None
    if seed != config.seed:
        raise FormatError(f"header seed {seed} disagrees with config seed {config.seed}")
    expected = _expected_shapes(config)
    for name, shape in expected.items():
        if name not in sections:
            raise FormatError(f"missing section {name}")
        if sections[name].shape != tuple(shape):
            raise FormatError(f"section {name} has shape {sections[name].shape}, config implies {tuple(shape)}")
    extra = sorted(set(sections) - set(expected))
    if extra:
        raise FormatError(f"unexpected section {extra[0]}")
    step_value = float(sections[STEP_SECTION])
    if step_value < 0 or step_value != int(step_value):
        raise FormatError(f"section {STEP_SECTION} holds {step_value}, not a step count")

    backbone = {n: Tensor(sections[f"backbone.{n}"], name=n) for n in backbone_shapes(config.model)}
    encoder = DualEncoder(config.model, weights=backbone)
    model = AttriPromptModel(config, encoder=encoder)
    for name, t in model.trainables().items():
        t.data[...] = sections[name]
    optimizer = SGD(model.trainables(), config.schedule.momentum)
    for name in TRAINABLE_NAMES:
        optimizer.velocity[name][...] = sections[f"velocity.{name}"]
    return TrainingState(model, optimizer, int(step_value))


def load_checkpoint(path: str | Path) -> TrainingState:
    return state_from_bytes(Path(path).read_bytes())
