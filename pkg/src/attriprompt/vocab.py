"""Fixed word list for the toy text encoder.

Class names are whitespace-separated words drawn from the attribute lists
below; each word maps to one token id. Ids never change between runs.
"""

from __future__ import annotations

from typing import Sequence

from .errors import ContractError

SOS = "<sos>"
EOS = "<eos>"
TEMPLATE = ("a", "photo", "of")

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SHAPES = ("circle", "square", "triangle", "cross", "ring")
TEXTURES = ("solid", "striped", "checkered", "dotted")

WORDS: tuple[str, ...] = (SOS, EOS) + TEMPLATE + COLORS + SHAPES + TEXTURES
TOKEN_IDS: dict[str, int] = {w: i for i, w in enumerate(WORDS)}


def encode_name(name: str) -> list[int]:
    """Token ids for ``<sos> a photo of <name words> <eos>``."""
    words = name.replace("_", " ").split()
    if not words:
        raise ContractError("class name is empty")
    unknown = [w for w in words if w not in TOKEN_IDS]
    if unknown:
        raise ContractError(f"class name {name!r} has words outside the vocabulary: {unknown}")
    return [TOKEN_IDS[SOS]] + [TOKEN_IDS[w] for w in TEMPLATE] + [TOKEN_IDS[w] for w in words] + [TOKEN_IDS[EOS]]


def encode_names(names: Sequence[str]) -> list[list[int]]:
    return [encode_name(n) for n in names]
