"""Frozen toy dual encoder.

A patch-based vision transformer that exposes every layer's token outputs, and
a text transformer whose layers accept freshly injected prompt tokens. Both
are randomly initialised from the run seed and never trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .vocab import WORDS, encode_names

INIT_STD = 0.02


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d_vis: int = 32
    d_txt: int = 32
    d_embed: int = 16
    n_vis_layers: int = 4
    n_txt_layers: int = 4
    n_heads: int = 2
    vocab_size: int = 32
    max_text_len: int = 8
    temperature: float = 0.07
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.d_vis % self.n_heads or self.d_txt % self.n_heads:
            raise ConfigError(f"d_vis={self.d_vis} and d_txt={self.d_txt} must be divisible by n_heads={self.n_heads}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.vocab_size < len(WORDS):
            raise ConfigError(f"vocab_size {self.vocab_size} is smaller than the fixed word list ({len(WORDS)})")
        for name in ("channels", "d_embed", "n_vis_layers", "n_txt_layers", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class ClassTokenization:
    class_names: list[str]
    token_ids: np.ndarray  # [C, L] int

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "ClassTokenization":
        if not names:
            raise ContractError("class list is empty")
        ids = encode_names(names)
        if len({len(row) for row in ids}) != 1:
            raise ContractError("all class names must tokenize to the same length")
        return cls(list(names), np.asarray(ids, dtype=np.int64))

    @property
    def key(self) -> tuple[str, ...]:
        return tuple(self.class_names)

    def __len__(self) -> int:
        return len(self.class_names)


@dataclass
class LayerFeatureTrace:
    per_layer: list[np.ndarray]  # each [(N+1), d_vis]


def layer_map(n_vis_layers: int, n_txt_layers: int) -> list[int]:
    """Vision layer feeding each text layer: floor(j * N_f / N_g)."""
    return [(j * n_vis_layers) // n_txt_layers for j in range(n_txt_layers)]


def _block_shapes(prefix: str, d: int) -> dict[str, tuple]:
    return {
        f"{prefix}ln1.g": (d,), f"{prefix}ln1.b": (d,),
        f"{prefix}wq": (d, d), f"{prefix}bq": (d,),
        f"{prefix}wk": (d, d), f"{prefix}bk": (d,),
        f"{prefix}wv": (d, d), f"{prefix}bv": (d,),
        f"{prefix}wo": (d, d), f"{prefix}bo": (d,),
        f"{prefix}ln2.g": (d,), f"{prefix}ln2.b": (d,),
        f"{prefix}fc.w": (d, 4 * d), f"{prefix}fc.b": (4 * d,),
        f"{prefix}proj.w": (4 * d, d), f"{prefix}proj.b": (d,),
    }


def backbone_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every frozen backbone tensor."""
    c = config
    patch_dim = c.channels * c.patch_size * c.patch_size
    shapes: dict[str, tuple] = {
        "vis.patch": (patch_dim, c.d_vis),
        "vis.cls": (c.d_vis,),
        "vis.pos": (c.n_patches + 1, c.d_vis),
        "vis.ln_pre.g": (c.d_vis,), "vis.ln_pre.b": (c.d_vis,),
    }
    for i in range(c.n_vis_layers):
        shapes.update(_block_shapes(f"vis.{i}.", c.d_vis))
    shapes.update({"vis.ln_post.g": (c.d_vis,), "vis.ln_post.b": (c.d_vis,), "vis.proj": (c.d_vis, c.d_embed)})
    shapes.update({"txt.tok": (c.vocab_size, c.d_txt), "txt.pos": (c.max_text_len, c.d_txt)})
    for i in range(c.n_txt_layers):
        shapes.update(_block_shapes(f"txt.{i}.", c.d_txt))
    shapes.update({"txt.ln_final.g": (c.d_txt,), "txt.ln_final.b": (c.d_txt,), "txt.proj": (c.d_txt, c.d_embed)})
    return shapes


EMBEDDINGS = ("vis.cls", "vis.pos", "txt.tok", "txt.pos")


def init_frozen_backbone(config: ModelConfig) -> dict[str, Tensor]:
    """Seeded weights.

    Embeddings ~ N(0, 0.02); projection matrices ~ N(0, 1/fan_in); LayerNorm
    at identity; biases zero. With 0.02 everywhere the random blocks are near
    identity and every image maps to almost the same feature.
    """
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    weights = {}
    for name, shape in backbone_shapes(config).items():
        last = name.rsplit(".", 1)[-1]
        if name in EMBEDDINGS:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        elif last == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        weights[name] = Tensor(arr, requires_grad=False, name=name)
    return weights


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Applies x @ w + b over the last axis of a [B, T, d] tensor."""
    B, T, d = x.shape
    y = ad.add(ad.matmul(ad.reshape(x, (B * T, d)), w), b)
    return ad.reshape(y, (B, T, w.shape[1]))


def _attention(h: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    B, T, d = h.shape
    dh = d // n_heads
    flat = ad.reshape(h, (B * T, d))

    def heads(w, b):
        y = ad.add(ad.matmul(flat, p[prefix + w]), p[prefix + b])
        y = ad.permute(ad.reshape(y, (B, T, n_heads, dh)), (0, 2, 1, 3))
        return ad.reshape(y, (B * n_heads, T, dh))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    att = ad.softmax(ad.scale(ad.bmm(q, ad.swap_last(k)), 1.0 / math.sqrt(dh)))
    o = ad.permute(ad.reshape(ad.bmm(att, v), (B, n_heads, T, dh)), (0, 2, 1, 3))
    o = ad.add(ad.matmul(ad.reshape(o, (B * T, d)), p[prefix + "wo"]), p[prefix + "bo"])
    return ad.reshape(o, (B, T, d))


def transformer_block(x: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    """Pre-LayerNorm residual block with full (bidirectional) attention."""
    h = ad.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    x = ad.add(x, _attention(h, p, prefix, n_heads))
    h = ad.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    h = ad.quick_gelu(_linear(h, p[prefix + "fc.w"], p[prefix + "fc.b"]))
    return ad.add(x, _linear(h, p[prefix + "proj.w"], p[prefix + "proj.b"]))


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[C, H, W] -> [N, C*patch*patch], patches in row-major grid order."""
    C, H, W = image.shape
    gh, gw = H // patch, W // patch
    x = image.reshape(C, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, C * patch * patch)


class DualEncoder:
    """Frozen vision and text towers sharing one seed-derived weight set."""

    def __init__(self, config: ModelConfig, weights: Optional[dict[str, Tensor]] = None):
        config.validate()
        self.config = config
        self.weights = weights if weights is not None else init_frozen_backbone(config)
        self._plain_cache: dict[tuple[str, ...], np.ndarray] = {}

    # -- vision -----------------------------------------------------------

    def vision_forward(self, image) -> tuple[np.ndarray, LayerFeatureTrace]:
        """Global image feature [d_embed] and every layer's [(N+1), d_vis] tokens."""
        c, p = self.config, self.weights
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        expected = (c.channels, c.image_size, c.image_size)
        if img.shape != expected:
            raise DimensionError(f"image shape {img.shape} does not match config {expected}")
        with ad.no_grad():
            tokens = patchify(img, c.patch_size) @ p["vis.patch"].data
            x = np.concatenate([p["vis.cls"].data[None, :], tokens], axis=0) + p["vis.pos"].data
            x = ad.layer_norm(Tensor._wrap(x[None]), p["vis.ln_pre.g"], p["vis.ln_pre.b"])
            trace = []
            for i in range(c.n_vis_layers):
                x = transformer_block(x, p, f"vis.{i}.", c.n_heads)
                trace.append(x.data[0].copy())
            cls = ad.layer_norm(ad.slice_axis(ad.reshape(x, x.shape[1:]), 0, 0, 1), p["vis.ln_post.g"], p["vis.ln_post.b"])
            feature = ad.matmul(cls, p["vis.proj"]).data[0].copy()
        return feature, LayerFeatureTrace(trace)

    # -- text -------------------------------------------------------------

    def encode_text(self, tokenization: ClassTokenization, layer_prompts: Sequence[Optional[Tensor]]) -> Tensor:
        """Run the text tower, prepending ``layer_prompts[i]`` ([n_i, d_txt]) at the input of layer i.

        Prompt-position outputs are dropped after every layer, so each layer sees
        only the prompts given for it. Returns the projected EOS features [C, d_embed].
        """
        return self.encode_text_batch(tokenization, [layer_prompts])[0]

    def encode_text_batch(
        self, tokenization: ClassTokenization, batch_prompts: Sequence[Sequence[Optional[Tensor]]]
    ) -> list[Tensor]:
        """``encode_text`` for several prompt sets at once (one per image), in a single tower pass."""
        c, p = self.config, self.weights
        B = len(batch_prompts)
        for layer_prompts in batch_prompts:
            if len(layer_prompts) != c.n_txt_layers:
                raise ContractError(f"expected prompts for {c.n_txt_layers} text layers, got {len(layer_prompts)}")
        ids = tokenization.token_ids
        C, L = ids.shape
        if L > c.max_text_len:
            raise ContractError(f"token sequence length {L} exceeds max_text_len {c.max_text_len}")
        if ids.max() >= c.vocab_size:
            raise ContractError("token id outside the configured vocabulary")
        fixed = p["txt.tok"].data[ids] + p["txt.pos"].data[:L]
        x = Tensor._wrap(np.tile(fixed, (B, 1, 1)))
        for i in range(c.n_txt_layers):
            layer = [lp[i] for lp in batch_prompts]
            widths = {0 if t is None else t.shape[0] for t in layer}
            if len(widths) != 1:
                raise ContractError(f"layer {i}: every image must inject the same number of prompt tokens")
            n_p = widths.pop()
            if n_p:
                for t in layer:
                    if t.ndim != 2 or t.shape[1] != c.d_txt:
                        raise DimensionError(f"prompt shape {t.shape} does not match d_txt {c.d_txt}")
                block = [ad.expand(t, C) for t in layer]
                x = ad.concat([block[0] if B == 1 else ad.concat(block, axis=0), x], axis=1)
            x = transformer_block(x, p, f"txt.{i}.", c.n_heads)
            if n_p:
                x = ad.slice_axis(x, 1, n_p, n_p + L)
        eos = ad.reshape(ad.slice_axis(x, 1, L - 1, L), (B * C, c.d_txt))
        eos = ad.layer_norm(eos, p["txt.ln_final.g"], p["txt.ln_final.b"])
        out = ad.matmul(eos, p["txt.proj"])
        if B == 1:
            return [out]
        return [ad.slice_axis(out, 0, b * C, (b + 1) * C) for b in range(B)]

    def text_forward_plain(self, tokenization: ClassTokenization) -> Tensor:
        """Non-prompted class features, computed once per class list and returned as a constant."""
        key = tokenization.key
        cached = self._plain_cache.get(key)
        if cached is None:
            with ad.no_grad():
                cached = self.encode_text(tokenization, [None] * self.config.n_txt_layers).data.copy()
            self._plain_cache[key] = cached
        return Tensor(cached)

    def clear_cache(self) -> None:
        self._plain_cache.clear()


def plan_prompts(plan, prompts: Tensor) -> list[Optional[Tensor]]:
    """Per-layer injected tokens [k*L_p, d_txt] for a retrieval plan over a [M, L_p, d_txt] pool."""
    M, Lp, d = prompts.shape
    out: list[Optional[Tensor]] = []
    for layer in plan.per_layer:
        idx = list(layer.indices)
        if not idx or Lp == 0:
            out.append(None)
            continue
        out.append(ad.reshape(ad.take_rows(prompts, idx), (len(idx) * Lp, d)))
    return out


def text_forward_prompted(encoder: DualEncoder, tokenization: ClassTokenization, plan, prompts: Tensor) -> Tensor:
    if len(plan.per_layer) != encoder.config.n_txt_layers:
        raise ContractError(
            f"plan covers {len(plan.per_layer)} layers but the text encoder has {encoder.config.n_txt_layers}"
        )
    return encoder.encode_text(tokenization, plan_prompts(plan, prompts))


def clip_logits(f: Tensor, g: Tensor, tau: float) -> Tensor:
    """logit_i = cos(g_i, f) / tau for one image feature f [d] against class features g [C, d]."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if f.ndim != 1:
        raise DimensionError(f"clip_logits expects a single feature vector, got {f.shape}")
    cos = ad.cosine_rows(g, ad.reshape(f, (1, f.shape[0])))
    return ad.scale(ad.reshape(cos, (g.shape[0],)), 1.0 / tau)
