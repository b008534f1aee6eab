"""Model state, SGD with cosine annealing, the train loop and base-to-novel evaluation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig
from .data import Dataset, FewShotSplit
from .encoders import ClassTokenization, DualEncoder, clip_logits, layer_map, plan_prompts, text_forward_prompted
from .errors import ContractError
from .heads import ChannelAffineHead, fuse_predictions, predict, transform
from .objectives import LossBreakdown, LossWeights, ce_loss, combine, consistency_loss
from .retrieval import AttributeSet, PromptPool, RetrievalPlan, cluster_trace, diversity_loss, match_loss, plan_from_attributes

TRAINABLE_NAMES = ("pool.prompts", "pool.keys", "head.vision.alpha", "head.vision.beta", "head.text.alpha", "head.text.beta")


@dataclass
class EncodedImage:
    """Everything the frozen vision tower contributes for one image."""

    feature: np.ndarray  # [d_embed]
    attributes: list[AttributeSet]  # one per text layer


class AttriPromptModel:
    """Frozen dual encoder plus the trainable prompt pool, keys and affine heads."""

    def __init__(self, config: RunConfig, encoder: Optional[DualEncoder] = None):
        config.validate()
        self.config = config
        mc, rc = config.model, config.retrieval
        self.encoder = encoder if encoder is not None else DualEncoder(mc)
        self.pool = PromptPool.init(rc.pool_size, rc.prompt_len, mc.d_txt, mc.d_vis, mc.seed)
        self.vision_head = ChannelAffineHead.identity(mc.d_embed, "head.vision")
        self.text_head = ChannelAffineHead.identity(mc.d_embed, "head.text")
        self.layer_map = layer_map(mc.n_vis_layers, mc.n_txt_layers)

    @property
    def backbone(self) -> dict[str, Tensor]:
        return self.encoder.weights

    def trainables(self) -> dict[str, Tensor]:
        return {
            "pool.prompts": self.pool.prompts,
            "pool.keys": self.pool.keys,
            "head.vision.alpha": self.vision_head.alpha,
            "head.vision.beta": self.vision_head.beta,
            "head.text.alpha": self.text_head.alpha,
            "head.text.beta": self.text_head.beta,
        }

    def assert_trainable_set(self) -> None:
        """Exactly the pool and head tensors may require gradients."""
        frozen = [n for n, t in self.backbone.items() if t.requires_grad]
        if frozen:
            raise ContractError(f"backbone tensors marked trainable: {frozen}")
        loose = [n for n, t in self.trainables().items() if not t.requires_grad]
        if loose:
            raise ContractError(f"trainable tensors not marked requires_grad: {loose}")

    def encode_image(self, image) -> EncodedImage:
        rc = self.config.retrieval
        feature, trace = self.encoder.vision_forward(image)
        attrs = cluster_trace(trace, rc.top_k, rc.kmeans_iters, self.layer_map, self.config.seed)
        return EncodedImage(feature, attrs)

    def plan(self, encoded: EncodedImage) -> RetrievalPlan:
        return plan_from_attributes(encoded.attributes, self.layer_map, self.pool)

    def prompted_text(self, tokenization: ClassTokenization, plan: RetrievalPlan) -> Tensor:
        return text_forward_prompted(self.encoder, tokenization, plan, self.pool.prompts)


def backbone_checksum(model: AttriPromptModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.backbone):
        h.update(name.encode())
        h.update(model.backbone[name].data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# losses for one image


def _image_terms(model, encoded, label, plan, g_p, g, div, tau) -> dict[str, Tensor]:
    f = Tensor(encoded.feature)
    return {
        "ce": ce_loss(f, g_p, label, tau),
        "align": ce_loss(transform(f, model.vision_head), transform(g_p, model.text_head), label, tau),
        "cc": consistency_loss(g_p, g),
        "div": div,
        "match": match_loss(plan, model.pool),
    }


def image_losses(
    model: AttriPromptModel,
    encoded: EncodedImage,
    label: int,
    tokenization: ClassTokenization,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Combined objective and its five terms for a single image."""
    plan = model.plan(encoded)
    g_p = model.prompted_text(tokenization, plan)
    g = model.encoder.text_forward_plain(tokenization)
    parts = _image_terms(model, encoded, label, plan, g_p, g, diversity_loss(model.pool), model.config.model.temperature)
    return combine(**parts, weights=weights), parts


def batch_loss(model, encoded_batch, labels, tokenization, weights) -> tuple[Tensor, LossBreakdown]:
    """Batch-mean objective; the text tower runs once for all images' retrieved prompts."""
    plans = [model.plan(e) for e in encoded_batch]
    prompt_sets = [plan_prompts(p, model.pool.prompts) for p in plans]
    g_ps = model.encoder.encode_text_batch(tokenization, prompt_sets)
    g = model.encoder.text_forward_plain(tokenization)
    div = diversity_loss(model.pool)
    tau = model.config.model.temperature
    totals, rows = [], []
    for enc, y, plan, g_p in zip(encoded_batch, labels, plans, g_ps):
        parts = _image_terms(model, enc, y, plan, g_p, g, div, tau)
        total = combine(**parts, weights=weights)
        totals.append(total)
        rows.append(LossBreakdown(**{k: v.item() for k, v in parts.items()}, total=total.item()))
    loss = totals[0]
    for t in totals[1:]:
        loss = ad.add(loss, t)
    loss = ad.scale(loss, 1.0 / len(totals))
    return loss, LossBreakdown.mean(rows)


# ---------------------------------------------------------------------------
# optimisation


def cosine_lr(t: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ContractError("schedule length must be positive")
    if not 0 <= t <= total:
        raise ContractError(f"step {t} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


class SGD:
    """Heavy-ball SGD: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for trainable tensors {missing}")
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.grad = None


def epoch_order(indices: Sequence[int], seed: int, epoch: int) -> list[int]:
    perm = np.random.default_rng([seed, 2, epoch]).permutation(len(indices))
    return [int(indices[i]) for i in perm]


def batches(indices: Sequence[int], batch_size: int, seed: int, steps_per_epoch: int, epochs: int) -> Iterable[list[int]]:
    """Deterministic minibatches; each epoch reshuffles the training indices."""
    for epoch in range(epochs):
        order = epoch_order(indices, seed, epoch)
        chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        if steps_per_epoch:
            chunks = [chunks[i % len(chunks)] for i in range(steps_per_epoch)]
        yield from chunks


def schedule_length(n_train: int, config: RunConfig) -> int:
    sc = config.schedule
    per_epoch = sc.steps_per_epoch or math.ceil(n_train / sc.batch_size)
    return per_epoch * sc.epochs


class Trainer:
    """Runs the few-shot training loop over the base classes of a split."""

    def __init__(self, model: AttriPromptModel, dataset: Dataset, split: FewShotSplit, optimizer: Optional[SGD] = None, step: int = 0):
        self.model = model
        self.dataset = dataset
        self.split = split
        self.weights = model.config.weights
        self.optimizer = optimizer or SGD(model.trainables(), model.config.schedule.momentum)
        self.step = step
        self.base_tokens = ClassTokenization.from_names([dataset.class_names[c] for c in split.base_classes])
        self._label_of = {c: i for i, c in enumerate(split.base_classes)}
        self._encoded: dict[int, EncodedImage] = {}

    def encoded(self, index: int) -> EncodedImage:
        # backbone is frozen, so per-image features and clusters never change
        enc = self._encoded.get(index)
        if enc is None:
            enc = self.model.encode_image(self.dataset.images[index])
            self._encoded[index] = enc
        return enc

    def train_step(self, batch: Sequence[int], lr: float) -> LossBreakdown:
        labels = [self._label_of[int(self.dataset.labels[i])] for i in batch]
        encoded = [self.encoded(i) for i in batch]
        with Tape() as tape:
            loss, breakdown = batch_loss(self.model, encoded, labels, self.base_tokens, self.weights)
        ad.backward(loss, tape)
        self.optimizer.step(lr)
        self.step += 1
        return breakdown

    def run(
        self, on_step: Optional[Callable[[int, LossBreakdown], None]] = None, max_steps: Optional[int] = None
    ) -> list[LossBreakdown]:
        """Train to the end of the schedule (or stop after ``max_steps`` steps of it)."""
        self.model.assert_trainable_set()
        cfg = self.model.config
        total = schedule_length(len(self.split.train_indices), cfg)
        history = []
        for t, batch in enumerate(batches(self.split.train_indices, cfg.schedule.batch_size, cfg.seed, cfg.schedule.steps_per_epoch, cfg.schedule.epochs)):
            if t < self.step:
                continue
            if max_steps is not None and t >= max_steps:
                break
            breakdown = self.train_step(batch, cosine_lr(t, total, cfg.schedule.base_lr))
            history.append(breakdown)
            if on_step is not None:
                on_step(t, breakdown)
        return history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    base_acc: float
    novel_acc: float
    hm: float

    def summary(self) -> str:
        return f"base_acc {self.base_acc:.2f}\nnovel_acc {self.novel_acc:.2f}\nhm {self.hm:.2f}\n"


def harmonic_mean(a: float, b: float) -> float:
    if a <= 0 or b <= 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def class_probabilities(model: AttriPromptModel, encoded: EncodedImage, tokenization: ClassTokenization) -> tuple[np.ndarray, np.ndarray]:
    """(P_ce, P_align) over the given class list."""
    return batch_probabilities(model, [encoded], tokenization)[0]


def batch_probabilities(model, encoded_batch, tokenization) -> list[tuple[np.ndarray, np.ndarray]]:
    tau = model.config.model.temperature
    out = []
    with ad.no_grad():
        prompt_sets = [plan_prompts(model.plan(e), model.pool.prompts) for e in encoded_batch]
        g_ps = model.encoder.encode_text_batch(tokenization, prompt_sets)
        g_aligned = [transform(g_p, model.text_head) for g_p in g_ps]
        for enc, g_p, g_a in zip(encoded_batch, g_ps, g_aligned):
            f = Tensor(enc.feature)
            p_ce = ad.softmax(clip_logits(f, g_p, tau)).data
            p_align = ad.softmax(clip_logits(transform(f, model.vision_head), g_a, tau)).data
            out.append((p_ce, p_align))
    return out


EVAL_CHUNK = 32


def accuracy(model: AttriPromptModel, dataset: Dataset, indices: Sequence[int], classes: Sequence[int], lambda1: float, encode=None) -> float:
    if not indices:
        raise ContractError("empty test set")
    tokens = ClassTokenization.from_names([dataset.class_names[c] for c in classes])
    position = {c: i for i, c in enumerate(classes)}
    encode = encode or (lambda i: model.encode_image(dataset.images[i]))
    correct = 0
    for start in range(0, len(indices), EVAL_CHUNK):
        chunk = indices[start : start + EVAL_CHUNK]
        probs = batch_probabilities(model, [encode(i) for i in chunk], tokens)
        for i, (p_ce, p_align) in zip(chunk, probs):
            correct += predict(fuse_predictions(p_ce, p_align, lambda1)) == position[int(dataset.labels[i])]
    return 100.0 * correct / len(indices)


def evaluate(split: FewShotSplit, model: AttriPromptModel, dataset: Dataset, lambda1: Optional[float] = None, encode=None) -> EvalResult:
    """Base accuracy over base classes, novel accuracy over novel classes, and their harmonic mean."""
    lam = model.config.weights.lambda1 if lambda1 is None else lambda1
    base_set, novel_set = set(split.base_classes), set(split.novel_classes)
    base_idx = [i for i in split.test_indices if int(dataset.labels[i]) in base_set]
    novel_idx = [i for i in split.test_indices if int(dataset.labels[i]) in novel_set]
    base = accuracy(model, dataset, base_idx, split.base_classes, lam, encode)
    novel = accuracy(model, dataset, novel_idx, split.novel_classes, lam, encode)
    return EvalResult(base, novel, harmonic_mean(base, novel))
