"""Loss terms and their weighted combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Union

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import clip_logits
from .errors import ConfigError, ContractError, DimensionError

Scalar = Union[Tensor, float]


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 25.0
    lambda3: float = 0.1
    lambda4: float = 0.01

    def validate(self) -> None:
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ConfigError(f"lambda1 must lie in [0, 1], got {self.lambda1}")
        for name in ("lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    ce: float
    align: float
    cc: float
    div: float
    match: float
    total: float

    def as_list(self) -> list[float]:
        return [self.ce, self.align, self.cc, self.div, self.match, self.total]

    def format_line(self, step: int) -> str:
        """``step ce align cc div match total`` with 9 significant digits."""
        return " ".join([str(step)] + [f"{v:.9g}" for v in self.as_list()])

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        n = len(items)
        fields = asdict(items[0]).keys()
        return cls(**{f: sum(getattr(b, f) for b in items) / n for f in fields})


def ce_loss(image_feature: Tensor, text_features: Tensor, label: int, tau: float) -> Tensor:
    """-log softmax(cos(g_i, f) / tau)[label] for one image."""
    C = text_features.shape[0]
    if not 0 <= int(label) < C:
        raise ContractError(f"label {label} outside [0, {C})")
    logp = ad.log_softmax(clip_logits(image_feature, text_features, tau))
    return ad.scale(ad.tsum(ad.take_rows(logp, [int(label)])), -1.0)


def batch_ce_loss(image_features: Sequence[Tensor], text_features: Sequence[Tensor], labels: Sequence[int], tau: float) -> Tensor:
    terms = [ce_loss(f, g, y, tau) for f, g, y in zip(image_features, text_features, labels)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def consistency_loss(prompted: Tensor, plain: Tensor) -> Tensor:
    """Per-class L1 distance summed over feature dimensions, averaged over classes."""
    if prompted.shape != plain.shape or prompted.ndim != 2:
        raise DimensionError(f"consistency_loss shape mismatch: {prompted.shape} vs {plain.shape}")
    return ad.scale(ad.tsum(ad.tabs(ad.sub(prompted, plain))), 1.0 / prompted.shape[0])


def combine(ce: Scalar, align: Scalar, cc: Scalar, div: Scalar, match: Scalar, weights: LossWeights) -> Scalar:
    w = weights
    return (1.0 - w.lambda1) * ce + w.lambda1 * align + w.lambda2 * cc + w.lambda3 * div - w.lambda4 * match


def total_loss(ce: Scalar, align: Scalar, cc: Scalar, div: Scalar, match: Scalar, weights: LossWeights) -> LossBreakdown:
    weights.validate()
    parts = [p.item() if isinstance(p, Tensor) else float(p) for p in (ce, align, cc, div, match)]
    return LossBreakdown(*parts, total=float(combine(*parts, weights)))
