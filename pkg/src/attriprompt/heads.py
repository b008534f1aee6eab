"""Channel-wise affine heads for the second alignment stream, and test-time fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .objectives import ce_loss


@dataclass
class ChannelAffineHead:
    alpha: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, dim: int, name: str) -> "ChannelAffineHead":
        return cls(
            Tensor(np.ones(dim), requires_grad=True, name=f"{name}.alpha"),
            Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.beta"),
        )


def transform(feature: Tensor, head: ChannelAffineHead) -> Tensor:
    """alpha * v + beta over the last axis; accepts one feature [d] or rows [C, d]."""
    if feature.shape[-1] != head.alpha.shape[0]:
        raise DimensionError(f"head width {head.alpha.shape[0]} does not match feature {feature.shape}")
    return ad.add(ad.mul(feature, head.alpha), head.beta)


def align_loss(f_prime: Tensor, g_prime: Tensor, label: int, tau: float) -> Tensor:
    return ce_loss(f_prime, g_prime, label, tau)


def fuse_predictions(p_ce, p_align, lambda1: float) -> np.ndarray:
    p_ce = np.asarray(p_ce, dtype=np.float64)
    p_align = np.asarray(p_align, dtype=np.float64)
    if p_ce.shape != p_align.shape:
        raise DimensionError(f"probability vectors differ in shape: {p_ce.shape} vs {p_align.shape}")
    for name, p in (("p_ce", p_ce), ("p_align", p_align)):
        if abs(p.sum(axis=-1) - 1.0).max() > 1e-9 or (p < 0).any():
            raise ContractError(f"{name} is not a probability vector")
    if not 0.0 <= lambda1 <= 1.0:
        raise ContractError(f"lambda1 must lie in [0, 1], got {lambda1}")
    return (1.0 - lambda1) * p_ce + lambda1 * p_align


def predict(probs: np.ndarray) -> int:
    """Argmax; ties go to the lower class index."""
    return int(np.argmax(probs))
