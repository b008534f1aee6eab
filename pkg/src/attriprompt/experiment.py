"""End-to-end runs: train on a synthetic split, evaluate, sweep one axis, check gradients."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import Dataset, FewShotSplit, SyntheticSpec, generate_synthetic, render
from .encoders import ClassTokenization
from .errors import ConfigError
from .objectives import LossBreakdown
from .training import AttriPromptModel, EvalResult, Trainer, batch_loss, evaluate

# the degenerate configuration: one single-prompt pool entry, CE only
BASELINE_OVERRIDES = dict(pool_size=1, top_k=1, lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0)

SWEEP_PARAMS = {
    "M": "pool_size",
    "k": "top_k",
    "L_p": "prompt_len",
    "lambda1": "lambda1",
    "lambda3": "lambda3",
    "lambda4": "lambda4",
}


@dataclass
class RunResult:
    metrics: EvalResult
    history: list[LossBreakdown]
    model: AttriPromptModel
    trainer: Trainer


def train_and_evaluate(
    config: RunConfig,
    dataset: Dataset,
    split: FewShotSplit,
    on_step: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> RunResult:
    model = AttriPromptModel(config)
    trainer = Trainer(model, dataset, split)
    history = trainer.run(on_step)
    metrics = evaluate(split, model, dataset, encode=trainer.encoded)
    return RunResult(metrics, history, model, trainer)


def seeded_run(config: RunConfig, spec: SyntheticSpec, seed: int) -> EvalResult:
    """One run in which the data, backbone, pool and batch order all derive from ``seed``."""
    spec = SyntheticSpec(**{**spec.__dict__, "seed": seed})
    dataset, split = generate_synthetic(spec)
    return train_and_evaluate(config.replace(seed=seed), dataset, split).metrics


@dataclass
class SweepRow:
    value: float
    runs: list[EvalResult]

    @property
    def base(self) -> float:
        return statistics.fmean(r.base_acc for r in self.runs)

    @property
    def novel(self) -> float:
        return statistics.fmean(r.novel_acc for r in self.runs)

    @property
    def hm(self) -> float:
        return statistics.fmean(r.hm for r in self.runs)

    @property
    def hm_std(self) -> float:
        return statistics.stdev([r.hm for r in self.runs]) if len(self.runs) > 1 else 0.0


def sweep(
    param: str,
    values: Sequence[float],
    seeds: Sequence[int],
    config: RunConfig,
    spec: SyntheticSpec,
    progress: Optional[Callable[[SweepRow], None]] = None,
) -> list[SweepRow]:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    rows = []
    for value in values:
        cfg = config.replace(**{SWEEP_PARAMS[param]: value})
        cfg.validate()
        row = SweepRow(value, [seeded_run(cfg, spec, s) for s in seeds])
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_sweep(param: str, rows: Sequence[SweepRow]) -> str:
    lines = [f"{param:>8} {'base':>7} {'novel':>7} {'hm':>7}"]
    for row in rows:
        lines.append(f"{row.value:>8g} {row.base:7.2f} {row.novel:7.2f} {row.hm:7.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gradient suite

GRADCHECK_CLASSES = ("red circle solid", "green square striped", "blue triangle solid")


def gradcheck_problem(config: RunConfig, n_images: int = 2) -> tuple[AttriPromptModel, Callable[[], ad.Tensor]]:
    """A three-class toy batch and a closure computing the batch-mean total loss."""
    model = AttriPromptModel(config)
    mc = config.model
    rng = np.random.default_rng([config.seed, 20])
    images, labels = [], []
    for i in range(n_images):
        color, shape, texture = GRADCHECK_CLASSES[i % len(GRADCHECK_CLASSES)].split()
        img, _ = render(color, shape, texture, mc.image_size, 0.05, rng)
        images.append(img[: mc.channels])
        labels.append(i % len(GRADCHECK_CLASSES))
    encoded = [model.encode_image(img) for img in images]
    tokens = ClassTokenization.from_names(list(GRADCHECK_CLASSES))

    def loss() -> ad.Tensor:
        return batch_loss(model, encoded, labels, tokens, config.weights)[0]

    return model, loss


def gradient_suite(config: RunConfig, step: float = 1e-5) -> dict[str, float]:
    """Worst finite-difference relative error of the total loss for every trainable tensor."""
    model, loss = gradcheck_problem(config)
    return {name: float(err) for name, err in ad.finite_diff_errors(loss, model.trainables(), step).items()}
