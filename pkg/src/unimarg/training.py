"""Prior-sample / mask / multi-head training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .errors import NumericError, ValidationError
from .masking import make_training_batch, sample_masks
from .neural import FLEXIBLE, MODES, STANDARD, UmModel, adam_step, head_loss_and_grads, loss_and_grads
from .program import ProgramSpec, sample_prior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    iterations: int = 5000
    mode: str = FLEXIBLE
    seed: int = 0
    loss_log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ValidationError("batch_size and iterations must be >= 1")
        if self.loss_log_every < 1:
            raise ValidationError("loss_log_every must be >= 1")
        if self.mode not in MODES:
            raise ValidationError(f"unknown training mode {self.mode!r}")


@dataclass
class TrainReport:
    head_names: list[str]
    steps: list[int] = field(default_factory=list)
    head_losses: list[np.ndarray] = field(default_factory=list)
    summed: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    final_step: int = 0

    def record(self, step: int, losses: np.ndarray):
        self.steps.append(step)
        self.head_losses.append(np.array(losses, dtype=float))
        self.summed.append(float(np.sum(losses)))

    def write_csv(self, heads_path, summed_path) -> None:
        with open(heads_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "head_name", "loss"])
            for step, losses in zip(self.steps, self.head_losses):
                for name, value in zip(self.head_names, losses):
                    w.writerow([step, name, repr(float(value))])
        with open(summed_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "summed_loss"])
            for step, value in zip(self.steps, self.summed):
                w.writerow([step, repr(value)])


def draw_batch(model: UmModel, program: ProgramSpec, batch_size: int, rng: np.random.Generator):
    """A batch of prior samples, each with a fresh random mask."""
    values = sample_prior(program, batch_size, rng)
    masked = sample_masks(program.n_sites, batch_size, rng)
    return make_training_batch(model.layout, model.stats, values, masked)


def train(
    model: UmModel,
    program: ProgramSpec,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[UmModel, TrainReport]:
    """Train ``model`` in place and return it with a loss report.

    Standard mode takes one ADAM step on the summed loss per iteration. Flexible
    mode visits heads in site order; each head computes its own loss at the
    current parameters and its own optimiser steps the trunk and that head.
    Sample and mask draws come from ``rng`` (default: derived from
    ``config.seed``); dropout draws come from a separate stream so both modes
    see the same batches.
    """
    if config.mode != model.mode:
        raise ValidationError(f"model was built for {model.mode!r} training, config says {config.mode!r}")
    if program.n_sites != model.layout.n_sites:
        raise ValidationError("model was built for a different program")
    data_rng = rng if rng is not None else stream(config.seed, "train", "data")
    drop_rng = stream(config.seed, "train", "dropout") if model.arch.dropout_p > 0 else None
    report = TrainReport(program.names)
    n = program.n_sites
    start = time.perf_counter()
    for it in range(config.iterations):
        x, t = draw_batch(model, program, config.batch_size, data_rng)
        try:
            if model.mode == STANDARD:
                losses, grads = loss_and_grads(model, x, t, drop_rng)
                params, names = model.params_for_optimizer(0)
                adam_step(model.optimizers[0], params, grads, names)
            else:
                losses = np.empty(n)
                for j in range(n):
                    losses[j], grads = head_loss_and_grads(model, x, t, j, drop_rng)
                    params, names = model.params_for_optimizer(j)
                    adam_step(model.optimizers[j], params, grads, names)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        model.steps_trained += 1
        if it % config.loss_log_every == 0 or it == config.iterations - 1:
            report.record(it, losses)
            log.debug("iter %d summed loss %.5f", it, report.summed[-1])
    report.wall_clock = time.perf_counter() - start
    report.final_step = config.iterations
    return model, report


def loss_curve_monotone_check(report: TrainReport, window: int = 10) -> bool:
    """True iff the mean summed loss over the last ``window`` log points is below the first ``window``."""
    curve = np.asarray(report.summed, dtype=float)
    if len(curve) < 2:
        return False
    w = min(window, len(curve) // 2) or 1
    return bool(curve[-w:].mean() < curve[:w].mean())
