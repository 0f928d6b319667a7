"""Adam, the mixed-dataset / task-specific training loops and sigma logging."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Sample, TrainingStream
from .model import GammaModel
from .nn import ConfigurationError
from .prompts import PROMPT_STRATEGIES
from .tensor import NumericDomainError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    mode: str = "mixed"  # mixed | task-specific
    prompt_strategy: str = "sdp"
    clip_norm: float | None = 5.0
    log_interval: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in ("mixed", "task-specific"):
            raise ConfigurationError(f"mode must be 'mixed' or 'task-specific', got {self.mode!r}")
        if self.prompt_strategy not in PROMPT_STRATEGIES:
            raise ConfigurationError(f"prompt_strategy must be one of {PROMPT_STRATEGIES}")

    def to_dict(self) -> dict:
        return asdict(self)


class AdamState:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [(name, t) for name, t in named_params if t.requires_grad]
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0

    def step(self, lr: float) -> None:
        for name, t in self.params:
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericDomainError(f"non-finite gradient in parameter {name} at step {self.step_count}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: AdamState, lr: float) -> None:
    state.step(lr)


def clip_gradients(params, max_norm: float) -> float:
    grads = [t.grad for t in params if t.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads))) if grads else 0.0
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


# ---------------------------------------------------------------- sigma log

@dataclass
class SigmaRecord:
    step: int
    encoder: str
    layer: int
    sigma: float


@dataclass
class SigmaLog:
    records: list[SigmaRecord] = field(default_factory=list)

    def append(self, rec: SigmaRecord) -> None:
        for prev in reversed(self.records):
            if prev.encoder == rec.encoder and prev.layer == rec.layer:
                if rec.step <= prev.step:
                    raise ValueError(f"sigma log steps must increase per layer ({prev.step} -> {rec.step})")
                break
        self.records.append(rec)

    def series(self, encoder: str, layer: int) -> tuple[np.ndarray, np.ndarray]:
        rows = [(r.step, r.sigma) for r in self.records if r.encoder == encoder and r.layer == layer]
        if not rows:
            return np.zeros(0, dtype=int), np.zeros(0)
        steps, vals = zip(*rows)
        return np.array(steps), np.array(vals)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "encoder", "layer", "sigma"])
            for r in self.records:
                w.writerow([r.step, r.encoder, r.layer, repr(float(r.sigma))])

    @classmethod
    def read_csv(cls, path) -> "SigmaLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.records.append(SigmaRecord(int(row["step"]), row["encoder"], int(row["layer"]), float(row["sigma"])))
        return out


def log_sigma(model: GammaModel, step: int, sigma_log: SigmaLog) -> None:
    for encoder, layer, moae in model.moae_layers():
        sigma_log.append(SigmaRecord(step, encoder, layer, float(moae.sigma.tensor.data[0])))


# ---------------------------------------------------------------- loops

@dataclass
class TrainResult:
    model: GammaModel
    sigma_log: SigmaLog
    losses: list[float]
    epoch_log: list[dict]
    steps: int


def batch_arrays(batch: list[Sample]) -> tuple[np.ndarray, list, np.ndarray]:
    images = np.stack([s.image for s in batch])
    return images, [s.scene for s in batch], np.array([s.norm_mos for s in batch])


def batch_loss(model: GammaModel, batch: list[Sample], strategy: str) -> T.Tensor:
    images, scenes, targets = batch_arrays(batch)
    q = model.score_scenes(images, scenes, strategy)
    return T.mse_loss(q, T.Tensor(targets))


def train_mixed(model: GammaModel, stream: TrainingStream, config: TrainConfig, on_step=None) -> TrainResult:
    """Minimise MSE between predicted scores and normalised MOS with Adam."""
    config.validate()
    if len(stream) == 0:
        raise ConfigurationError("training stream is empty")
    named = [(f"{g}/{p}", t) for p, g, t in model.named_parameters()]
    state = AdamState(named, config.beta1, config.beta2, config.eps)
    trainable = [t for _, t in state.params]
    sigma_log = SigmaLog()
    has_moae = bool(model.moae_layers())
    if has_moae:
        log_sigma(model, 0, sigma_log)
    losses: list[float] = []
    epoch_log = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        epoch_losses = []
        for batch in stream.batches(epoch, config.batch_size):
            for t in trainable:
                t.grad = None
            loss = batch_loss(model, batch, config.prompt_strategy)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericDomainError(f"non-finite loss at step {step}")
            T.backward(loss)
            if config.clip_norm is not None:
                clip_gradients(trainable, config.clip_norm)
            state.step(config.learning_rate)
            step += 1
            losses.append(value)
            epoch_losses.append(value)
            if has_moae and step % config.log_interval == 0:
                log_sigma(model, step, sigma_log)
            if on_step is not None:
                on_step(step, value)
        entry = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)), "wall_time": time.perf_counter() - t0}
        epoch_log.append(entry)
        log.info("epoch %d  mean loss %.6f  %.1fs", epoch, entry["mean_loss"], entry["wall_time"])
    if has_moae and (not sigma_log.records or sigma_log.records[-1].step != step):
        log_sigma(model, step, sigma_log)
    for t in trainable:
        t.grad = None
    return TrainResult(model, sigma_log, losses, epoch_log, step)


def train_task_specific(model: GammaModel, dataset_stream: TrainingStream, config: TrainConfig) -> TrainResult:
    """The mixed loop restricted to a single dataset's training split."""
    names = dataset_stream.datasets()
    if len(names) != 1:
        raise ConfigurationError(f"task-specific training needs exactly one dataset, got {sorted(names)}")
    return train_mixed(model, dataset_stream, config)
