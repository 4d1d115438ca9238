"""Small fixed experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .data import SampleRecord, make_synthetic_pairs
from .loss import LossWeights
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, build_model
from .train import TrainConfig, TrainLog, Trainer

# perceptual terms off: the smoke runs must work without downloadable weights
PIXEL_WEIGHTS = LossWeights(a1=100.0, a2=0.0, a3=1.0, a4=0.0)


@dataclass
class SmokeSetup:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(encoder_depth=1, base_channels=8))
    pairs: int = 8
    size: int = 64
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 2e-3
    seed: int = 0

    def train_config(self) -> TrainConfig:
        epochs = -(-self.steps * self.batch_size // self.pairs)
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=epochs,
                           max_steps=self.steps, loss_weights=PIXEL_WEIGHTS, seed=self.seed,
                           validation_every=0)

    def records(self) -> list[SampleRecord]:
        return make_synthetic_pairs(self.pairs, size=self.size, seed=self.seed)


@dataclass
class RunResult:
    log: TrainLog
    report: MetricsReport
    seconds: float
    model: object = None


def smoke_run(setup: SmokeSetup | None = None, steps: int | None = None) -> RunResult:
    """Overfit a tiny model on a handful of pairs; the report scores the training pairs."""
    setup = setup or SmokeSetup()
    records = setup.records()
    model = build_model(setup.model, setup.seed)
    trainer = Trainer(model, records, setup.train_config())
    t0 = time.perf_counter()
    trainer.run(until=steps)
    seconds = time.perf_counter() - t0
    return RunResult(trainer.log, evaluate(model, records), seconds, model)


@dataclass
class GainSetup:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(encoder_depth=2, base_channels=8))
    train_pairs: int = 160
    test_pairs: int = 40
    size: int = 64
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-3
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                           loss_weights=PIXEL_WEIGHTS, seed=self.seed, validation_every=0, cosine_decay=True)


def relative_gain_run(setup: GainSetup | None = None) -> tuple[RunResult, MetricsReport]:
    """Short training on a synthetic subset; returns the model run and the raw-input baseline."""
    setup = setup or GainSetup()
    train_set = make_synthetic_pairs(setup.train_pairs, size=setup.size, seed=setup.seed)
    test_set = make_synthetic_pairs(setup.test_pairs, size=setup.size, seed=setup.seed + 10_000)
    model = build_model(setup.model, setup.seed)
    trainer = Trainer(model, train_set, setup.train_config())
    t0 = time.perf_counter()
    trainer.run()
    seconds = time.perf_counter() - t0
    return (RunResult(trainer.log, evaluate(model, test_set), seconds, model),
            evaluate(None, test_set, bypass=True))
