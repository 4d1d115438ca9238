"""AdamW training loop, resumable data order, and finite-difference
gradient checking."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode

from .data import SampleRecord, augment, by_split
from .errors import ConfigurationError, TrainingError
from .loss import FeatureExtractor, LossWeights, total_loss
from .metrics import evaluate
from .model import no_decay

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 10
    epochs: int = 300
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    validation_every: int = 1
    # stop after this many optimiser steps even if epochs remain
    max_steps: int | None = None
    augment: bool = False
    cosine_decay: bool = False
    grad_clip: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError("learning_rate must be finite and >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "loss_weights":
                out.update({f"alpha{i + 1}": repr(v) for i, v in enumerate(asdict(value).values())})
            elif f.name == "betas":
                out["betas"] = ",".join(repr(b) for b in value)
            else:
                out[f.name] = "" if value is None else repr(value) if isinstance(value, float) else str(value)
        return out

    @classmethod
    def from_flat(cls, kv: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        ints = {"batch_size", "epochs", "seed", "checkpoint_every", "validation_every", "max_steps"}
        floats = {"learning_rate", "weight_decay", "grad_clip", "eps"}
        bools = {"augment", "cosine_decay"}
        for key, raw in kv.items():
            if key in ints:
                kwargs[key] = int(raw) if raw not in ("", "None") else None
            elif key in floats:
                kwargs[key] = float(raw) if raw not in ("", "None") else None
            elif key in bools:
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            elif key == "betas":
                kwargs["betas"] = tuple(float(b) for b in raw.split(","))
        weights = LossWeights(*(float(kv.get(f"alpha{i}", d)) for i, d in zip(range(1, 5), asdict(LossWeights()).values())))
        kwargs = {k: v for k, v in kwargs.items() if v is not None or k in ("max_steps", "grad_clip")}
        return cls(loss_weights=weights, **kwargs)


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    validations: list[tuple[int, float, float]] = field(default_factory=list)
    config: dict[str, str] = field(default_factory=dict)
    best_step: int | None = None
    best_psnr: float = -math.inf

    def record(self, step, loss, lr, wall_ms):
        if self.steps and step <= self.steps[-1]:
            raise TrainingError(f"log steps must increase: {step} after {self.steps[-1]}")
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)
        self.wall_ms.append(wall_ms)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr", "wall_ms"])
            for row in zip(self.steps, self.losses, self.lrs, self.wall_ms):
                w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}"])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.record(int(row["step"]), float(row["loss"]), float(row["lr"]), float(row["wall_ms"]))
        return out


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, exempt = [], []
    for name, p in model.named_parameters():
        (exempt if no_decay(name) else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": exempt, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def stack(records: Sequence[SampleRecord], attr: str) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(r, attr) for r in records])).float()


class Trainer:
    """Owns the optimiser and global step; batches depend only on (seed, step)."""

    def __init__(self, model, records: Sequence[SampleRecord], cfg: TrainConfig,
                 fx: FeatureExtractor | None = None, val_records: Sequence[SampleRecord] | None = None):
        if not records:
            raise ConfigurationError("training set is empty")
        if cfg.loss_weights.needs_extractor and fx is None:
            raise ConfigurationError("perceptual loss weights are non-zero but no feature extractor was given")
        self.model = model
        self.records = list(records)
        self.val_records = list(val_records or [])
        self.cfg = cfg
        self.fx = fx
        self.optimizer = make_optimizer(model, cfg)
        self.step = 0
        self.log = TrainLog(config=cfg.to_flat())
        self.best_state = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.records) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    def batch_for(self, step: int) -> list[SampleRecord]:
        epoch, index = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.records))
        chosen = order[index * self.cfg.batch_size:(index + 1) * self.cfg.batch_size]
        batch = [self.records[i] for i in chosen]
        if self.cfg.augment:
            batch = [augment(r, seed=int(np.random.default_rng([self.cfg.seed, epoch, int(i)]).integers(2 ** 31)))
                     for r, i in zip(batch, chosen)]
        return batch

    def lr_at(self, step: int) -> float:
        if not self.cfg.cosine_decay:
            return self.cfg.learning_rate
        return 0.5 * self.cfg.learning_rate * (1 + math.cos(math.pi * step / max(1, self.total_steps)))

    def load_state(self, optimizer_state: dict, step: int) -> None:
        """Restore Adam moments (keyed by parameter name) and the step counter."""
        named = dict(self.model.named_parameters())
        for name, st in optimizer_state.items():
            p = named[name]
            self.optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": st["exp_avg"].clone().to(p.dtype),
                "exp_avg_sq": st["exp_avg_sq"].clone().to(p.dtype),
            }
        self.step = step

    def optimizer_state(self) -> dict:
        out = {}
        for name, p in self.model.named_parameters():
            st = self.optimizer.state.get(p)
            if st:
                out[name] = {"exp_avg": st["exp_avg"].detach().clone(), "exp_avg_sq": st["exp_avg_sq"].detach().clone()}
        return out

    def train_step(self) -> float:
        batch = self.batch_for(self.step)
        noisy, clean, skel = stack(batch, "noisy"), stack(batch, "clean"), stack(batch, "skeleton_gt")
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        t0 = time.perf_counter()
        denoised, skeleton = self.model(noisy)
        loss = total_loss(denoised, clean, skeleton, skel, self.cfg.loss_weights, self.fx)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        self.log.record(self.step, value, lr, (time.perf_counter() - t0) * 1e3)
        return value

    def validate(self) -> None:
        if not self.val_records:
            return
        report = evaluate(self.model, self.val_records)
        self.log.validations.append((self.step, report.mean_psnr, report.mean_ssim))
        if report.mean_psnr > self.log.best_psnr:
            self.log.best_psnr, self.log.best_step = report.mean_psnr, self.step
            self.best_state = copy.deepcopy(self.model.state_dict())
        log.info("step %d val psnr %.3f ssim %.4f", self.step, report.mean_psnr, report.mean_ssim)

    def run(self, until: int | None = None, on_epoch_end=None) -> TrainLog:
        until = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < until:
            self.train_step()
            if self.step % self.steps_per_epoch == 0 or self.step == self.total_steps:
                epoch = math.ceil(self.step / self.steps_per_epoch)
                if self.cfg.validation_every and epoch % self.cfg.validation_every == 0:
                    self.validate()
                if on_epoch_end is not None:
                    on_epoch_end(self, epoch)
        return self.log


def train(model, records: Sequence[SampleRecord], cfg: TrainConfig, fx: FeatureExtractor | None = None):
    """Train on the ``train`` split (or everything if no split is marked) and
    validate on ``val``; returns ``(model, log)``."""
    train_set = by_split(records, "train") or list(records)
    trainer = Trainer(model, train_set, cfg, fx, val_records=by_split(records, "val"))
    return model, trainer.run()


# -- gradient check ------------------------------------------------------------

@dataclass
class GroupResult:
    max_rel_error: float
    checked: int
    passed: bool
    smallest_step: float = 1e-3


@dataclass
class GradCheckReport:
    rel_tol: float
    groups: dict[str, GroupResult]

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups.values())

    @property
    def checked(self) -> int:
        return sum(g.checked for g in self.groups.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.groups, key=lambda n: self.groups[n].max_rel_error)
        return name, self.groups[name].max_rel_error

    def lines(self) -> list[str]:
        return [f"{'PASS' if g.passed else 'FAIL'} {name} max_rel={g.max_rel_error:.3e} "
                f"n={g.checked} min_step={g.smallest_step:.0e}"
                for name, g in self.groups.items()]


def relative_error(analytic: float, numeric: float, abs_floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < abs_floor:
        return 0.0
    return abs(analytic - numeric) / scale


class BranchRecorder(TorchDispatchMode):
    """Records which side of every kink (ReLU, clamp, abs, max-pool argmax)
    each element falls on, so two evaluations can be compared piece-wise."""

    _SIGN_OPS = {"relu", "relu_", "leaky_relu", "leaky_relu_", "abs", "threshold"}

    def __init__(self):
        super().__init__()
        self.patterns = []

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        name = func.overloadpacket.__name__
        if name in self._SIGN_OPS:
            self.patterns.append(torch.sign(args[0]).to(torch.int8))
        elif name in ("clamp", "clamp_"):
            x, lo = args[0], args[1] if len(args) > 1 else kwargs.get("min")
            hi = args[2] if len(args) > 2 else kwargs.get("max")
            side = torch.zeros_like(x, dtype=torch.int8)
            if lo is not None:
                side = side - (x <= lo).to(torch.int8)
            if hi is not None:
                side = side + (x >= hi).to(torch.int8)
            self.patterns.append(side)
        elif name in ("clamp_min", "clamp_min_"):
            self.patterns.append((args[0] <= args[1]).to(torch.int8))
        out = func(*args, **kwargs)
        if name == "max_pool2d_with_indices":
            self.patterns.append(out[1].clone())
        return out

    def same_branches(self, other: "BranchRecorder") -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            a.shape == b.shape and torch.equal(a, b) for a, b in zip(self.patterns, other.patterns))


def gradient_check(model, sample: SampleRecord, fx: FeatureExtractor | None, rel_tol: float = 1e-3,
                   weights: LossWeights | None = None, min_checks: int = 200, step: float = 1e-3,
                   seed: int = 0, abs_floor: float = 1e-8, min_step: float = 1e-7) -> GradCheckReport:
    """Compare autograd against central differences in float64.

    Every named parameter contributes at least one sampled scalar and at
    least ``min_checks`` scalars are checked overall.  Where the +-step
    stencil straddles a kink of a piecewise-linear op the difference
    quotient is not a derivative estimate, so the step is divided by 10
    (down to ``min_step``) until both probes stay on the branches of the
    unperturbed point.
    """
    weights = weights or LossWeights()
    m = copy.deepcopy(model).double().train()
    f = copy.deepcopy(fx).double() if fx is not None else None
    noisy = torch.from_numpy(sample.noisy[None]).double()
    clean = torch.from_numpy(sample.clean[None]).double()
    skel = torch.from_numpy(sample.skeleton_gt[None]).double()

    def objective():
        d, s = m(noisy)
        return total_loss(d, clean, s, skel, weights, f)

    def probe():
        with BranchRecorder() as rec:
            value = objective().item()
        return value, rec

    m.zero_grad()
    objective().backward()
    named = list(m.named_parameters())
    rng = np.random.default_rng(seed)
    per_group = max(1, math.ceil(min_checks / len(named)))
    groups = {}
    with torch.no_grad():
        _, base = probe()
        for name, p in named:
            flat = p.view(-1)
            grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
            idx = rng.choice(flat.numel(), size=min(per_group, flat.numel()), replace=False)
            worst, smallest = 0.0, step
            for i in idx:
                orig = flat[i].item()
                h = step
                while True:
                    flat[i] = orig + h
                    up, rec_up = probe()
                    flat[i] = orig - h
                    down, rec_down = probe()
                    flat[i] = orig
                    smooth = base.same_branches(rec_up) and base.same_branches(rec_down)
                    if smooth or h / 10 < min_step:
                        break
                    h /= 10
                smallest = min(smallest, h)
                numeric = (up - down) / (2 * h)
                worst = max(worst, relative_error(grad[i].item(), numeric, abs_floor))
            groups[name] = GroupResult(worst, len(idx), worst <= rel_tol, smallest)
    return GradCheckReport(rel_tol, groups)
