"""Parameter/FLOP accounting, latency benchmarking, loss-weight sweeps and
report plots."""

from __future__ import annotations

import csv
import platform
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError
from .model import ModelConfig, build_model, count_parameters

# "attention" holds only the two C x C map products; softmax and norm terms
# of the attention path are booked as elementwise
CATEGORIES = ("conv", "attention", "elementwise")
# per-element operation counts for the non multiply-add work
LAYERNORM_OPS = 8      # mean, centre, square, mean, add eps, sqrt, divide, affine(2) ~ 8
BATCHNORM_OPS = 2      # folded scale and shift in eval mode
GELU_OPS = 8
SOFTMAX_OPS = 3        # exp, sum, divide
L2NORM_OPS = 3         # square, sum, divide


@dataclass
class FlopReport:
    total: float
    breakdown: "OrderedDict[str, dict[str, float]]"
    convention: str
    input_shape: tuple[int, ...]

    def category(self, name: str) -> float:
        return sum(parts.get(name, 0.0) for parts in self.breakdown.values())

    def matching(self, fragment: str, category: str | None = None) -> float:
        """Sum over breakdown entries whose path contains ``fragment``."""
        total = 0.0
        for path, parts in self.breakdown.items():
            if fragment in path:
                total += parts.get(category, 0.0) if category else sum(parts.values())
        return total


def conv_flops(cin: int, cout: int, kernel: int, hout: int, wout: int, groups: int = 1,
               convention: str = "flops") -> float:
    """``Cin/groups * Cout * K^2 * Hout * Wout`` multiply-adds, 2 FLOPs each unless counting MACs."""
    return (2.0 if convention == "flops" else 1.0) * (cin // groups) * cout * kernel * kernel * hout * wout


class _FlopWalker:
    def __init__(self, cfg: ModelConfig, batch: int, convention: str):
        if convention not in ("flops", "macs"):
            raise ConfigurationError(f"convention must be 'flops' or 'macs', got {convention!r}")
        self.cfg = cfg
        self.batch = batch
        # a multiply-add is 2 FLOPs or 1 MAC
        self.madd = 2.0 if convention == "flops" else 1.0
        self.entries: OrderedDict[str, dict[str, float]] = OrderedDict()

    def add(self, path: str, category: str, amount: float) -> None:
        parts = self.entries.setdefault(path, {})
        parts[category] = parts.get(category, 0.0) + self.batch * amount

    def conv(self, path, cin, cout, k, hout, wout, groups=1):
        self.add(path, "conv", self.madd * (cin // groups) * cout * k * k * hout * wout)

    def deconv(self, path, cin, cout, k, hin, win):
        self.add(path, "conv", self.madd * cin * cout * k * k * hin * win)

    def csa(self, path, c, hw):
        self.conv(path + ".qkv", c, 3 * c, 1, hw, 1)
        self.conv(path + ".qkv_dw", 3 * c, 3 * c, 3, hw, 1, groups=3 * c)
        if self.cfg.qk_normalize:
            self.add(path, "elementwise", 2 * L2NORM_OPS * c * hw)
        self.add(path, "attention", self.madd * c * c * hw)      # K Q^T
        self.add(path, "elementwise", (1 + SOFTMAX_OPS) * c * c)  # / alpha, softmax
        self.add(path, "attention", self.madd * c * c * hw)      # A V

    def csab(self, path, c, hw):
        hidden = int(c * self.cfg.ffn_expansion)
        self.add(path + ".norm1", "elementwise", LAYERNORM_OPS * c * hw)
        self.csa(path + ".attn", c, hw)
        self.conv(path + ".project", c, c, 1, hw, 1)
        self.add(path, "elementwise", 2 * c * hw)                 # two residual adds
        self.add(path + ".norm2", "elementwise", LAYERNORM_OPS * c * hw)
        self.conv(path + ".ffn.project_in", c, 2 * hidden, 1, hw, 1)
        self.conv(path + ".ffn.dwconv", 2 * hidden, 2 * hidden, 3, hw, 1, groups=2 * hidden)
        self.add(path + ".ffn", "elementwise", (GELU_OPS + 1) * hidden * hw)
        self.conv(path + ".ffn.project_out", hidden, c, 1, hw, 1)

    def gsnb(self, path, c, hw):
        self.conv(path + ".conv1", c, c, 3, hw, 1)
        self.conv(path + ".conv2", c, c, 3, hw, 1)
        self.add(path, "elementwise", (2 * BATCHNORM_OPS + 1 + 1) * c * hw)   # BN x2, ReLU, residual

    def skff(self, path, c, hw):
        d = max(c // self.cfg.skff_reduction, self.cfg.skff_min_channels)
        self.add(path, "elementwise", c * hw + c * hw)           # stream sum, global pool
        self.conv(path + ".squeeze", c, d, 1, 1, 1)
        self.conv(path + ".recon_logits", d, c, 1, 1, 1)
        self.conv(path + ".glyph_logits", d, c, 1, 1, 1)
        self.add(path, "elementwise", SOFTMAX_OPS * 2 * c)
        self.add(path, "elementwise", 3 * c * hw)                # two products, one sum

    def ofb(self, path, c, hw):
        for i in range(self.cfg.csab_per_ofb):
            self.csab(f"{path}.recon.{i}", c, hw)
        for i in range(self.cfg.gsnb_per_ofb):
            self.gsnb(f"{path}.glyph.{i}", c, hw)
        self.skff(f"{path}.skff", c, hw)

    def model(self, h, w):
        cfg = self.cfg
        c0 = cfg.base_channels
        self.conv("input_proj", cfg.io_channels, c0, 3, h, w)
        self.add("input_proj", "elementwise", 2 * c0 * h * w)     # bias, LeakyReLU
        for level in range(cfg.encoder_depth):
            c, s = cfg.stage_channels(level), 2 ** level
            self.ofb(f"encoders.{level}", c, (h // s) * (w // s))
            self.conv(f"downs.{level}.conv", c, 2 * c, 4, h // (2 * s), w // (2 * s))
        n = cfg.encoder_depth
        self.ofb("bottleneck", cfg.stage_channels(n), (h >> n) * (w >> n))
        for level in reversed(range(n)):
            c, s = cfg.stage_channels(level), 2 ** level
            self.deconv(f"ups.{level}.deconv", 2 * c, c, 2, h // (2 * s), w // (2 * s))
            self.add(f"ups.{level}", "elementwise", c * (h // s) * (w // s))      # skip add
            self.ofb(f"decoders.{level}", c, (h // s) * (w // s))
        self.add("output_proj", "elementwise", c0 * h * w)        # F0 + recon stream
        self.conv("output_proj", c0, cfg.io_channels, 3, h, w)
        self.conv("corrector", c0, cfg.skeleton_channels, 3, h, w)
        self.add("output_proj", "elementwise", cfg.io_channels * h * w)
        self.add("corrector", "elementwise", cfg.skeleton_channels * h * w)


def count_flops(cfg: ModelConfig, input_shape=(1, 3, 256, 256), convention: str = "flops") -> FlopReport:
    """Analytic operation count of one forward pass in eval mode.

    Convolutions cost ``Cin/groups * Cout * K^2 * Hout * Wout`` multiply-adds
    (transposed convolutions scatter over the input grid); each attention
    map costs ``C^2 * HW`` multiply-adds to build and again to apply.
    """
    if len(input_shape) == 3:
        input_shape = (1, *input_shape)
    b, ch, h, w = input_shape
    if ch != cfg.io_channels:
        raise ShapeError(f"input has {ch} channels, model expects {cfg.io_channels}")
    m = cfg.size_multiple
    if h % m or w % m:
        raise ShapeError(f"H and W must be divisible by {m}, got {(h, w)}")
    walker = _FlopWalker(cfg, b, convention)
    walker.model(h, w)
    total = sum(sum(p.values()) for p in walker.entries.values())
    return FlopReport(total, walker.entries, convention, tuple(input_shape))


def dense_attention_flops(channels: int, hw: int, convention: str = "flops") -> float:
    """Cost of building and applying an HW x HW spatial attention map."""
    madd = 2.0 if convention == "flops" else 1.0
    return 2 * madd * hw * hw * channels + SOFTMAX_OPS * hw * hw


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# -- latency -------------------------------------------------------------------

@dataclass
class EfficiencyReport:
    param_count: int
    flops: float
    convention: str
    input_shape: tuple[int, ...]
    warmup: int
    iters: int
    samples_ms: list[float] = field(default_factory=list)
    device: str = ""

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def p50_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    FIELDS = ("param_count", "flops", "convention", "input_shape", "warmup", "iters",
              "mean_ms", "p50_ms", "p95_ms", "device")

    def row(self) -> list[str]:
        values = [getattr(self, f) for f in self.FIELDS]
        values[3] = "x".join(str(d) for d in self.input_shape)
        return [f"{v:.6f}" if isinstance(v, float) else str(v) for v in values]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            w.writerow(self.row())
        return path


def describe_device(device: torch.device) -> str:
    if device.type == "cuda":
        return torch.cuda.get_device_name(device)
    return f"cpu:{platform.processor() or platform.machine()} threads={torch.get_num_threads()}"


def benchmark_inference(model, input_shape=(1, 3, 256, 256), warmup: int = 50, iters: int = 100,
                        seed: int = 0, device: str | torch.device = "cpu",
                        convention: str = "flops") -> EfficiencyReport:
    """Serial eval-mode timing on a fixed random input."""
    if warmup < 0 or iters < 1:
        raise ConfigurationError("warmup must be >= 0 and iters >= 1")
    device = torch.device(device)
    model = model.to(device).eval()
    x = torch.rand(input_shape, generator=torch.Generator().manual_seed(seed)).to(device)
    sync = torch.cuda.synchronize if device.type == "cuda" else (lambda: None)
    samples = []
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        sync()
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            sync()
            samples.append((time.perf_counter() - t0) * 1e3)
    flops = count_flops(model.cfg, input_shape, convention).total
    return EfficiencyReport(count_parameters(model), flops, convention, tuple(input_shape), warmup, iters,
                            samples, describe_device(device))


# -- loss-weight sweep --------------------------------------------------------------

@dataclass
class SweepRow:
    axis: str
    value: float
    psnr: float
    ssim: float


def alpha_sweep(model_cfg: ModelConfig, train_cfg, axis: str, values: Sequence[float], records,
                fx=None, model_seed: int = 0, eval_split: str = "val") -> list[SweepRow]:
    """Short seeded training per value of one loss weight, scored on ``eval_split``."""
    from .data import by_split
    from .metrics import evaluate
    from .train import train

    if axis not in ("a1", "a2", "a3", "a4"):
        raise ConfigurationError(f"sweep axis must be one of a1..a4, got {axis!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    held_out = by_split(records, eval_split) or by_split(records, "test") or list(records)
    rows = []
    for value in values:
        cfg = replace(train_cfg, loss_weights=replace(train_cfg.loss_weights, **{axis: float(value)}))
        model = build_model(model_cfg, model_seed)
        train(model, records, cfg, fx)
        report = evaluate(model, held_out)
        rows.append(SweepRow(axis, float(value), report.mean_psnr, report.mean_ssim))
    return rows


# -- plots ----------------------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_plots(source, out_dir) -> list[Path]:
    """Write a CSV and PNG chart for a TrainLog, sweep rows, or block-count rows.

    Block-count rows are ``(csab_per_ofb, gsnb_per_ofb, psnr, ssim)`` tuples.
    """
    from .train import TrainLog

    out_dir = Path(out_dir)
    if isinstance(source, TrainLog):
        if not source.steps:
            raise ConfigurationError("training log is empty")
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = source.to_csv(out_dir / "loss_curve.csv")
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(source.steps, source.losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        fig.tight_layout()
        png = out_dir / "loss_curve.png"
        fig.savefig(png, dpi=100)
        plt.close(fig)
        return [csv_path, png]

    rows = list(source)
    if not rows:
        raise ConfigurationError("nothing to plot")
    out_dir.mkdir(parents=True, exist_ok=True)
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    if isinstance(rows[0], SweepRow):
        axis = rows[0].axis
        stem = f"sweep_{axis}"
        csv_path = _write_csv(out_dir / f"{stem}.csv", ["axis", "value", "psnr_db", "ssim"],
                              [[r.axis, repr(r.value), f"{r.psnr:.6f}", f"{r.ssim:.6f}"] for r in rows])
        xs = [r.value for r in rows]
        ps, ss = [r.psnr for r in rows], [r.ssim for r in rows]
        ax1.set_xlabel(axis)
        ax2.set_xlabel(axis)
        if all(x > 0 for x in xs) and len(xs) > 1:
            ax1.set_xscale("log")
            ax2.set_xscale("log")
    else:
        stem = "block_counts"
        csv_path = _write_csv(out_dir / f"{stem}.csv", ["csab_per_ofb", "gsnb_per_ofb", "psnr_db", "ssim"],
                              [[int(a), int(b), f"{p:.6f}", f"{s:.6f}"] for a, b, p, s in rows])
        xs = [f"{int(a)}/{int(b)}" for a, b, _, _ in rows]
        ps, ss = [r[2] for r in rows], [r[3] for r in rows]
        ax1.set_xlabel("CSAB / GSNB per block")
        ax2.set_xlabel("CSAB / GSNB per block")
    ax1.plot(xs, ps, marker="o")
    ax1.set_ylabel("PSNR (dB)")
    ax2.plot(xs, ss, marker="o", color="tab:orange")
    ax2.set_ylabel("SSIM")
    fig.tight_layout()
    png = out_dir / f"{stem}.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return [csv_path, png]
