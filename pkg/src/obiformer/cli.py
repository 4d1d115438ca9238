"""``obiformer`` command-line entry point.

Settings resolve as flags > ``--config`` key=value file > built-in defaults.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch
import torch.nn.functional as F

from . import bench, data
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, FormatError, IngestionError, OBIFormerError
from .loss import FeatureExtractor
from .model import ModelConfig, build_model, count_parameters
from .train import TrainConfig, TrainLog, Trainer, gradient_check

COMMANDS = ("synth", "skeletonize", "train", "denoise", "eval", "bench", "sweep", "plot", "gradcheck")
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
# flag destination -> flat config key
FLAG_KEYS = {
    "seed": "seed", "epochs": "epochs", "lr": "learning_rate", "batch": "batch_size",
    "alpha1": "alpha1", "alpha2": "alpha2", "alpha3": "alpha3", "alpha4": "alpha4",
    "noise_kind": "noise_kind", "intensity": "intensity", "size": "size", "device": "device",
    "max_steps": "max_steps", "encoder_depth": "encoder_depth", "base_channels": "base_channels",
}
DEFAULTS = {"seed": "0", "noise_kind": "mixed", "intensity": "0.5", "size": "256", "device": "cpu"}
GRADCHECK_DEFAULTS = {"encoder_depth": "1", "base_channels": "4", "size": "32"}

log = logging.getLogger("obiformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--device", help="cpu or cuda[:i]")
    p.add_argument("--size", type=int, help="square working resolution")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    for i in range(1, 5):
        p.add_argument(f"--alpha{i}", type=float)
    p.add_argument("--encoder-depth", dest="encoder_depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--vgg-weights", help="local VGG-16 weight file (else $OBIFORMER_CACHE)")
    p.add_argument("--untrained-extractor", action="store_true",
                   help="random VGG trunk; only for offline smoke runs")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="obiformer", description="Oracle bone inscription denoising toolkit.")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="degrade clean glyph images into noisy/clean/skeleton triplets")
    _common(p)
    p.add_argument("--in", dest="inp", help="directory of clean PNGs (omit to render synthetic glyphs)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8, help="glyphs to render when --in is omitted")
    p.add_argument("--noise-kind", dest="noise_kind", choices=data.ALL_NOISE_KINDS)
    p.add_argument("--intensity", type=float)

    p = sub.add_parser("skeletonize", help="binarize and thin every PNG in a directory")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory or manifest")
    _common(p)
    _train_flags(p)
    p.add_argument("--in", dest="inp", required=True, help="dataset root or manifest file")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="resume from this checkpoint")

    p = sub.add_parser("denoise", help="restore every PNG in a directory")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--bypass", action="store_true", help="score the noisy inputs themselves")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("bench", help="parameters, FLOPs and inference latency")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--encoder-depth", dest="encoder_depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--convention", choices=("flops", "macs"), default="flops")

    p = sub.add_parser("sweep", help="loss-weight sensitivity sweep")
    _common(p)
    _train_flags(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True, choices=("a1", "a2", "a3", "a4"))
    p.add_argument("--values", required=True, help="comma separated weights")

    p = sub.add_parser("plot", help="render a training log or sweep CSV")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--alpha3", type=float)
    p.add_argument("--alpha4", type=float)
    p.add_argument("--encoder-depth", dest="encoder_depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-3)
    p.add_argument("--vgg-weights")
    return ap


# -- settings -----------------------------------------------------------------

def resolve_settings(args, defaults: dict[str, str] | None = None) -> dict[str, str]:
    merged = dict(DEFAULTS)
    merged.update(defaults or {})
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        merged.update(data.parse_key_values(path.read_text()))
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            merged[key] = str(value)
    return merged


def model_config(settings: dict[str, str]) -> ModelConfig:
    return ModelConfig.from_dict({k: v for k, v in settings.items() if k in MODEL_KEYS})


def train_config(settings: dict[str, str]) -> TrainConfig:
    return TrainConfig.from_flat(settings)


def device_of(settings: dict[str, str]) -> torch.device:
    try:
        dev = torch.device(settings["device"])
    except RuntimeError as exc:
        raise UsageError(f"bad --device {settings['device']!r}") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise UsageError("CUDA requested but not available")
    if dev.type not in ("cpu", "cuda"):
        raise UsageError(f"unsupported device {dev}")
    return dev


def _size(settings) -> tuple[int, int]:
    s = int(settings["size"])
    if s < 1:
        raise UsageError("--size must be positive")
    return s, s


def _pngs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise IngestionError(f"input {path} not found")
    return sorted(path.glob("*.png"))


def open_dataset(path, size) -> list[data.SampleRecord]:
    path = Path(path)
    if path.is_file():
        manifest = data.DatasetManifest.from_file(path)
    elif (path / "manifest.txt").is_file():
        manifest = data.DatasetManifest.from_file(path / "manifest.txt")
    else:
        manifest = data.DatasetManifest(root=path)
    if not manifest.ids:
        raise IngestionError(f"no images found under {manifest.listing_dir}")
    return data.load_dataset(manifest, size)


def extractor(args, weights, seed: int):
    if not weights.needs_extractor:
        return None
    if getattr(args, "untrained_extractor", False):
        log.warning("using an untrained feature extractor; perceptual terms are not meaningful")
        return FeatureExtractor.untrained(seed)
    return FeatureExtractor.pretrained(getattr(args, "vgg_weights", None))


# -- commands -------------------------------------------------------------------

def cmd_synth(args, settings) -> None:
    out = Path(args.out)
    size = _size(settings)
    seed = int(settings["seed"])
    kind = settings["noise_kind"]
    intensity = float(settings["intensity"])
    if args.inp:
        sources = [(p.stem, data.resize(data.read_png(p), size)) for p in _pngs(Path(args.inp))]
    else:
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        sources = [(f"glyph_{i:04d}", data.render_glyph(size[0], seed=seed * 100003 + i)) for i in range(args.count)]
    if not sources:
        raise IngestionError(f"no PNG files in {args.inp}")
    records = []
    for i, (rid, clean) in enumerate(sources):
        spec = data.NoiseSpec(kind, intensity, seed=seed * 100003 + i)
        records.append(data.SampleRecord(rid, data.synthesize_noise(clean, spec), clean, data.skeleton_of(clean)))
    data.write_triplets(records, out)
    print(f"wrote {len(records)} triplets to {out}")


def cmd_skeletonize(args, settings) -> None:
    out = Path(args.out)
    paths = _pngs(Path(args.inp))
    if not paths:
        raise IngestionError(f"no PNG files in {args.inp}")
    for p in paths:
        image = data.read_png(p)
        data.write_png(out / f"{p.stem}.png", data.skeleton_of(image))
    print(f"wrote {len(paths)} skeletons to {out}")


def cmd_train(args, settings) -> None:
    out = Path(args.out)
    tcfg = train_config(settings)
    dev = device_of(settings)
    records = open_dataset(args.inp, _size(settings))
    fx = extractor(args, tcfg.loss_weights, tcfg.seed)
    if args.ckpt:
        ck = load_checkpoint(args.ckpt)
        model, start, moments = ck.model, ck.step, ck.optimizer_state
    else:
        model, start, moments = build_model(model_config(settings), tcfg.seed), 0, {}
    if dev.type != "cpu":
        log.warning("training runs on CPU; --device only affects denoise and bench")
    train_set = data.by_split(records, "train") or records
    trainer = Trainer(model, train_set, tcfg, fx, val_records=data.by_split(records, "val"))
    if start:
        trainer.load_state(moments, start)
    flat = tcfg.to_flat()

    def on_epoch_end(tr, epoch):
        log.info("epoch %d step %d loss %.4f", epoch, tr.step, tr.log.losses[-1])
        if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{epoch:04d}.obif", model, tr.optimizer_state(), flat, tr.step)

    trainer.run(on_epoch_end=on_epoch_end)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.obif", model, trainer.optimizer_state(), flat, trainer.step)
    if trainer.best_state is not None:
        best = copy.deepcopy(model)
        best.load_state_dict(trainer.best_state)
        save_checkpoint(out / "best.obif", best, None, flat, trainer.log.best_step)
        print(f"best validation psnr {trainer.log.best_psnr:.3f} dB at step {trainer.log.best_step}; "
              f"checkpoint {out / 'best.obif'}")
    trainer.log.to_csv(out / "train_log.csv")
    last = trainer.log.losses[-1] if trainer.log.losses else float("nan")
    print(f"trained to step {trainer.step}, final loss {last:.4f}; checkpoint {out / 'model.obif'}")


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


def cmd_denoise(args, settings) -> None:
    out = Path(args.out)
    dev = device_of(settings)
    model = load_checkpoint(args.ckpt).model.to(dev).eval()
    paths = _pngs(Path(args.inp))
    if not paths:
        raise IngestionError(f"no PNG files in {args.inp}")
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        image = torch.from_numpy(data.read_png(p, model.cfg.io_channels))[None].to(dev)
        padded, (h, w) = pad_to_multiple(image, model.cfg.size_multiple)
        with torch.no_grad():
            denoised, skeleton = model(padded)
        data.write_png(out / f"{p.stem}_denoised.png", denoised[0, :, :h, :w].cpu().numpy())
        data.write_png(out / f"{p.stem}_skeleton.png", skeleton[0, :, :h, :w].cpu().numpy())
    print(f"denoised {len(paths)} images into {out}")


def cmd_eval(args, settings) -> None:
    from .metrics import evaluate

    if not args.bypass and not args.ckpt:
        raise UsageError("eval needs --ckpt or --bypass")
    records = open_dataset(args.inp, _size(settings))
    split = data.by_split(records, args.split)
    if not split:
        log.warning("split %r is empty; evaluating all %d records", args.split, len(records))
        split = records
    model = None if args.bypass else load_checkpoint(args.ckpt).model
    report = evaluate(model, split, bypass=args.bypass, tag=Path(args.ckpt).stem if args.ckpt else "raw")
    path = report.to_csv(Path(args.out) / "metrics.csv")
    print(f"{report.count} images  psnr {report.mean_psnr:.3f} dB  ssim {report.mean_ssim:.4f}  -> {path}")


def cmd_bench(args, settings) -> None:
    out = Path(args.out)
    if args.ckpt:
        model = load_checkpoint(args.ckpt).model
    else:
        model = build_model(model_config(settings), int(settings["seed"]))
    shape = (1, model.cfg.io_channels, *_size(settings))
    report = bench.benchmark_inference(model, shape, args.warmup, args.iters, int(settings["seed"]),
                                       device_of(settings), args.convention)
    flops = bench.count_flops(model.cfg, shape, args.convention)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "efficiency.csv")
    with open(out / "flops_breakdown.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module", *bench.CATEGORIES])
        for name, parts in flops.breakdown.items():
            w.writerow([name, *(f"{parts.get(c, 0.0):.0f}" for c in bench.CATEGORIES)])
    print(f"params {count_parameters(model):,}  {args.convention} {report.flops / 1e9:.3f}G  "
          f"latency mean {report.mean_ms:.2f} ms p50 {report.p50_ms:.2f} p95 {report.p95_ms:.2f}")


def cmd_sweep(args, settings) -> None:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma separated numbers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    tcfg = train_config(settings)
    records = open_dataset(args.inp, _size(settings))
    swept_needs_fx = args.axis in ("a2", "a4") and any(v > 0 for v in values)
    fx = None
    if tcfg.loss_weights.needs_extractor or swept_needs_fx:
        fx = FeatureExtractor.untrained(tcfg.seed) if args.untrained_extractor else \
            FeatureExtractor.pretrained(args.vgg_weights)
    rows = bench.alpha_sweep(model_config(settings), tcfg, args.axis, values, records, fx, tcfg.seed)
    paths = bench.emit_plots(rows, args.out)
    for r in rows:
        print(f"{r.axis}={r.value:g}  psnr {r.psnr:.3f}  ssim {r.ssim:.4f}")
    print("wrote " + ", ".join(str(p) for p in paths))


def read_plot_source(path: Path):
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), [])
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if header[:2] == ["step", "loss"]:
        return TrainLog.from_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if header[:2] == ["axis", "value"]:
        return [bench.SweepRow(r["axis"], float(r["value"]), float(r["psnr_db"]), float(r["ssim"])) for r in rows]
    if header[:2] == ["csab_per_ofb", "gsnb_per_ofb"]:
        return [(int(r["csab_per_ofb"]), int(r["gsnb_per_ofb"]), float(r["psnr_db"]), float(r["ssim"]))
                for r in rows]
    raise FormatError(f"{path}: unrecognised CSV header {header}")


def cmd_plot(args, settings) -> None:
    paths = bench.emit_plots(read_plot_source(Path(args.inp)), args.out)
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_gradcheck(args, settings) -> None:
    cfg = model_config(settings)
    tcfg = train_config(settings)
    size = _size(settings)
    seed = int(settings["seed"])
    sample = data.make_synthetic_pairs(1, size=size[0], seed=seed)[0]
    fx = None
    if tcfg.loss_weights.needs_extractor:
        # gradient correctness does not depend on the trunk weights
        fx = FeatureExtractor.pretrained(args.vgg_weights) if args.vgg_weights else FeatureExtractor.untrained(seed)
    report = gradient_check(build_model(cfg, seed), sample, fx, args.rel_tol, tcfg.loss_weights, seed=seed)
    for line in report.lines():
        print(line)
    name, err = report.worst
    print(f"{'PASS' if report.passed else 'FAIL'}: {report.checked} scalars, worst {err:.3e} at {name}")
    if not report.passed:
        raise OBIFormerError("gradient check failed")


HANDLERS = {
    "synth": cmd_synth, "skeletonize": cmd_skeletonize, "train": cmd_train, "denoise": cmd_denoise,
    "eval": cmd_eval, "bench": cmd_bench, "sweep": cmd_sweep, "plot": cmd_plot, "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve_settings(args, GRADCHECK_DEFAULTS if args.command == "gradcheck" else None)
        HANDLERS[args.command](args, settings)
    except (UsageError, ConfigurationError) as exc:
        print(f"obiformer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OBIFormerError, OSError, ValueError, RuntimeError) as exc:
        print(f"obiformer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
