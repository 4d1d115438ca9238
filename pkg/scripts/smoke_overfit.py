"""Overfit the tiny model on 8 synthetic 64x64 pairs and report train PSNR."""

import argparse
from dataclasses import replace

from obiformer.recipes import SmokeSetup, smoke_run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=SmokeSetup.learning_rate)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", default=None, help="optional CSV for the loss trace")
    args = ap.parse_args(argv)
    setup = replace(SmokeSetup(), steps=args.steps, learning_rate=args.lr, seed=args.seed)
    result = smoke_run(setup)
    if args.log:
        result.log.to_csv(args.log)
    print(f"steps {result.log.steps[-1]}  final loss {result.log.losses[-1]:.3f}  "
          f"train psnr {result.report.mean_psnr:.2f} dB  ssim {result.report.mean_ssim:.4f}  "
          f"time {result.seconds:.0f}s")


if __name__ == "__main__":
    main()
