"""Short training on a <=200-pair synthetic subset; compares restored test
images against the raw noisy inputs."""

import argparse
from dataclasses import replace

from obiformer.model import ModelConfig
from obiformer.recipes import GainSetup, relative_gain_run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=GainSetup.epochs)
    ap.add_argument("--lr", type=float, default=GainSetup.learning_rate)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional directory for metric CSVs")
    args = ap.parse_args(argv)
    setup = replace(GainSetup(), epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                    model=ModelConfig(encoder_depth=args.depth, base_channels=args.channels))
    run, raw = relative_gain_run(setup)
    if args.out:
        run.report.to_csv(f"{args.out}/restored.csv")
        raw.to_csv(f"{args.out}/raw.csv")
    print(f"raw      psnr {raw.mean_psnr:.2f} dB  ssim {raw.mean_ssim:.4f}")
    print(f"restored psnr {run.report.mean_psnr:.2f} dB  ssim {run.report.mean_ssim:.4f}")
    print(f"gain     psnr {run.report.mean_psnr - raw.mean_psnr:+.2f} dB  "
          f"ssim {run.report.mean_ssim - raw.mean_ssim:+.4f}  ({run.seconds:.0f}s, {run.log.steps[-1]} steps)")


if __name__ == "__main__":
    main()
