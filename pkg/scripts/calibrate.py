"""Search (encoder_depth, base_channels) for the configuration closest to the
reference size of 8.35M parameters and 20.45 GFLOPs at 256 x 256."""

import argparse
import csv
import sys

from obiformer.bench import count_flops
from obiformer.model import ModelConfig, OBIFormer, count_parameters

TARGET_PARAMS = 8.35e6
TARGET_FLOPS = 20.45e9


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depths", default="2,3,4,5")
    ap.add_argument("--channels", default="8,12,16,20,24,28,32,36,40,48")
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args(argv)
    rows = []
    for n in map(int, args.depths.split(",")):
        for c in map(int, args.channels.split(",")):
            cfg = ModelConfig(encoder_depth=n, base_channels=c)
            params = count_parameters(OBIFormer(cfg))
            for conv in ("flops", "macs"):
                flops = count_flops(cfg, (1, 3, 256, 256), conv).total
                dp, df = params / TARGET_PARAMS - 1, flops / TARGET_FLOPS - 1
                rows.append((n, c, conv, params, flops, dp, df, abs(dp) <= 0.15 and abs(df) <= 0.20))
    rows.sort(key=lambda r: max(abs(r[5]) / 0.15, abs(r[6]) / 0.20))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["encoder_depth", "base_channels", "convention", "params", "flops", "param_residual",
                "flop_residual", "within_band"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], f"{r[4]:.0f}", f"{r[5]:+.4f}", f"{r[6]:+.4f}", r[7]])
    if out is not sys.stdout:
        out.close()


if __name__ == "__main__":
    main()
