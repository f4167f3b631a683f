"""Layer-wise CLS attention entropy of the toy encoder across weight scales.

Small weight ranges give near-uniform attention (r_H close to 1), larger ones
let attention concentrate in deeper layers.
"""

import argparse

from flowcut.encoder import generate_trace
from flowcut.flow import entropy_curve

from _common import demo_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--grid", type=int, default=8)
    ap.add_argument("--ranges", type=float, nargs="+", default=[0.05, 0.2, 0.4, 0.6, 0.8])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("weight_range," + ",".join(f"L{l}" for l in range(args.layers)))
    for w in args.ranges:
        tr = generate_trace(demo_config(args.layers, args.grid, args.seed, w))
        print(f"{w}," + ",".join(f"{r:.4f}" for _, _, r in entropy_curve(tr)))


if __name__ == "__main__":
    main()
