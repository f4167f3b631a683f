"""Fidelity as a function of the history weight and the pruning interval."""

import argparse

from flowcut.engine import PruneConfig

from _common import demo_config, fidelity


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=int, default=8)
    ap.add_argument("--images", type=int, default=4)
    ap.add_argument("--layers", type=int, default=13)
    args = ap.parse_args()
    cfg = demo_config(layers=args.layers)

    print("history_weight,fidelity")
    for i in range(1, 10):
        w = i / 10
        pc = PruneConfig(target=args.target, weight_history=w, weight_current=round(1 - w, 10))
        print(f"{w:.1f},{fidelity(cfg, pc, args.images):.5f}")

    print()
    print("interval,fidelity")
    for n in (1, 2, 3, 4, 6, 8, 12):
        pc = PruneConfig(target=args.target, interval=n)
        print(f"{n},{fidelity(cfg, pc, args.images):.5f}")
    print(f"single-event,{fidelity(cfg, PruneConfig(target=args.target, single_event=True), args.images):.5f}")


if __name__ == "__main__":
    main()
