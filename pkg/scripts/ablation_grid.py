"""Toggle matrix over adaptive count, cumulative scores and multi-criteria scoring.

Fidelity is the mean cosine similarity between the CLS output of a live
pruned run and the unpruned encoder, averaged over synthetic images.
"""

import argparse
import itertools

from flowcut.engine import PruneConfig

from _common import demo_config, fidelity


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=int, default=8)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = demo_config(seed=args.seed)

    print("schedule,adaptive,cumulative,multi_criteria,fidelity")
    for single in (True, False):
        for flags in itertools.product([False, True], repeat=3):
            pc = PruneConfig(
                target=args.target,
                single_event=single,
                adaptive_count=flags[0],
                cumulative=flags[1],
                multi_criteria=flags[2],
            )
            name = "single-layer" if single else "multi-layer"
            print(f"{name},{int(flags[0])},{int(flags[1])},{int(flags[2])},{fidelity(cfg, pc, args.images):.5f}")


if __name__ == "__main__":
    main()
