"""Toy training sweep: training-set OA and loss curve per seed (and fusion mode)."""
import argparse
import time

from banet.config import FUSION_MODES, RunConfig
from banet.train import train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="*", default=[0])
    ap.add_argument("--modes", nargs="*", default=["fam"], choices=FUSION_MODES)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--augment", action="store_true")
    args = ap.parse_args()
    print(f"{'mode':<5} {'seed':>4} {'steps':>5} {'loss0':>8} {'lossN':>8} {'oa':>7} {'sec':>6}")
    for mode in args.modes:
        for seed in args.seeds:
            cfg = RunConfig(seed=seed, steps=args.steps, fusion_mode=mode, num_classes=4)
            t0 = time.perf_counter()
            res = train_toy(cfg, augment_data=args.augment)
            print(f"{mode:<5} {seed:>4} {args.steps:>5} {res.losses[0][1]:8.4f} {res.losses[-1][1]:8.4f} "
                  f"{res.train_oa:7.4f} {time.perf_counter() - t0:6.1f}")


if __name__ == "__main__":
    main()
