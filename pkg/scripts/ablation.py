"""Fusion-mode ablation at micro/toy scale: gradcheck error, parameters, toy OA."""
import argparse

from banet.config import FUSION_MODES, RunConfig, preset
from banet.gradcheck import check_network
from banet.model import BANet
from banet.train import train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200, help="toy training steps per mode (0 to skip)")
    ap.add_argument("--entries", type=int, default=8, help="sampled entries per tensor in gradcheck")
    ap.add_argument("--emsa-order", default="literal", choices=["literal", "norm_first"])
    args = ap.parse_args()
    print(f"{'mode':<5} {'toy_params':>10} {'grad_err':>9} {'toy_oa':>7}")
    for mode in FUSION_MODES:
        params = BANet.initialize(preset("toy").replace(fusion={"fusion_mode": mode})).parameter_count()
        err = check_network(mode, max_entries=args.entries)
        oa = float("nan")
        if args.steps:
            cfg = RunConfig(steps=args.steps, fusion_mode=mode, num_classes=4, emsa_order=args.emsa_order)
            oa = train_toy(cfg).train_oa
        print(f"{mode:<5} {params:>10} {err:9.2e} {oa:7.4f}")


if __name__ == "__main__":
    main()
