"""Factored vs quadratic linear attention: runtime scaling and agreement."""
import argparse

from banet.bench import bench_linear_attention, fit_exponent, format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="*", default=[256, 512, 1024, 2048, 4096])
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    rows = bench_linear_attention(args.sizes, channels=args.channels, repeats=args.repeats)
    print(format_table(rows))
    ns = [r.n for r in rows]
    print(f"factored exponent {fit_exponent(ns, [r.factored_s for r in rows]):.2f}, "
          f"dense exponent {fit_exponent(ns, [r.dense_s for r in rows]):.2f}")


if __name__ == "__main__":
    main()
