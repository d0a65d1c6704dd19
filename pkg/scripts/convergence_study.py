"""Excess worst-group risk of the averaged iterate on the certified convex
instance, for a range of horizons, next to the theoretical bound.

    python scripts/convergence_study.py [--horizons 100 1000 10000 100000] [--seeds 20]
"""
import argparse

from groupdro.theory import certified_instance, convergence_study


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--horizons", type=int, nargs="+", default=[100, 1000, 10000, 100000])
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--csv", help="write per-seed errors to this file")
    args = parser.parse_args(argv)

    study = convergence_study(certified_instance(), args.horizons, range(args.seeds))
    print(f"{'T':>8}  {'mean eps_T':>12}  {'bound':>10}")
    for T in args.horizons:
        print(f"{T:>8}  {study.mean_error[T]:12.5g}  {study.bound[T]:10.5g}")
    print(f"log-log slope {study.slope:.3f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(study.to_csv())


if __name__ == "__main__":
    main()
