"""Finite-difference gradient check of every loss, the encoder and the full objective.

    python scripts/gradcheck.py [--seed 0] [--instances 20]
"""

import argparse
import time

from evssl.gradcheck import TOLERANCE, run_suite


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--instances", type=int, default=20)
    args = ap.parse_args()
    t0 = time.perf_counter()
    worst = run_suite(args.seed, args.instances)
    for name, err in worst.items():
        print(f"{name:<16}{err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0 if all(v < TOLERANCE for v in worst.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
