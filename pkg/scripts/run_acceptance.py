"""Run the acceptance criteria and write their report JSON.

    python scripts/run_acceptance.py --out out/acceptance            # criteria 1-9
    python scripts/run_acceptance.py --out out/acceptance --rerun    # plus the determinism rerun
    python scripts/run_acceptance.py --only 1 2 7
"""

import argparse
import sys

from dyn_rcm_lab.acceptance import ACCEPTANCE_SEED, criterion_10, run_criteria, write_reports
from dyn_rcm_lab.parallel import default_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/acceptance")
    ap.add_argument("--seed", type=int, default=ACCEPTANCE_SEED)
    ap.add_argument("--threads", type=int, default=default_threads())
    ap.add_argument("--only", type=int, nargs="*", choices=range(1, 10))
    ap.add_argument("--rerun", action="store_true", help="run again and compare report bytes")
    args = ap.parse_args()
    first = run_criteria(args.seed, args.threads, args.only, log=print)
    write_reports(first, f"{args.out}/run1")
    ok = all(c.passed for c in first.values())
    if args.rerun:
        second = run_criteria(args.seed, args.threads, args.only)
        write_reports(second, f"{args.out}/run2")
        c10 = criterion_10(first, second)
        print(c10.line())
        ok = ok and c10.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
