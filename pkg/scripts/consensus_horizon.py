"""Consensus-time quantiles for the voter model; used to pin the 8x8 horizon.

    python scripts/consensus_horizon.py --side 8 --replicas 400 --horizon 400
"""

import argparse

import numpy as np

from dyn_rcm_lab.environment import EnvironmentSpec, Static, TimeWindow
from dyn_rcm_lab.lattice import Lattice
from dyn_rcm_lab.voter import CONSENSUS_HORIZON_8X8, consensus_times


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=8)
    ap.add_argument("--replicas", type=int, default=400)
    ap.add_argument("--horizon", type=float, default=400.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    spec = EnvironmentSpec(Static(1.0), Lattice.torus(2, args.side), TimeWindow(0.0, 1.0))
    times = consensus_times(spec, args.horizon, args.replicas, args.seed)
    done = np.array([t for t in times if t is not None])
    print(f"reached consensus: {len(done)}/{len(times)} by t={args.horizon:g}")
    for q in (0.5, 0.9, 0.95, 0.99):
        print(f"  {q:.0%} quantile: {np.quantile(done, q):.1f}")
    print(f"fraction by pinned horizon {CONSENSUS_HORIZON_8X8:g}: {np.sum(done <= CONSENSUS_HORIZON_8X8) / len(times):.3f}")


if __name__ == "__main__":
    main()
