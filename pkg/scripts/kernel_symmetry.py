"""Kernel symmetry versus detailed balance on a dynamical-percolation torus.

A product of symmetric one-piece kernels is not symmetric, while the
time-reversed identity P_{s,t}(u,v) = P_{t,s}(v,u) holds to rounding.

    python scripts/kernel_symmetry.py --side 4 --seed 2
"""

import argparse

import numpy as np

from dyn_rcm_lab.environment import DynamicalPercolation, EnvironmentSpec, TimeWindow, sample_environment
from dyn_rcm_lab.kernel import transition_kernel
from dyn_rcm_lab.lattice import Lattice


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=4)
    ap.add_argument("--T", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()
    spec = EnvironmentSpec(DynamicalPercolation(0.5, 1.0), Lattice.torus(2, args.side), TimeWindow(0.0, args.T))
    traj = sample_environment(spec, args.seed)
    P = transition_kernel(traj, 0.0, args.T).entries
    Q = transition_kernel(traj, args.T, 0.0).entries
    print(f"pieces: {len(traj.change_times()) + 1}")
    print(f"max |P - P^T|         = {np.abs(P - P.T).max():.3e}")
    print(f"max |P_0T - P_T0^T|   = {np.abs(P - Q.T).max():.3e}")


if __name__ == "__main__":
    main()
