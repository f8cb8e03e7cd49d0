"""
Average consensus on the five-unit ring-with-chords topology.

Prints the Metropolis weight matrix, its second-largest eigenvalue modulus
(which sets the contraction rate) and the per-iteration estimates of each
unit for an initial SoC vector, then the iteration count needed for 1e-6.
"""

import numpy as np

from dessmarl.consensus import (ConsensusConfig, consensus_step, metropolis_weights, reference_topology,
                                run_consensus, second_largest_eigenvalue_modulus)


def main():
    np.set_printoptions(precision=4, suppress=True)
    topo = reference_topology()
    W = metropolis_weights(topo)
    print("edges:", sorted(topo.edges))
    print("weights:\n", W)
    print(f"second-largest eigenvalue modulus: {second_largest_eigenvalue_modulus(W):.4f}")

    x = np.array([0.2, 0.4, 0.3, 0.2, 0.1])
    print(f"\ntarget mean {x.mean():.4f}")
    for k in range(8):
        print(f"iter {k}: {x}  spread {np.ptp(x):.2e}")
        x = consensus_step(x, W)

    res = run_consensus([0.2, 0.4, 0.3, 0.2, 0.1], W, ConsensusConfig(tolerance=1e-6))
    print(f"\nspread <= 1e-6 after {res.iterations} iterations: {res.estimates}")


if __name__ == "__main__":
    main()
