"""Walk analytics for the usual topologies.

Prints algebraic connectivity, the second eigenvalue of the lazy walk, the
smallest stationary probability and the mixing-time bound for a few graphs
on 40 clients.  Sparse graphs mix slowly, so a token needs many more hops
before its visiting distribution looks stationary.

    python3 demos/graph_walks.py
"""
from tokencd.graph import build_topology, walk_analytics

K = 40
graphs = {
    "complete": build_topology("complete", K),
    "erdos_renyi p=0.4": build_topology("erdos_renyi", K, p=0.4, seed=0),
    "erdos_renyi p=0.2": build_topology("erdos_renyi", K, p=0.2, seed=0),
    "grid 5x8": build_topology("grid", K, rows=5, cols=8),
    "cycle": build_topology("cycle", K),
    "path": build_topology("path", K),
}

print(f"{'graph':>20} {'edges':>6} {'alg.conn':>9} {'lambda2':>8} {'pi_min':>8} {'tau_bound':>10}")
for name, g in graphs.items():
    wa = walk_analytics(g)
    print(f"{name:>20} {g.edge_count:6d} {wa.algebraic_connectivity:9.4f} {wa.lambda2:8.4f} "
          f"{wa.pi_min:8.4f} {wa.tau_bound:10.1f}")
