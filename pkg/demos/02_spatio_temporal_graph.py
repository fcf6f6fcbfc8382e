# %% [markdown]
# From a road graph to the time-unrolled graph
#
# Node `t*N + i` is sensor `i` at step `t`. Sensors connect within a step
# along road edges, and each sensor links to itself one step earlier and later.

# %%
import numpy as np

from leaf.data import ring_network
from leaf.stgraph import build_st_graph

net = ring_network(4)
print("road edges:", sorted(net.edges))

st = build_st_graph(net, horizon=3)
print("nodes:", st.n_nodes, " edges:", len(st.edges()))
print("expected N(T-1) + T|E| =", 4 * 2 + 3 * len(net.edges))

# %%
for node in (0, 5, 11):
    t, i = st.unflatten(node)
    neighbours = [st.unflatten(int(j)) for j in np.nonzero(st.adjacency[node])[0]]
    print(f"node {node} = (t={t}, sensor {i}) touches {neighbours}")

# %% [markdown]
# The convolution uses the symmetrically normalized matrix with self-loops.
# Its spectral radius stays at or below one, so repeated propagation does
# not blow up.

# %%
eig = np.linalg.eigvalsh(st.normalized)
print("eigenvalue range:", eig.min().round(4), eig.max().round(4))
np.set_printoptions(precision=3, suppress=True)
print(st.normalized[:4, :8])
