# %% [markdown]
# The two forecasting branches
#
# Both branches embed a window of flows into one hidden row per
# (step, sensor) node. The graph branch mixes rows through the normalized
# adjacency. The hypergraph branch softly assigns nodes to a few learned
# groups and mixes through them. Each ends in the same two-layer head.

# %%
import numpy as np

from leaf.data import prepare, split_windows, synth_generate
from leaf.predictor import BranchConfig, Predictor, PretrainConfig, pretrain
from leaf.stgraph import build_st_graph

ds = synth_generate(n_vertices=8, days=6, seed=1)
splits = split_windows(ds, val_stride=4)
cfg = BranchConfig(d=16, L=3, m=4)
st = build_st_graph(ds.network, cfg.T)
pred = Predictor.init(cfg, seed=42)
print("train/val/test windows:", len(splits.train), len(splits.val), len(splits.test))

# %% [markdown]
# One forward pass, keeping the incidence matrices for inspection.

# %%
x = splits.stats.normalize(splits.test.inputs[:1])
incidences = []
pred.hypergraph.forward(x, st, incidences=incidences)
inc = incidences[0].data[0]
print("incidence shape:", inc.shape, " row sums:", inc.sum(axis=1)[:4].round(12))
print("node share per hyperedge:", inc.mean(axis=0).round(3))

# %% [markdown]
# A short pretraining run. The log keeps validation MAE per epoch and the
# branch is restored to its best epoch.

# %%
logs = pretrain(pred, st, prepare(splits.train, splits.stats), prepare(splits.val, splits.stats),
                PretrainConfig(epochs=8, patience=4), float(splits.stats.std[0]))
for name, log in logs.items():
    curve = " ".join(f"{e['val_mae']:.1f}" for e in log.epochs)
    print(f"{name:10s} best epoch {log.best_epoch}  val MAE curve: {curve}")
