# %% [markdown]
# Reverse-mode autodiff on plain numpy
#
# Every operation on a Tensor that needs a gradient is appended to a
# per-thread tape. `backward` replays the tape in reverse and leaves the
# gradients on the leaf tensors.

# %%
import numpy as np

from leaf import numerics as nx
from leaf.numerics import Adam, Parameter

x = Parameter([1.0, 2.0], "x")
loss = nx.sum(nx.mul(x, x))
nx.backward(loss)
print("d/dx sum(x*x) at [1, 2]:", x.grad)

# %% [markdown]
# Finite differences agree with the tape. `gradcheck` reports a norm-wise
# relative error per parameter.

# %%
rng = np.random.default_rng(0)
w = Parameter(rng.normal(size=(4, 3)), "w")
inputs = rng.normal(size=(6, 4))
target = rng.normal(size=(6, 3))
errs = nx.gradcheck(lambda: nx.huber(nx.row_softmax(nx.matmul(inputs, w)), target), [w])
print("relative error:", errs)

# %% [markdown]
# A tiny regression fitted with Adam.

# %%
true_w = np.array([[2.0], [-1.0]])
xs = rng.normal(size=(64, 2))
ys = xs @ true_w
w = Parameter(np.zeros((2, 1)), "w")
opt = Adam([w], lr=0.05)
for step in range(300):
    loss = nx.huber(nx.matmul(xs, w), ys)
    nx.backward(loss)
    opt.step()
    if step % 100 == 0:
        print(f"step {step:3d}  loss {loss.item():.5f}")
print("fitted weights:", w.data.ravel().round(4))
