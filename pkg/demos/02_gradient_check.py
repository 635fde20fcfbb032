# %% [markdown]
# Checking reverse-mode gradients
# -------------------------------
# The tensor core records a tape of numpy ops and walks it backwards.
# Here a tiny conv net is differentiated both ways: by backprop and by
# central finite differences in float64.

# %%
import numpy as np

from lmvp import numerics as nx
from lmvp.numerics import Tensor

rng = np.random.default_rng(0)
x = rng.uniform(size=(2, 6, 6, 1))
w1 = rng.normal(scale=0.5, size=(3, 3, 1, 4))
w2 = rng.normal(scale=0.5, size=(3, 3, 4, 2))


def net(x, w1, w2):
    h = nx.activation(nx.conv2d(x, w1, stride=1, padding="same-zero"), "tanh")
    h = nx.activation(nx.conv2d(h, w2, stride=2, padding="same-replicate"), "leaky_relu")
    return nx.mean_all(nx.square(h))


leaves = [Tensor(a, requires_grad=True) for a in (x, w1, w2)]
loss = net(*leaves)
grads = nx.backprop(loss, leaves)
print("loss:", float(loss.data))

# %%
def numeric_grad(i, h=1e-5):
    arrays = [x.copy(), w1.copy(), w2.copy()]
    g = np.zeros_like(arrays[i])
    for idx in np.ndindex(g.shape):
        old = arrays[i][idx]
        arrays[i][idx] = old + h
        up = float(net(*map(Tensor, arrays)).data)
        arrays[i][idx] = old - h
        down = float(net(*map(Tensor, arrays)).data)
        arrays[i][idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


for name, i in (("x", 0), ("w1", 1), ("w2", 2)):
    num = numeric_grad(i)
    rel = np.abs(grads[i] - num).max() / max(np.abs(num).max(), 1e-12)
    print(f"{name:>3}: max relative error {rel:.2e}")

# %% [markdown]
# Only leaves that ask for a gradient get one.  Leaves that are not on the
# tape get exact zeros, which is what keeps the training phases isolated.

# %%
frozen = Tensor(w2)  # requires_grad=False
g = nx.backprop(net(leaves[0], leaves[1], frozen), [leaves[1], frozen])
print("frozen leaf gradient is all zero:", not g[1].any())

# %% [markdown]
# Adam keeps a per-parameter step count, so parameters that skip a step
# keep their own bias correction.

# %%
params = {"w": np.ones(3, np.float32)}
state = nx.AdamState(lr=0.1)
for _ in range(3):
    nx.adam_update(params, {"w": np.array([1.0, -1.0, 0.0], np.float32)}, state)
print("after 3 steps:", params["w"], "t =", state.t["w"])
