# %% [markdown]
# Dynamic local filtering
# -----------------------
# The generator never paints pixels directly.  It predicts, for each pixel,
# a softmax-normalised KxK kernel and applies it to that pixel's
# neighbourhood in the current frame.  Motion is just "which neighbour do I
# copy from".

# %%
import numpy as np

from lmvp import numerics as nx
from lmvp.model import apply_dynamic_filter
from lmvp.numerics import Tensor

K = 3
frame = np.zeros((1, 6, 6, 1))
frame[0, 2:4, 1:3, 0] = 1.0


def show(f):
    for row in f[0, ..., 0]:
        print(" ".join(f"{v:.2f}" for v in row))
    print()


def one_hot(u, v, shape=(1, 6, 6)):
    w = np.zeros(shape + (K * K,))
    w[..., (u + K // 2) * K + (v + K // 2)] = 1.0
    return Tensor(w)


print("input")
show(frame)

# tap (0, -1) reads the left neighbour, so content moves right by one pixel
print("tap (0,-1): shift right")
show(apply_dynamic_filter(Tensor(frame), one_hot(0, -1)).data)

print("centre tap: identity")
out = apply_dynamic_filter(Tensor(frame), one_hot(0, 0)).data
print("bit-exact:", out.tobytes() == frame.tobytes())

# %% [markdown]
# Uniform weights give a box blur with replicated borders.  Any softmax
# kernel keeps each output pixel between the min and max of its
# neighbourhood, so predictions stay in [0, 1] by construction.

# %%
print("uniform weights: box blur")
show(apply_dynamic_filter(Tensor(frame), Tensor(np.full((1, 6, 6, K * K), 1 / K**2))).data)

rng = np.random.default_rng(1)
worst = 0.0
for _ in range(200):
    img = rng.uniform(size=(1, 6, 6, 1))
    w = nx.softmax_sites(Tensor(rng.normal(scale=4, size=(1, 6, 6, K * K))))
    y = apply_dynamic_filter(Tensor(img), w).data
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, (K, K), axis=(1, 2))
    excess = np.maximum(y - win.max(axis=(-2, -1)), win.min(axis=(-2, -1)) - y)
    worst = max(worst, excess.max())
print(f"largest step outside the neighbourhood range over 200 random cases: {worst:.1e}")
