"""A tour of the tensor core: build a small network, differentiate it, and
check the gradients against central finite differences.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from sonomae import ndgrad
from sonomae.ndgrad import Tensor

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# 1. Tensors record onto a tape whenever requires_grad is set
# ---------------------------------------------------------------------------
x = Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(6, 3)) * 0.5, requires_grad=True, dtype=np.float64)

hidden = ndgrad.gelu(ndgrad.matmul(x, w))
probs = ndgrad.softmax(hidden, axis=-1)
loss = ndgrad.tmean(ndgrad.mul(probs, probs))
print(f"loss = {float(loss.data):.6f}")

graph = ndgrad.active_graph()
print(f"tape recorded {len(graph.nodes)} operations:",
      [n.op for n in graph.nodes])

# ---------------------------------------------------------------------------
# 2. backward() replays the tape once and fills the leaf gradients
# ---------------------------------------------------------------------------
ndgrad.backward(loss)
print("grad norms: x", np.linalg.norm(x.grad), " w", np.linalg.norm(w.grad))

# ---------------------------------------------------------------------------
# 3. central finite differences agree to ~1e-9 in float64
# ---------------------------------------------------------------------------
def loss_value(x_arr, w_arr):
    with ndgrad.no_grad():
        h = ndgrad.gelu(ndgrad.matmul(Tensor(x_arr, dtype=np.float64),
                                      Tensor(w_arr, dtype=np.float64)))
        p = ndgrad.softmax(h, axis=-1)
        return float(ndgrad.tmean(ndgrad.mul(p, p)).data)

h = 1e-3
fd = np.zeros_like(w.data)
for i in range(w.data.shape[0]):
    for j in range(w.data.shape[1]):
        up = w.data.copy()
        up[i, j] += h
        down = w.data.copy()
        down[i, j] -= h
        fd[i, j] = (loss_value(x.data, up) - loss_value(x.data, down)) / (2 * h)

err = np.abs(fd - w.grad).max()
print(f"max |finite difference - backward| over w: {err:.3e}")
assert err < 1e-6
print("gradients verified.")
