# %% [markdown]
# The numpy autodiff engine: record ops on a tape, pull gradients back,
# and compare with central differences.

# %%
import numpy as np

from vicon import tensor as T
from vicon.tensor import Tape, Tensor, grad, grad_rel_error, numerical_grad

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
w = Tensor(np.ones(8), requires_grad=True)
b = Tensor(np.zeros(8), requires_grad=True)

# %%
# layer norm -> GELU -> scalar
with Tape():
    loss = T.sum(T.gelu(T.layer_norm(x, w, b)))
g = grad(loss, {"x": x, "w": w, "b": b})
print("loss", float(loss.data))

# %%
def scalar():
    return float(np.sum(T.gelu(T.layer_norm(Tensor(x.data), Tensor(w.data), Tensor(b.data))).data))

num = numerical_grad(scalar, x.data, 1e-5)
print("relative error vs finite differences:", grad_rel_error(g["x"], num))

# %%
# masked attention: row r only sees columns <= r
q, k, v = (Tensor(rng.normal(size=(5, 4))) for _ in range(3))
out = T.masked_attention(q, k, v, np.tril(np.ones((5, 5), bool)))
print("first row is v[0]:", np.allclose(out.data[0], v.data[0]))

# %%
# non-finite values are caught at the op that made them
try:
    T.mul(Tensor([1.0]), Tensor([np.inf]))
except T.NonFiniteError as exc:
    print("caught:", exc)
