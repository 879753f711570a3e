# %% [markdown]
# # A tour of the autodiff core
#
# Every model in the package is built from `Value` nodes over float64 arrays.
# Evaluation is eager and `backward()` walks the recorded graph in reverse.

# %%
import numpy as np

from ganspk import autodiff as ad
from ganspk.autodiff import Value, numerical_grad, value_and_grad

x = Value(np.array(3.0), requires_grad=True)
y = x * x
y.backward()
print(y.item(), x.grad)  # 9.0 6.0

# %% [markdown]
# The functional form takes a dict of arrays and returns the value plus one
# gradient per input. Inputs the function never touches get exact zeros.

# %%
def f(w, b, unused):
    return ad.vsum(ad.elu(ad.matmul(ad.as_value(np.ones((2, 3))), w) + b))

inputs = {"w": np.random.default_rng(0).normal(size=(3, 4)), "b": np.zeros(4), "unused": np.ones(2)}
val, grads = value_and_grad(f, inputs)
print(val, grads["unused"])

# %% [markdown]
# Central differences agree with the analytic gradient:

# %%
fd = numerical_grad(f, inputs, "w")
print(np.max(np.abs(fd - grads["w"])))

# %% [markdown]
# Softmax and log-sum-exp are stable for huge logits; a non-finite result
# raises instead of propagating NaNs.

# %%
print(ad.evaluate(lambda z: ad.softmax(z), {"z": np.full(3, 1000.0)}))
try:
    ad.log(Value(np.array([0.0])))
except ad.NonFiniteError as exc:
    print("caught:", exc)
