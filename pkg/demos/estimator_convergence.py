"""How fast the random-projection estimate of ||J||_F^2 converges.

A random tanh network is built, its exact squared Jacobian norm is computed
with one vector-Jacobian product per output, and then single-projection
estimates are averaged.  The error falls like 1/sqrt(n).  The last part
compares the per-estimate relative variance with its worst case bound.
"""

import numpy as np

from jrlab import jacreg_estimate, jacreg_exact
from jrlab.checks import random_tanh_mlp
from jrlab.jacreg import estimator_stats
from jrlab.nn import input_jacobian

model = random_tanh_mlp([20, 32, 32, 10], seed=0)
x = np.random.default_rng(0).standard_normal(20)
exact = jacreg_exact(model, x[None, :], with_grads=False).value
print(f"exact ||J||_F^2 = {exact:.5f}")

n_max = 100_000
est = jacreg_estimate(
    model, np.repeat(x[None, :], n_max, axis=0), n_proj=1, rng=np.random.default_rng(1), with_grads=False
).per_sample
for n in (10, 100, 1_000, 10_000, 100_000):
    mean = est[:n].mean()
    print(f"n={n:>6d}  mean estimate {mean:.5f}  relative error {abs(mean - exact) / exact:.2e}")

# the spread of one estimate never exceeds 2(C-1)/(C+2) relative to its mean squared
J = input_jacobian(model, x)
st = estimator_stats(J, 50_000, np.random.default_rng(2))
print(
    f"var/mean^2 = {st.relative_variance:.3f} (closed form "
    f"{st.closed_form_variance / st.exact_value**2:.3f}, bound {st.bound:.3f})"
)
