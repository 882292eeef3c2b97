"""
Checking reverse-mode gradients against finite differences
==========================================================

Every primitive of the autograd engine is compared with central differences
on random float64 inputs, then the whole model plus the weighted loss.
"""

import numpy as np

from rfop import autograd as ag
from rfop.autograd import Tensor, backward, grad_check
from rfop.checks import run_suite

# a tiny graph: y = sum(tanh(x @ W))
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 4)))
W = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
y = ag.sum_all(ag.tanh(ag.matmul(x, W)))
backward(y)
print("loss", y.item())
print("dL/dW\n", W.grad)

# the same gradient by central differences
report = grad_check(lambda: ag.sum_all(ag.tanh(ag.matmul(x, W))), [W])
print(report)

# the full suite, as run by `rfop gradcheck`
for name, r in run_suite(tol=1e-4, seed=0):
    print(f"{name:24s} {r.max_rel_err:.2e} {'ok' if r.passed else 'FAIL'}")
