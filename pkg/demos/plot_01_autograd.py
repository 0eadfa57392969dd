"""
Reverse-mode autograd on numpy arrays
=====================================

Build a small graph, run backward, and compare with central differences.
"""

import numpy as np
from apl_avqa import tensorcore as tc

# a two-layer expression with a softmax at the end
rng = np.random.default_rng(0)
with tc.precision(np.float64):
    W = tc.tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = tc.tensor(rng.standard_normal((2, 3)))
    def f():
        p = tc.softmax_lastdim(tc.matmul(x, W).tanh())
        return (p * p).sum()

    loss = f()
    tape = tc.backward(loss, [W])
    print("loss", loss.item())
    print("dL/dW\n", W.grad)
    print("nodes on tape:", len(tape.nodes))

    # the same gradient from central differences
    report = tc.finite_diff_check(f, [W])
    print(report.as_dict())

# NaN checks can be switched on while debugging a model
with tc.debug_checks(True):
    try:
        tc.tensor([-1.0]).log()
    except tc.NonFiniteError as err:
        print("caught:", err)
