"""Tape gradients versus central differences for a single op."""
import numpy as np

from dssprune.tensor import Tape, Tensor, backward

from oracles import central_difference, max_relative_error


def op_gradient_error(build, arrays, seed, eps=1e-4):
    """Max relative error over all inputs of d sum(op(...) * R) for a fixed random projection R."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape():
        out = build(*tensors)
        proj = np.random.default_rng(seed).normal(size=out.shape)
        backward((out * Tensor(proj)).sum() if out.shape else out)

    def value():
        o = build(*[Tensor(np.asarray(a, dtype=np.float64)) for a in arrays])
        return float((o.data * proj).sum()) if o.shape else float(o.data)

    return max(max_relative_error(t.grad, central_difference(value, a, eps)) for t, a in zip(tensors, arrays))
