"""Central finite-difference verification of analytic gradients.

The graph under test is supplied as a zero-argument callable that rebuilds
the forward pass from the current leaf values and returns a scalar Tensor.
Relative error for a coordinate is |analytic - numeric| divided by
max(|analytic|, |numeric|, floor); the check reports the max over all
sampled coordinates of all leaves.

Leaves with many elements are probed at a seeded random subset of
coordinates, which keeps the cost linear in the number of tensors rather
than the number of weights while still catching any fault that perturbs a
whole gradient array.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, GraphError


def _collect_leaves(loss):
    leaves, seen, stack = [], set(), [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._parents:
            stack.extend(node._parents)
        elif node.requires_grad:
            leaves.append(node)
    return leaves


def grad_check(graph_fn, leaves=None, h=1e-5, samples_per_tensor=8, seed=0, floor=1e-6):
    """Return the max relative error between analytic and numeric gradients.

    graph_fn must be deterministic: any stochastic inputs (quantization
    noise, data order) have to be fixed before calling.
    """
    loss = graph_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise GraphError("grad_check requires a scalar Tensor output")
    if loss.dtype != np.float64:
        raise GraphError("grad_check runs in 64-bit verification mode; cast the graph to float64")
    if leaves is None:
        leaves = _collect_leaves(loss)
    if not leaves:
        raise GraphError("graph has no differentiable leaves")
    for leaf in leaves:
        leaf.grad = None
    loss.backward()

    analytic = []
    for leaf in leaves:
        if leaf.grad is None:
            analytic.append(np.zeros_like(leaf.data))
        else:
            analytic.append(leaf.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        n = flat.size
        k = min(n, samples_per_tensor)
        coords = rng.choice(n, size=k, replace=False) if n > k else np.arange(n)
        for idx in coords:
            orig = flat[idx]
            step = h * max(1.0, abs(orig))
            flat[idx] = orig + step
            hi = float(graph_fn().data)
            flat[idx] = orig - step
            lo = float(graph_fn().data)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(ga.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                worst = err
    return worst
