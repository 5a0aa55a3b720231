"""Plain SGD with heavy-ball momentum."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0) -> None:
    """v <- momentum * v + grad; p <- p - lr * v; then clear the gradients.

    The velocity buffer lives on each parameter, so successive calls on
    the same tensors continue the same momentum trajectory.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i} has no gradient; run backward first")
    for p in params:
        g = p.grad.astype(p.dtype, copy=False)
        if p.velocity is None or momentum == 0.0:
            p.velocity = g.copy()
        else:
            p.velocity = momentum * p.velocity + g
        if lr != 0.0:
            p.data -= np.asarray(lr, dtype=p.dtype) * p.velocity
        p.grad = None
