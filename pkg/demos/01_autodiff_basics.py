"""
Reverse-mode gradients on numpy arrays
======================================

Operations record themselves on a tape while a ``tape_scope`` is open.
``backward`` replays the tape in reverse and leaves ``.grad`` on every
tensor created with ``requires_grad=True``.
"""

import numpy as np

from parsestack.autodiff import Tensor, backward, conv2d, precision, relu, softmax_cross_entropy, tape_scope

rng = np.random.default_rng(0)

# Verification runs in 64-bit; training defaults to 32-bit.
with precision(64), tape_scope():
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    labels = rng.integers(0, 3, (1, 6, 6))

    scores = conv2d(relu(x), w, b, padding=1)
    loss = softmax_cross_entropy(scores, labels)
    backward(loss)
    print("loss", loss.item())
    print("dL/db", b.grad)

    # Compare one weight gradient against a central difference.
    def loss_at(wv):
        with tape_scope():
            return softmax_cross_entropy(conv2d(relu(x), Tensor(wv), b, padding=1), labels).item()

    eps = 1e-6
    bumped = w.data.copy()
    bumped[1, 0, 2, 2] += eps
    lowered = w.data.copy()
    lowered[1, 0, 2, 2] -= eps
    numeric = (loss_at(bumped) - loss_at(lowered)) / (2 * eps)
    print("analytic", w.grad[1, 0, 2, 2], "numeric", numeric)
