"""Shared test utilities."""

import numpy as np

from detrl.nn import FLOAT, backward, init_network
from detrl.rng import new_stream
from tests.oracles.mlp_ref import finite_difference, params64

# Relative error of one gradient element: |g - fd| / max(|g|, |fd|, GRAD_FLOOR).
# The floor keeps elements whose true gradient is essentially zero from
# dividing float32 rounding noise by nothing.
GRAD_FLOOR = 1e-6


def random_problem(seed, max_layers=5, max_units=16, batch=8):
    """A random small architecture with a random minibatch."""
    s = new_stream("test", seed)
    n_layers = 2 + s.next_int(max_layers - 1)
    sizes = [1 + s.next_int(max_units) for _ in range(n_layers)]
    net = init_network(sizes, s)
    for b in net.biases:
        b[:] = np.array([0.1 * s.next_gaussian() for _ in range(b.size)], FLOAT)
    states = np.array([[s.next_gaussian() for _ in range(sizes[0])] for _ in range(batch)], FLOAT)
    actions = np.array([s.next_int(sizes[-1]) for _ in range(batch)])
    targets = np.array([s.next_gaussian() for _ in range(batch)], FLOAT)
    return net, states, actions, targets


def gradient_error(seed, h=1e-3, max_redraws=50):
    """Max relative error of backprop against float64 central differences.

    Problems whose finite differences would cross a ReLU kink are redrawn
    from the next seed.  Returns ``(error, sizes)``.
    """
    for k in range(max_redraws):
        net, x, a, y = random_problem(seed * 1000 + k)
        fd = finite_difference(params64(net), x, a, y, h)
        if fd is not None:
            break
    else:
        raise RuntimeError("every redraw crossed a kink")
    g = backward(net, x, a, y).params()
    worst = 0.0
    for gi, fi in zip(g, fd):
        gi = gi.astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(gi), np.abs(fi)), GRAD_FLOOR)
        worst = max(worst, float(np.max(np.abs(gi - fi) / denom)))
    return worst, net.layer_sizes
