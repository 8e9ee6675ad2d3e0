"""Central finite differences, independent of the autodiff tape."""
from __future__ import annotations

import numpy as np


def central_gradient(f, x, h: float = 1e-4) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by (f(x+h e_i) - f(x-h e_i)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
