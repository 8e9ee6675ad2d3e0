"""Exact optimal transport by linear programming (small grids only)."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix


def exact_ot(a, b, C) -> float:
    """min <P, C> subject to P 1 = a, P^T 1 = b, P >= 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a, b = a / a.sum(), b / b.sum()
    n, m = a.size, b.size
    if n * m > 200_000:
        raise ValueError("exact_ot is meant for tiny problems")
    idx = np.arange(n * m)
    rows = np.concatenate([idx // m, n + idx % m])
    A_eq = coo_matrix((np.ones(2 * n * m), (rows, np.concatenate([idx, idx]))), shape=(n + m, n * m))
    res = linprog(np.asarray(C, dtype=np.float64).ravel(), A_eq=A_eq.tocsr(),
                  b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"LP failed: {res.message}")
    return float(res.fun)
