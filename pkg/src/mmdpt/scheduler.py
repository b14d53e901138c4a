"""Coupling an index table to the routing constraints by a greedy sorting step."""

import numpy as np

from . import _core


def current_indices(table, S) -> np.ndarray:
    """``table[m, n, S[m, n]]`` for every pair."""
    table = np.asarray(table, dtype=float)
    M, N = S.shape
    return table[np.arange(M)[:, None], np.arange(N)[None, :], S]


def assign(table, S, requesters, B: int) -> np.ndarray:
    """Route each requester to one AP in decreasing order of its current index.

    The largest remaining index (m, n) wins if AP n still has budget; user m's
    entries are then dropped. A saturated AP has all its entries dropped.
    Ties: smaller user first, then smaller AP. A requester is left unrouted
    only once every AP is saturated.
    """
    S = np.asarray(S, dtype=np.int64)
    M, N = S.shape
    vals = current_indices(table, S)
    req = np.zeros(M, dtype=bool)
    req[np.asarray(requesters, dtype=np.int64)] = True
    A = np.zeros((M, N), dtype=np.int8)
    _core.assign_greedy(vals, req, int(B), A)
    return A


def assign_reference(table, S, requesters, B: int) -> np.ndarray:
    """Literal set-based transcription of the loop; slow, used to cross-check :func:`assign`."""
    S = np.asarray(S, dtype=np.int64)
    M, N = S.shape
    vals = current_indices(table, S)
    pool = {(int(m), n) for m in requesters for n in range(N)}
    A = np.zeros((M, N), dtype=np.int8)
    load = [0] * N
    while pool:
        m, n = min(pool, key=lambda mn: (-vals[mn], mn[0], mn[1]))
        if load[n] < B:
            A[m, n] = 1
            load[n] += 1
            pool = {(i, j) for (i, j) in pool if i != m}
        else:
            pool = {(i, j) for (i, j) in pool if j != n}
    return A


def feasibility_check(A, requesters, B: int) -> bool:
    """Row sums <= 1, column sums <= B, and only requesters are routed."""
    A = np.asarray(A)
    if A.ndim != 2 or np.any((A != 0) & (A != 1)):
        return False
    if np.any(A.sum(axis=1) > 1) or np.any(A.sum(axis=0) > B):
        return False
    mask = np.zeros(A.shape[0], dtype=bool)
    mask[np.asarray(requesters, dtype=np.int64)] = True
    return not np.any(A[~mask].any(axis=1))
