"""Jitted per-slot loops. Everything here works on plain arrays with 0-based indices."""

import numpy as np
from numba import njit


@njit(cache=True)
def assign_greedy(vals, req, B, A):
    """Algorithm-1 sorting step on the current index values ``vals[m, n]``.

    ``req`` is a boolean requester mask. ``A`` is zeroed and filled in place.
    Ties go to the smaller user, then the smaller AP. Returns the number of
    requesters left unassigned.
    """
    M, N = vals.shape
    n_req = 0
    for m in range(M):
        if req[m]:
            n_req += 1
    A[:, :] = 0
    if n_req == 0:
        return 0
    k = n_req * N
    keys = np.empty(k)
    cm = np.empty(k, np.int64)
    cn = np.empty(k, np.int64)
    i = 0
    for m in range(M):
        if req[m]:
            for n in range(N):
                keys[i] = -vals[m, n]
                cm[i] = m
                cn[i] = n
                i += 1
    order = np.argsort(keys, kind="mergesort")
    load = np.zeros(N, np.int64)
    done = np.zeros(M, np.bool_)
    closed = np.zeros(N, np.bool_)
    assigned = 0
    for j in range(k):
        m = cm[order[j]]
        n = cn[order[j]]
        if done[m] or closed[n]:
            continue
        if load[n] < B:
            A[m, n] = 1
            load[n] += 1
            done[m] = True
            assigned += 1
        else:
            closed[n] = True
    return n_req - assigned


@njit(cache=True)
def draw_service(cdf, u):
    d = 0
    last = cdf.shape[0] - 1
    while d < last and u >= cdf[d]:
        d += 1
    return d


@njit(cache=True)
def apply_step(S, A, cdf, u_srv, S_max):
    """Serve every queue, then add routed arrivals. Returns clipped arrivals."""
    M, N = S.shape
    clipped = 0
    for m in range(M):
        for n in range(N):
            d = draw_service(cdf[m, n], u_srv[m, n])
            s = S[m, n] - d
            if s < 0:
                s = 0
            if A[m, n] == 1:
                s += 1
                if s > S_max:
                    s = S_max
                    clipped += 1
            S[m, n] = s
    return clipped


@njit(cache=True)
def simulate_index(S, phi, cdf, p, B, S_max, u_req, u_srv, costs, actions, record,
                   track, track_out):
    """Run ``u_req.shape[0]`` slots of an index policy; ``phi[m, n, s]`` is the table.

    Writes per-slot cost (total queue at slot start) into ``costs``. If
    ``record`` is set, actions are written to ``actions``. ``track`` rows are
    (m, n, s, a) tuples whose indicator is written to ``track_out``.
    Returns the number of dropped requests.
    """
    T = u_req.shape[0]
    M, N = S.shape
    A = np.zeros((M, N), np.int8)
    vals = np.empty((M, N))
    req = np.empty(M, np.bool_)
    drops = 0
    for t in range(T):
        tot = 0
        for m in range(M):
            req[m] = u_req[t, m] < p[m]
            for n in range(N):
                tot += S[m, n]
                vals[m, n] = phi[m, n, S[m, n]]
        costs[t] = tot
        drops += assign_greedy(vals, req, B, A)
        for k in range(track.shape[0]):
            m, n, s, a = track[k, 0], track[k, 1], track[k, 2], track[k, 3]
            track_out[t, k] = S[m, n] == s and A[m, n] == a
        if record:
            actions[t] = A
        drops += apply_step(S, A, cdf, u_srv[t], S_max)
    return drops


@njit(cache=True)
def learn_slots(S, phi, cdf, p, B, S_max, u_req, u_srv, start, stop, t0, t_limit,
                alpha, counts, snapshot, costs, actions, record):
    """Run one episode's slots from noise rows ``start..stop-1``.

    Slot ``t0`` is the first slot executed; the episode may run up to and
    including ``t_limit``. Every (m, n) transition updates ``alpha`` and
    ``counts``; the episode stops as soon as some count exceeds twice its
    snapshot. Returns (rows consumed, stop reason, drops) with reason
    0 = noise block exhausted, 1 = length rule, 2 = count-doubling rule.
    """
    M, N = S.shape
    A = np.zeros((M, N), np.int8)
    vals = np.empty((M, N))
    req = np.empty(M, np.bool_)
    drops = 0
    t = t0
    row = start
    while row < stop:
        if t > t_limit:
            return row - start, 1, drops
        tot = 0
        for m in range(M):
            req[m] = u_req[row, m] < p[m]
            for n in range(N):
                tot += S[m, n]
                vals[m, n] = phi[m, n, S[m, n]]
        costs[t - 1] = tot
        drops += assign_greedy(vals, req, B, A)
        if record:
            actions[t - 1] = A
        doubled = False
        for m in range(M):
            for n in range(N):
                s = S[m, n]
                a = A[m, n]
                d = draw_service(cdf[m, n], u_srv[row, m, n])
                s2 = s - d
                if s2 < 0:
                    s2 = 0
                if a == 1:
                    s2 += 1
                    if s2 > S_max:
                        s2 = S_max
                        drops += 1
                alpha[m, n, s, a, s2] += 1.0
                counts[m, n, s, a] += 1
                if counts[m, n, s, a] > 2 * snapshot[m, n, s, a]:
                    doubled = True
                S[m, n] = s2
        t += 1
        row += 1
        if doubled:
            return row - start, 2, drops
    return row - start, 0, drops
