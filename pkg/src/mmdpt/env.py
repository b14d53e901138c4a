"""Per-pair queue kernels and the slotted multi-AP simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _core
from .domain import InstanceConfig, InstanceError, check_pmf
from .scheduler import assign, feasibility_check as feasible

ROUTED = "routed"
THINNED = "thinned"

NOISE_BLOCK = 4096


class InfeasibleActionError(RuntimeError):
    """A policy returned an action matrix that breaks a routing constraint."""


def build_kernel(p: float, pmf, S_max: int) -> np.ndarray:
    """Controlled kernel of one (user, AP) queue as ``K[s, a, s_next]``.

    Service ``d ~ pmf`` is applied to the current queue first. With ``a = 1``
    a new request arrives with probability ``p`` and joins afterwards
    (clipped at ``S_max``); with ``a = 0`` nothing arrives.
    """
    pmf = check_pmf(pmf)
    if not 0 <= p <= 1:
        raise InstanceError("arrival probability must lie in [0, 1]")
    if S_max < 1:
        raise InstanceError("S_max must be >= 1")
    K = np.zeros((S_max + 1, 2, S_max + 1))
    for s in range(S_max + 1):
        for d, q in enumerate(pmf):
            left = max(s - d, 0)
            K[s, 0, left] += q
            K[s, 1, min(left + 1, S_max)] += p * q
            K[s, 1, left] += (1 - p) * q
    return K


def instance_kernels(cfg: InstanceConfig, frame: int = 0, semantics: str = ROUTED) -> np.ndarray:
    """All pair kernels ``K[m, n, s, a, s_next]`` for one frame.

    ``routed``: action 1 means a realized request is sent to the queue, the
    dynamics the simulator actually produces. ``thinned``: action 1 carries the
    arrival probability p_m, as in the planning model.
    """
    if semantics not in (ROUTED, THINNED):
        raise ValueError(f"unknown kernel semantics {semantics!r}")
    pmfs = cfg.pmfs(frame)
    K = np.empty((cfg.M, cfg.N, cfg.S_max + 1, 2, cfg.S_max + 1))
    for m in range(cfg.M):
        pm = 1.0 if semantics == ROUTED else float(cfg.p[m])
        for n in range(cfg.N):
            K[m, n] = build_kernel(pm, pmfs[m, n], cfg.S_max)
    return K


def kernel_support(S_max: int, d_max: int, semantics: str = ROUTED) -> np.ndarray:
    """Boolean mask of transitions that any delivery pmf with this ``d_max`` can produce."""
    p = 1.0 if semantics == ROUTED else 0.5
    return build_kernel(p, np.full(d_max + 1, 1.0 / (d_max + 1)), S_max) > 0


# -- noise --------------------------------------------------------------------

class NoiseStream:
    """Uniform draws for request indicators and service, produced in fixed blocks.

    All consumers read the same sequence for a given seed, independent of the
    actions taken, so different policies can share one channel realization.
    """

    def __init__(self, rng: np.random.Generator, M: int, N: int, block: int = NOISE_BLOCK):
        self.rng = rng
        self.M, self.N, self.block = M, N, block
        self.req = np.empty((0, M))
        self.srv = np.empty((0, M, N))
        self.pos = 0

    def _refill(self):
        self.req = self.rng.random((self.block, self.M))
        self.srv = self.rng.random((self.block, self.M, self.N))
        self.pos = 0

    def take(self, k: int):
        """Up to ``k`` consecutive rows (at least one) from the current block."""
        if self.pos >= self.req.shape[0]:
            self._refill()
        stop = min(self.pos + k, self.req.shape[0])
        out = self.req[self.pos : stop], self.srv[self.pos : stop]
        self.pos = stop
        return out

    def peek(self, k: int):
        if self.pos >= self.req.shape[0]:
            self._refill()
        stop = min(self.pos + k, self.req.shape[0])
        return self.req, self.srv, self.pos, stop

    def advance(self, k: int):
        self.pos += k


# -- state & stepping -------------------------------------------------------------

@dataclass
class EnvState:
    S: np.ndarray
    t: int = 1
    frame: int = 0
    drops: int = 0
    requesters: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def copy(self) -> "EnvState":
        return EnvState(self.S.copy(), self.t, self.frame, self.drops, self.requesters.copy())


def draw_requesters(p, u_req) -> np.ndarray:
    return np.flatnonzero(u_req < p)


def step(state: EnvState, action, cfg: InstanceConfig, u_srv, u_req_next=None) -> EnvState:
    """Advance one slot: serve every queue with the current frame's pmf, then
    add routed requests. ``u_srv`` holds one uniform per (m, n) pair and
    ``u_req_next`` the request draws for the following slot.
    """
    A = np.asarray(action, dtype=np.int8)
    if A.shape != (cfg.M, cfg.N) or not feasible(A, state.requesters, cfg.B):
        raise InfeasibleActionError(f"infeasible action matrix at slot {state.t}")
    S = state.S.copy()
    cdf = np.cumsum(cfg.pmfs(state.frame), axis=-1)
    unrouted = len(state.requesters) - int(A.sum())
    clipped = _core.apply_step(S, A, cdf, np.asarray(u_srv, dtype=float), cfg.S_max)
    t = state.t + 1
    req = (draw_requesters(cfg.p, u_req_next) if u_req_next is not None
           else np.zeros(0, dtype=np.int64))
    return EnvState(S, t, cfg.frames.frame_at(t), state.drops + unrouted + clipped, req)


# -- policies -----------------------------------------------------------------

Policy = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


class IndexPolicy:
    """Index table(s) plus the sorting step; tables are ``(M, N, S_max+1)`` or per-frame."""

    def __init__(self, table, B: int, name: str = "index"):
        table = np.asarray(table, dtype=float)
        if table.ndim == 3:
            table = table[None]
        self.tables = table
        self.B = B
        self.name = name

    def table(self, frame: int = 0) -> np.ndarray:
        return self.tables[min(frame, self.tables.shape[0] - 1)]

    def __call__(self, S, requesters, t, frame: int = 0):
        return assign(self.table(frame), S, requesters, self.B)


def never_route(S, requesters, t):
    return np.zeros_like(S, dtype=np.int8)


@dataclass
class RolloutResult:
    costs: np.ndarray
    drops: int
    state: EnvState
    actions: np.ndarray | None = None
    tracked: np.ndarray | None = None


def rollout(cfg: InstanceConfig, policy, T: int, rng: np.random.Generator,
            S0=None, record_actions: bool = False, track=None,
            noise: NoiseStream | None = None) -> RolloutResult:
    """Simulate ``T`` slots. ``costs[t-1]`` is the total queue length at the start of slot t.

    Index policies run through the jitted loop; any other callable
    ``policy(S, requesters, t)`` goes through the checked Python step.
    """
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    M, N = cfg.M, cfg.N
    S = np.zeros((M, N), np.int64) if S0 is None else np.array(S0, dtype=np.int64)
    if S.shape != (M, N) or S.min() < 0 or S.max() > cfg.S_max:
        raise InstanceError("initial queue state out of range")
    noise = noise or NoiseStream(rng, M, N)
    track = np.zeros((0, 4), np.int64) if track is None else np.asarray(track, np.int64).reshape(-1, 4)
    costs = np.empty(T)
    actions = np.zeros((T, M, N), np.int8) if record_actions else np.zeros((1, M, N), np.int8)
    tracked = np.zeros((T, track.shape[0]), np.bool_)
    drops = 0
    if isinstance(policy, IndexPolicy):
        t = 0
        while t < T:
            frame = cfg.frames.frame_at(t + 1)
            frame_end = (frame + 1) * cfg.frames.slots_per_frame if frame < cfg.frames.n_frames - 1 else T
            u_req, u_srv = noise.take(min(T, frame_end) - t)
            k = u_req.shape[0]
            cdf = np.cumsum(cfg.pmfs(frame), axis=-1)
            drops += _core.simulate_index(
                S, policy.table(frame), cdf, cfg.p, cfg.B, cfg.S_max, u_req, u_srv,
                costs[t : t + k], actions[t : t + k] if record_actions else actions,
                record_actions, track, tracked[t : t + k])
            t += k
        state = EnvState(S, T + 1, cfg.frames.frame_at(T + 1), int(drops))
    else:
        u_req, u_srv = noise.take(1)
        state = EnvState(S, 1, 0, 0, draw_requesters(cfg.p, u_req[0]))
        for t in range(T):
            costs[t] = state.S.sum()
            A = np.asarray(policy(state.S.copy(), state.requesters.copy(), state.t), dtype=np.int8)
            if not feasible(A, state.requesters, cfg.B) or A.shape != (M, N):
                raise InfeasibleActionError(f"policy returned an infeasible matrix at slot {state.t}")
            if record_actions:
                actions[t] = A
            for j, (m, n, s, a) in enumerate(track):
                tracked[t, j] = state.S[m, n] == s and A[m, n] == a
            srv = u_srv[0]
            u_req, u_srv = noise.take(1)
            state = step(state, A, cfg, srv, u_req[0])
        # the request draw for slot T+1 is not part of the trajectory
        state.requesters = np.zeros(0, dtype=np.int64)
    return RolloutResult(costs, state.drops, state, actions if record_actions else None,
                         tracked if track.shape[0] else None)
