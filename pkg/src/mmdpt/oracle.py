"""Exact joint-chain computations for tiny instances: optimal control, policy cost, bias."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .domain import InstanceConfig
from .env import NoiseStream, instance_kernels, rollout

STATE_GUARD = 10**6
RVI_MAX_ITER = 10**5
MAXIMAL = "maximal"
ALL_SUBSETS = "literal"


class OracleError(RuntimeError):
    pass


class MultichainError(OracleError):
    def __init__(self, msg, classes):
        super().__init__(msg)
        self.classes = classes


def routings(requesters, N: int, B: int, maximal: bool = True) -> list[np.ndarray]:
    """Feasible assignments of ``requesters`` as lists of AP ids (-1 = not routed).

    With ``maximal`` a requester may stay unrouted only if every AP is full.
    """
    out = []

    def rec(i, load, choice):
        if i == len(requesters):
            if maximal and -1 in choice and min(load) < B:
                return
            out.append(np.array(choice))
            return
        for n in range(N):
            if load[n] < B:
                load[n] += 1
                rec(i + 1, load, choice + [n])
                load[n] -= 1
        rec(i + 1, load, choice + [-1])

    rec(0, [0] * N, [])
    return out


@dataclass
class JointMDP:
    M: int
    N: int
    S_max: int
    kernels: np.ndarray
    costs: np.ndarray
    actions: list  # action matrices (M, N)
    patterns: list  # (probability, requester tuple, [action ids])
    _P: dict

    @property
    def n_states(self) -> int:
        return self.costs.size

    def P(self, a: int) -> sp.csr_matrix:
        if a not in self._P:
            self._P[a] = joint_transition(self.kernels, self.actions[a])
        return self._P[a]

    def state(self, idx: int) -> np.ndarray:
        return np.array(np.unravel_index(idx, (self.S_max + 1,) * (self.M * self.N))).reshape(self.M, self.N)

    def index(self, S) -> int:
        return int(np.ravel_multi_index(np.asarray(S).ravel(), (self.S_max + 1,) * (self.M * self.N)))


def joint_transition(kernels, A) -> sp.csr_matrix:
    """Product kernel over all pairs for a fixed joint action (pair (0,0) most significant)."""
    M, N = A.shape
    P = None
    for m in range(M):
        for n in range(N):
            Km = sp.csr_matrix(kernels[m, n, :, int(A[m, n]), :])
            P = Km if P is None else sp.kron(P, Km, format="csr")
    return P


def _state_costs(M, N, S_max):
    grids = np.indices((S_max + 1,) * (M * N)).reshape(M * N, -1)
    return grids.sum(axis=0).astype(float)


def build_joint_mdp(cfg: InstanceConfig, kernels=None, mode: str = MAXIMAL) -> JointMDP:
    """Joint chain over all queues; actions are routings of each realized requester set."""
    n_states = (cfg.S_max + 1) ** (cfg.M * cfg.N)
    if n_states > STATE_GUARD:
        raise OracleError(f"{n_states} joint states exceed the guard of {STATE_GUARD}")
    K = instance_kernels(cfg) if kernels is None else np.asarray(kernels)
    actions, keys, patterns = [], {}, []
    for bits in itertools.product((0, 1), repeat=cfg.M):
        prob = float(np.prod([cfg.p[m] if b else 1 - cfg.p[m] for m, b in enumerate(bits)]))
        if prob == 0.0:
            continue
        req = tuple(m for m, b in enumerate(bits) if b)
        ids = []
        for choice in routings(req, cfg.N, cfg.B, maximal=(mode == MAXIMAL)):
            A = np.zeros((cfg.M, cfg.N), dtype=np.int8)
            for m, n in zip(req, choice):
                if n >= 0:
                    A[m, n] = 1
            key = A.tobytes()
            if key not in keys:
                keys[key] = len(actions)
                actions.append(A)
            ids.append(keys[key])
        patterns.append((prob, req, sorted(set(ids))))
    return JointMDP(cfg.M, cfg.N, cfg.S_max, K, _state_costs(cfg.M, cfg.N, cfg.S_max),
                    actions, patterns, {})


@dataclass
class BiasSolution:
    J: float
    V: np.ndarray
    span: float
    residual: float
    stationary: np.ndarray | None = None


def _span(x) -> float:
    return float(np.max(x) - np.min(x))


def _greedy(mdp: JointMDP, h, mats):
    """Bellman operator value and the minimizing action id per (pattern, state)."""
    nxt = [P @ h for P in mats]
    E = np.zeros_like(h)
    choice = []
    for prob, _, ids in mdp.patterns:
        stack = np.stack([nxt[a] for a in ids])
        k = np.argmin(stack, axis=0)
        E += prob * stack[k, np.arange(h.size)]
        choice.append(np.asarray(ids)[k])
    return mdp.costs + E, choice


def _evaluate(mdp: JointMDP, choice):
    """Gain and bias (h[0] = 0) of the stationary policy ``choice``; None if singular."""
    n = mdp.n_states
    P = sp.csr_matrix((n, n))
    for (prob, _, _), acts in zip(mdp.patterns, choice):
        for a in np.unique(acts):
            w = np.where(acts == a, prob, 0.0)
            P = P + sp.diags(w) @ mdp.P(int(a))
    # unknowns: J, h[1:]
    A = (sp.eye(n) - P).tolil()
    A[:, 0] = np.ones((n, 1))
    try:
        x = spla.spsolve(A.tocsc(), mdp.costs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(x)):
        return None
    h = x.copy()
    h[0] = 0.0
    return float(x[0]), h


def rvi_optimal(mdp: JointMDP, tol: float = 1e-8, max_iter: int = RVI_MAX_ITER,
                tau: float = 0.5, h0=None, polish_every: int = 200) -> BiasSolution:
    """Relative value iteration on the aperiodicity-transformed chain.

    ``tau`` mixes in a self-loop (P -> tau P + (1 - tau) I), which keeps the
    gain and bias of the original problem while removing periodicity. Every
    ``polish_every`` sweeps the current greedy policy is evaluated exactly and
    its bias replaces the iterate, so slowly mixing queues do not stall the
    iteration. Stops when the span of the Bellman residual is below ``tol``.
    """
    h = np.zeros(mdp.n_states) if h0 is None else np.array(h0, dtype=float)
    mats = [mdp.P(a) for a in range(len(mdp.actions))]
    for it in range(1, max_iter + 1):
        Th, choice = _greedy(mdp, h, mats)
        if _span(Th - h) < tol:
            break
        if polish_every and it % polish_every == 0:
            ev = _evaluate(mdp, choice)
            if ev is not None:
                h = ev[1]
                continue
        w = tau * Th + (1 - tau) * h
        h = w - w[0]
    else:
        raise OracleError(f"relative value iteration did not converge in {max_iter} iterations")
    resid = Th - h
    J = 0.5 * (resid.max() + resid.min())
    return BiasSolution(float(J), h, _span(h), float(np.max(np.abs(resid - J))))


# -- fixed policies ---------------------------------------------------------------

def policy_chain(mdp: JointMDP, policy) -> sp.csr_matrix:
    """Transition matrix of the joint chain under ``policy(S, requesters, t)``."""
    n = mdp.n_states
    extra = {}
    weights = {}
    for idx in range(n):
        S = mdp.state(idx)
        for prob, req, _ in mdp.patterns:
            A = np.asarray(policy(S.copy(), np.array(req, dtype=np.int64), 0), dtype=np.int8)
            key = A.tobytes()
            if key not in extra:
                extra[key] = A
                weights[key] = np.zeros(n)
            weights[key][idx] += prob
    P = sp.csr_matrix((n, n))
    for key, A in extra.items():
        P = P + sp.diags(weights[key]) @ joint_transition(mdp.kernels, A)
    return P.tocsr()


def closed_classes(P: sp.csr_matrix, nodes=None) -> list[np.ndarray]:
    """Closed communicating classes of the chain (restricted to ``nodes`` if given)."""
    n = P.shape[0]
    if nodes is None:
        nodes = np.arange(n)
    sub = P[nodes][:, nodes]
    k, labels = connected_components(sub, directed=True, connection="strong")
    out = []
    for lab in range(k):
        members = np.flatnonzero(labels == lab)
        rows = sub[members]
        if rows.sum() - rows[:, members].sum() <= 1e-12:
            out.append(nodes[members])
    return out


def stationary_distribution(P: sp.csr_matrix, nodes=None) -> np.ndarray:
    """Stationary distribution of the (unique) closed class; zeros elsewhere."""
    classes = closed_classes(P, nodes)
    if len(classes) != 1:
        raise MultichainError(f"chain has {len(classes)} closed classes", classes)
    cls = classes[0]
    sub = P[cls][:, cls].toarray() if len(cls) <= 4000 else P[cls][:, cls]
    k = len(cls)
    A = (sp.eye(k) - sp.csr_matrix(sub)).T.tolil()
    A[k - 1, :] = np.ones(k)
    b = np.zeros(k)
    b[-1] = 1.0
    eta_c = spla.spsolve(A.tocsc(), b)
    eta = np.zeros(P.shape[0])
    eta[cls] = np.clip(eta_c, 0, None)
    return eta / eta.sum()


def policy_average_cost(cfg: InstanceConfig, policy, method: str = "exact", kernels=None,
                        start=None, T: int = 100_000, seeds=(0,), burn_in: int = 0):
    """Long-run average total queue length of ``policy``.

    ``exact`` solves the stationary distribution of the joint chain reachable
    from ``start`` (empty queues by default) and returns J. ``monte_carlo``
    returns (mean, standard error) of time averages over ``seeds``.
    """
    if method == "exact":
        mdp = build_joint_mdp(cfg, kernels)
        P = policy_chain(mdp, policy)
        s0 = 0 if start is None else mdp.index(start)
        reach = np.sort(breadth_first_order(P, s0, directed=True, return_predecessors=False))
        eta = stationary_distribution(P, reach)
        return float(eta @ mdp.costs)
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    vals = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        res = rollout(cfg, policy, T + burn_in, rng, S0=start,
                      noise=NoiseStream(rng, cfg.M, cfg.N))
        vals.append(res.costs[burn_in:].mean())
    vals = np.asarray(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else float("nan")
    return float(vals.mean()), float(se)


def policy_bias_and_span(cfg: InstanceConfig, policy, kernels=None) -> BiasSolution:
    """Bias of ``policy`` over the full joint space.

    Solves V = c - J + P V with the normalization eta^T V = J - S_max*M*N,
    where eta is the stationary distribution. Requires a unichain induced chain.
    """
    mdp = build_joint_mdp(cfg, kernels)
    P = policy_chain(mdp, policy)
    eta = stationary_distribution(P)
    c = mdp.costs
    J = float(eta @ c)
    n = mdp.n_states
    kappa = J - cfg.S_max * cfg.M * cfg.N
    A = (sp.eye(n) - P).tolil()
    r = int(np.argmax(eta))
    A[r, :] = eta
    rhs = c - J
    rhs[r] = kappa
    V = spla.spsolve(A.tocsc(), rhs)
    resid = c - J + P @ V - V
    return BiasSolution(J, V, _span(V), float(np.max(np.abs(resid))), eta)
