"""Whittle and priority index baselines, and their Thompson-sampling learners."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .domain import InstanceConfig, check_pmf
from .learning import LearningRunRecord, run_thompson

log = logging.getLogger(__name__)

WHITTLE_TOL = 1e-6
MAX_BISECT = 100
RVI_SWEEPS = 200_000
WIDEN_STEPS = 10
MAX_POLISH = 5
STALL_SWEEPS = 1_000


class NoSignChange(RuntimeError):
    """Q_active - Q_passive keeps one sign over the whole bracket."""


@dataclass(frozen=True)
class ArmModel:
    """One (user, AP) queue: kernel ``K[s, a, s_next]``, cost s, passive subsidy lam."""

    kernel: np.ndarray
    lam: float = 0.0

    @property
    def S_max(self) -> int:
        return self.kernel.shape[0] - 1


@njit(cache=True)
def _evaluate(K, lam, pol):
    """Gain and bias (h[0] = 0) of a deterministic policy; ok=False if singular."""
    S1 = K.shape[0]
    A = np.eye(S1)
    c = np.empty(S1)
    for s in range(S1):
        a = pol[s]
        c[s] = s - lam * (1 - a)
        for j in range(S1):
            A[s, j] -= K[s, a, j]
    for s in range(S1):
        A[s, 0] = 1.0
    if abs(np.linalg.det(A)) < 1e-12:
        return 0.0, np.zeros(S1), False
    x = np.linalg.solve(A, c)
    J = x[0]
    x[0] = 0.0
    return J, x, True


@njit(cache=True)
def _arm_rvi(K, lam, h, tol, tau, max_sweeps, polish):
    """Relative value iteration for the subsidised arm, warm-started from ``h``
    (updated in place). Every ``polish`` sweeps the greedy policy is evaluated
    exactly, at most ``MAX_POLISH`` times, since gain-tied policies with
    different biases could otherwise keep resetting the iterate.
    Returns (Q_active - Q_passive per state, converged)."""
    S1 = K.shape[0]
    polished = 0
    Th = np.empty(S1)
    diff = np.empty(S1)
    pol = np.zeros(S1, np.int64)
    for it in range(1, max_sweeps + 1):
        for s in range(S1):
            qa = s * 1.0
            qp = s - lam
            for j in range(S1):
                qa += K[s, 1, j] * h[j]
                qp += K[s, 0, j] * h[j]
            diff[s] = qa - qp
            if qa < qp:
                Th[s] = qa
                pol[s] = 1
            else:
                Th[s] = qp
                pol[s] = 0
        lo = np.inf
        hi = -np.inf
        for s in range(S1):
            r = Th[s] - h[s]
            lo = min(lo, r)
            hi = max(hi, r)
        if hi - lo < tol:
            return diff, True
        if polish > 0 and it % polish == 0 and polished < MAX_POLISH:
            polished += 1
            J, hx, ok = _evaluate(K, lam, pol)
            if ok:
                h[:] = hx
                continue
        base = tau * Th[0] + (1 - tau) * h[0]
        for s in range(S1):
            h[s] = tau * Th[s] + (1 - tau) * h[s] - base
    return diff, False


@njit(cache=True)
def _bisect(K, s, lo, hi, tol, max_bisect, h, sweeps):
    """Root of lam -> (Q_active - Q_passive)(s; lam).

    Returns (lam, status, stalls): status 0 ok, 1 no sign change, 2 non-finite
    iterate. Near a subsidy where two policies tie in gain the arm chain can
    split into two closed classes and the iteration slows down without bound.
    A stalled evaluation (bracket end or midpoint) still uses the sign of its
    last iterate and is counted in ``stalls``.
    """
    stalls = 0
    d_lo, ok = _arm_rvi(K, lo, h, tol, 0.5, sweeps, 10)
    stalls += not ok
    v_lo = d_lo[s]
    d_hi, ok = _arm_rvi(K, hi, h, tol, 0.5, sweeps, 10)
    stalls += not ok
    v_hi = d_hi[s]
    if not (np.isfinite(v_lo) and np.isfinite(v_hi)):
        return 0.0, 2, stalls
    if v_lo > 0 or v_hi < 0:
        return 0.0, 1, stalls
    for _ in range(max_bisect):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        d, ok = _arm_rvi(K, mid, h, tol, 0.5, sweeps, 10)
        stalls += not ok
        if not np.isfinite(d[s]):
            return 0.0, 2, stalls
        if d[s] > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi), 0, stalls


def q_difference(arm: ArmModel, lam: float, tol: float = WHITTLE_TOL) -> np.ndarray:
    """Q_active - Q_passive at every state for subsidy ``lam``."""
    K = np.ascontiguousarray(arm.kernel, dtype=float)
    d, ok = _arm_rvi(K, float(lam), np.zeros(K.shape[0]), tol, 0.5, RVI_SWEEPS, 10)
    if not ok:
        raise RuntimeError("arm value iteration did not converge")
    return d


def whittle_index(arm: ArmModel, s: int, tol: float = WHITTLE_TOL, bracket=None,
                  max_bisect: int = MAX_BISECT) -> float:
    """Passive subsidy at which routing and not routing are equally good in state ``s``.

    Larger values mean routing is more valuable. Raises :class:`NoSignChange`
    if the bracket (default ``[-S_max, S_max]``) does not contain the root.
    """
    K = np.ascontiguousarray(arm.kernel, dtype=float)
    lo, hi = bracket if bracket is not None else (-arm.S_max, arm.S_max)
    lam, status, _ = _bisect(K, int(s), float(lo), float(hi), tol, max_bisect,
                             np.zeros(K.shape[0]), RVI_SWEEPS)
    if status == 1:
        raise NoSignChange(f"no sign change of Q_active - Q_passive on [{lo}, {hi}] at s={s}")
    if status == 2:
        raise RuntimeError("arm value iteration produced a non-finite iterate")
    return float(lam)


@njit(cache=True)
def _table(K, tol, max_bisect, widen, sweeps, out, status, stalls):
    M, N, S1 = K.shape[0], K.shape[1], K.shape[2]
    base = S1 - 1.0
    for m in range(M):
        for n in range(N):
            h = np.zeros(S1)
            Kmn = K[m, n]
            for s in range(S1):
                lo, hi = -base, base
                for _ in range(widen + 1):
                    lam, st, k = _bisect(Kmn, s, lo, hi, tol, max_bisect, h, sweeps)
                    stalls[m, n, s] += k
                    if st != 1:
                        break
                    lo, hi = 2 * lo, 2 * hi
                out[m, n, s] = lam
                status[m, n, s] = st


def whittle_table(kernels, tol: float = WHITTLE_TOL, max_bisect: int = MAX_BISECT,
                  widen: int = WIDEN_STEPS, report: dict | None = None,
                  sweeps: int = STALL_SWEEPS) -> np.ndarray:
    """Whittle index for every (m, n, s) of ``kernels[m, n, s, a, s_next]``.

    The bracket starts at [-S_max, S_max] and is doubled up to ``widen`` times
    when it holds no sign change. Each value iteration is capped at ``sweeps``
    sweeps (see :func:`_bisect` for stalled evaluations). States that still
    have no root get index 0 and are counted in ``report``.
    """
    K = np.ascontiguousarray(kernels, dtype=float)
    out = np.zeros(K.shape[:3])
    status = np.zeros(K.shape[:3], np.int64)
    stalls = np.zeros(K.shape[:3], np.int64)
    _table(K, tol, max_bisect, widen, int(sweeps), out, status, stalls)
    bad = int(np.count_nonzero(status))
    if bad:
        log.warning("Whittle index fell back to 0 for %d states", bad)
    if report is not None:
        report["fallback"] = report.get("fallback", 0) + bad
        report["stalls"] = report.get("stalls", 0) + int(stalls.sum())
        report["widened"] = report.get("widened", 0) + int(np.count_nonzero(np.abs(out) > K.shape[2] - 1))
    return out


PRIORITY_DECIMALS = 12


def _priority(ED, S_max: int) -> np.ndarray:
    phi = ED[..., None] / (np.arange(S_max + 1)[None, None, :] + 1.0)
    top = phi.reshape(phi.shape[0], -1).max(axis=1)
    out = np.zeros_like(phi)
    nz = top > 0
    out[nz] = phi[nz] / top[nz, None, None]
    # exact ties (e.g. 1/2 for two users) must not be split by round-off in E[D]
    return np.round(out, PRIORITY_DECIMALS)


def priority_index(pmfs, S_max: int) -> np.ndarray:
    """phi(m, n, s) = E[D_mn] / (s + 1), normalised so each user's largest entry is 1.

    A reconstruction of a "fast server, short queue" priority rule.
    """
    pmfs = check_pmf(pmfs)
    return _priority(pmfs @ np.arange(pmfs.shape[-1], dtype=float), S_max)


def expected_service(kernels) -> np.ndarray:
    """E[min(D, S_max)] per pair, read off the passive row at s = S_max."""
    K = np.asarray(kernels)
    S_max = K.shape[2] - 1
    return S_max - K[:, :, S_max, 0, :] @ np.arange(S_max + 1, dtype=float)


def priority_from_kernels(kernels) -> np.ndarray:
    K = np.asarray(kernels)
    return _priority(expected_service(K), K.shape[2] - 1)


def run_ts_whittle(cfg: InstanceConfig, T: int, prior_strength: float, rng: np.random.Generator,
                   J_ref: float, **kw) -> LearningRunRecord:
    """Thompson sampling where each episode plays the Whittle policy of the sampled kernels."""
    report: dict = {}
    rec = run_thompson(cfg, T, lambda K: whittle_table(K, report=report), rng, J_ref,
                       prior_strength, algo="ts_whittle", **kw)
    rec.meta.update(report)
    return rec


def run_priority_learning(cfg: InstanceConfig, T: int, prior_strength: float,
                          rng: np.random.Generator, J_ref: float, **kw) -> LearningRunRecord:
    """Thompson sampling feeding sampled mean service rates into the priority rule."""
    return run_thompson(cfg, T, priority_from_kernels, rng, J_ref, prior_strength,
                        algo="priority_learning", **kw)
