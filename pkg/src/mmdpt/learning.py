"""Thompson sampling with dynamic episodes over Dirichlet kernel posteriors."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _core
from .domain import InstanceConfig
from .env import ROUTED, NoiseStream, instance_kernels, kernel_support
from .relaxation import MANDATORY, LPInfeasible, mmdpt_indices

POINT_MASS = 1e9


class PosteriorError(ValueError):
    pass


@dataclass
class PosteriorState:
    """Dirichlet concentrations ``alpha[m, n, s, a, s_next]`` and visit counts ``counts[m, n, s, a]``."""

    alpha: np.ndarray
    counts: np.ndarray
    prior: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.prior > 0

    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum(axis=-1, keepdims=True)

    def copy(self) -> "PosteriorState":
        return PosteriorState(self.alpha.copy(), self.counts.copy(), self.prior)


def init_posterior(cfg: InstanceConfig, prior_strength: float = 1.0,
                   semantics: str = ROUTED) -> PosteriorState:
    """Symmetric Dirichlet rows over the structural kernel support."""
    if not prior_strength > 0:
        raise PosteriorError("prior strength must be positive")
    mask = kernel_support(cfg.S_max, cfg.d_max, semantics)
    prior = np.broadcast_to(np.where(mask, float(prior_strength), 0.0),
                            (cfg.M, cfg.N) + mask.shape).copy()
    prior.flags.writeable = False
    counts = np.zeros((cfg.M, cfg.N, cfg.S_max + 1, 2), dtype=np.int64)
    return PosteriorState(prior.copy(), counts, prior)


def point_mass_posterior(cfg: InstanceConfig, kernels=None, scale: float = POINT_MASS) -> PosteriorState:
    """Prior concentrated on the true kernels (``alpha = scale * theta``)."""
    K = instance_kernels(cfg) if kernels is None else np.asarray(kernels, dtype=float)
    prior = scale * K
    prior.flags.writeable = False
    counts = np.zeros(K.shape[:4], dtype=np.int64)
    return PosteriorState(prior.copy(), counts, prior)


def posterior_update(ps: PosteriorState, obs) -> PosteriorState:
    """Conjugate update for one observed transition ``(m, n, s, a, s_next)`` (in place)."""
    m, n, s, a, s2 = (int(x) for x in obs)
    if not ps.prior[m, n, s, a, s2] > 0:
        raise PosteriorError(f"transition {(m, n, s, a, s2)} lies outside the kernel support")
    ps.alpha[m, n, s, a, s2] += 1.0
    ps.counts[m, n, s, a] += 1
    return ps


def sample_kernels(ps: PosteriorState, rng: np.random.Generator) -> np.ndarray:
    """One independent Dirichlet draw per row (gamma normalization)."""
    g = np.zeros_like(ps.alpha)
    sup = ps.alpha > 0
    g[sup] = rng.standard_gamma(ps.alpha[sup])
    tot = g.sum(axis=-1, keepdims=True)
    # an all-underflow row (tiny concentrations) falls back to its mean
    bad = tot[..., 0] <= 0
    if np.any(bad):
        g[bad] = ps.alpha[bad]
        tot = g.sum(axis=-1, keepdims=True)
    return g / tot


@dataclass
class EpisodeState:
    k: int
    t_k: int
    T_prev: int
    snapshot: np.ndarray
    theta: np.ndarray | None = None
    table: np.ndarray | None = None


def episode_should_end(t: int, es: EpisodeState, counts) -> bool:
    """True once slot ``t`` is beyond the length budget or some visit count has doubled."""
    return t > es.t_k + es.T_prev or bool(np.any(np.asarray(counts) > 2 * es.snapshot))


@dataclass
class RegretRecord:
    """Cumulative cost per slot against the reference rate ``J_ref``."""

    cum_cost: np.ndarray
    J_ref: float
    episode_starts: np.ndarray

    @property
    def T(self) -> int:
        return int(self.cum_cost.size)

    @property
    def regret(self) -> np.ndarray:
        return self.cum_cost - np.arange(1, self.T + 1) * self.J_ref

    @property
    def n_episodes(self) -> int:
        return int(self.episode_starts.size)

    def episode_of(self) -> np.ndarray:
        """Episode index (0-based) active at each slot."""
        return np.searchsorted(self.episode_starts, np.arange(1, self.T + 1), side="right") - 1


@dataclass
class EpisodeInfo:
    k: int
    start: int
    length: int
    reason: str
    compute_s: float
    mean_abs_err: float


@dataclass
class LearningRunRecord:
    algo: str
    seed: int | None
    regret: RegretRecord
    episodes: list[EpisodeInfo]
    drops: int
    actions: np.ndarray | None = None
    posterior: PosteriorState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def compute_times(self) -> np.ndarray:
        return np.array([e.compute_s for e in self.episodes])

    def write_csv(self, path, stride: int = 1, header: bool = True) -> None:
        """Rows ``seed,t,cum_cost,regret,episode`` every ``stride`` slots (the last slot always)."""
        r = self.regret
        ts = np.arange(stride, r.T + 1, stride)
        if ts.size == 0 or ts[-1] != r.T:
            ts = np.append(ts, r.T)
        ep = r.episode_of()
        reg = r.regret
        with open(path, "a" if not header else "w", newline="") as fh:
            w = csv.writer(fh)
            if header:
                w.writerow(["seed", "t", "cum_cost", "regret", "episode"])
            for t in ts:
                w.writerow([self.seed, int(t), repr(float(r.cum_cost[t - 1])),
                            repr(float(reg[t - 1])), int(ep[t - 1])])

    def write_episodes(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "episode", "start", "length", "reason", "compute_s", "mean_abs_err"])
            for e in self.episodes:
                w.writerow([self.seed, e.k, e.start, e.length, e.reason,
                            repr(e.compute_s), repr(e.mean_abs_err)])


_REASONS = {1: "length", 2: "doubling"}


def run_thompson(cfg: InstanceConfig, T: int, policy_from_kernels: Callable[[np.ndarray], np.ndarray],
                 rng: np.random.Generator, J_ref: float, prior_strength: float = 1.0,
                 posterior: PosteriorState | None = None, learner_rng: np.random.Generator | None = None,
                 frame: int = 0, record_actions: bool = False, algo: str = "ts",
                 seed: int | None = None) -> LearningRunRecord:
    """Generic dynamic-episode Thompson sampling loop.

    ``rng`` drives the environment only (through a :class:`NoiseStream`), so
    runs sharing a seed see the same channel. Posterior draws use
    ``learner_rng`` (default: a child stream spawned from ``rng``). The first
    episode uses the prior mean; later episodes a posterior sample.
    """
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    M, N, S_max = cfg.M, cfg.N, cfg.S_max
    ps = posterior.copy() if posterior is not None else init_posterior(cfg, prior_strength)
    learner_rng = learner_rng if learner_rng is not None else rng.spawn(1)[0]
    noise = NoiseStream(rng, M, N)
    true_K = instance_kernels(cfg, frame)
    cdf = np.cumsum(cfg.pmfs(frame), axis=-1)
    S = np.zeros((M, N), np.int64)
    costs = np.empty(T)
    actions = np.zeros((T if record_actions else 1, M, N), np.int8)
    sup = ps.support
    episodes, starts = [], []
    drops = 0
    t, T_prev, k = 1, 1, 0
    while t <= T:
        es = EpisodeState(k, t, T_prev, ps.counts.copy())
        tic = time.perf_counter()
        es.theta = ps.mean() if k == 0 else sample_kernels(ps, learner_rng)
        es.table = np.ascontiguousarray(policy_from_kernels(es.theta), dtype=float)
        compute = time.perf_counter() - tic
        t_limit = min(T, es.t_k + es.T_prev)
        reason = 1
        while t <= t_limit:
            u_req, u_srv, start, stop = noise.peek(t_limit - t + 1)
            used, code, d = _core.learn_slots(
                S, es.table, cdf, cfg.p, cfg.B, S_max, u_req, u_srv, start, stop, t, t_limit,
                ps.alpha, ps.counts, es.snapshot, costs, actions, record_actions)
            noise.advance(used)
            t += used
            drops += d
            if code:
                reason = code
                break
        length = t - es.t_k
        err = float(np.abs(ps.mean() - true_K)[sup].mean())
        name = "horizon" if reason == 1 and es.t_k + es.T_prev > T else _REASONS[reason]
        episodes.append(EpisodeInfo(k, es.t_k, length, name, compute, err))
        starts.append(es.t_k)
        T_prev = length
        k += 1
    rec = RegretRecord(np.cumsum(costs), float(J_ref), np.array(starts, dtype=np.int64))
    return LearningRunRecord(algo, seed, rec, episodes, int(drops),
                             actions if record_actions else None, ps)


def mmdpt_policy(cfg: InstanceConfig, mode: str = MANDATORY) -> Callable[[np.ndarray], np.ndarray]:
    def build(kernels):
        try:
            return mmdpt_indices(kernels, cfg.p, cfg.B, mode)[0]
        except LPInfeasible as exc:
            # routing and budget rows do not depend on the kernels
            raise RuntimeError(f"episodic LP infeasible under sampled kernels: {exc}") from exc
    return build


def run_mmdpt_ts(cfg: InstanceConfig, T: int, prior_strength: float, rng: np.random.Generator,
                 J_ref: float, mode: str = MANDATORY, **kw) -> LearningRunRecord:
    """Thompson sampling where each episode plays the index policy of the sampled kernels' LP."""
    return run_thompson(cfg, T, mmdpt_policy(cfg, mode), rng, J_ref, prior_strength,
                        algo="mmdpt_ts", **kw)


def kt_bound(cfg: InstanceConfig, T: int) -> float:
    return 2.0 * math.sqrt(cfg.S_max * cfg.M * cfg.N * T * math.log(T)) if T > 1 else 1.0
