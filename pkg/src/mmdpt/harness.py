"""Experiment drivers: optimality gap under scaling, occupancy convergence, regret suites."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import priority_index, run_priority_learning, run_ts_whittle, whittle_table
from .domain import FrameSchedule, InstanceConfig
from .env import IndexPolicy, instance_kernels, rollout
from .learning import LearningRunRecord, RegretRecord, kt_bound, run_mmdpt_ts
from .relaxation import MANDATORY, mmdpt_indices, routed_mass

log = logging.getLogger(__name__)

POLICIES = ("mmdpt", "whittle", "priority")
LEARNERS = ("mmdpt_ts", "ts_whittle", "priority_learning")
EXACT_REFERENCE_STATES = 20_000


class ExperimentError(RuntimeError):
    pass


# -- scaling ------------------------------------------------------------------

@dataclass(frozen=True)
class ScaledInstance:
    """``rho`` copies of every user class and every AP class; copies of class m
    are users ``m*rho .. m*rho + rho - 1`` (likewise for APs)."""

    base: InstanceConfig
    rho: int
    cfg: InstanceConfig

    def tile(self, table) -> np.ndarray:
        """Expand a per-class table ``(M, N, ...)`` to every user/AP copy."""
        t = np.asarray(table)
        return np.repeat(np.repeat(t, self.rho, axis=0), self.rho, axis=1)


def scale_instance(cfg: InstanceConfig, rho: int) -> ScaledInstance:
    if rho < 1:
        raise ValueError("scaling parameter rho must be >= 1")
    if rho == 1:
        return ScaledInstance(cfg, 1, cfg)
    pm = cfg.frames.pmfs
    pmfs = np.repeat(np.repeat(pm, rho, axis=1), rho, axis=2)
    frames = FrameSchedule(pmfs, cfg.frames.slots_per_frame)
    big = InstanceConfig(cfg.M * rho, cfg.N * rho, cfg.B, cfg.S_max, cfg.d_max,
                         np.repeat(cfg.p, rho), frames, cfg.mandatory)
    return ScaledInstance(cfg, rho, big)


def scaled_lp(sc: ScaledInstance, mode: str = MANDATORY, frame: int = 0, method: str = "reduced"):
    """LP bound and index table of the scaled instance.

    ``reduced`` uses the class-symmetric solution: averaging any optimum over
    permutations of copies is again optimal, and a symmetric point solves
    rho^2 * LP(p / rho, B / rho) on the base kernels with total routed mass
    E[min(R, rho*N*B)] / rho^2. ``full`` solves the expanded LP directly.
    Returns (value, table for the expanded instance).
    """
    base, rho = sc.base, sc.rho
    if method == "full" or rho == 1:
        phi, sol = mmdpt_indices(instance_kernels(sc.cfg, frame), sc.cfg.p, sc.cfg.B, mode)
        return sol.value, phi
    if method != "reduced":
        raise ValueError(f"unknown method {method!r}")
    total = None
    if mode == MANDATORY:
        total = routed_mass(sc.cfg.p, sc.cfg.N, sc.cfg.B) / rho**2
    phi, sol = mmdpt_indices(instance_kernels(base, frame), base.p / rho, base.B / rho, mode, total)
    return rho**2 * sol.value, sc.tile(phi)


def policy_table(name: str, cfg: InstanceConfig, frame: int = 0, mode: str = MANDATORY) -> np.ndarray:
    """Known-kernel index table of a named policy for ``cfg``."""
    if name == "mmdpt":
        return mmdpt_indices(instance_kernels(cfg, frame), cfg.p, cfg.B, mode)[0]
    if name == "whittle":
        return whittle_table(instance_kernels(cfg, frame))
    if name == "priority":
        return priority_index(cfg.pmfs(frame), cfg.S_max)
    raise ValueError(f"unknown policy {name!r}")


# -- optimality gap --------------------------------------------------------------

@dataclass
class GapRecord:
    rho: int
    seed: int
    policy: str
    avg_cost: float
    lp_bound: float
    gap_per_rho: float
    se: float


def time_average_se(costs, n_batches: int = 20) -> float:
    """Batch-means standard error of a time average."""
    b = np.array_split(np.asarray(costs, dtype=float), n_batches)
    means = np.array([x.mean() for x in b])
    return float(means.std(ddof=1) / math.sqrt(len(means)))


def run_optimality_gap(cfg: InstanceConfig, rhos, policies=POLICIES, T: int = 100_000,
                       seeds=(0,), burn_in: int = 0, mode: str = MANDATORY) -> list[GapRecord]:
    """Simulate each policy on each scaled instance and compare with the scaled LP bound.

    Base-class tables are tiled to every copy (copies are statistically
    identical, so the per-arm indices coincide).
    """
    one = cfg.with_frame(0)
    base_tables = {}
    for name in policies:
        if name == "mmdpt":
            continue
        base_tables[name] = policy_table(name, one)
    out = []
    for rho in rhos:
        sc = scale_instance(one, rho)
        bound, phi = scaled_lp(sc, mode)
        tables = {"mmdpt": phi}
        tables.update({k: sc.tile(v) for k, v in base_tables.items()})
        for name in policies:
            pol = IndexPolicy(tables[name], sc.cfg.B, name)
            for seed in seeds:
                rng = np.random.default_rng(seed)
                res = rollout(sc.cfg, pol, T + burn_in, rng)
                costs = res.costs[burn_in:]
                J = float(costs.mean())
                out.append(GapRecord(int(rho), int(seed), name, J, float(bound),
                                     (J - bound) / rho, time_average_se(costs) / rho))
    return out


def summarize_gaps(records: list[GapRecord]) -> dict:
    """Mean gap/rho and its standard error across seeds, keyed by (policy, rho)."""
    out = {}
    keys = sorted({(r.policy, r.rho) for r in records})
    for key in keys:
        g = np.array([r.gap_per_rho for r in records if (r.policy, r.rho) == key])
        se = g.std(ddof=1) / math.sqrt(g.size) if g.size > 1 else float("nan")
        out[key] = (float(g.mean()), float(se))
    return out


# -- occupancy convergence -------------------------------------------------------

@dataclass
class OccupancyTrace:
    tuples: np.ndarray  # (k, 4) rows (m, n, s, a), 0-based
    occupancy: np.ndarray  # (T, k) running fraction of slots in (s, a)

    def convergence_statistic(self, n_windows: int = 10) -> np.ndarray:
        """Per tuple: |mean of the last window - mean of the one before| of the running occupancy."""
        w = np.array_split(self.occupancy, n_windows, axis=0)
        return np.abs(w[-1].mean(axis=0) - w[-2].mean(axis=0))

    @property
    def final(self) -> np.ndarray:
        return self.occupancy[-1]


def run_global_attractor(cfg: InstanceConfig, tuples, T: int = 10_000, seed: int = 0,
                         S0=None, policy: IndexPolicy | None = None, mode: str = MANDATORY) -> OccupancyTrace:
    """Running occupancy of tracked (m, n, s, a) tuples under the mmDPT index policy."""
    tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, 4)
    if np.any(tuples < 0) or np.any(tuples[:, 0] >= cfg.M) or np.any(tuples[:, 1] >= cfg.N) \
            or np.any(tuples[:, 2] > cfg.S_max) or np.any(tuples[:, 3] > 1):
        raise ValueError("tracked tuple out of range")
    if policy is None:
        policy = IndexPolicy(policy_table("mmdpt", cfg, 0, mode), cfg.B, "mmdpt")
    res = rollout(cfg, policy, T, np.random.default_rng(seed), S0=S0, track=tuples)
    occ = np.cumsum(res.tracked, axis=0) / np.arange(1, T + 1)[:, None]
    return OccupancyTrace(tuples, occ)


# -- regret -----------------------------------------------------------------------

def reference_rate(cfg: InstanceConfig, T: int = 1_000_000, seed: int = 12345,
                   mode: str = MANDATORY) -> float:
    """Average cost of the known-kernel mmDPT index policy: exact on small joint
    chains, otherwise one long rollout."""
    from .oracle import policy_average_cost

    one = cfg.with_frame(0)
    policy = IndexPolicy(policy_table("mmdpt", one, 0, mode), one.B, "mmdpt")
    if (one.S_max + 1) ** (one.M * one.N) <= EXACT_REFERENCE_STATES:
        return policy_average_cost(one, policy, "exact")
    return policy_average_cost(one, policy, "monte_carlo", T=T, seeds=(seed,))[0]


RUNNERS = {
    "mmdpt_ts": run_mmdpt_ts,
    "ts_whittle": run_ts_whittle,
    "priority_learning": run_priority_learning,
}


@dataclass
class RegretSuite:
    """Regret at ``checkpoints`` per algorithm (rows = seeds) plus timing and episode stats."""

    J_ref: float
    T: int
    seeds: list
    checkpoints: np.ndarray
    regret: dict = field(default_factory=dict)  # algo -> (n_seeds, n_checkpoints)
    episode_starts: dict = field(default_factory=dict)  # algo -> list of arrays
    compute_times: dict = field(default_factory=dict)  # algo -> concatenated per-episode seconds
    run_seconds: dict = field(default_factory=dict)  # algo -> per-run wall clock
    meta: dict = field(default_factory=dict)

    def mean_std(self, algo: str):
        r = self.regret[algo]
        return r.mean(axis=0), r.std(axis=0, ddof=1) if r.shape[0] > 1 else np.zeros(r.shape[1])

    def episodes_by(self, algo: str, t: int) -> np.ndarray:
        """K_t per seed: episodes started at or before slot t."""
        return np.array([int(np.searchsorted(s, t, side="right")) for s in self.episode_starts[algo]])


def run_regret_suite(cfg: InstanceConfig, algorithms=LEARNERS, T: int = 100_000, seeds=range(10),
                     prior_strength: float = 1.0, J_ref: float | None = None,
                     checkpoints=None, progress=None) -> RegretSuite:
    """Run every learner on every seed with a fixed frame and shared channel draws per seed."""
    one = cfg.with_frame(0)
    if J_ref is None:
        J_ref = reference_rate(one)
    cps = np.asarray(checkpoints if checkpoints is not None else
                     np.unique(np.r_[np.arange(1000, T + 1, 1000), T]), dtype=np.int64)
    if cps.min() < 1 or cps.max() > T:
        raise ValueError("checkpoints must lie in [1, T]")
    suite = RegretSuite(float(J_ref), T, list(seeds), cps)
    for algo in algorithms:
        if algo not in RUNNERS:
            raise ValueError(f"unknown learner {algo!r}")
        rows, starts, times, runs = [], [], [], []
        for seed in seeds:
            tic = time.perf_counter()
            rec = RUNNERS[algo](one, T, prior_strength, np.random.default_rng(seed), J_ref, seed=seed)
            runs.append(time.perf_counter() - tic)
            rows.append(rec.regret.regret[cps - 1])
            starts.append(rec.regret.episode_starts)
            times.append(rec.compute_times)
            for key, val in rec.meta.items():
                suite.meta.setdefault(algo, {}).setdefault(key, 0)
                suite.meta[algo][key] += val
            if progress is not None:
                progress(algo, seed, rec)
        suite.regret[algo] = np.array(rows)
        suite.episode_starts[algo] = starts
        suite.compute_times[algo] = np.concatenate(times)
        suite.run_seconds[algo] = np.array(runs)
    return suite


def kt_bound_check(record: RegretRecord | LearningRunRecord, cfg: InstanceConfig, T: int | None = None) -> bool:
    """K_T <= 2 sqrt(S_max M N T log T), with K_T the number of episodes started by slot T."""
    rec = record.regret if isinstance(record, LearningRunRecord) else record
    T = rec.T if T is None else T
    K = int(np.searchsorted(rec.episode_starts, T, side="right"))
    return K <= kt_bound(cfg, T)


# -- output -------------------------------------------------------------------------

GAP_FIELDS = ("rho", "seed", "policy", "avg_cost", "lp_bound", "gap_per_rho")
REGRET_FIELDS = ("algo", "seed", "t", "cum_cost", "regret", "episode")
ATTRACTOR_FIELDS = ("t", "m", "n", "s", "a", "occupancy")


def _write(rows, fields, path, fmt: str):
    rows = list(rows)
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump([dict(zip(fields, r)) for r in rows], fh, indent=1)
        return
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        w.writerows(rows)


def write_gap(records: list[GapRecord], path, fmt: str = "csv") -> None:
    _write(([r.rho, r.seed, r.policy, r.avg_cost, r.lp_bound, r.gap_per_rho] for r in records),
           GAP_FIELDS, path, fmt)


def write_attractor(trace: OccupancyTrace, path, fmt: str = "csv", stride: int = 1) -> None:
    T = trace.occupancy.shape[0]
    ts = np.unique(np.r_[np.arange(stride, T + 1, stride), T])

    def rows():
        for t in ts:
            for (m, n, s, a), v in zip(trace.tuples, trace.occupancy[t - 1]):
                yield [int(t), int(m) + 1, int(n) + 1, int(s), int(a), float(v)]
    _write(rows(), ATTRACTOR_FIELDS, path, fmt)


def regret_rows(algo: str, rec: LearningRunRecord, stride: int = 1):
    r = rec.regret
    ts = np.unique(np.r_[np.arange(stride, r.T + 1, stride), r.T])
    ep = r.episode_of()
    reg = r.regret
    for t in ts:
        yield [algo, rec.seed, int(t), float(r.cum_cost[t - 1]), float(reg[t - 1]), int(ep[t - 1])]


def write_regret(runs: list[LearningRunRecord], path, fmt: str = "csv", stride: int = 1) -> None:
    _write((row for rec in runs for row in regret_rows(rec.algo, rec, stride)), REGRET_FIELDS, path, fmt)


def write_suite_summary(suite: RegretSuite, path) -> None:
    """JSON summary: mean/std regret curves, K_T, and per-episode compute time statistics."""
    out = {"J_ref": suite.J_ref, "T": suite.T, "seeds": list(map(int, suite.seeds)),
           "checkpoints": suite.checkpoints.tolist(), "algorithms": {}}
    for algo in suite.regret:
        mean, std = suite.mean_std(algo)
        ct = suite.compute_times[algo]
        out["algorithms"][algo] = {
            "regret_mean": mean.tolist(), "regret_std": std.tolist(),
            "episodes_mean": float(suite.episodes_by(algo, suite.T).mean()),
            "episode_compute_mean_s": float(ct.mean()), "episode_compute_std_s": float(ct.std(ddof=1)),
            "run_seconds_mean": float(suite.run_seconds[algo].mean()),
            "meta": suite.meta.get(algo, {}),
        }
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1)


def gap_records_as_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
