"""The eleven acceptance criteria at their stated tolerances.

Each test records its outcome with :func:`conftest.record_criterion`; the
terminal summary prints one PASS/FAIL line per criterion. Criteria that do
not hold for this implementation are strict xfails: the check still runs at
full scale and reports FAIL, and an unexpected pass breaks the suite.
"""

import math
import time

import numpy as np
import pytest
from scipy.special import gammaln
from scipy.stats import dirichlet

from mmdpt.baselines import priority_index, run_priority_learning, run_ts_whittle, whittle_table
from mmdpt.domain import synthetic_instance
from mmdpt.env import IndexPolicy, build_kernel, instance_kernels, rollout
from mmdpt.harness import (reference_rate, run_global_attractor, run_optimality_gap,
                           run_regret_suite, summarize_gaps)
from mmdpt.learning import (PosteriorState, kt_bound, point_mass_posterior, posterior_update,
                            run_mmdpt_ts)
from mmdpt.oracle import build_joint_mdp, policy_average_cost, policy_bias_and_span, rvi_optimal
from mmdpt.relaxation import mmdpt_indices
from mmdpt.scheduler import feasibility_check

from conftest import random_tiny, record_criterion

REDUCED = dict(M=10, N=4, B=2, S_max=5, seed=0)
GAP_INSTANCE = dict(M=10, N=4, B=2, S_max=15, seed=0)
REGRET_T = 100_000
REGRET_SEEDS = range(100)


def brute_kernel(p, pmf, S_max):
    K = np.zeros((S_max + 1, 2, S_max + 1))
    for s in range(S_max + 1):
        for a in (0, 1):
            for arrive, pa in ((1, p if a else 0.0), (0, 1 - p if a else 1.0)):
                for d, q in enumerate(pmf):
                    K[s, a, min(S_max, max(s - d, 0) + arrive)] += pa * q
    return K


@pytest.fixture(scope="session")
def reduced():
    return synthetic_instance(**REDUCED)


@pytest.fixture(scope="session")
def regret_suite(reduced):
    """100 seeds x 3 learners at T = 1e5; shared by criteria 5, 9 and 11."""
    tic = time.perf_counter()
    J_ref = reference_rate(reduced)
    suite = run_regret_suite(reduced, T=REGRET_T, seeds=REGRET_SEEDS, J_ref=J_ref,
                             checkpoints=[10**3, 10**4, REGRET_T])
    suite.meta["wall_s"] = time.perf_counter() - tic
    return suite


def test_c01_kernel_soundness():
    rng = np.random.default_rng(1)
    tic = time.perf_counter()
    worst_sum = worst_entry = 0.0
    for _ in range(1000):
        S_max, d_max = int(rng.integers(1, 16)), int(rng.integers(1, 6))
        p = float(rng.uniform())
        pmf = rng.dirichlet(np.ones(d_max + 1))
        pmf /= pmf.sum()
        K = build_kernel(p, pmf, S_max)
        worst_sum = max(worst_sum, float(np.abs(K.sum(-1) - 1).max()))
        worst_entry = max(worst_entry, float(np.abs(K - brute_kernel(p, pmf, S_max)).max()))
    dt = time.perf_counter() - tic
    ok = worst_sum <= 1e-12 and worst_entry <= 1e-12 and dt < 10
    record_criterion(1, "kernels", ok, f"max row error {worst_sum:.1e}, max entry error "
                     f"{worst_entry:.1e}, {dt:.1f}s")
    assert ok


def test_c02_sandwich():
    rng = np.random.default_rng(2)
    tic = time.perf_counter()
    bad, n = 0, 60
    for _ in range(n):
        cfg = random_tiny(rng, max_M=2, max_N=2, max_S=3, B=1)
        phi, lp = mmdpt_indices(instance_kernels(cfg), cfg.p, cfg.B)
        J_star = rvi_optimal(build_joint_mdp(cfg)).J
        J_idx = policy_average_cost(cfg, IndexPolicy(phi, cfg.B))
        bad += not (lp.value <= J_star + 1e-6 and J_star <= J_idx + 1e-6)
    dt = time.perf_counter() - tic
    ok = bad == 0 and dt < 120
    record_criterion(2, "sandwich", ok, f"{n - bad}/{n} instances, {dt:.1f}s")
    assert ok


@pytest.mark.slow
def test_c03_feasibility(reduced):
    full = synthetic_instance()
    T = 100_000
    violations = {}
    tables = {"mmdpt": mmdpt_indices(instance_kernels(full), full.p, full.B)[0],
              "whittle": whittle_table(instance_kernels(full)),
              "priority": priority_index(full.pmfs(), full.S_max)}
    for name, phi in tables.items():
        res = rollout(full, IndexPolicy(phi, full.B), T, np.random.default_rng(3), record_actions=True)
        A = res.actions
        violations[name] = int((A.sum(2) > 1).sum() + (A.sum(1) > full.B).sum())
    J = 0.0
    for name, run in (("mmdpt_ts", run_mmdpt_ts), ("ts_whittle", run_ts_whittle),
                      ("priority_learning", run_priority_learning)):
        rec = run(reduced, T, 1.0, np.random.default_rng(3), J, record_actions=True)
        A = rec.actions
        violations[name] = int((A.sum(2) > 1).sum() + (A.sum(1) > reduced.B).sum())
    ok = sum(violations.values()) == 0
    record_criterion(3, "feasibility", ok, ", ".join(f"{k} {v}" for k, v in violations.items())
                     + " violations over 1e5 slots")
    assert ok


def _span_runs():
    rng = np.random.default_rng(4)
    out = []
    for _ in range(60):
        cfg = random_tiny(rng)
        phi, _ = mmdpt_indices(instance_kernels(cfg), cfg.p, cfg.B)
        sol = policy_bias_and_span(cfg, IndexPolicy(phi, cfg.B))
        bound = (cfg.S_max**2 + cfg.S_max) * cfg.M * cfg.N / 2
        out.append((sol.span, bound, sol.residual))
    return out


@pytest.fixture(scope="module")
def span_runs():
    return _span_runs()


def test_c04_bellman_residual(span_runs):
    worst = max(r for _, _, r in span_runs)
    ok = worst < 1e-8
    record_criterion(4, "Bellman residual", ok, f"max {worst:.1e} over {len(span_runs)} instances")
    assert ok


@pytest.mark.xfail(strict=True, reason="the span bound does not hold: for M=N=S_max=1 the span is "
                   "1/(p + q(1-p)) > 1; see the decisions ledger")
def test_c04_span_bound(span_runs):
    over = [(s, b) for s, b, _ in span_runs if s > b + 1e-9]
    worst = max(s / b for s, b, _ in span_runs)
    ok = not over
    record_criterion(4, "span bound", ok, f"{len(span_runs) - len(over)}/{len(span_runs)} within "
                     f"bound, worst span/bound {worst:.2f}")
    assert ok


@pytest.mark.slow
def test_c05_episode_bound(regret_suite, reduced):
    worst, fails = 0.0, 0
    for algo in ("mmdpt_ts", "ts_whittle"):
        for T in (10**3, 10**4, 10**5):
            K = regret_suite.episodes_by(algo, T)
            bound = kt_bound(reduced, T)
            fails += int((K > bound).sum())
            worst = max(worst, float(K.max() / bound))
    ok = fails == 0
    record_criterion(5, "K_T bound", ok, f"{fails} violations over 2 learners x 3 horizons x "
                     f"{len(regret_suite.seeds)} seeds, max K_T/bound {worst:.3f}")
    assert ok


def test_c06_conjugacy():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10**4):
        alpha0 = rng.uniform(0.1, 5.0, 3)
        ps = PosteriorState(alpha0.reshape(1, 1, 1, 1, 3).copy(), np.zeros((1, 1, 1, 1), np.int64),
                            alpha0.reshape(1, 1, 1, 1, 3).copy())
        obs = rng.integers(0, 3, int(rng.integers(1, 30)))
        for k in obs:
            posterior_update(ps, (0, 0, 0, 0, k))
        c = np.bincount(obs, minlength=3)
        theta = rng.dirichlet(np.ones(3))
        # Bayes rule: prior(theta) * likelihood / evidence, evidence = B(alpha + c) / B(alpha)
        log_B = lambda a: gammaln(a).sum() - gammaln(a.sum())
        direct = (dirichlet.logpdf(theta, alpha0) + c @ np.log(theta)
                  - (log_B(alpha0 + c) - log_B(alpha0)))
        worst = max(worst, abs(dirichlet.logpdf(theta, ps.alpha[0, 0, 0, 0]) - direct))
    ok = worst <= 1e-12
    record_criterion(6, "conjugacy", ok, f"max |log density difference| {worst:.1e} over 1e4 sequences")
    assert ok


@pytest.mark.slow
def test_c07_gap_trend():
    cfg = synthetic_instance(**GAP_INSTANCE)
    rhos = (1, 2, 5, 10)
    tic = time.perf_counter()
    recs = run_optimality_gap(cfg, rhos, ["mmdpt"], T=100_000, seeds=range(20))
    dt = time.perf_counter() - tic
    g = summarize_gaps(recs)
    mean = [g[("mmdpt", r)][0] for r in rhos]
    se = [g[("mmdpt", r)][1] for r in rhos]
    mono = all(mean[i + 1] <= mean[i] + 2 * math.hypot(se[i], se[i + 1]) for i in range(3))
    ratio = mean[-1] / mean[0]
    ok = mono and ratio < 0.5 and dt < 1800
    record_criterion(7, "gap/rho trend", ok, "gap/rho " + ", ".join(
        f"rho={r}: {m:.3f}+-{s:.3f}" for r, m, s in zip(rhos, mean, se))
        + f"; rho=10 / rho=1 = {ratio:.3f}; {dt:.0f}s")
    assert ok


def test_c08_attractor():
    """Convergence statistic at T = 1e4; limiting occupancies compared over 1e5
    slots from empty and from full queues, with independent seeds."""
    cfg = synthetic_instance()
    pol = IndexPolicy(mmdpt_indices(instance_kernels(cfg), cfg.p, cfg.B)[0], cfg.B)
    full = np.full((cfg.M, cfg.N), cfg.S_max)
    spec_tuples = np.array([[0, 2, 5, 1], [19, 1, 5, 0], [69, 3, 13, 0]])  # 0-based user, AP
    user1 = np.array([[0, n, s, a] for n in range(cfg.N) for s in range(cfg.S_max + 1) for a in (0, 1)])
    ok = True
    for name, tuples in (("listed tuples", spec_tuples), ("all user-1 tuples", user1)):
        short = [run_global_attractor(cfg, tuples, T=10_000, seed=8, policy=pol),
                 run_global_attractor(cfg, tuples, T=10_000, seed=9, S0=full, policy=pol)]
        stat = max(tr.convergence_statistic().max() for tr in short)
        a = run_global_attractor(cfg, tuples, T=100_000, seed=8, policy=pol)
        b = run_global_attractor(cfg, tuples, T=100_000, seed=9, S0=full, policy=pol)
        agree = float(np.abs(a.final - b.final).max())
        part = stat < 0.01 and agree <= 0.02
        ok &= part
        record_criterion(8, name, part, f"convergence statistic {stat:.4f} at 1e4, start-state gap "
                         f"{agree:.4f} at 1e5, largest occupancy {a.final.max():.3f}")
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="Whittle and priority baselines beat the mmDPT index on the "
                   "reduced instance with known kernels; see the decisions ledger")
def test_c09_regret_ordering(regret_suite):
    final = {a: regret_suite.regret[a][:, -1] for a in regret_suite.regret}
    mean = {a: float(v.mean()) for a, v in final.items()}
    sem = {a: float(v.std(ddof=1) / math.sqrt(v.size)) for a, v in final.items()}
    ok = mean["mmdpt_ts"] < mean["ts_whittle"] and mean["mmdpt_ts"] < mean["priority_learning"]
    record_criterion(9, "ordering", ok, ", ".join(f"{a} {mean[a]:.4g}+-{sem[a]:.2g}" for a in mean)
                     + f" (J_ref {regret_suite.J_ref:.3f})")
    assert ok


@pytest.mark.slow
def test_c09_sublinear(regret_suite):
    cps = list(regret_suite.checkpoints)
    r = regret_suite.regret["mmdpt_ts"].mean(axis=0)
    norm = lambda T: r[cps.index(T)] / math.sqrt(T * math.log(T))
    ratio = norm(REGRET_T) / norm(10**4)
    wall = regret_suite.meta["wall_s"]
    ok = ratio <= 2 and wall < 7200
    record_criterion(9, "sublinearity", ok, f"regret/sqrt(T log T): {norm(10**4):.2f} at 1e4, "
                     f"{norm(REGRET_T):.2f} at 1e5 (ratio {ratio:.2f}); suite {wall / 60:.1f} min")
    assert ok


def test_c10_point_mass(reduced):
    T = 10_000
    rec = run_mmdpt_ts(reduced, T, 1.0, np.random.default_rng(10), 0.0,
                       posterior=point_mass_posterior(reduced), record_actions=True)
    phi, _ = mmdpt_indices(instance_kernels(reduced), reduced.p, reduced.B)
    ref = rollout(reduced, IndexPolicy(phi, reduced.B), T, np.random.default_rng(10), record_actions=True)
    mismatched = int(np.any(rec.actions != ref.actions, axis=(1, 2)).sum())
    feasible = all(A.sum(1).max() <= 1 and A.sum(0).max() <= reduced.B for A in rec.actions)
    ok = mismatched == 0 and feasible
    record_criterion(10, "point-mass prior", ok, f"{mismatched} of {T} slots differ, "
                     f"{rec.regret.n_episodes} episodes")
    assert ok


@pytest.mark.slow
def test_c11_runtime(regret_suite):
    ts = regret_suite.compute_times
    m = {a: (float(ts[a].mean()), float(ts[a].std(ddof=1))) for a in ("mmdpt_ts", "ts_whittle")}
    ok = m["mmdpt_ts"][0] < m["ts_whittle"][0]
    record_criterion(11, "per-episode compute", ok, ", ".join(
        f"{a} {mu * 1e3:.2f}+-{sd * 1e3:.2f} ms" for a, (mu, sd) in m.items()))
    assert ok


def test_feasibility_check_agrees_with_sums():
    # the row/column-sum checks used above coincide with the scheduler predicate
    rng = np.random.default_rng(0)
    for _ in range(200):
        A = (rng.random((5, 3)) < 0.3).astype(np.int8)
        manual = A.sum(1).max() <= 1 and A.sum(0).max() <= 2
        assert feasibility_check(A, np.arange(5), 2) == manual
