"""Occupancy-measure LP relaxation, its randomized policy and the derived index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

LITERAL = "literal"
MANDATORY = "mandatory"

SOLVER_TOL = 1e-9
CHECK_TOL = 1e-6
ZERO_MASS = 1e-13


class LPError(RuntimeError):
    pass


class LPInfeasible(LPError):
    pass


@dataclass(frozen=True)
class LPModel:
    """Columns are ``omega[m, n, s, a]`` in C order."""

    shape: tuple
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    mode: str
    row_names_ub: tuple
    row_names_eq: tuple

    @property
    def n_vars(self) -> int:
        return int(np.prod(self.shape))

    def column(self, m, n, s, a) -> int:
        return int(np.ravel_multi_index((m, n, s, a), self.shape))


@dataclass(frozen=True)
class OccupancySolution:
    omega: np.ndarray
    value: float


def routed_mass(p, N: int, B) -> float:
    """E[min(R, N*B)] for R the number of requesters (a Poisson-binomial count)."""
    dist = np.array([1.0])
    for pm in np.asarray(p, dtype=float):
        dist = np.convolve(dist, [1.0 - pm, pm])
    cap = float(np.sum(np.broadcast_to(np.asarray(B, dtype=float), (N,))))
    return float(dist @ np.minimum(np.arange(dist.size), cap))


def build_lp(kernels, p, B, mode: str = MANDATORY, total: float | None = None) -> LPModel:
    """Assemble the relaxation for kernels ``K[m, n, s, a, s_next]``.

    Routing rows: sum_{n,s} omega(s,1) <= 1 (literal). In mandatory mode each
    user's routed mass is at most p_m and the total routed mass equals
    E[min(R, N*B)], the rate at which maximal routing serves requests. When
    M <= N*B this pins every user's mass to exactly p_m.
    Fairness rows: sum_{m,s} omega(s,1) <= B_n. Then one flow-balance row per
    (m, n, s) and one normalization row per (m, n). ``B`` may be a scalar or
    a per-AP vector. ``total`` overrides the mandatory total routed mass.
    """
    if mode not in (LITERAL, MANDATORY):
        raise ValueError(f"unknown routing mode {mode!r}")
    K = np.asarray(kernels, dtype=float)
    M, N, S1 = K.shape[:3]
    shape = (M, N, S1, 2)
    nv = M * N * S1 * 2
    col = np.arange(nv).reshape(shape)
    p = np.broadcast_to(np.asarray(p, dtype=float), (M,))
    Bv = np.broadcast_to(np.asarray(B, dtype=float), (N,))
    c = np.broadcast_to(np.arange(S1, dtype=float)[None, None, :, None], shape).ravel().copy()

    act = col[..., 1]  # (M, N, S1)
    user_rows = sp.csr_matrix(
        (np.ones(N * S1 * M), (np.repeat(np.arange(M), N * S1), act.reshape(M, -1).ravel())),
        shape=(M, nv))
    ap_cols = act.transpose(1, 0, 2).reshape(N, -1)
    ap_rows = sp.csr_matrix(
        (np.ones(M * S1 * N), (np.repeat(np.arange(N), M * S1), ap_cols.ravel())), shape=(N, nv))

    # flow balance: sum_a omega(s, a) - sum_{s', a} omega(s', a) K(s | s', a) = 0
    r_out = np.repeat(np.arange(M * N * S1), 2)
    c_out = col.reshape(-1)
    Kt = K.reshape(M * N, S1, 2, S1)
    pair, sp_, a, s = np.nonzero(Kt)
    r_in = pair * S1 + s
    c_in = col.reshape(M * N, S1, 2)[pair, sp_, a]
    flow = sp.csr_matrix(
        (np.concatenate([np.ones(c_out.size), -Kt[pair, sp_, a, s]]),
         (np.concatenate([r_out, r_in]), np.concatenate([c_out, c_in]))),
        shape=(M * N * S1, nv))
    norm = sp.csr_matrix(
        (np.ones(nv), (np.repeat(np.arange(M * N), S1 * 2), col.reshape(-1))), shape=(M * N, nv))

    names_user = tuple(f"route_{m}" for m in range(M))
    names_ap = tuple(f"fair_{n}" for n in range(N))
    names_flow = tuple(f"flow_{m}_{n}_{s}" for m in range(M) for n in range(N) for s in range(S1))
    names_norm = tuple(f"norm_{m}_{n}" for m in range(M) for n in range(N))
    if mode == LITERAL:
        A_ub = sp.vstack([user_rows, ap_rows]).tocsr()
        b_ub = np.concatenate([np.ones(M), Bv])
        A_eq = sp.vstack([flow, norm]).tocsr()
        b_eq = np.concatenate([np.zeros(M * N * S1), np.ones(M * N)])
        return LPModel(shape, c, A_ub, b_ub, A_eq, b_eq, mode,
                       names_user + names_ap, names_flow + names_norm)
    if p.sum() > Bv.sum() + 1e-12:
        raise LPInfeasible(f"mandatory routing needs sum(p) = {p.sum():.6g} <= N*B = {Bv.sum():.6g}")
    total_row = sp.csr_matrix(user_rows.sum(axis=0))
    A_ub = sp.vstack([user_rows, ap_rows]).tocsr()
    b_ub = np.concatenate([p, Bv])
    A_eq = sp.vstack([total_row, flow, norm]).tocsr()
    total = routed_mass(p, N, Bv) if total is None else float(total)
    b_eq = np.concatenate([[total], np.zeros(M * N * S1), np.ones(M * N)])
    return LPModel(shape, c, A_ub, b_ub, A_eq, b_eq, mode, names_user + names_ap,
                   ("route_total",) + names_flow + names_norm)


def _linprog(model: LPModel, presolve: bool):
    return linprog(
        model.c, A_ub=model.A_ub, b_ub=model.b_ub, A_eq=model.A_eq, b_eq=model.b_eq,
        bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": SOLVER_TOL,
                 "dual_feasibility_tolerance": SOLVER_TOL, "presolve": presolve},
    )


def solve_lp(model: LPModel) -> OccupancySolution:
    """Solve with HiGHS dual simplex (deterministic for a fixed model).

    HiGHS presolve occasionally declares a feasible sampled-kernel model
    infeasible, so an infeasible verdict is re-checked once without presolve.
    """
    res = _linprog(model, True)
    if res.status == 2:
        res = _linprog(model, False)
    if res.status == 2:
        raise LPInfeasible(f"relaxation infeasible ({model.mode} routing): {res.message}")
    if res.status == 3:
        raise LPError(f"relaxation reported unbounded, which the model rules out: {res.message}")
    if res.status != 0:
        raise LPError(f"LP solve failed: {res.message}")
    x = np.asarray(res.x, dtype=float)
    x[x < ZERO_MASS] = 0.0
    omega = x.reshape(model.shape)
    omega.flags.writeable = False
    return OccupancySolution(omega, float(model.c @ x))


def check_solution(model: LPModel, sol: OccupancySolution, tol: float = CHECK_TOL) -> float:
    """Largest constraint violation of ``sol``; raises if it exceeds ``tol``."""
    x = sol.omega.ravel()
    viol = max(
        float(np.max(model.A_ub @ x - model.b_ub, initial=0.0)),
        float(np.max(np.abs(model.A_eq @ x - model.b_eq), initial=0.0)),
        float(np.max(-x, initial=0.0)),
    )
    if viol > tol:
        raise LPError(f"solution violates constraints by {viol:.3g}")
    return viol


def extract_policy(sol: OccupancySolution) -> np.ndarray:
    """Activation probability chi(s, 1) = omega(s,1) / (omega(s,0) + omega(s,1)); 0 where unvisited."""
    w = np.asarray(sol.omega if isinstance(sol, OccupancySolution) else sol)
    tot = w[..., 0] + w[..., 1]
    chi = np.zeros(tot.shape)
    np.divide(w[..., 1], tot, out=chi, where=tot > 0)
    return np.clip(chi, 0.0, 1.0)


def index_table(chi) -> np.ndarray:
    return np.array(chi, dtype=float, copy=True)


def mmdpt_indices(kernels, p, B, mode: str = MANDATORY, total: float | None = None):
    """Solve the relaxation for ``kernels`` and return (index table, solution)."""
    sol = solve_lp(build_lp(kernels, p, B, mode, total))
    return index_table(extract_policy(sol)), sol


def write_lp_file(model: LPModel, path) -> None:
    """Dump the model in CPLEX LP text format."""
    names = [f"w_{m}_{n}_{s}_{a}" for m, n, s, a in np.ndindex(*model.shape)]

    def expr(row):
        parts = []
        for j, v in zip(row.indices, row.data):
            parts.append(f"{'-' if v < 0 else '+'} {abs(v):.17g} {names[j]}")
        text = " ".join(parts) if parts else "0 " + names[0]
        return text[2:] if text.startswith("+ ") else text

    with open(path, "w") as fh:
        fh.write("\\ occupancy-measure relaxation, routing mode: %s\n" % model.mode)
        fh.write("Minimize\n obj: ")
        obj = sp.csr_matrix(model.c[None, :])
        fh.write(expr(obj.getrow(0)) + "\n")
        fh.write("Subject To\n")
        for name, row, b in zip(model.row_names_ub, model.A_ub, model.b_ub):
            fh.write(f" {name}: {expr(row)} <= {b:.17g}\n")
        for name, row, b in zip(model.row_names_eq, model.A_eq, model.b_eq):
            fh.write(f" {name}: {expr(row)} = {b:.17g}\n")
        fh.write("End\n")
