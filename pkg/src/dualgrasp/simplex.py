"""Dense two-phase simplex with Bland's rule, sized for wrench-feasibility LPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-9
COST_TOL = 1e-10
FEAS_TOL = 1e-8
SNAP_TOL = 1e-13


class NumericalFailure(RuntimeError):
    """The iteration budget ran out; Bland's rule cannot cycle, so this means ill-conditioning."""


@dataclass
class LPResult:
    status: str  # "optimal", "infeasible" or "unbounded"
    x: np.ndarray | None
    objective: float | None
    iterations: int


def _pivot(T: np.ndarray, basis: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    colvals = T[:, col].copy()
    colvals[row] = 0.0
    T -= np.outer(colvals, T[row])
    T[np.abs(T) < SNAP_TOL] = 0.0
    basis[row] = col


def _run(T: np.ndarray, basis: np.ndarray, allowed: int, budget: int) -> tuple[str, int]:
    """Minimize the cost row (last row) over columns ``< allowed``."""
    m = T.shape[0] - 1
    for it in range(budget):
        cost = T[-1, :allowed]
        candidates = np.flatnonzero(cost < -COST_TOL)
        if candidates.size == 0:
            return "optimal", it
        col = candidates[0]  # Bland: lowest index
        column = T[:m, col]
        pos = column > PIVOT_TOL
        if not pos.any():
            return "unbounded", it
        ratios = np.full(m, np.inf)
        # roundoff can leave degenerate rows slightly negative; treat them as zero
        ratios[pos] = np.maximum(T[:m, -1][pos], 0.0) / column[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + 1e-14 * max(1.0, abs(best)))
        row = ties[np.argmin(basis[ties])]  # Bland: lowest basic index leaves
        _pivot(T, basis, row, col)
    raise NumericalFailure(f"simplex exceeded {budget} iterations")


def linprog(
    c: np.ndarray,
    A_eq: np.ndarray | None = None,
    b_eq: np.ndarray | None = None,
    A_ub: np.ndarray | None = None,
    b_ub: np.ndarray | None = None,
    max_iter: int | None = None,
) -> LPResult:
    """Minimize ``c x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``x >= 0``."""
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    m_eq, m_ub = len(b_eq), len(b_ub)
    m = m_eq + m_ub

    # rows: [A_eq 0; A_ub I] x' = b, flipped so b >= 0
    A = np.zeros((m, n + m_ub))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.concatenate([b_eq, b_ub])
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # a slack can start in the basis only on an unflipped inequality row
    needs_art = np.ones(m, dtype=bool)
    needs_art[m_eq:] = neg[m_eq:]
    n_art = int(needs_art.sum())
    n_struct = n + m_ub
    T = np.zeros((m + 1, n_struct + n_art + 1))
    T[:m, :n_struct] = A
    T[:m, -1] = b
    basis = np.empty(m, dtype=int)
    art_rows = np.flatnonzero(needs_art)
    for k, r in enumerate(art_rows):
        T[r, n_struct + k] = 1.0
        basis[r] = n_struct + k
    for r in np.flatnonzero(~needs_art):
        basis[r] = n + (r - m_eq)

    budget = max_iter or 50 * (m + n_struct + n_art) + 100
    iters = 0
    if n_art:
        # phase 1 cost: sum of artificials, expressed in the nonbasic columns
        T[-1, :] = 0.0
        T[-1, n_struct : n_struct + n_art] = 1.0
        T[-1] -= T[art_rows].sum(axis=0)
        _, it = _run(T, basis, n_struct + n_art, budget)
        iters += it
        if -T[-1, -1] > FEAS_TOL * max(1.0, np.abs(b).max()):
            return LPResult("infeasible", None, None, iters)
        # drive zero-level artificials out of the basis; drop redundant rows
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] >= n_struct:
                T[r, -1] = 0.0  # zero-level up to the feasibility tolerance
                row = np.abs(T[r, :n_struct])
                col = int(np.argmax(row))
                if row[col] > 1e-9:
                    _pivot(T, basis, r, col)
                else:
                    keep[r] = False
        rows = np.concatenate([np.flatnonzero(keep), [m]])
        T = np.delete(T[rows], np.s_[n_struct : n_struct + n_art], axis=1)
        basis = basis[keep]
        m = len(basis)

    # phase 2 cost row, reduced against the current basis
    cost = np.zeros(n_struct)
    cost[:n] = c
    T[-1, :] = 0.0
    T[-1, :n_struct] = cost
    T[-1] -= cost[basis] @ T[:m]
    status, it = _run(T, basis, n_struct, budget)
    iters += it
    if status == "unbounded":
        return LPResult("unbounded", None, None, iters)
    x = np.zeros(n_struct)
    x[basis] = T[:m, -1]
    return LPResult("optimal", x[:n], float(c @ x[:n]), iters)
