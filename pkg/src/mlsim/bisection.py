"""Offramp split identification at a single node by bisection.

The unknown is the offramp split ``beta``. Input ``i`` sends ``coef[i] * beta``
of its regular (GP-only and special) traffic to the offramp; the rest of the
row follows a fixed distribution ``delta`` over the other outputs. Destination
classes keep their own fixed rows. ``psi(beta)`` is the node-model offramp
inflow minus the target; it is assumed nondecreasing in ``beta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .node import node_flows

N_REGULAR = 2  # GP-only and special classes

CONVERGED = 0
SHORT_OF_DEMAND = 1  # not enough vehicles upstream: beta = 1
LOWER_BOUND = 2  # the demand-limited bound already meets the target
NO_BRACKET = 3  # psi(1) < 0 although psi(lower) < 0
MAX_ITER = 4
ABOVE_AT_ZERO = 5  # gated: destination traffic alone exceeds the target
BELOW_AT_ONE = 6  # gated: even beta = 1 falls short

STATUS_NAMES = {
    CONVERGED: "converged",
    SHORT_OF_DEMAND: "insufficient upstream demand",
    LOWER_BOUND: "demand-limited lower bound",
    NO_BRACKET: "no bracket (monotonicity violated or supply-limited)",
    MAX_ITER: "iteration limit",
    ABOVE_AT_ZERO: "target below destination-class flow",
    BELOW_AT_ONE: "target above attainable flow",
}


@numba.njit(cache=True)
def split_table(S, template, delta, coef, off, beta):
    M, N, C = template.shape
    B = template.copy()
    for i in range(M):
        x = coef[i] * beta
        for c in range(min(C, N_REGULAR)):
            for j in range(N):
                if j == off:
                    B[i, j, c] = x
                else:
                    B[i, j, c] = delta[i, j, c] * (1.0 - x)
    return B


@numba.njit(cache=True)
def offramp_inflow(S, R, template, delta, coef, off, beta, p, eta):
    B = split_table(S, template, delta, coef, off, beta)
    f = node_flows(S, R, B, p, eta)
    tot = 0.0
    for i in range(f.shape[0]):
        for c in range(f.shape[2]):
            tot += f[i, off, c]
    return tot, f


@numba.njit(cache=True)
def bisect_split(S, R, template, delta, coef, off, p, eta, target, gated, tol, max_iter):
    """Return ``(beta, psi, iterations, status)``."""
    M, C = S.shape
    if gated:
        lo = 0.0
        q0, _ = offramp_inflow(S, R, template, delta, coef, off, 0.0, p, eta)
        if q0 - target > tol:
            return 0.0, q0 - target, 0, ABOVE_AT_ZERO
        if abs(q0 - target) <= tol:
            return 0.0, q0 - target, 0, CONVERGED
        q1, _ = offramp_inflow(S, R, template, delta, coef, off, 1.0, p, eta)
        if q1 - target < -tol:
            return 1.0, q1 - target, 0, BELOW_AT_ONE
        psi_lo = q0 - target
    else:
        avail = 0.0
        for i in range(M):
            for c in range(min(C, N_REGULAR)):
                avail += coef[i] * S[i, c]
        if target <= 0.0:
            qlo, _ = offramp_inflow(S, R, template, delta, coef, off, 0.0, p, eta)
            return 0.0, qlo - target, 0, LOWER_BOUND
        if avail <= target:
            q1, _ = offramp_inflow(S, R, template, delta, coef, off, 1.0, p, eta)
            return 1.0, q1 - target, 0, SHORT_OF_DEMAND
        lo = target / avail
        qlo, _ = offramp_inflow(S, R, template, delta, coef, off, lo, p, eta)
        psi_lo = qlo - target
        if psi_lo >= -tol:
            return lo, psi_lo, 0, LOWER_BOUND
        q1, _ = offramp_inflow(S, R, template, delta, coef, off, 1.0, p, eta)
        psi_hi = q1 - target
        if psi_hi < -tol:
            if abs(psi_hi) <= abs(psi_lo):
                return 1.0, psi_hi, 0, NO_BRACKET
            return lo, psi_lo, 0, NO_BRACKET
    hi = 1.0
    mid = 0.5 * (lo + hi)
    psi = psi_lo
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        q, _ = offramp_inflow(S, R, template, delta, coef, off, mid, p, eta)
        psi = q - target
        if abs(psi) <= tol:
            return mid, psi, it, CONVERGED
        if psi < 0.0:
            lo = mid
        else:
            hi = mid
    return mid, psi, max_iter, MAX_ITER


# ---------------------------------------------------------------------------
# Python API
# ---------------------------------------------------------------------------


@dataclass
class OfframpProblem:
    """One node snapshot (veh/step) with the offramp at output ``offramp``.

    ``coefficients[i]`` scales the offramp split for input ``i`` (1 for inputs
    that exit at the common rate, 0 for inputs that never exit here).
    ``remaining`` is the distribution of the non-exiting part of each row over
    the outputs, shape (M, N, C); its offramp column is ignored. ``template``
    supplies the rows of destination classes (classes beyond the first two).
    """

    demands: np.ndarray
    supplies: np.ndarray
    offramp: int
    coefficients: np.ndarray
    remaining: np.ndarray | None = None
    priorities: np.ndarray | None = None
    restrictions: np.ndarray | None = None
    template: np.ndarray | None = None

    def __post_init__(self):
        self.demands = np.atleast_2d(np.asarray(self.demands, dtype=float))
        self.supplies = np.asarray(self.supplies, dtype=float).reshape(-1)
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(-1)
        M, C = self.demands.shape
        N = self.supplies.shape[0]
        if self.remaining is None:
            # everything not exiting goes to the first output
            self.remaining = np.zeros((M, N, C))
            first = 0 if self.offramp != 0 else 1
            self.remaining[:, first, :] = 1.0
        self.remaining = np.asarray(self.remaining, dtype=float)
        if self.priorities is None:
            self.priorities = np.full(M, 1.0 / M)
        self.priorities = np.asarray(self.priorities, dtype=float)
        if self.restrictions is None:
            self.restrictions = np.ones((M, N, N))
        self.restrictions = np.asarray(self.restrictions, dtype=float)
        if self.template is None:
            self.template = np.zeros((M, N, C))
        self.template = np.asarray(self.template, dtype=float)


@dataclass(frozen=True)
class BisectionResult:
    beta: float
    psi: float
    iterations: int
    status: int

    @property
    def status_name(self) -> str:
        return STATUS_NAMES[self.status]


def _args(pr: OfframpProblem):
    return (pr.demands, pr.supplies, pr.template, pr.remaining, pr.coefficients, int(pr.offramp),
            pr.priorities, pr.restrictions)


def psi_full_access(beta: float, problem: OfframpProblem, target: float) -> float:
    S, R, T, D, k, off, p, eta = _args(problem)
    q, _ = offramp_inflow(S, R, T, D, k, off, float(beta), p, eta)
    return q - target


def psi_gated(beta: float, problem: OfframpProblem, target: float) -> float:
    return psi_full_access(beta, problem, target)


def solve_beta_full_access(problem: OfframpProblem, target: float, tol: float = 1e-3, max_iter: int = 60) -> BisectionResult:
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    S, R, T, D, k, off, p, eta = _args(problem)
    b, psi, it, st = bisect_split(S, R, T, D, k, off, p, eta, float(target), False, tol, max_iter)
    return BisectionResult(float(b), float(psi), int(it), int(st))


def solve_beta_gated(problem: OfframpProblem, target: float, tol: float = 1e-3, max_iter: int = 60) -> BisectionResult:
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    S, R, T, D, k, off, p, eta = _args(problem)
    b, psi, it, st = bisect_split(S, R, T, D, k, off, p, eta, float(target), True, tol, max_iter)
    return BisectionResult(float(b), float(psi), int(it), int(st))
