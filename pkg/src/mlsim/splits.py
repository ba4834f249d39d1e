"""Dynamic completion of a-priori undefined split ratios.

Unassigned split mass is handed out step by step so that the oriented
demand-supply ratios of the output links stay as even as possible. An optional
inertia coefficient biases one input toward the output that continues its lane.

Array encoding used by the kernels: ``beta[i, j, c]`` is a ratio in [0, 1],
``NaN`` for undefined, or ``NOT_APPLICABLE`` (-1) for a barred movement, which
counts as a known zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

NOT_APPLICABLE = -1.0
#: relative tolerance for treating two oriented ratios as equal
RATIO_RTOL = 1e-12
#: supplies are floored here so that ratios stay finite
SUPPLY_FLOOR = 1e-12
#: rows with less demand than this (veh/step) are resolved without balancing
DEMAND_FLOOR = 1e-12
#: safety cap on balancing iterations; closure is applied when reached
MAX_ITER = 5000
_MASS_FLOOR = 1e-15


@numba.njit(cache=True)
def regularize(p):
    M = p.shape[0]
    nz = 0
    for i in range(M):
        if p[i] == 0.0:
            nz += 1
    out = np.empty(M)
    for i in range(M):
        out[i] = p[i] * (M - nz) / M + nz / (M * M)
    return out


@numba.njit(cache=True)
def complete_splits(S, R, beta_in, pt, same_lane, lam, max_iter):
    """Return ``(beta, iterations, hit_cap)`` with every entry defined.

    S (M, C) demands, R (N,) supplies, beta_in (M, N, C) encoded ratios,
    pt (M,) regularized priorities, same_lane (M,) index of the output that
    continues input i's lane (-1 if none), lam inertia coefficient (< 0 off).
    """
    M, N, C = beta_in.shape
    beta = np.zeros((M, N, C))
    known = np.ones((M, N, C), dtype=np.bool_)
    bbar = np.zeros((M, C))
    nV = np.zeros((M, C), dtype=np.int64)
    for i in range(M):
        for c in range(C):
            rest = 1.0
            n_und = 0
            for j in range(N):
                b = beta_in[i, j, c]
                if np.isnan(b):
                    n_und += 1
                    known[i, j, c] = False
                elif b > 0.0:
                    beta[i, j, c] = b
                    rest -= b
            if n_und == 0:
                continue
            if rest < 0.0:
                rest = 0.0
            if S[i, c] <= DEMAND_FLOOR or rest <= 0.0 or n_und == 1:
                share = rest / n_und
                for j in range(N):
                    if not known[i, j, c]:
                        beta[i, j, c] = share
                        known[i, j, c] = True
                continue
            bbar[i, c] = rest
            nV[i, c] = n_und
    Rf = np.empty(N)
    for j in range(N):
        Rf[j] = R[j] if R[j] > SUPPLY_FLOOR else SUPPLY_FLOOR
    Si = np.zeros(M)
    for i in range(M):
        for c in range(C):
            Si[i] += S[i, c]

    # per-movement weight of the unassigned mass (1/|V| unless inertia applies)
    wgt = np.zeros((M, N, C))
    for i in range(M):
        for c in range(C):
            if bbar[i, c] > 0.0:
                for j in range(N):
                    if not known[i, j, c]:
                        wgt[i, j, c] = 1.0 / nV[i, c]
    if lam >= 0.0:
        ihat = -1
        best = np.inf
        for i in range(M):
            jh = same_lane[i]
            if jh < 0:
                continue
            num = 0.0
            member = False
            for c in range(C):
                if bbar[i, c] > 0.0 and not known[i, jh, c]:
                    member = True
                    num += bbar[i, c] * S[i, c]
            if not member:
                continue
            for i2 in range(M):
                for c in range(C):
                    if known[i2, jh, c] and beta_in[i2, jh, c] > 0.0:
                        num += beta_in[i2, jh, c] * S[i2, c]
            score = num / Rf[jh]
            if score < best:
                best = score
                ihat = i
        if ihat >= 0:
            jh = same_lane[ihat]
            for c in range(C):
                if bbar[ihat, c] <= 0.0 or known[ihat, jh, c]:
                    continue
                k = nV[ihat, c]
                lc = lam if lam > 1.0 / k else 1.0 / k
                if abs(lc - 1.0 / k) <= 1e-15:
                    continue
                for j in range(N):
                    if not known[ihat, j, c]:
                        wgt[ihat, j, c] = lc if j == jh else (1.0 - lc) / (k - 1)

    bt = beta.copy()
    ptij = np.zeros((M, N))
    psum = np.zeros(N)
    ratio = np.zeros((M, N))
    D = np.zeros(N)
    it = 0
    hit_cap = False
    while True:
        any_elig = False
        for i in range(M):
            for c in range(C):
                if bbar[i, c] > 0.0:
                    any_elig = True
        if not any_elig:
            break
        if it >= max_iter:
            hit_cap = True
            break
        it += 1
        for j in range(N):
            psum[j] = 0.0
            D[j] = 0.0
        for i in range(M):
            for j in range(N):
                acc = 0.0
                for c in range(C):
                    if known[i, j, c]:
                        g = beta[i, j, c]
                    else:
                        g = bt[i, j, c] + bbar[i, c] * wgt[i, j, c]
                    acc += g * S[i, c]
                    D[j] += bt[i, j, c] * S[i, c]
                ptij[i, j] = pt[i] * acc / Si[i] if Si[i] > 0.0 else 0.0
                psum[j] += ptij[i, j]
        mup = 0.0
        for i in range(M):
            for j in range(N):
                if ptij[i, j] > 0.0:
                    od = 0.0
                    for c in range(C):
                        od += bt[i, j, c] * S[i, c]
                    ratio[i, j] = od / (ptij[i, j] * Rf[j]) * psum[j]
                    if ratio[i, j] > mup:
                        mup = ratio[i, j]
                else:
                    ratio[i, j] = np.nan
        # smallest ratio among movements that can still take mass
        mumin = np.inf
        for i in range(M):
            for j in range(N):
                for c in range(C):
                    if bbar[i, c] > 0.0 and wgt[i, j, c] > 0.0 and not known[i, j, c]:
                        if ratio[i, j] < mumin:
                            mumin = ratio[i, j]
                        break
        lim = mumin + RATIO_RTOL * abs(mumin)
        jm = -1
        best = np.inf
        for j in range(N):
            inY = False
            for i in range(M):
                if ratio[i, j] <= lim:
                    for c in range(C):
                        if bbar[i, c] > 0.0 and wgt[i, j, c] > 0.0 and not known[i, j, c]:
                            inY = True
                            break
                if inY:
                    break
            if inY and D[j] / Rf[j] < best:
                best = D[j] / Rf[j]
                jm = j
        im = -1
        cm = -1
        sbest = np.inf
        for i in range(M):
            if not ratio[i, jm] <= lim:
                continue
            for c in range(C):
                if bbar[i, c] > 0.0 and wgt[i, jm, c] > 0.0 and not known[i, jm, c]:
                    sb = bbar[i, c] * S[i, c]
                    if sb < sbest:
                        sbest = sb
                        im = i
                        cm = c
        mum = ratio[im, jm]
        if mum >= mup * (1.0 - RATIO_RTOL):
            break
        od = 0.0
        for c in range(C):
            od += bt[im, jm, c] * S[im, c]
        d = mup * ptij[im, jm] * Rf[jm] / (sbest * psum[jm]) - od / sbest
        if d > bbar[im, cm]:
            d = bbar[im, cm]
        bt[im, jm, cm] += d
        bbar[im, cm] -= d
        if bbar[im, cm] < _MASS_FLOOR:
            bbar[im, cm] = 0.0

    # closure: remaining mass goes out in proportion to supply
    for i in range(M):
        for c in range(C):
            if bbar[i, c] <= 0.0:
                continue
            tot = 0.0
            cnt = 0
            for j in range(N):
                if not known[i, j, c] and wgt[i, j, c] > 0.0:
                    tot += Rf[j]
                    cnt += 1
            for j in range(N):
                if not known[i, j, c] and wgt[i, j, c] > 0.0:
                    bt[i, j, c] += Rf[j] / tot * bbar[i, c]
            bbar[i, c] = 0.0
    return bt, it, hit_cap


@dataclass
class SolverInput:
    """Encoded split table plus the node quantities it is completed against.

    ``splits`` uses NaN for undefined and ``NOT_APPLICABLE`` for barred
    movements. ``same_lane`` maps an input index to the output index that
    continues its lane; ``inertia`` is the coefficient for the favored input.
    """

    demands: np.ndarray  # (M, C)
    supplies: np.ndarray  # (N,)
    splits: np.ndarray  # (M, N, C)
    priorities: np.ndarray  # (M,)
    same_lane: dict[int, int] | None = None
    inertia: float | None = None

    def __post_init__(self):
        self.demands = np.atleast_2d(np.asarray(self.demands, dtype=float))
        self.supplies = np.asarray(self.supplies, dtype=float).reshape(-1)
        self.splits = np.asarray(self.splits, dtype=float)
        self.priorities = np.asarray(self.priorities, dtype=float).reshape(-1)
        M, C = self.demands.shape
        N = self.supplies.shape[0]
        if self.splits.shape != (M, N, C):
            raise ValueError(f"splits must have shape {(M, N, C)}, got {self.splits.shape}")
        if self.priorities.shape != (M,):
            raise ValueError("one priority per input is required")


@dataclass
class SolverOutput:
    splits: np.ndarray
    iterations: int
    hit_iteration_cap: bool


def regularize_priorities(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if (p < 0).any() or not np.isclose(p.sum(), 1.0, rtol=0, atol=1e-12):
        raise ValueError("priorities must be nonnegative and sum to 1")
    return regularize(p)


def _lane_array(inp: SolverInput) -> np.ndarray:
    M = inp.demands.shape[0]
    lanes = np.full(M, -1, dtype=np.int64)
    for i, j in (inp.same_lane or {}).items():
        lanes[i] = j
    return lanes


def solve_splits(inp: SolverInput, max_iter: int = MAX_ITER) -> SolverOutput:
    pt = regularize_priorities(inp.priorities)
    lanes = np.full(inp.demands.shape[0], -1, dtype=np.int64)
    beta, it, cap = complete_splits(inp.demands, inp.supplies, inp.splits, pt, lanes, -1.0, max_iter)
    return SolverOutput(beta, int(it), bool(cap))


def solve_splits_with_inertia(inp: SolverInput, max_iter: int = MAX_ITER) -> SolverOutput:
    if not inp.same_lane:
        raise ValueError("same-lane pairs are required for the inertia variant")
    lam = 1.0 if inp.inertia is None else float(inp.inertia)
    und = np.isnan(inp.splits)
    for i, j in inp.same_lane.items():
        for c in range(inp.demands.shape[1]):
            k = int(und[i, :, c].sum())
            if und[i, j, c] and k >= 2 and not 1.0 / k - 1e-15 <= lam <= 1.0:
                raise ValueError(f"inertia coefficient {lam} outside [1/{k}, 1] for input {i}, class {c}")
    pt = regularize_priorities(inp.priorities)
    beta, it, cap = complete_splits(
        inp.demands, inp.supplies, inp.splits, pt, _lane_array(inp), lam, max_iter
    )
    return SolverOutput(beta, int(it), bool(cap))
