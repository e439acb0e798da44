"""Iterative solvers for sum-rate maximization under per-BS power budgets.

Two references at opposite ends of the cost/quality spectrum:

- :func:`gp_solve`: projected gradient ascent with Armijo backtracking.
- :func:`wmmse_solve`: block-coordinate updates on receiver scalars, MSE
  weights, and stacked beamformers, with per-BS power budgets enforced by
  Lagrange multipliers found via cyclic bisection.

Both run in float64 on stacked per-UE vectors: channels and beams for UE k
are concatenated across BSs into length-M*N vectors, so BS m owns the
coordinate block [m*N, (m+1)*N).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import objective as obj

_RIDGE = 1e-12


class SolverError(RuntimeError):
    """Linear system stayed singular after the ridge retry."""


@dataclass
class SolverReport:
    v_final: np.ndarray          # complex (M, K, N)
    objective_trace: list
    iterations: int
    wall_time: float
    converged: bool

    def to_dict(self):
        return {
            "objective_trace": [float(x) for x in self.objective_trace],
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "final_rate": float(self.objective_trace[-1]),
        }


def matched_filter_init(inst):
    """Feasible start: each beam along its own channel, budget split over UEs."""
    h = inst.channels
    norms2 = (np.abs(h) ** 2).sum(axis=2)                       # (M, K)
    scal = np.zeros_like(norms2)
    nz = norms2 > 0
    scal[nz] = np.sqrt((inst.f_bs[:, None] / (inst.k * norms2))[nz])
    return h * scal[:, :, None]


def _stacked_channels(inst):
    # (M*N, K): column k stacks h_{m,k} over BSs
    return np.transpose(inst.channels, (1, 0, 2)).reshape(inst.k, -1).T.copy()


def _stack_v(v):
    m, k, n = v.shape
    return np.transpose(v, (0, 2, 1)).reshape(m * n, k)


def _unstack_v(vs, m, k, n):
    return np.transpose(vs.reshape(m, n, k), (0, 2, 1))


def _block_power(vs, m, n):
    return (np.abs(vs.reshape(m, n, -1)) ** 2).sum(axis=(1, 2))


def gp_solve(inst, max_iters=500, tol=1e-5):
    """Projected gradient ascent on the sum rate.

    Each iteration takes the tape gradient at the current (feasible) point,
    then backtracks along the projection arc: initial step 1, shrink 0.5,
    sufficient-increase coefficient 1e-4, at most 30 backtracks.  The
    accepted-only updates make the objective trace non-decreasing.
    """
    t0 = time.perf_counter()
    v = matched_filter_init(inst)
    f_cur = obj.sum_rate(inst, v)
    trace = [f_cur]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        g = _rate_gradient(inst, v)
        step = 1.0
        accepted = False
        for _ in range(30):
            cand = obj.project_power(v + step * g, inst.f_bs)
            f_new = obj.sum_rate(inst, cand)
            gain = np.sum(g.real * (cand - v).real + g.imag * (cand - v).imag)
            if f_new >= f_cur + 1e-4 * step * max(gain, 0.0):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        improvement = f_new - f_cur
        v, f_cur = cand, f_new
        trace.append(f_cur)
        if improvement < tol:
            converged = True
            break
    return SolverReport(v, trace, it, time.perf_counter() - t0, converged)


def _rate_gradient(inst, v):
    with nm.precision(64):
        tape = nm.Tape()
        vs = obj.rows_from_complex(v, tape)
        rate = obj.sum_rate_graph(inst, vs)
        tape.backward(rate)
        shape = (inst.m, inst.k, inst.n)
        return (vs.re.grad.reshape(shape) + 1j * vs.im.grad.reshape(shape))


def _solve_system(a, rhs):
    """Hermitian solve with the ridge-retry contract."""
    try:
        x = np.linalg.solve(a, rhs)
        if np.isfinite(x).all():
            return x
    except np.linalg.LinAlgError:
        pass
    try:
        x = np.linalg.solve(a + _RIDGE * np.eye(a.shape[0]), rhs)
    except np.linalg.LinAlgError as err:
        raise SolverError("beamformer system singular after ridge retry") from err
    if not np.isfinite(x).all():
        raise SolverError("beamformer system singular after ridge retry")
    return x


def _v_for_mu(b_mat, h_stack, coef, mu, n):
    a = b_mat + np.diag(np.repeat(mu, n))
    return _solve_system(a, h_stack) * coef[None, :]


def multiplier_search(u, w, inst, power_tol=1e-12, max_cycles=50, mu_init=None):
    """Per-BS multipliers for the constrained beamformer update.

    Cyclic coordinate search: a BS whose unconstrained update (mu_m = 0,
    others fixed) already meets its budget keeps mu_m = 0; otherwise mu_m is
    bracketed by doubling and driven onto the budget from the feasible side.
    Block power is monotone non-increasing in mu_m, which keeps the bracket
    valid; inside it a safeguarded regula-falsi needs far fewer solves than
    plain bisection for the same 1e-13 landing tolerance.

    ``mu_init`` only seeds the bracket doubling (warm start across calls).
    Returns (mu, converged).
    """
    m, n = inst.m, inst.n
    h_stack = _stacked_channels(inst)
    scale = w * np.abs(u) ** 2
    b_mat = (h_stack * scale[None, :]) @ h_stack.conj().T
    coef = w * np.conj(u)
    budget = inst.f_bs

    def powers(mu):
        return _block_power(_v_for_mu(b_mat, h_stack, coef, mu, n), m, n)

    mu = np.zeros(m)
    hints = np.ones(m) if mu_init is None else np.maximum(mu_init, 1e-6)
    converged = False
    for _ in range(max_cycles):
        for mm in range(m):
            mu[mm] = 0.0
            p0 = powers(mu)[mm]
            if p0 <= budget[mm] * (1.0 + power_tol):
                continue
            mu[mm] = _budget_root(lambda x: powers(_with(mu, mm, x))[mm],
                                  p0, budget[mm], hints[mm])
            hints[mm] = mu[mm]
        if np.all(powers(mu) <= budget * (1.0 + power_tol)):
            converged = True
            break
    return mu, converged


def _budget_root(power_of, p_at_zero, budget, hint):
    """Smallest mu with power_of(mu) <= budget, landed within 1e-13 below it.

    power_of must be continuous and non-increasing; p_at_zero > budget.
    Regula falsi on (power - budget) with Illinois damping; the bracket
    endpoints keep their true powers so the landing test stays honest, and
    the feasible endpoint is returned.
    """
    lo, f_lo = 0.0, p_at_zero - budget
    hi = max(hint, 1e-12)
    p_hi = power_of(hi)
    for _ in range(200):
        if p_hi <= budget:
            break
        lo, f_lo = hi, p_hi - budget
        hi *= 2.0
        p_hi = power_of(hi)
    f_hi = p_hi - budget
    side = 0
    for _ in range(120):
        if p_hi >= budget * (1.0 - 1e-13) or hi - lo <= 1e-16 * hi:
            break
        denom = f_hi - f_lo
        mid = (lo * f_hi - hi * f_lo) / denom if denom < 0 else 0.5 * (lo + hi)
        if not (lo < mid < hi):
            mid = 0.5 * (lo + hi)
        p_mid = power_of(mid)
        if p_mid > budget:
            lo, f_lo = mid, p_mid - budget
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            hi, p_hi = mid, p_mid
            f_hi = p_mid - budget
            if side == 1:
                f_lo *= 0.5
            side = 1
    return hi


def _with(mu, i, val):
    out = mu.copy()
    out[i] = val
    return out


def wmmse_solve(inst, max_iters=100, tol=1e-5):
    """Weighted-MMSE block-coordinate ascent on the sum rate.

    Per iteration, with stacked channels/beams (a[k,l] = h_k^H v_l):
    receiver u_k = a[k,k] / (sum_l |a[k,l]|^2 + sigma_k^2); weight
    w_k = 1 / (1 - Re(conj(u_k) a[k,k])), clipped below at 1; beams
    v_k = w_k conj(u_k) (sum_l w_l |u_l|^2 h_l h_l^H + sum_m mu_m D_m)^{-1} h_k
    with D_m selecting BS m's antenna block and mu from multiplier_search.
    """
    t0 = time.perf_counter()
    m, k, n = inst.m, inst.k, inst.n
    h_stack = _stacked_channels(inst)
    vs = _stack_v(matched_filter_init(inst))
    trace = [obj.sum_rate(inst, _unstack_v(vs, m, k, n))]
    converged = False
    mu_converged = True
    mu = None
    it = 0
    tiny = np.finfo(np.float64).tiny
    for it in range(1, max_iters + 1):
        a = h_stack.conj().T @ vs                                # (K, K)
        denom = (np.abs(a) ** 2).sum(axis=1) + inst.f_ue
        u = np.diag(a) / denom
        mse = 1.0 - np.real(np.conj(u) * np.diag(a))
        w = np.maximum(1.0 / np.maximum(mse, tiny), 1.0)
        mu, ok = multiplier_search(u, w, inst, mu_init=mu)
        mu_converged = mu_converged and ok
        scale = w * np.abs(u) ** 2
        b_mat = (h_stack * scale[None, :]) @ h_stack.conj().T
        vs = _v_for_mu(b_mat, h_stack, w * np.conj(u), mu, n)
        trace.append(obj.sum_rate(inst, _unstack_v(vs, m, k, n)))
        if trace[-1] - trace[-2] < tol:
            converged = True
            break
    v = _unstack_v(vs, m, k, n)
    return SolverReport(v, trace, it, time.perf_counter() - t0,
                        converged and mu_converged)


SOLVERS = {"gp": gp_solve, "wmmse": wmmse_solve}
