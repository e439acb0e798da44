"""SINR, sum rate, and per-BS power accounting for cooperative beamforming.

Beamformers are complex (M, K, N) tensors: V[m, k] is the beam BS m points at
UE k.  Two routes share the same math:

- plain complex-numpy functions (used by the iterative solvers and for
  evaluation), and
- ``*_graph`` functions built from :mod:`coopbeam.numerics` ops, which are
  differentiable through V (and through anything upstream of V, e.g. the
  GNN parameters).

Power handling projects onto the per-BS power ball: a block is rescaled only
when it violates its budget, so feasible points pass through untouched.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nm

# re-projection must be a no-op at the boundary, so violation needs slack
_PROJ_SLACK = 1e-12


def sinr_per_ue(inst, v):
    """SINR of each UE: coherent desired power over interference plus noise."""
    a = _link_gains(inst, v)                    # (K, K): a[k, l] = sum_m h_mk^H v_ml
    p = np.abs(a) ** 2
    desired = np.diag(p)
    interference = p.sum(axis=1) - desired
    return desired / (interference + inst.f_ue)


def sum_rate(inst, v):
    """Total rate sum_k log2(1 + SINR_k) in bits/s/Hz."""
    return float(np.log2(1.0 + sinr_per_ue(inst, v)).sum())


def bs_power(v):
    """Per-BS transmit power: sum over served UEs of ||v_mk||^2."""
    return (np.abs(v) ** 2).sum(axis=(1, 2))


def project_power(v, f_bs):
    """Project onto the per-BS power balls (scale only violating blocks)."""
    if np.any(np.asarray(f_bs) <= 0):
        raise ValueError("power budgets must be positive")
    power = bs_power(v)
    factor = np.ones_like(power)
    hot = power > f_bs * (1.0 + _PROJ_SLACK)
    factor[hot] = np.sqrt(f_bs[hot] / power[hot])
    return v * factor[:, None, None]


def _link_gains(inst, v):
    # a[k, l] = sum_{m,n} conj(h[m,k,n]) v[m,l,n]
    return np.einsum("mkn,mln->kl", inst.channels.conj(), v)


# ---------------------------------------------------------------------------
# differentiable route

def _v_perm_index(m, k, n):
    # flat indices rearranging a (M*K, N) row-major beamformer into (M*N, K)
    mm, nn, ll = np.meshgrid(np.arange(m), np.arange(n), np.arange(k),
                             indexing="ij")
    return ((mm * k + ll) * n + nn).reshape(m * n, k)


def _channel_mats(inst):
    # (K, M*N) real/imag layouts of the channel tensor, constants on no tape
    e_re = np.transpose(inst.e_re, (1, 0, 2)).reshape(inst.k, inst.m * inst.n)
    e_im = np.transpose(inst.e_im, (1, 0, 2)).reshape(inst.k, inst.m * inst.n)
    return nm.constant(e_re), nm.constant(e_im)


def sinr_graph(inst, v):
    """Differentiable SINR vector; v is a ComplexSplit with M*K rows of N."""
    m, k, n = inst.m, inst.k, inst.n
    idx = _v_perm_index(m, k, n)
    v_re = nm.take(v.re, idx)                   # (M*N, K)
    v_im = nm.take(v.im, idx)
    h_re, h_im = _channel_mats(inst)
    a_re = nm.add(nm.matmul(h_re, v_re), nm.matmul(h_im, v_im))
    a_im = nm.sub(nm.matmul(h_re, v_im), nm.matmul(h_im, v_re))
    p = nm.add(nm.mul(a_re, a_re), nm.mul(a_im, a_im))   # (K, K)
    total = nm.sum_axis(p, axis=1)
    desired = nm.take(p, np.arange(k) * k + np.arange(k))
    interference = nm.sub(total, desired)
    denom = nm.add(interference, nm.constant(inst.f_ue))
    return nm.div(desired, denom)


def sum_rate_graph(inst, v):
    """Differentiable sum rate (scalar tensor)."""
    return nm.sum_axis(nm.log2_1p(sinr_graph(inst, v)))


def bs_power_graph(v, m, k):
    """Differentiable per-BS power from an (M*K, N)-row ComplexSplit."""
    sq = nm.add(nm.mul(v.re, v.re), nm.mul(v.im, v.im))
    n = v.re.shape[1]
    return nm.sum_axis(nm.reshape(sq, (m, k * n)), axis=1)


def project_power_graph(v, f_bs, m, k):
    """Differentiable power projection; mirrors :func:`project_power`.

    The epsilon in the ratio keeps the all-zero beamformer (zero channels)
    from producing NaN gradients through the inactive branch.
    """
    power = bs_power_graph(v, m, k)
    ratio = nm.div(nm.constant(np.asarray(f_bs)), nm.add_scalar(power, 1e-30))
    factor = nm.minimum(nm.sqrt(ratio), nm.constant(np.ones(m)))
    per_row = nm.take(factor, np.repeat(np.arange(m), k))
    return nm.ComplexSplit(nm.rowscale(v.re, per_row),
                           nm.rowscale(v.im, per_row))


def as_complex_rows(v_split, m, k, n):
    """(M, K, N) complex ndarray from an (M*K, N)-row ComplexSplit."""
    re = v_split.re.array().reshape(m, k, n)
    im = v_split.im.array().reshape(m, k, n)
    return re + 1j * im


def rows_from_complex(v, tape=None):
    """ComplexSplit with (M*K, N) rows from a complex (M, K, N) ndarray.

    Rows become tape leaves when a tape is given (for gradients w.r.t. V).
    """
    m, k, n = v.shape
    re = np.ascontiguousarray(v.real).reshape(m * k, n)
    im = np.ascontiguousarray(v.imag).reshape(m * k, n)
    if tape is None:
        return nm.ComplexSplit(nm.constant(re), nm.constant(im))
    return nm.ComplexSplit(tape.leaf(re), tape.leaf(im))
