"""Random network layouts, Rayleigh channels, and instance normalization.

Geometry follows a 2x2 km square with BSs at least 500 m apart.  Channels
combine log-distance path loss with unit-variance circularly-symmetric
Gaussian fading.  Raw linear gains sit around 1e-14, far below what 32-bit
MLP inputs tolerate, so instances are rescaled to unit noise power; the
rescaling leaves every SINR unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

AREA_M = 2000.0
MIN_BS_DIST_M = 500.0
DEFAULT_POWER_DBM = 33.0
DEFAULT_NOISE_DBM = -99.0
DEFAULT_ANTENNAS = 2
_LAYOUT_ATTEMPTS = 10_000


class LayoutError(RuntimeError):
    """BS placement rejection sampling exhausted its retry budget."""


def dbm_to_watt(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


def path_loss_db(d):
    """Log-distance path loss in dB at distance d meters (d > 0)."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("path loss undefined for non-positive distance")
    return 30.5 + 36.7 * np.log10(d)


@dataclass
class Scenario:
    """One network layout: node positions plus power/noise budgets."""

    bs_positions: np.ndarray        # (M, 2) meters
    ue_positions: np.ndarray        # (K, 2) meters
    power_budget_dbm: float = DEFAULT_POWER_DBM
    noise_dbm: float = DEFAULT_NOISE_DBM
    num_antennas: int = DEFAULT_ANTENNAS

    @property
    def m(self):
        return self.bs_positions.shape[0]

    @property
    def k(self):
        return self.ue_positions.shape[0]


@dataclass
class ProblemInstance:
    """One optimization instance: channels plus linear power/noise budgets.

    ``e_re``/``e_im`` hold the (M, K, N) channel tensor in split real/imag
    storage; ``f_bs`` is per-BS power in watts, ``f_ue`` per-UE noise power
    (exactly 1.0 after normalization).  ``scale_alpha`` records the factor
    the channels were multiplied by.
    """

    m: int
    k: int
    n: int
    e_re: np.ndarray
    e_im: np.ndarray
    f_bs: np.ndarray
    f_ue: np.ndarray
    scale_alpha: float = 1.0
    heterogeneous_noise: bool = False

    @property
    def channels(self):
        """Complex (M, K, N) view of the split storage."""
        return self.e_re + 1j * self.e_im


def sample_scenario(m, k, n=DEFAULT_ANTENNAS, seed=0, power_budget_dbm=DEFAULT_POWER_DBM,
                    noise_dbm=DEFAULT_NOISE_DBM):
    """Draw a layout: UEs uniform on the square, BSs uniform subject to the
    pairwise separation constraint (whole layouts redrawn until feasible)."""
    if m < 1 or k < 1 or n < 1:
        raise ValueError(f"node/antenna counts must be >= 1, got M={m} K={k} N={n}")
    rng = np.random.default_rng(seed)
    ue = rng.uniform(0.0, AREA_M, size=(k, 2))
    for _ in range(_LAYOUT_ATTEMPTS):
        bs = rng.uniform(0.0, AREA_M, size=(m, 2))
        if m == 1:
            break
        diff = bs[:, None, :] - bs[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if dist[np.triu_indices(m, 1)].min() >= MIN_BS_DIST_M:
            break
    else:
        raise LayoutError(
            f"no layout with {m} BSs >= {MIN_BS_DIST_M} m apart in "
            f"{_LAYOUT_ATTEMPTS} attempts")
    return Scenario(bs, ue, float(power_budget_dbm), float(noise_dbm), int(n))


def realize_channels(s, seed=0, normalize=True):
    """Draw Rayleigh fading over the layout's path gains.

    h[m, k] = sqrt(g[m, k]) * w with w a unit-variance circularly-symmetric
    Gaussian N-vector (real/imag components of variance 1/2 each).
    """
    rng = np.random.default_rng(seed)
    m, k, n = s.m, s.k, s.num_antennas
    diff = s.bs_positions[:, None, :] - s.ue_positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    gain = 10.0 ** (-path_loss_db(dist) / 10.0)          # (M, K) linear
    amp = np.sqrt(gain / 2.0)[:, :, None]
    e_re = amp * rng.standard_normal((m, k, n))
    e_im = amp * rng.standard_normal((m, k, n))
    inst = ProblemInstance(
        m=m, k=k, n=n, e_re=e_re, e_im=e_im,
        f_bs=np.full(m, dbm_to_watt(s.power_budget_dbm)),
        f_ue=np.full(k, dbm_to_watt(s.noise_dbm)),
    )
    return normalize_instance(inst) if normalize else inst


def normalize_instance(raw):
    """Rescale channels so noise power becomes exactly 1.

    Scaling E by alpha and every noise power by alpha^2 leaves all SINRs
    unchanged, so any beamformer's sum rate is preserved.  With heterogeneous
    noise powers a common alpha from the mean noise is used and the residual
    per-UE noise kept (flagged on the instance).
    """
    if np.any(raw.f_ue <= 0):
        raise ValueError("noise powers must be positive")
    hetero = not np.all(raw.f_ue == raw.f_ue[0])
    sigma2 = float(raw.f_ue.mean()) if hetero else float(raw.f_ue[0])
    alpha = 1.0 / np.sqrt(sigma2)
    f_ue = raw.f_ue * alpha ** 2 if hetero else np.ones_like(raw.f_ue)
    return replace(
        raw,
        e_re=raw.e_re * alpha,
        e_im=raw.e_im * alpha,
        f_ue=f_ue,
        scale_alpha=raw.scale_alpha * alpha,
        heterogeneous_noise=hetero,
    )


def sample_instance(m, k, n=DEFAULT_ANTENNAS, scenario_seed=0, channel_seed=0, **kw):
    """Layout plus channels in one call."""
    return realize_channels(sample_scenario(m, k, n, scenario_seed, **kw),
                            channel_seed)


# ---------------------------------------------------------------------------
# JSON instance records (the batch-file payload format)

def instance_to_record(inst):
    return {
        "m": inst.m,
        "k": inst.k,
        "n": inst.n,
        "scale_alpha": inst.scale_alpha,
        "f_bs": inst.f_bs.tolist(),
        "f_ue": inst.f_ue.tolist(),
        "e_re": inst.e_re.tolist(),
        "e_im": inst.e_im.tolist(),
    }


def instance_from_record(rec):
    m, k, n = int(rec["m"]), int(rec["k"]), int(rec["n"])
    inst = ProblemInstance(
        m=m, k=k, n=n,
        e_re=np.asarray(rec["e_re"], dtype=np.float64).reshape(m, k, n),
        e_im=np.asarray(rec["e_im"], dtype=np.float64).reshape(m, k, n),
        f_bs=np.asarray(rec["f_bs"], dtype=np.float64),
        f_ue=np.asarray(rec["f_ue"], dtype=np.float64),
        scale_alpha=float(rec["scale_alpha"]),
    )
    inst.heterogeneous_noise = not np.all(inst.f_ue == inst.f_ue[0])
    return inst
