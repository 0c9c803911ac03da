"""Antenna, channel and link-level formulas.

Angles are in degrees at the API boundary. Powers are in dBm at the API
boundary and converted to watts for every sum or ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

K_BOLTZMANN = 1.38e-23
T_KELVIN = 298.0
LIGHT_SPEED = 3e8
AF_FLOOR = 1e-12
ATTENUATION_CAP_DB = 30.0


@dataclass(frozen=True)
class AntennaConfig:
    m_ula: int = 8
    n_ula: int = 8
    d_ula: float = 0.05
    theta_main: float = 0.0
    phi_main: float = 80.0
    theta_3db: float = 65.0
    phi_3db: float = 65.0
    g_element: float = 5.0
    f_bs: float = 3.5e9
    light_speed: float = LIGHT_SPEED
    attenuation_form: str = "3gpp-squared"

    def __post_init__(self):
        if self.m_ula < 1 or self.n_ula < 1:
            raise DomainError("ULA element counts must be >= 1")
        if self.theta_3db <= 0 or self.phi_3db <= 0:
            raise DomainError("beamwidths must be positive")
        if self.d_ula <= 0:
            raise DomainError("element spacing must be positive")
        if self.attenuation_form not in ("3gpp-squared", "as-printed"):
            raise DomainError(f"unknown attenuation form {self.attenuation_form!r}")

    @property
    def g_max(self) -> float:
        return self.g_element + 10.0 * math.log10(self.m_ula * self.n_ula)


@dataclass(frozen=True)
class LinkBudget:
    tx_power: float
    rx_gain: float
    path_loss: float
    received_power: float
    sinr: float
    capacity: float


@dataclass(frozen=True)
class BpskLink:
    sinr: float
    packet_length: int
    ber: float
    plr: float


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=np.float64) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=np.float64)) + 30.0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=np.float64) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=np.float64))


def wrap_deg(a):
    """Wrap an angle difference into [-180, 180)."""
    return (np.asarray(a, dtype=np.float64) + 180.0) % 360.0 - 180.0


def _one_axis(delta, width, form):
    ratio = delta / width
    if form == "3gpp-squared":
        return -np.minimum(12.0 * ratio**2, ATTENUATION_CAP_DB)
    return -np.minimum(12.0 * ratio, ATTENUATION_CAP_DB)


def element_attenuation(theta, phi, cfg: AntennaConfig):
    """Total element attenuation A_H + A_V in dB."""
    a_h = _one_axis(wrap_deg(np.asarray(theta) - cfg.theta_main), cfg.theta_3db, cfg.attenuation_form)
    a_v = _one_axis(np.asarray(phi, dtype=np.float64) - cfg.phi_main, cfg.phi_3db, cfg.attenuation_form)
    return a_h + a_v


def array_factor(theta, phi, cfg: AntennaConfig):
    """Beamformed power factor |sum_mn exp(j k d (m u + n v))|^2 in closed form.

    With u = sin(theta)cos(phi), v = sin(theta)sin(phi) the double sum
    separates into two geometric series, each with magnitude
    |sin(N x / 2) / sin(x / 2)|.
    """
    th = np.radians(np.asarray(theta, dtype=np.float64))
    ph = np.radians(np.asarray(phi, dtype=np.float64))
    k_w = 2.0 * math.pi * cfg.f_bs / cfg.light_speed
    psi_m = k_w * cfg.d_ula * np.sin(th) * np.cos(ph)
    psi_n = k_w * cfg.d_ula * np.sin(th) * np.sin(ph)
    return _series_power(psi_m, cfg.m_ula) * _series_power(psi_n, cfg.n_ula)


def _series_power(psi, count):
    # |sum_{k<count} e^{j k psi}|^2 = sin^2(count psi/2) / sin^2(psi/2), limit count^2
    half = 0.5 * psi
    den = np.sin(half)
    num = np.sin(count * half)
    near = np.abs(den) < 1e-7
    safe = np.where(near, 1.0, den)
    val = (num / safe) ** 2
    # second-order expansion around the grating-lobe peaks
    n2 = float(count * count)
    resid = wrap_rad(half)
    approx = n2 * (1.0 - (n2 - 1.0) * resid**2 / 3.0)
    return np.where(near, approx, val)


def wrap_rad(x):
    return (x + math.pi / 2) % math.pi - math.pi / 2


def antenna_gain(theta, phi, cfg: AntennaConfig):
    af = np.maximum(array_factor(theta, phi, cfg), AF_FLOOR)
    return cfg.g_max + element_attenuation(theta, phi, cfg) + 10.0 * np.log10(af)


def path_loss(d_ts, f_c, los, h_ts=None, nlos_coefficient=71.0):
    """LoS/NLoS path loss in dB; ``f_c`` in Hz, enters the logs in GHz.

    The NLoS branch follows the nominal coefficients, including the
    height slope ``nlos_coefficient``; it can go negative for tall links.
    """
    d = np.asarray(d_ts, dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError(f"path-loss distance must be positive, got {d_ts}")
    f_ghz = f_c / 1e9
    if los:
        return 28.0 + 22.0 * np.log10(d) + 20.0 * math.log10(f_ghz)
    if h_ts is None or np.any(np.asarray(h_ts) <= 0):
        raise DomainError("NLoS path loss needs a positive height")
    return (-17.5 + 20.0 * math.log10(40.0 * math.pi * f_ghz / 3.0)
            + (46.0 - nlos_coefficient * np.log10(h_ts)) * np.log10(d))


def noise_power(bw, k_b=K_BOLTZMANN, t_k=T_KELVIN):
    if bw <= 0:
        raise DomainError("bandwidth must be positive")
    return k_b * t_k * bw


def sinr_and_capacity(signal_dbm, interference_dbm, bw, noise_w=None):
    """SINR in linear units and Shannon capacity in bit/s, summed in watts."""
    s = float(dbm_to_watt(signal_dbm))
    i = float(np.sum(dbm_to_watt(np.asarray(interference_dbm, dtype=np.float64)))) if len(interference_dbm) else 0.0
    n = noise_power(bw) if noise_w is None else noise_w
    sinr = s / (i + n)
    return sinr, bw * math.log2(1.0 + sinr)


def q_function(x):
    """Exponential approximation Q(x) ~ exp(-x^2/2) / 2."""
    return 0.5 * np.exp(-0.5 * np.asarray(x, dtype=np.float64) ** 2)


def bpsk_ber(sinr):
    sinr = np.asarray(sinr, dtype=np.float64)
    if np.any(sinr < 0):
        raise DomainError("SINR must be non-negative")
    return q_function(np.sqrt(2.0 * sinr))


def packet_loss_rate(ber, length):
    ber = np.asarray(ber, dtype=np.float64)
    if np.any((ber < 0) | (ber > 1)):
        raise DomainError("BER must lie in [0, 1]")
    if length < 1:
        raise DomainError("packet length must be >= 1")
    # 1 - (1 - ber)^L without cancellation for tiny ber; ber = 1 gives exactly 1
    with np.errstate(divide="ignore"):
        return -np.expm1(length * np.log1p(-ber))


def bpsk_link(sinr, length) -> BpskLink:
    ber = float(bpsk_ber(sinr))
    return BpskLink(float(sinr), int(length), ber, float(packet_loss_rate(ber, length)))


def link_budget(tx_dbm, gain_db, pl_db, interference_w, bw, noise_w=None) -> LinkBudget:
    rx_dbm = tx_dbm + gain_db - pl_db
    n = noise_power(bw) if noise_w is None else noise_w
    sinr = float(dbm_to_watt(rx_dbm)) / (interference_w + n)
    return LinkBudget(tx_dbm, gain_db, pl_db, rx_dbm, sinr, bw * math.log2(1.0 + sinr))
