"""UAV flight power, energy bookkeeping and kinematics."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .radio import dbm_to_watt


@dataclass(frozen=True)
class UavBody:
    m_uav: float = 0.2
    g: float = 9.8
    rho_air: float = 1.225
    a_surf: float = 0.01
    n_prp: int = 4
    r_prp: float = 0.1
    eta: float = 0.8
    c_d: float = 0.5
    v_th: float = 0.1

    @property
    def a_uav(self) -> float:
        return self.a_surf + self.n_prp * math.pi * self.r_prp**2

    @property
    def c1(self) -> float:
        return 0.5 * self.rho_air * self.a_uav * self.c_d

    @property
    def c2(self) -> float:
        return self.m_uav**2 / (self.eta * self.rho_air * self.n_prp * math.pi * self.r_prp**2)

    @property
    def hover_power(self) -> float:
        return self.m_uav * self.g**1.5 / (math.sqrt(2.0 * self.rho_air * self.a_uav) * self.eta)


def flight_power(v, body: UavBody) -> float:
    """Piecewise flight power in watts; the forward branch applies at |v| >= v_th."""
    vx, vy, vz = (float(c) for c in v)
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    if not math.isfinite(speed):
        raise DomainError("velocity must be finite")
    if speed < body.v_th:
        return body.hover_power
    return body.c1 * speed**2 + body.c2 * (vx * vx + vy * vy) / speed**3 + body.m_uav * body.g * speed


@dataclass(frozen=True)
class EnergyLedger:
    """Cumulative energy per component (J) and the battery it draws from."""

    bc: float = 155520.0
    ec_cmp: float = 0.0
    ec_comm: float = 0.0
    ec_fly: float = 0.0
    pw_cmp: float = 20.0
    pw_ut_dbm: float = 20.0
    pw_ur_dbm: float = 20.0

    @property
    def ec(self) -> float:
        return self.ec_cmp + self.ec_comm + self.ec_fly

    @property
    def br(self) -> float:
        return self.bc - self.ec

    @property
    def depleted(self) -> bool:
        return self.br < 0.0

    @property
    def comm_power(self) -> float:
        return float(dbm_to_watt(self.pw_ut_dbm) + dbm_to_watt(self.pw_ur_dbm))


def accumulate(ledger: EnergyLedger, dt: float, flying_power: float,
               comm_active: bool, compute_active: bool) -> EnergyLedger:
    """Rectangle-rule step: each active component adds power * dt.

    A negative remaining battery is reported through ``ledger.depleted``.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    return replace(
        ledger,
        ec_fly=ledger.ec_fly + flying_power * dt,
        ec_comm=ledger.ec_comm + (ledger.comm_power * dt if comm_active else 0.0),
        ec_cmp=ledger.ec_cmp + (ledger.pw_cmp * dt if compute_active else 0.0),
    )


def integrate_motion(pos, v, dt, lo, hi):
    """Euler step clamped to the task-space box; returns (pos', clamped)."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    raw = np.asarray(pos, dtype=np.float64) + np.asarray(v, dtype=np.float64) * dt
    new = np.clip(raw, lo, hi)
    return new, bool(np.any(new != raw))
