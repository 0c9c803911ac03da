"""Agricultural data-collection world: terrain, sensor AoI and the sequential COL/RTH MDP.

Sensor protocol: AoI grows linearly and saturates at ``aoi_max`` after one
update interval, at which point the sensor holds fresh data and keeps
broadcasting. Each UAV serves at most one broadcasting sensor per step;
a successful BPSK packet resets that sensor's AoI to zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import radio
from .config import ExperimentConfig
from .energy import EnergyLedger, accumulate, flight_power, integrate_motion
from .errors import ContractError

MAP_HEADER = "FMEAC-MAP agri v1"
COL, RTH = 0, 1
COL_OBS = 39   # with n_near = 8
RTH_OBS = 43


@dataclass
class AgriMap:
    seed: int
    res: float
    origin: tuple[float, float]
    terrain: np.ndarray   # (nx, ny) ground height at grid points, m
    ws: np.ndarray        # (n_ws, 4): x, y, z, update interval (s)
    ds: np.ndarray        # (n_uav, 3)
    uav: np.ndarray       # (n_uav, 3) start positions

    @property
    def n_ws(self):
        return len(self.ws)

    def ground(self, x, y):
        """Bilinear terrain height."""
        gx = np.clip((np.asarray(x, dtype=np.float64) - self.origin[0]) / self.res, 0, self.terrain.shape[0] - 1)
        gy = np.clip((np.asarray(y, dtype=np.float64) - self.origin[1]) / self.res, 0, self.terrain.shape[1] - 1)
        x0 = np.minimum(np.floor(gx).astype(int), self.terrain.shape[0] - 2) if self.terrain.shape[0] > 1 else np.zeros_like(gx, dtype=int)
        y0 = np.minimum(np.floor(gy).astype(int), self.terrain.shape[1] - 2) if self.terrain.shape[1] > 1 else np.zeros_like(gy, dtype=int)
        fx, fy = gx - x0, gy - y0
        t = self.terrain
        x1 = np.minimum(x0 + 1, t.shape[0] - 1)
        y1 = np.minimum(y0 + 1, t.shape[1] - 1)
        return ((1 - fx) * (1 - fy) * t[x0, y0] + fx * (1 - fy) * t[x1, y0]
                + (1 - fx) * fy * t[x0, y1] + fx * fy * t[x1, y1])


def generate_map(seed: int, cfg: ExperimentConfig) -> AgriMap:
    """Terrain from seeded Gaussian hills and ravines, sensors on a regular grid."""
    rng = np.random.default_rng([int(seed), 2])
    w, h = cfg.x_max - cfg.x_min, cfg.y_max - cfg.y_min
    res = cfg.d_ws / 2.0
    nx, ny = int(math.ceil(w / res)) + 1, int(math.ceil(h / res)) + 1
    gx, gy = np.meshgrid(cfg.x_min + res * np.arange(nx), cfg.y_min + res * np.arange(ny), indexing="ij")
    terrain = np.full((nx, ny), cfg.terrain_amplitude)
    for _ in range(cfg.terrain_features):
        cx, cy = rng.uniform(cfg.x_min, cfg.x_max), rng.uniform(cfg.y_min, cfg.y_max)
        sigma = rng.uniform(0.1, 0.3) * max(w, h)
        amp = rng.uniform(-1.0, 1.0) * cfg.terrain_amplitude
        terrain += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * sigma**2))
    terrain = np.clip(terrain, 0.0, 0.8 * cfg.z_min)
    m = AgriMap(int(seed), res, (cfg.x_min, cfg.y_min), terrain, np.zeros((0, 4)),
                np.zeros((0, 3)), np.zeros((0, 3)))

    side = int(math.ceil(math.sqrt(cfg.n_ws)))
    ws = np.zeros((cfg.n_ws, 4))
    for j in range(cfg.n_ws):
        x = cfg.x_min + cfg.d_ws * (j % side + 0.5)
        y = cfg.y_min + cfg.d_ws * (j // side + 0.5)
        x, y = min(x, cfg.x_max), min(y, cfg.y_max)
        ws[j] = [x, y, float(m.ground(x, y)), cfg.t_update[int(rng.integers(len(cfg.t_update)))]]
    ds = np.zeros((cfg.n_uav, 3))
    uav = np.zeros((cfg.n_uav, 3))
    for i in range(cfg.n_uav):
        x, y = rng.uniform(cfg.x_min, cfg.x_max), rng.uniform(cfg.y_min, cfg.y_max)
        g = float(m.ground(x, y))
        ds[i] = [x, y, g]
        uav[i] = [x, y, float(np.clip(g + cfg.target_clearance, cfg.z_min, cfg.z_max))]
    m.ws, m.ds, m.uav = ws, ds, uav
    return m


def _fmt(v):
    return repr(float(v))


def dumps_map(m: AgriMap) -> str:
    lines = [MAP_HEADER, f"seed {m.seed}", f"cell {_fmt(m.res)} {_fmt(m.origin[0])} {_fmt(m.origin[1])}", "[grid]"]
    lines += [" ".join(_fmt(v) for v in row) for row in m.terrain]
    for name, arr in (("ws", m.ws), ("ds", m.ds), ("uav", m.uav)):
        lines.append(f"[{name}]")
        lines += [" ".join(_fmt(v) for v in row) for row in arr]
    return "\n".join(lines) + "\n"


def loads_map(text: str) -> AgriMap:
    from .urban import _rows, _sections
    meta, sec = _sections(text, MAP_HEADER)
    res, ox, oy = (float(v) for v in meta["cell"])
    terrain = np.array([[float(v) for v in ln.split()] for ln in sec["grid"]])
    return AgriMap(int(meta["seed"][0]), res, (ox, oy), terrain,
                   _rows(sec.get("ws", []), 4), _rows(sec.get("ds", []), 3), _rows(sec.get("uav", []), 3))


# ---------------------------------------------------------------- sensors

def aoi_tick(aoi, dt, t_update, aoi_max):
    """Linear AoI growth reaching ``aoi_max`` after one update interval, then capped."""
    return np.minimum(np.asarray(aoi) + dt / np.asarray(t_update) * aoi_max, aoi_max)


def broadcasting(aoi, aoi_max):
    return np.asarray(aoi) >= aoi_max - 1e-12


def ws_link_sinr(m: AgriMap, cfg: ExperimentConfig, p_uav, j, interferers=()) -> float:
    """Uplink SINR from sensor ``j`` at a UAV, other simultaneous uplinks as interference."""
    def rx(k):
        d = max(float(np.linalg.norm(np.asarray(p_uav) - m.ws[k, :3])), 1.0)
        return float(radio.dbm_to_watt(cfg.pw_wt_dbm + cfg.g_ws_db - radio.path_loss(d, cfg.f_c, True)))
    interference = sum(rx(k) for k in interferers if k != j)
    return rx(j) / (interference + cfg.noise_w)


def transmit(plr: float, rng: np.random.Generator) -> bool:
    """One packet attempt; succeeds with probability 1 - PLR."""
    return bool(rng.random() >= plr)


# ---------------------------------------------------------------- state

@dataclass
class AgriState:
    pos: np.ndarray
    vel: np.ndarray
    ledgers: list[EnergyLedger]
    mode: np.ndarray        # (n_uav,) COL or RTH
    done: np.ndarray
    aoi: np.ndarray         # (n_ws,)
    k: int = 0
    mode_steps: np.ndarray = None   # steps spent in the current mode
    arrived: np.ndarray = None
    collected: int = 0

    def copy(self) -> "AgriState":
        return replace(self, pos=self.pos.copy(), vel=self.vel.copy(), ledgers=list(self.ledgers),
                       mode=self.mode.copy(), done=self.done.copy(), aoi=self.aoi.copy(),
                       mode_steps=self.mode_steps.copy(), arrived=self.arrived.copy())


def reset(m: AgriMap, cfg: ExperimentConfig) -> AgriState:
    n = len(m.uav)
    ledger = EnergyLedger(cfg.battery_capacity, pw_cmp=cfg.pw_cmp, pw_ut_dbm=cfg.pw_ut_dbm, pw_ur_dbm=cfg.pw_ur_dbm)
    return AgriState(pos=m.uav.copy(), vel=np.zeros((n, 3)), ledgers=[ledger] * n,
                     mode=np.full(n, COL), done=np.zeros(n, dtype=bool), aoi=np.zeros(m.n_ws),
                     k=0, mode_steps=np.zeros(n, dtype=int), arrived=np.zeros(n, dtype=bool))


def clearance_dev(m, cfg, pos):
    return np.abs(pos[:, 2] - m.ground(pos[:, 0], pos[:, 1]) - cfg.target_clearance)


def ds_distance(m, pos):
    """Horizontal distance to each UAV's docking station."""
    return np.linalg.norm(pos[:, :2] - m.ds[:len(pos), :2], axis=1)


def _nearest(pos):
    n = len(pos)
    idx, dist = np.full(n, -1), np.zeros(n)
    for i in range(n):
        best = math.inf
        for j in range(n):
            if j != i:
                d = float(np.linalg.norm(pos[i] - pos[j]))
                if d < best:
                    best, idx[i] = d, j
        dist[i] = best if idx[i] >= 0 else 0.0
    return idx, dist


def observe_col(state: AgriState, m: AgriMap, cfg: ExperimentConfig, i: int) -> np.ndarray:
    L = cfg.extent
    lo = np.asarray(cfg.lo[:2] + (0.0,))
    p = state.pos[i]
    horiz = np.linalg.norm(m.ws[:, :2] - p[:2], axis=1)
    order = np.argsort(horiz, kind="stable")[:cfg.n_near]
    block = np.zeros((cfg.n_near, 4))
    for s, j in enumerate(order):
        block[s] = [state.aoi[j], *((m.ws[j, :3] - p) / L)]
    near, dist = _nearest(state.pos)
    rel = (state.pos[near[i]] - p) / L if near[i] >= 0 else np.zeros(3)
    return np.concatenate([(p - lo) / L, block.ravel(), rel, [dist[i] / L]])


def observe_rth(state: AgriState, m: AgriMap, cfg: ExperimentConfig, i: int) -> np.ndarray:
    L = cfg.extent
    lo = np.asarray(cfg.lo[:2] + (0.0,))
    d = ds_distance(m, state.pos)[i]
    return np.concatenate([observe_col(state, m, cfg, i), (m.ds[i] - lo) / L, [d / L]])


def agent_obs_dim(cfg: ExperimentConfig) -> int:
    return 3 + 4 * cfg.n_near + 4 + 4 + 1


def agent_observation(state: AgriState, m: AgriMap, cfg: ExperimentConfig, i: int) -> np.ndarray:
    """Mode-aware actor input: RTH layout (COL zero-padded) plus a mode flag."""
    if state.mode[i] == RTH:
        o = observe_rth(state, m, cfg, i)
    else:
        o = np.concatenate([observe_col(state, m, cfg, i), np.zeros(4)])
    return np.concatenate([o, [float(state.mode[i])]])


def bpn_state(pos, ds, cfg: ExperimentConfig) -> np.ndarray:
    """Task-transition state: offset to the docking station and its horizontal length."""
    L = cfg.extent
    pos = np.atleast_2d(pos)
    ds = np.atleast_2d(ds)
    off = (pos - ds) / L
    return np.concatenate([off, np.linalg.norm(off[:, :2], axis=1, keepdims=True)], axis=1)


BPN_DIM = 4


@dataclass
class StepResult:
    state: AgriState
    reward: np.ndarray
    done: np.ndarray
    active: np.ndarray
    mode: np.ndarray        # mode each UAV acted in
    collected_aoi: np.ndarray
    switched: np.ndarray


def step(state: AgriState, m: AgriMap, cfg: ExperimentConfig, actions, rng,
         energy_to_return=None) -> StepResult:
    """Advance one ``dt``.

    ``energy_to_return(states) -> joules`` drives the COL->RTH switch; without
    it UAVs switch only when the collection time budget runs out.
    """
    n = len(state.pos)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (n, 3):
        raise ContractError(f"expected actions of shape {(n, 3)}, got {actions.shape}")
    a = cfg.alphas
    active = ~state.done
    mode = state.mode.copy()
    new = state.copy()
    new.k = state.k + 1
    vmax = np.asarray(cfg.v_max)

    h_before = clearance_dev(m, cfg, state.pos)
    _, du_before = _nearest(state.pos)
    dis_before = ds_distance(m, state.pos)
    e_before = np.array([lg.br / lg.bc for lg in state.ledgers])

    clamped = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(active):
        v = np.clip(actions[i], -vmax, vmax)
        new.pos[i], clamped[i] = integrate_motion(state.pos[i], v, cfg.dt, cfg.lo, cfg.hi)
        new.vel[i] = v
    new.vel[~active] = 0.0

    new.aoi = aoi_tick(state.aoi, cfg.dt, m.ws[:, 3], cfg.aoi_max)
    pending = broadcasting(new.aoi, cfg.aoi_max)
    claimed = np.zeros(m.n_ws, dtype=bool)
    serve = np.full(n, -1)
    for i in np.flatnonzero(active):
        horiz = np.linalg.norm(m.ws[:, :2] - new.pos[i, :2], axis=1)
        cand = np.flatnonzero(pending & ~claimed & (horiz <= cfg.connect_radius))
        if len(cand):
            j = cand[np.argmax(new.aoi[cand])]
            serve[i] = j
            claimed[j] = True
    collected = np.zeros(n)
    live = serve[serve >= 0]
    for i in np.flatnonzero(serve >= 0):
        j = serve[i]
        sinr = ws_link_sinr(m, cfg, new.pos[i], j, interferers=live)
        plr = float(radio.packet_loss_rate(radio.bpsk_ber(sinr), cfg.packet_bits))
        if transmit(plr, rng):
            collected[i] = new.aoi[j]
            new.aoi[j] = 0.0
            new.collected += 1

    for i in np.flatnonzero(active):
        comm = serve[i] >= 0 or not cfg.comm_gating
        new.ledgers[i] = accumulate(state.ledgers[i], cfg.dt, flight_power(new.vel[i], cfg.body), comm, True)

    h_after = clearance_dev(m, cfg, new.pos)
    _, du_after = _nearest(new.pos)
    dis_after = ds_distance(m, new.pos)
    e_after = np.array([lg.br / lg.bc for lg in new.ledgers])
    collide = np.zeros(n)
    for i in np.flatnonzero(active):
        for j in range(n):
            if j != i and np.linalg.norm(new.pos[i] - new.pos[j]) < cfg.d_safe:
                collide[i] = 1.0

    new.mode_steps = state.mode_steps + 1
    arrived = active & (mode == RTH) & (dis_after < cfg.d_end)
    depleted = active & np.array([lg.depleted for lg in new.ledgers])
    rth_timeout = active & (mode == RTH) & (new.mode_steps * cfg.dt >= cfg.t_r_end)
    done_tr = arrived | depleted | rth_timeout
    # leftover charge on arrival is wasted; a failed return loses the whole battery
    failed = (depleted | rth_timeout) & ~arrived
    waste = np.where(arrived, e_after, np.where(failed, 1.0, 0.0))

    reward = np.zeros(n)
    for i in np.flatnonzero(active):
        common = a[0] * collected[i] + a[1] * (h_before[i] - h_after[i]) - a[2] * float(clamped[i]) \
            + a[5] * (du_before[i] - du_after[i])
        if mode[i] == COL:
            reward[i] = common - a[3] * collide[i] - a[4] * waste[i]
        else:
            reward[i] = common + a[6] * (e_after[i] - e_before[i]) + a[7] * (dis_before[i] - dis_after[i]) \
                - a[4] * waste[i]

    switched = np.zeros(n, dtype=bool)
    col_live = active & (mode == COL) & ~done_tr
    if col_live.any():
        timed_out = col_live & (new.mode_steps * cfg.dt >= cfg.t_f_end)
        short = np.zeros(n, dtype=bool)
        if energy_to_return is not None:
            need = np.asarray(energy_to_return(bpn_state(new.pos, m.ds[:n], cfg)), dtype=np.float64).ravel()
            br = np.array([lg.br for lg in new.ledgers])
            short = col_live & (br < cfg.bpn_margin * need)
        switched = timed_out | short
    new.mode = np.where(switched, RTH, mode)
    new.mode_steps = np.where(switched, 0, new.mode_steps)
    new.done = state.done | done_tr
    new.arrived = state.arrived | arrived
    return StepResult(new, reward, done_tr, active, mode, collected, switched)


def mean_aoi(aoi_history) -> float:
    return float(np.mean(aoi_history)) if len(aoi_history) else 0.0


# ---------------------------------------------------------------- feature inputs

NODE_DIM = 6  # one-hot UAV/WS, position (3), scalar


def graph_nodes(state: AgriState, m: AgriMap, cfg: ExperimentConfig) -> np.ndarray:
    L = cfg.extent
    lo = np.asarray(cfg.lo[:2] + (0.0,))
    uav = [[1, 0, *((p - lo) / L), lg.br / lg.bc] for p, lg in zip(state.pos, state.ledgers)]
    ws = [[0, 1, *((w[:3] - lo) / L), a] for w, a in zip(m.ws, state.aoi)]
    return np.array(uav + ws, dtype=np.float64)


def max_nodes(cfg: ExperimentConfig) -> int:
    return cfg.n_uav + cfg.n_ws


POINT_DIM = 5  # position (3), update interval, AoI


def point_array(aoi, m: AgriMap, cfg: ExperimentConfig) -> np.ndarray:
    L = cfg.extent
    lo = np.asarray(cfg.lo[:2] + (0.0,))
    tmax = max(cfg.t_update)
    return np.array([[*((w[:3] - lo) / L), w[3] / tmax, a] for w, a in zip(m.ws, aoi)],
                    dtype=np.float64).reshape(-1, POINT_DIM)


def scripted_return(state_pos, ds, cfg: ExperimentConfig) -> np.ndarray:
    """Straight-line return at maximum speed toward the docking station, holding altitude."""
    off = np.asarray(ds, dtype=np.float64)[:2] - np.asarray(state_pos, dtype=np.float64)[:2]
    d = float(np.linalg.norm(off))
    v = np.zeros(3)
    if d > 1e-9:
        speed = min(cfg.v_max_x, d / cfg.dt)
        v[:2] = off / d * speed
    return v
