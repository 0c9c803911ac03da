"""Urban delivery + MEC world: procedural city maps and the concurrent PRI/SEC MDP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import radio
from .config import ExperimentConfig
from .energy import EnergyLedger, accumulate, flight_power, integrate_motion
from .errors import ContractError

MAP_HEADER = "FMEAC-MAP urban v1"
STREET_PERIOD = 5
GD_HEIGHT = 1.5
BS_MAST = 5.0
SINR_DB_FLOOR = -100.0


@dataclass
class UrbanMap:
    seed: int
    cell_size: float
    origin: tuple[float, float]
    heights: np.ndarray          # (nx, ny) building heights in m, 0 = street
    bs: np.ndarray               # (n_bs, 4): x, y, z, first-sector azimuth (deg)
    gd: np.ndarray               # (n_gd, 4): x, y, z, request rate
    pd_traces: list[np.ndarray]  # each (n_wp, 4): t, x, y, z
    pd_rates: np.ndarray         # (n_pd,)
    uav: np.ndarray              # (n_uav, 6): start xyz, end xyz

    @property
    def n_bs(self):
        return len(self.bs)

    @property
    def n_gd(self):
        return len(self.gd)

    @property
    def n_pd(self):
        return len(self.pd_traces)

    def height_at(self, x, y):
        ix = np.clip(((np.asarray(x) - self.origin[0]) // self.cell_size).astype(int), 0, self.heights.shape[0] - 1)
        iy = np.clip(((np.asarray(y) - self.origin[1]) // self.cell_size).astype(int), 0, self.heights.shape[1] - 1)
        return self.heights[ix, iy]

    def pd_positions(self, t: float) -> np.ndarray:
        out = np.zeros((self.n_pd, 3))
        for p, tr in enumerate(self.pd_traces):
            out[p] = [np.interp(t, tr[:, 0], tr[:, c]) for c in (1, 2, 3)]
        return out

    def device_positions(self, t: float) -> np.ndarray:
        return np.concatenate([self.gd[:, :3], self.pd_positions(t)], axis=0)


# ---------------------------------------------------------------- generation

def generate_map(seed: int, cfg: ExperimentConfig) -> UrbanMap:
    """Manhattan-grid city: streets every ``STREET_PERIOD`` cells, buildings between."""
    rng = np.random.default_rng([int(seed), 1])
    cs = cfg.cell_size
    nx = int(math.ceil((cfg.x_max - cfg.x_min) / cs))
    ny = int(math.ceil((cfg.y_max - cfg.y_min) / cs))
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    street = (ix % STREET_PERIOD == 0) | (iy % STREET_PERIOD == 0)
    built = (~street) & (rng.random((nx, ny)) < 0.7)
    heights = np.where(built, rng.uniform(cfg.building_min, cfg.building_max, (nx, ny)), 0.0)

    def cell_point(cells):
        k = rng.integers(len(cells))
        cx, cy = cells[k]
        x = cfg.x_min + (cx + rng.random()) * cs
        y = cfg.y_min + (cy + rng.random()) * cs
        return min(x, cfg.x_max), min(y, cfg.y_max)

    roofs = np.argwhere(built)
    streets = np.argwhere(street)
    n_bs = int(rng.integers(cfg.n_bs_min, cfg.n_bs_max + 1))
    bs = np.zeros((n_bs, 4))
    for b in range(n_bs):
        cells = roofs if len(roofs) else streets
        x, y = cell_point(cells)
        h = heights[min(int((x - cfg.x_min) // cs), nx - 1), min(int((y - cfg.y_min) // cs), ny - 1)]
        bs[b] = [x, y, h + BS_MAST, rng.uniform(0.0, 120.0)]

    n_gd = int(rng.integers(cfg.gd_min, cfg.gd_max + 1))
    gd = np.zeros((n_gd, 4))
    for j in range(n_gd):
        x, y = cell_point(streets)
        gd[j] = [x, y, GD_HEIGHT, rng.uniform(0.5, 2.0)]

    n_pd = int(rng.integers(cfg.pd_min, cfg.pd_max + 1))
    horizon = cfg.k_end * cfg.dt
    traces, rates = [], np.zeros(n_pd)
    for p in range(n_pd):
        x, y = cell_point(streets)
        t, pts = 0.0, [[0.0, x, y, GD_HEIGHT]]
        while t < horizon:
            nxp, nyp = cell_point(streets)
            dist = math.hypot(nxp - x, nyp - y)
            t += max(dist / cfg.pd_speed, cfg.dt)
            x, y = nxp, nyp
            pts.append([t, x, y, GD_HEIGHT])
        traces.append(np.array(pts))
        rates[p] = rng.uniform(0.5, 2.0)

    width = min(cfg.x_max - cfg.x_min, cfg.y_max - cfg.y_min)
    uav = np.zeros((cfg.n_uav, 6))
    for i in range(cfg.n_uav):
        while True:
            a = rng.uniform(cfg.lo, cfg.hi)
            b = rng.uniform(cfg.lo, cfg.hi)
            if np.linalg.norm(a[:2] - b[:2]) >= 0.5 * width:
                break
        uav[i] = np.concatenate([a, b])
    return UrbanMap(int(seed), cs, (cfg.x_min, cfg.y_min), heights, bs, gd, traces, rates, uav)


# ---------------------------------------------------------------- map file

def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_map(m: UrbanMap) -> str:
    lines = [MAP_HEADER, f"seed {m.seed}",
             f"cell {_fmt(m.cell_size)} {_fmt(m.origin[0])} {_fmt(m.origin[1])}", "[grid]"]
    lines += [" ".join(_fmt(h) for h in row) for row in m.heights]
    lines.append("[bs]")
    lines += [" ".join(_fmt(v) for v in row) for row in m.bs]
    lines.append("[gd]")
    lines += [" ".join(_fmt(v) for v in row) for row in m.gd]
    lines.append("[pd_trace]")
    for p, tr in enumerate(m.pd_traces):
        wps = " ".join(f"{_fmt(t)},{_fmt(x)},{_fmt(y)},{_fmt(z)}" for t, x, y, z in tr)
        lines.append(f"{_fmt(m.pd_rates[p])} {wps}")
    lines.append("[uav]")
    lines += [" ".join(_fmt(v) for v in row) for row in m.uav]
    return "\n".join(lines) + "\n"


def _sections(text: str, header: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise ContractError(f"expected map header {header!r}")
    meta, sections, cur = {}, {}, None
    for line in lines[1:]:
        s = line.strip()
        if not s:
            continue
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1]
            sections[cur] = []
        elif cur is None:
            key, *vals = s.split()
            meta[key] = vals
        else:
            sections[cur].append(s)
    return meta, sections


def _rows(lines, width):
    return np.array([[float(v) for v in ln.split()] for ln in lines]).reshape(len(lines), width)


def loads_map(text: str) -> UrbanMap:
    meta, sec = _sections(text, MAP_HEADER)
    cs, ox, oy = (float(v) for v in meta["cell"])
    heights = np.array([[float(v) for v in ln.split()] for ln in sec["grid"]])
    traces, rates = [], []
    for ln in sec.get("pd_trace", []):
        rate, *wps = ln.split()
        rates.append(float(rate))
        traces.append(np.array([[float(c) for c in wp.split(",")] for wp in wps]))
    return UrbanMap(int(meta["seed"][0]), cs, (ox, oy), heights,
                    _rows(sec.get("bs", []), 4), _rows(sec.get("gd", []), 4),
                    traces, np.array(rates), _rows(sec.get("uav", []), 6))


# ---------------------------------------------------------------- geometry

def los_test(m: UrbanMap, p1, p2) -> bool:
    """Exact segment-vs-heightfield test by walking every grid cell the segment crosses.

    Altitude is linear along the segment, so its minimum inside a cell is at
    the cell entry or exit; the link is blocked when that minimum is below
    the cell's building height.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    cs = m.cell_size
    nx, ny = m.heights.shape
    a = (p1[:2] - m.origin) / cs
    d = (p2[:2] - p1[:2]) / cs
    ts = [0.0, 1.0]
    for axis, n in ((0, nx), (1, ny)):
        if d[axis] != 0.0:
            lo, hi = sorted((a[axis], a[axis] + d[axis]))
            lines = np.arange(math.floor(lo) + 1, math.ceil(hi))
            ts.extend(((lines - a[axis]) / d[axis]).tolist())
    t = np.unique(np.clip(ts, 0.0, 1.0))
    mid = 0.5 * (t[:-1] + t[1:]) if len(t) > 1 else t
    cx = np.clip(np.floor(a[0] + mid * d[0]).astype(int), 0, nx - 1)
    cy = np.clip(np.floor(a[1] + mid * d[1]).astype(int), 0, ny - 1)
    z = p1[2] + t * (p2[2] - p1[2])
    zmin = np.minimum(z[:-1], z[1:]) if len(t) > 1 else z
    return bool(np.all(zmin >= m.heights[cx, cy]))


def link_path_loss(m: UrbanMap, cfg: ExperimentConfig, p_air, p_ground, f_c) -> float:
    d = max(float(np.linalg.norm(np.asarray(p_air) - np.asarray(p_ground))), 1.0)
    if los_test(m, p_air, p_ground):
        return float(radio.path_loss(d, f_c, True))
    h = max(float(p_air[2]), 1.0)
    pl = float(radio.path_loss(d, f_c, False, h, cfg.nlos_coefficient))
    if cfg.nlos_floor_los:
        pl = max(pl, float(radio.path_loss(d, f_c, True)))
    return pl


# ---------------------------------------------------------------- state

@dataclass
class UrbanState:
    pos: np.ndarray            # (n_uav, 3)
    vel: np.ndarray            # (n_uav, 3)
    ledgers: list[EnergyLedger]
    done: np.ndarray           # (n_uav,) bool
    k: int = 0
    links: list[np.ndarray] = field(default_factory=list)    # connected device ids per UAV
    link_sinr: list[np.ndarray] = field(default_factory=list)
    link_pl: list[np.ndarray] = field(default_factory=list)
    sinr_ub: np.ndarray = None  # serving SINR (linear) per UAV
    qos: np.ndarray = None      # Q_S per UAV
    arrival_step: np.ndarray = None

    def copy(self) -> "UrbanState":
        return replace(self, pos=self.pos.copy(), vel=self.vel.copy(), ledgers=list(self.ledgers),
                       done=self.done.copy(), links=[a.copy() for a in self.links],
                       link_sinr=[a.copy() for a in self.link_sinr],
                       link_pl=[a.copy() for a in self.link_pl],
                       sinr_ub=self.sinr_ub.copy(), qos=self.qos.copy(),
                       arrival_step=self.arrival_step.copy())


def _bs_sinr(m: UrbanMap, cfg: ExperimentConfig, p) -> float:
    if m.n_bs == 0:
        return 0.0
    ant = cfg.antenna
    powers = []
    for bx, by, bz, az0 in m.bs:
        pl = link_path_loss(m, cfg, p, (bx, by, bz), cfg.f_bs)
        dx, dy, dz = p[0] - bx, p[1] - by, p[2] - bz
        azimuth = math.degrees(math.atan2(dy, dx))
        zenith = math.degrees(math.atan2(math.hypot(dx, dy), dz))
        for s in range(3):
            g = float(radio.antenna_gain(radio.wrap_deg(azimuth - (az0 + 120.0 * s)), zenith, ant))
            powers.append(float(radio.dbm_to_watt(cfg.pw_bt_dbm + g - pl)))
    powers = np.array(powers)
    s = powers.max()
    return float(s / (powers.sum() - s + cfg.noise_w))


def device_path_losses(m: UrbanMap, cfg: ExperimentConfig, p, devices) -> np.ndarray:
    return np.array([link_path_loss(m, cfg, p, q, cfg.f_iot) for q in devices])


def associate_iot(pl: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Top-m devices by received power; ties go to the lowest device id."""
    if len(pl) == 0:
        return np.zeros(0, dtype=int)
    p0 = float(radio.dbm_to_watt(cfg.pw_it_dbm)) * radio.db_to_linear(cfg.g_iot_db - pl)
    order = np.argsort(-p0, kind="stable")
    return order[:cfg.uplink_limit]


def iot_link_sinr(pl: np.ndarray, links: np.ndarray, delta: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Per-link SINR with UAV-side power shares ``delta`` (one per link slot)."""
    if len(links) == 0:
        return np.zeros(0)
    gain = radio.db_to_linear(cfg.g_iot_db - pl)
    p_it = float(radio.dbm_to_watt(cfg.pw_it_dbm))
    p_ur = float(radio.dbm_to_watt(cfg.pw_ur_dbm))
    base = p_it * gain
    interference = base.sum() - base[links].sum()
    signal = (np.asarray(delta[:len(links)]) * p_ur + p_it) * gain[links]
    return signal / (interference + cfg.noise_w)


def qos(link_sinr: np.ndarray) -> float:
    """Summed spectral efficiency over the UAV's connected devices."""
    return float(np.sum(np.log2(1.0 + np.asarray(link_sinr))))


def _radio_update(m, cfg, state: UrbanState, deltas):
    devices = m.device_positions(state.k * cfg.dt)
    links, sinrs, pls = [], [], []
    sinr_ub = np.zeros(cfg.n_uav)
    q = np.zeros(cfg.n_uav)
    for i in range(cfg.n_uav):
        p = state.pos[i]
        pl = device_path_losses(m, cfg, p, devices)
        ln = associate_iot(pl, cfg)
        s = iot_link_sinr(pl, ln, deltas[i], cfg)
        links.append(ln)
        sinrs.append(s)
        pls.append(pl[ln])
        sinr_ub[i] = _bs_sinr(m, cfg, p)
        q[i] = qos(s)
    state.links, state.link_sinr, state.link_pl = links, sinrs, pls
    state.sinr_ub, state.qos = sinr_ub, q


def reset(m: UrbanMap, cfg: ExperimentConfig) -> UrbanState:
    n = cfg.n_uav
    ledger = EnergyLedger(cfg.battery_capacity, pw_cmp=cfg.pw_cmp, pw_ut_dbm=cfg.pw_ut_dbm, pw_ur_dbm=cfg.pw_ur_dbm)
    st = UrbanState(pos=m.uav[:, :3].copy(), vel=np.zeros((n, 3)), ledgers=[ledger] * n,
                    done=np.zeros(n, dtype=bool), k=0, arrival_step=np.full(n, -1))
    uniform = np.full((n, cfg.uplink_limit), cfg.epsilon_alloc / cfg.uplink_limit)
    _radio_update(m, cfg, st, uniform)
    return st


def sinr_db(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.maximum(10.0 * np.log10(x), SINR_DB_FLOOR)


def dest_distance(m, state):
    return np.linalg.norm(state.pos - m.uav[:, 3:6], axis=1)


def nearest_uav(state):
    """Index and distance of the nearest other UAV (-1 and 0 when alone)."""
    n = len(state.pos)
    idx = np.full(n, -1)
    dist = np.zeros(n)
    for i in range(n):
        best = math.inf
        for j in range(n):
            if j != i:
                d = float(np.linalg.norm(state.pos[i] - state.pos[j]))
                if d < best:
                    best, idx[i] = d, j
        dist[i] = best if idx[i] >= 0 else 0.0
    return idx, dist


def height_dev(cfg, state):
    return np.abs(state.pos[:, 2] - 0.5 * (cfg.z_min + cfg.z_max))


def obs_dim(cfg: ExperimentConfig, feature_dim: int = 0) -> int:
    return 12 + 4 * cfg.uplink_limit + feature_dim


def observe(state: UrbanState, m: UrbanMap, cfg: ExperimentConfig, i: int, f_env=None) -> np.ndarray:
    """Observation of UAV ``i``; the feature block is appended when ``f_env`` is given."""
    L = cfg.extent
    lo = np.asarray(cfg.lo)
    p = state.pos[i]
    dest = m.uav[i, 3:6]
    near, dist = nearest_uav(state)
    rel = (state.pos[near[i]] - p) / L if near[i] >= 0 else np.zeros(3)
    parts = [(p - lo) / L, (dest - lo) / L, [np.linalg.norm(dest - p) / L, dist[i] / L], rel,
             [float(sinr_db(state.sinr_ub[i])) / 10.0]]
    iot = np.zeros((cfg.uplink_limit, 4))
    devices = m.device_positions(state.k * cfg.dt)
    for s, j in enumerate(state.links[i]):
        iot[s, :3] = (devices[j] - p) / L
        iot[s, 3] = state.link_pl[i][s] / 100.0
    parts.append(iot.ravel())
    if f_env is not None:
        parts.append(np.asarray(f_env, dtype=np.float64))
    return np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in parts])


def shape_action(raw, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Split an action row into clipped velocity and a feasible power split."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 3 + cfg.uplink_limit:
        raise ContractError(f"urban action must have {3 + cfg.uplink_limit} entries, got {raw.shape[-1]}")
    v = np.clip(raw[:3], -np.asarray(cfg.v_max), np.asarray(cfg.v_max))
    delta = np.clip(raw[3:], 0.0, None)
    total = delta.sum()
    if total > cfg.epsilon_alloc:
        delta = delta * (cfg.epsilon_alloc / total)
    return v, delta


@dataclass
class StepResult:
    state: UrbanState
    reward: np.ndarray
    reward_sec: np.ndarray
    done: np.ndarray         # per-UAV termination of this transition
    active: np.ndarray       # UAVs that acted this step
    terms: np.ndarray        # (n_uav, 7) alpha-weighted PRI terms


def step(state: UrbanState, m: UrbanMap, cfg: ExperimentConfig, actions, rng=None) -> StepResult:
    """Advance one ``dt``. Done UAVs are frozen and emit no reward."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (cfg.n_uav, 3 + cfg.uplink_limit):
        raise ContractError(f"expected actions of shape {(cfg.n_uav, 3 + cfg.uplink_limit)}, got {actions.shape}")
    a = cfg.alphas
    active = ~state.done
    new = state.copy()
    new.k = state.k + 1
    d_before = dest_distance(m, state)
    h_before = height_dev(cfg, state)
    _, du_before = nearest_uav(state)
    sinr_before = sinr_db(state.sinr_ub)
    ec_before = np.array([lg.ec for lg in state.ledgers])
    q_before = state.qos.copy()

    deltas = np.zeros((cfg.n_uav, cfg.uplink_limit))
    clamped = np.zeros(cfg.n_uav, dtype=bool)
    for i in np.flatnonzero(active):
        v, deltas[i] = shape_action(actions[i], cfg)
        new.pos[i], clamped[i] = integrate_motion(state.pos[i], v, cfg.dt, cfg.lo, cfg.hi)
        new.vel[i] = v
    for i in np.flatnonzero(~active):
        new.vel[i] = 0.0
    _radio_update(m, cfg, new, deltas)
    for i in np.flatnonzero(active):
        comm = bool(len(new.links[i])) or not cfg.comm_gating
        new.ledgers[i] = accumulate(state.ledgers[i], cfg.dt, flight_power(new.vel[i], cfg.body), comm, True)

    d_after = dest_distance(m, new)
    h_after = height_dev(cfg, new)
    _, du_after = nearest_uav(new)
    ec_after = np.array([lg.ec for lg in new.ledgers])
    penalty = np.zeros(cfg.n_uav)
    for i in np.flatnonzero(active):
        hit = clamped[i] or new.pos[i, 2] < float(m.height_at(new.pos[i, 0], new.pos[i, 1]))
        for j in range(cfg.n_uav):
            if j != i and np.linalg.norm(new.pos[i] - new.pos[j]) < cfg.d_safe:
                hit = True
        penalty[i] = -1.0 if hit else 0.0
    terms = np.stack([
        a[0] * (d_before - d_after),
        a[1] * (h_before - h_after),
        a[2] * (sinr_db(new.sinr_ub) - sinr_before),
        a[3] * (ec_before - ec_after),
        a[4] * (q_before - new.qos) * (1.0 if cfg.sec_in_pri else 0.0),
        a[5] * penalty,
        a[6] * (du_before - du_after),
    ], axis=1)
    terms[~active] = 0.0
    reward = terms.sum(axis=1)
    reward_sec = np.where(active, a[7] * new.qos, 0.0)

    arrived = active & (d_after < cfg.d_end)
    new.arrival_step = np.where(arrived & (state.arrival_step < 0), new.k, state.arrival_step)
    timeout = new.k >= cfg.k_end
    done_tr = active & (arrived | timeout)
    new.done = state.done | arrived | timeout
    return StepResult(new, reward, reward_sec, done_tr, active, terms)


def completion_time(state: UrbanState, cfg: ExperimentConfig) -> np.ndarray:
    """Arrival time per UAV in seconds; UAVs that never arrived count the full horizon."""
    steps = np.where(state.arrival_step >= 0, state.arrival_step, cfg.k_end)
    return steps * cfg.dt


# ---------------------------------------------------------------- feature inputs

NODE_DIM = 8  # one-hot UAV/BS/GD/PD, position (3), scalar


def graph_nodes(state: UrbanState, m: UrbanMap, cfg: ExperimentConfig) -> np.ndarray:
    L = cfg.extent
    lo = np.asarray(cfg.lo[:2] + (0.0,))
    devices_pd = m.pd_positions(state.k * cfg.dt)
    rows = []
    for i in range(cfg.n_uav):
        rows.append([1, 0, 0, 0, *((state.pos[i] - lo) / L), state.ledgers[i].br / state.ledgers[i].bc])
    for b in m.bs:
        rows.append([0, 1, 0, 0, *((b[:3] - lo) / L), 0.0])
    for g in m.gd:
        rows.append([0, 0, 1, 0, *((g[:3] - lo) / L), 0.0])
    for p in devices_pd:
        rows.append([0, 0, 0, 1, *((p - lo) / L), 0.0])
    return np.array(rows, dtype=np.float64)


def max_nodes(cfg: ExperimentConfig) -> int:
    return cfg.n_uav + cfg.n_bs_max + cfg.gd_max + cfg.pd_max


POINT_DIM = 5  # position (3), device type, request rate


def point_array(state_k: int, m: UrbanMap, cfg: ExperimentConfig) -> np.ndarray:
    L = cfg.extent
    lo = np.asarray(cfg.lo[:2] + (0.0,))
    pts = [[*((g[:3] - lo) / L), 0.0, g[3]] for g in m.gd]
    pts += [[*((p - lo) / L), 1.0, r] for p, r in zip(m.pd_positions(state_k * cfg.dt), m.pd_rates)]
    return np.array(pts, dtype=np.float64).reshape(-1, POINT_DIM)
