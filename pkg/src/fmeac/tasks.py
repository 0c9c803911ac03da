"""Uniform adapters over the urban and agricultural environments.

The trainer talks to a task through normalized actions: velocity entries in
[-1, 1] (scaled by ``v_max`` here) followed by the power split, if any.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import agri, urban
from .config import ExperimentConfig
from .energy import flight_power, integrate_motion


@dataclass
class Outcome:
    state: object
    reward: np.ndarray       # primary reward per UAV
    reward_sec: np.ndarray   # secondary reward per UAV
    done: np.ndarray         # terminal flag of this transition
    active: np.ndarray       # UAVs that acted this step
    w_pri: np.ndarray        # primary critic weight per transition
    w_sec: np.ndarray        # secondary critic weight per transition
    handoff: np.ndarray      # primary target bootstraps from the secondary critics


class UrbanTask:
    application = "urban"
    vel_dim = 3
    node_dim = urban.NODE_DIM
    point_dim = urban.POINT_DIM
    actor_sees_feature = True

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.alloc_dim = cfg.uplink_limit
        self.obs_dim = urban.obs_dim(cfg, 0)
        self.n_agents = cfg.n_uav
        self.max_nodes = urban.max_nodes(cfg)
        self.max_steps = cfg.k_end

    def make_map(self, seed):
        return urban.generate_map(seed, self.cfg)

    def reset(self, m):
        return urban.reset(m, self.cfg)

    def observe(self, state, m, i):
        return urban.observe(state, m, self.cfg, i)

    def graph(self, state, m):
        return urban.graph_nodes(state, m, self.cfg)

    def points(self, state, m):
        return urban.point_array(state.k, m, self.cfg)

    def finished(self, state):
        return bool(state.done.all())

    def positions(self, state):
        return state.pos

    def step(self, state, m, actions, rng, bpn=None) -> Outcome:
        raw = np.array(actions, dtype=np.float64)
        raw[:, :3] *= np.asarray(self.cfg.v_max)
        res = urban.step(state, m, self.cfg, raw, rng)
        ones = np.ones(self.n_agents)
        return Outcome(res.state, res.reward, res.reward_sec, res.done, res.active,
                       ones, ones, np.zeros(self.n_agents, dtype=bool))

    def episode_metrics(self, state, history) -> tuple[float, float]:
        """(mean per-step QoS summed over UAVs, mean completion time in s)."""
        q = float(np.mean([h.qos.sum() for h in history])) if history else 0.0
        return q, float(np.mean(urban.completion_time(state, self.cfg)))


class AgriTask:
    application = "agri"
    vel_dim = 3
    alloc_dim = 0
    node_dim = agri.NODE_DIM
    point_dim = agri.POINT_DIM
    actor_sees_feature = False

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.obs_dim = agri.agent_obs_dim(cfg)
        self.n_agents = cfg.n_uav
        self.max_nodes = agri.max_nodes(cfg)
        self.max_steps = int(np.ceil((cfg.t_f_end + cfg.t_r_end) / cfg.dt)) + 1

    def make_map(self, seed):
        return agri.generate_map(seed, self.cfg)

    def reset(self, m):
        return agri.reset(m, self.cfg)

    def observe(self, state, m, i):
        return agri.agent_observation(state, m, self.cfg, i)

    def graph(self, state, m):
        return agri.graph_nodes(state, m, self.cfg)

    def points(self, state, m):
        return agri.point_array(state.aoi, m, self.cfg)

    def finished(self, state):
        return bool(state.done.all()) or state.k >= self.max_steps

    def positions(self, state):
        return state.pos

    def step(self, state, m, actions, rng, bpn=None) -> Outcome:
        raw = np.asarray(actions, dtype=np.float64)[:, :3] * np.asarray(self.cfg.v_max)
        res = agri.step(state, m, self.cfg, raw, rng, energy_to_return=bpn)
        cut = res.state.k >= self.max_steps
        done = res.done | (cut & res.active)
        col = (res.mode == agri.COL).astype(np.float64)
        reward_sec = res.reward
        if not self.cfg.secondary_critics:
            w_pri, w_sec = np.ones_like(col), np.zeros_like(col)
            handoff = np.zeros_like(res.switched)
        elif self.cfg.critic_split == "partial":
            w_pri, w_sec = np.ones_like(col), np.ones_like(col)
            handoff = np.zeros_like(res.switched)
            reward_sec = res.reward * (1.0 - col)
        else:
            w_pri, w_sec = col, 1.0 - col
            handoff = res.switched
        return Outcome(res.state, res.reward, reward_sec, done, res.active, w_pri, w_sec, handoff)

    def episode_metrics(self, state, history) -> tuple[float, float]:
        """(mean sensor AoI over the episode, mission time in s)."""
        aoi = agri.mean_aoi([h.aoi.mean() for h in history])
        return aoi, float(state.k * self.cfg.dt)


def make_task(cfg: ExperimentConfig):
    return UrbanTask(cfg) if cfg.application == "urban" else AgriTask(cfg)


def random_actions(task, rng) -> np.ndarray:
    """Warm-up actions: uniform velocity and a random feasible power split."""
    n = task.n_agents
    vel = rng.uniform(-1.0, 1.0, (n, task.vel_dim))
    if task.alloc_dim == 0:
        return vel
    split = rng.dirichlet(np.ones(task.alloc_dim), size=n) * task.cfg.epsilon_alloc
    return np.concatenate([vel, split], axis=1)


# ---------------------------------------------------------------- pretraining datasets

def pan_dataset(task, maps, rng, snapshots: int = 10) -> list[np.ndarray]:
    """Point arrays sampled along ``pan_traces`` random-policy traces per training map."""
    cfg = task.cfg
    out = []
    for m in maps:
        for _ in range(cfg.pan_traces):
            state = task.reset(m)
            horizon = min(task.max_steps, cfg.k_end if task.application == "urban" else task.max_steps)
            marks = set(np.sort(rng.choice(horizon, size=min(snapshots, horizon), replace=False)).tolist())
            for k in range(horizon):
                if k in marks:
                    out.append(task.points(state, m))
                if task.finished(state):
                    break
                state = task.step(state, m, random_actions(task, rng), rng).state
    return out


def return_energy(pos, ds, cfg: ExperimentConfig, max_steps: int = 10000) -> float:
    """Energy (J) the scripted straight-line return spends to reach the docking-station radius.

    The step that crosses the ``d_end`` radius is charged only for the fraction
    of ``dt`` needed to reach it, so the label is continuous in position.
    """
    p = np.asarray(pos, dtype=np.float64).copy()
    ds = np.asarray(ds, dtype=np.float64)
    energy = 0.0
    for _ in range(max_steps):
        d0 = float(np.linalg.norm(p[:2] - ds[:2]))
        if d0 < cfg.d_end:
            break
        v = agri.scripted_return(p, ds, cfg)
        p, _ = integrate_motion(p, v, cfg.dt, cfg.lo, cfg.hi)
        d1 = float(np.linalg.norm(p[:2] - ds[:2]))
        frac = 1.0 if d1 >= cfg.d_end else (d0 - cfg.d_end) / max(d0 - d1, 1e-12)
        energy += (flight_power(v, cfg.body) + cfg.pw_cmp) * cfg.dt * frac
    return energy


def bpn_dataset(cfg: ExperimentConfig, maps, rng, n: int):
    """(states, energy-to-return labels) from uniformly sampled positions on the training maps."""
    states, labels = [], []
    lo, hi = np.asarray(cfg.lo), np.asarray(cfg.hi)
    for s in range(n):
        m = maps[s % len(maps)]
        ds = m.ds[0]
        pos = rng.uniform(lo, hi)
        states.append(agri.bpn_state(pos, ds, cfg)[0])
        labels.append(return_energy(pos, ds, cfg))
    return np.array(states), np.array(labels)
