"""Enhanced actor-critic: replay buffer, four critics with targets, actor updates, training loop."""
from __future__ import annotations

import time

import numpy as np

from . import checkpoint
from .config import ExperimentConfig
from .errors import DimensionError, NumericError
from .features import GnnModel, pad_graphs
from .nn import Adam, DenseNet, gaussian, gaussian_sample, gaussian_sample_grads, linear, softmax, tanh_scaled
from .tasks import random_actions

CRITICS = ("P1", "P2", "S1", "S2")
METRIC_COLUMNS = ("episode", "steps", "reward_pri", "reward_sec", "loss_qp1", "loss_qp2", "loss_qs1",
                  "loss_qs2", "loss_actor", "qos_or_aoi", "completion_time_s", "wall_ms")


class ReplayBuffer:
    """FIFO ring buffer of named per-transition arrays, grown on demand up to ``capacity``."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.data: dict[str, np.ndarray] = {}
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def _grow(self, needed):
        cur = next(iter(self.data.values())).shape[0]
        if needed <= cur:
            return
        new = min(self.capacity, max(needed, 2 * cur))
        for k, v in self.data.items():
            arr = np.zeros((new,) + v.shape[1:], dtype=v.dtype)
            arr[:cur] = v
            self.data[k] = arr

    def add(self, **fields):
        if not self.data:
            for k, v in fields.items():
                v = np.asarray(v)
                self.data[k] = np.zeros((min(self.capacity, 1024),) + v.shape, dtype=v.dtype)
        elif fields.keys() != self.data.keys():
            raise DimensionError(f"transition fields {sorted(fields)} != buffer fields {sorted(self.data)}")
        if self.size < self.capacity:
            self._grow(self.size + 1)
        for k, v in fields.items():
            self.data[k][self.head] = v
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        idx = rng.integers(0, self.size, size=batch)
        return {k: v[idx] for k, v in self.data.items()}


class EacAgent:
    """Shared actor plus primary/secondary twin critics over ``[o, a, f_env]``.

    Actions are normalized: velocity in [-1, 1], then an optional power split
    summing to ``epsilon_alloc``.
    """

    def __init__(self, cfg: ExperimentConfig, obs_dim: int, vel_dim: int = 3, alloc_dim: int = 0,
                 feat_dim: int = 0, actor_sees_feature: bool = False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.obs_dim, self.vel_dim, self.alloc_dim, self.feat_dim = obs_dim, vel_dim, alloc_dim, feat_dim
        self.act_dim = vel_dim + alloc_dim
        self.actor_sees_feature = actor_sees_feature and feat_dim > 0
        self.maxent = cfg.actor_mode == "maxent"
        self.secondary = cfg.secondary_critics
        hidden = [cfg.hidden_width] * cfg.hidden_layers
        heads = [gaussian(vel_dim) if self.maxent else tanh_scaled(vel_dim, 1.0)]
        if alloc_dim:
            heads.append(softmax(alloc_dim, cfg.epsilon_alloc))
        self.actor_in = obs_dim + (feat_dim if self.actor_sees_feature else 0)
        self.actor = DenseNet(self.actor_in, hidden, heads, rng=rng)
        self.critic_in = obs_dim + self.act_dim + feat_dim
        names = CRITICS if self.secondary else CRITICS[:2]
        self.critics = {n: DenseNet(self.critic_in, hidden, [linear(1)], rng=rng) for n in names}
        self.targets = {n: c.copy() for n, c in self.critics.items()}
        self.actor_opt = Adam(self.actor.params, lr=cfg.lr_actor)
        self.critic_opts = {n: Adam(c.params, lr=cfg.lr_critic_pri if n[0] == "P" else cfg.lr_critic_sec)
                            for n, c in self.critics.items()}
        self.gnn: GnnModel | None = None
        self.gnn_opt: Adam | None = None
        self.n_critic_updates = 0
        self.n_actor_updates = 0

    def attach_gnn(self, gnn: GnnModel):
        self.gnn = gnn
        self.gnn_opt = Adam(gnn.params, lr=self.cfg.lr_gnn)

    # ---- input assembly
    def _actor_x(self, o, f):
        return np.concatenate([o, f], axis=-1) if self.actor_sees_feature else o

    def _critic_x(self, o, a, f):
        return np.concatenate([o, a, f], axis=-1)

    def _split_policy(self, outs, noise=None, rng=None):
        """Actions (and sampling cache) from actor head outputs."""
        if self.maxent:
            mu, log_std = outs[0]
            u, vel, logp, noise = gaussian_sample(mu, log_std, rng=rng, noise=noise)
            cache = (u, log_std, noise)
        else:
            vel, logp, cache = outs[0], np.zeros(np.shape(outs[0])[:-1]), None
        a = np.concatenate([vel, outs[1]], axis=-1) if self.alloc_dim else vel
        return a, logp, cache

    # ---- acting
    def act(self, o, f=None, rng=None, explore=True) -> np.ndarray:
        f = np.zeros(self.feat_dim) if f is None else f
        outs = self.actor.infer(self._actor_x(np.asarray(o, dtype=np.float64), f))
        if self.maxent:
            mu, log_std = outs[0]
            vel = gaussian_sample(mu, log_std, rng=rng)[1] if explore else np.tanh(mu)
        else:
            vel = outs[0]
            if explore:
                vel = np.clip(vel + self.cfg.expl_noise * rng.standard_normal(vel.shape), -1.0, 1.0)
        return np.concatenate([vel, outs[1]], axis=-1) if self.alloc_dim else vel

    def next_actions(self, o2, f2, rng):
        """A' at S' from the current policy; (actions, log-probs)."""
        outs = self.actor.infer(self._actor_x(o2, f2))
        if self.maxent:
            a, logp, _ = self._split_policy(outs, rng=rng)
            return a, logp
        vel = outs[0]
        eps = np.clip(self.cfg.target_noise * rng.standard_normal(vel.shape),
                      -self.cfg.target_noise_clip, self.cfg.target_noise_clip)
        vel = np.clip(vel + eps, -1.0, 1.0)
        a = np.concatenate([vel, outs[1]], axis=-1) if self.alloc_dim else vel
        return a, np.zeros(len(a))

    # ---- targets and critics
    def compute_targets(self, batch, f2, next_a, next_logp):
        """Clipped double-Q targets (Y_P, Y_S); Y_S is None without secondary critics."""
        g = self.cfg.gamma
        x2 = self._critic_x(batch["o2"], next_a, f2)
        q = {n: t.infer(x2)[0][:, 0] for n, t in self.targets.items()}
        min_p = np.minimum(q["P1"], q["P2"])
        keep = g * (1.0 - batch["done"])
        if self.secondary:
            min_s = np.minimum(q["S1"], q["S2"])
            boot_p = np.where(batch["handoff"] > 0, min_s, min_p)
            y_s = batch["r_sec"] + keep * min_s
        else:
            boot_p, y_s = min_p, None
        if self.maxent and self.cfg.entropy_in_target:
            boot_p = boot_p - self.cfg.alpha_temp * next_logp
        return batch["r"] + keep * boot_p, y_s

    def _critic_loss(self, name, x, y, w, grad=False):
        q = self.critics[name].forward(x)[0][:, 0]
        wsum = max(float(w.sum()), 1.0)
        resid = (q - y) * w
        loss = float((resid * (q - y)).sum() / wsum)
        if not grad:
            self.critics[name]._cache = None
            return loss, None, None
        grads, gx = self.critics[name].backward([(2.0 * resid / wsum)[:, None]])
        return loss, grads, gx

    def _weights(self, batch, name):
        return batch["w_pri"] if name[0] == "P" else batch["w_sec"]

    def critic_update(self, batch, f, y_p, y_s) -> dict[str, float]:
        """One Adam step per critic; returns the pre-step losses."""
        x = self._critic_x(batch["o"], batch["a"], f)
        losses = {}
        for name in self.critics:
            y = y_p if name[0] == "P" else y_s
            loss, grads, _ = self._critic_loss(name, x, y, self._weights(batch, name), grad=True)
            if not np.isfinite(loss):
                raise NumericError(f"critic Q_{name} loss is {loss} after {self.n_critic_updates} updates")
            self.critic_opts[name].step(grads)
            losses[name] = loss
        self.n_critic_updates += 1
        return losses

    # ---- actor
    def actor_objective(self, o, f, noise=None, rng=None, grad=False):
        """Mean of Q_P1 (+ Q_S1) (- alpha log pi) at policy actions.

        With ``grad`` returns (J, gradients of -J w.r.t. actor params, dJ/df).
        """
        B = len(o)
        outs = self.actor.forward(self._actor_x(o, f))
        a, logp, cache = self._split_policy(outs, noise=noise, rng=rng)
        x = self._critic_x(o, a, f)
        heads = ("P1", "S1") if self.secondary else ("P1",)
        per = np.zeros(B)
        g_x = np.zeros_like(x)
        for name in heads:
            per = per + self.critics[name].forward(x)[0][:, 0]
            if grad:
                _, gx = self.critics[name].backward([np.full((B, 1), 1.0 / B)])
                g_x += gx
            else:
                self.critics[name]._cache = None
        alpha = self.cfg.alpha_temp if self.maxent else 0.0
        per = per - alpha * logp
        J = float(per.mean())
        if not grad:
            self.actor._cache = None
            return J, None, None
        o_d, A = self.obs_dim, self.act_dim
        g_a = g_x[:, o_d:o_d + A]
        g_f = g_x[:, o_d + A:]
        g_vel, g_alloc = g_a[:, :self.vel_dim], g_a[:, self.vel_dim:]
        if self.maxent:
            u, log_std, noise = cache
            g_mu, g_ls = gaussian_sample_grads(u, log_std, noise, 1.0, g_vel, np.full(B, -alpha / B))
            head_g = [(-g_mu, -g_ls)]
        else:
            head_g = [-g_vel]
        if self.alloc_dim:
            head_g.append(-g_alloc)
        grads, g_in = self.actor.backward(head_g)
        if self.actor_sees_feature:
            g_f = g_f - g_in[:, self.obs_dim:]
        return J, grads, g_f

    def actor_update(self, batch, f, rng) -> float:
        J, grads, _ = self.actor_objective(batch["o"], f, rng=rng, grad=True)
        self.actor_opt.step(grads)
        self.n_actor_updates += 1
        return J

    actor_update_maxent = actor_update
    actor_update_det = actor_update

    def actor_due(self) -> bool:
        if self.maxent:
            return True
        return self.n_critic_updates % max(self.cfg.policy_delay, 1) == 0

    # ---- soft targets
    def soft_update(self, xi: float | None = None):
        xi = self.cfg.tau if xi is None else xi
        for n, c in self.critics.items():
            for k, v in c.params.items():
                t = self.targets[n].params[k]
                t *= 1.0 - xi
                t += xi * v

    # ---- graph features
    def combined_loss(self, batch, f, y_p, y_s, noise=None, rng=None, grad=False):
        """Sum of critic losses plus ``gnn_actor_sign`` times the actor objective at features ``f``."""
        x = self._critic_x(batch["o"], batch["a"], f)
        total, g_f = 0.0, np.zeros_like(f)
        o_a = self.obs_dim + self.act_dim
        for name in self.critics:
            y = y_p if name[0] == "P" else y_s
            loss, _, gx = self._critic_loss(name, x, y, self._weights(batch, name), grad=grad)
            total += loss
            if grad:
                g_f += gx[:, o_a:]
        J, _, gj = self.actor_objective(batch["o"], f, noise=noise, rng=rng, grad=grad)
        sign = self.cfg.gnn_actor_sign
        total += sign * J
        if grad:
            g_f += sign * gj
        return total, (g_f if grad else None)

    def gnn_update(self, batch, y_p, y_s, rng) -> float:
        """One Adam step on the graph model from the combined loss; other networks untouched."""
        f = self.gnn.forward(batch["nodes"], batch["mask"])
        tape = self.gnn._cache
        noise = rng.standard_normal((len(f), self.vel_dim)) if self.maxent else None
        loss, g_f = self.combined_loss(batch, f, y_p, y_s, noise=noise, grad=True)
        self.gnn._cache = tape
        self.gnn_opt.step(self.gnn.backward(g_f))
        return loss

    def batch_features(self, batch):
        """(f, f') for a sampled batch; graph features are recomputed with the current model."""
        if self.feat_dim == 0:
            z = np.zeros((len(batch["r"]), 0))
            return z, z
        if self.gnn is not None:
            f = self.gnn.forward(batch["nodes"], batch["mask"])
            f2 = self.gnn.forward(batch["nodes2"], batch["mask2"])
            self.gnn._cache = None
            return f, f2
        return batch["f"], batch["f2"]

    def update(self, batch, rng) -> dict[str, float]:
        f, f2 = self.batch_features(batch)
        next_a, next_logp = self.next_actions(batch["o2"], f2, rng)
        y_p, y_s = self.compute_targets(batch, f2, next_a, next_logp)
        losses = self.critic_update(batch, f, y_p, y_s)
        if self.actor_due():
            losses["actor"] = self.actor_update(batch, f, rng)
        if self.gnn is not None:
            self.gnn_update(batch, y_p, y_s, rng)
        self.soft_update()
        return losses

    # ---- persistence
    def tensors(self) -> dict[str, np.ndarray]:
        t = {f"actor.{k}": v for k, v in self.actor.params.items()}
        for n in self.critics:
            t |= {f"critic.{n}.{k}": v for k, v in self.critics[n].params.items()}
            t |= {f"target.{n}.{k}": v for k, v in self.targets[n].params.items()}
            t |= self.critic_opts[n].state_tensors(f"opt.{n}")
        t |= self.actor_opt.state_tensors("opt.actor")
        if self.gnn is not None:
            t |= self.gnn.tensors()
            t |= self.gnn_opt.state_tensors("opt.gnn")
        t["agent.counters"] = np.array([self.n_critic_updates, self.n_actor_updates], dtype=np.float64)
        t["agent.dims"] = np.array([self.obs_dim, self.vel_dim, self.alloc_dim, self.feat_dim,
                                    float(self.actor_sees_feature)])
        return {k: np.array(v, copy=True) for k, v in t.items()}

    def load_tensors(self, t):
        dims = t["agent.dims"]
        mine = [self.obs_dim, self.vel_dim, self.alloc_dim, self.feat_dim, float(self.actor_sees_feature)]
        if list(dims) != mine:
            raise DimensionError(f"checkpoint agent dims {list(dims)} do not match {mine}")
        for k in self.actor.params:
            self.actor.params[k][...] = t[f"actor.{k}"]
        for n in self.critics:
            for k in self.critics[n].params:
                self.critics[n].params[k][...] = t[f"critic.{n}.{k}"]
                self.targets[n].params[k][...] = t[f"target.{n}.{k}"]
            self.critic_opts[n].load_state_tensors(f"opt.{n}", t)
        self.actor_opt.load_state_tensors("opt.actor", t)
        if self.gnn is not None:
            for k in self.gnn.params:
                self.gnn.params[k][...] = t[f"gnn.{k}"]
            self.gnn_opt.load_state_tensors("opt.gnn", t)
        self.n_critic_updates, self.n_actor_updates = (int(c) for c in t["agent.counters"])

    def save(self, path):
        checkpoint.save(path, self.tensors(), kind="agent")

    def load(self, path):
        self.load_tensors(checkpoint.load(path, kind="agent"))


# ---------------------------------------------------------------- rollouts

class FeatureSource:
    """Computes the per-step environment feature and what the buffer stores for it."""

    def __init__(self, task, kind: str, pan=None, gnn: GnnModel | None = None):
        self.task, self.kind, self.pan, self.gnn = task, kind, pan, gnn
        self.max_points = task.cfg.pan_max_points

    @property
    def dim(self) -> int:
        return 0 if self.kind == "none" else self.task.cfg.feature_dim

    def observe(self, state, m):
        """(f_env, stored fields) for one environment state."""
        if self.kind == "none":
            return np.zeros(0), {}
        if self.kind == "pan":
            f = self.pan.feature(self.task.points(state, m), self.max_points)
            return f, {"f": f}
        nodes, mask = pad_graphs([self.task.graph(state, m)], self.task.max_nodes)
        f = self.gnn.forward(nodes, mask)[0]
        self.gnn._cache = None
        return f, {"nodes": nodes[0], "mask": mask[0]}


def make_agent(task, cfg: ExperimentConfig, features: FeatureSource, rng) -> EacAgent:
    agent = EacAgent(cfg, task.obs_dim, task.vel_dim, task.alloc_dim, features.dim,
                     task.actor_sees_feature, rng=rng)
    if features.kind == "gnn":
        agent.attach_gnn(features.gnn)
    return agent


def run_episode(task, agent, features, m, rng, *, explore=True, warm=False, buffer=None,
                learn=None, bpn=None, trace=None, timing=None):
    """Roll one episode; returns (episode stats dict, final state, state history)."""
    state = task.reset(m)
    f, stored = features.observe(state, m)
    ret_p = np.zeros(task.n_agents)
    ret_s = np.zeros(task.n_agents)
    history, steps = [], 0
    while not task.finished(state):
        obs = [task.observe(state, m, i) for i in range(task.n_agents)]
        if warm:
            actions = random_actions(task, rng)
        else:
            t0 = time.perf_counter()
            actions = np.stack([agent.act(o, f, rng=rng, explore=explore) for o in obs])
            if timing is not None:
                timing.append((time.perf_counter() - t0) * 1e3 / task.n_agents)
        out = task.step(state, m, actions, rng, bpn=bpn)
        f2, stored2 = features.observe(out.state, m)
        ret_p += out.reward * out.active
        ret_s += out.reward_sec * out.active
        if buffer is not None:
            for i in np.flatnonzero(out.active):
                rec = dict(o=obs[i], a=actions[i], r=out.reward[i], r_sec=out.reward_sec[i],
                           o2=task.observe(out.state, m, i), done=float(out.done[i]),
                           w_pri=out.w_pri[i], w_sec=out.w_sec[i], handoff=float(out.handoff[i]))
                rec |= stored | {k + "2": v for k, v in stored2.items()}
                buffer.add(**rec)
        if trace is not None:
            for i in range(task.n_agents):
                trace.append((steps, i, *task.positions(out.state)[i]))
        state, f, stored = out.state, f2, stored2
        history.append(state)
        steps += 1
        if learn is not None:
            learn()
    metric, ctime = task.episode_metrics(state, history)
    return dict(steps=steps, reward_pri=float(ret_p.mean()), reward_sec=float(ret_s.mean()),
                qos_or_aoi=metric, completion_time_s=ctime), state, history


def train(task, cfg: ExperimentConfig, features: FeatureSource, maps, seed: int, *, bpn=None,
          log=None, agent: EacAgent | None = None):
    """Interact, store, sample and update for ``cfg.episodes`` episodes.

    ``log(row)`` receives one metrics dict per episode. On a non-finite loss a
    :class:`NumericError` is raised carrying ``last_good`` agent tensors.
    """
    init_rng = np.random.default_rng([seed, 12])
    env_rng = np.random.default_rng([seed, 10])
    learn_rng = np.random.default_rng([seed, 11])
    agent = agent or make_agent(task, cfg, features, init_rng)
    buffer = ReplayBuffer(cfg.buffer_size)
    counter = {"steps": 0}
    ep_losses: list[dict] = []

    def learn():
        counter["steps"] += 1
        n = counter["steps"]
        if cfg.update_every <= 0 or n < cfg.warmup_steps or len(buffer) < cfg.batch_size:
            return
        if n % cfg.update_every == 0:
            ep_losses.append(agent.update(buffer.sample(learn_rng, cfg.batch_size), learn_rng))

    rows = []
    last_good = agent.tensors()
    for ep in range(cfg.episodes):
        t0 = time.perf_counter()
        ep_losses.clear()
        warm = counter["steps"] < cfg.warmup_steps
        try:
            stats, _, _ = run_episode(task, agent, features, maps[ep % len(maps)], env_rng, explore=True,
                                      warm=warm, buffer=buffer, learn=learn, bpn=bpn)
        except NumericError as exc:
            exc.last_good = last_good
            exc.episode = ep
            raise
        row = {"episode": ep, **stats}
        for key, name in (("loss_qp1", "P1"), ("loss_qp2", "P2"), ("loss_qs1", "S1"),
                          ("loss_qs2", "S2"), ("loss_actor", "actor")):
            vals = [d[name] for d in ep_losses if name in d]
            row[key] = float(np.mean(vals)) if vals else float("nan")
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3 if cfg.log_wall_time else 0.0
        rows.append({k: row[k] for k in METRIC_COLUMNS})
        if log is not None:
            log(rows[-1])
        last_good = agent.tensors()
    return agent, rows
