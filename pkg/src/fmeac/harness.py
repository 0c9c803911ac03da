"""Experiment pipeline: maps, pretraining, training, evaluation, summary, benchmarks and plot data.

Every stage reads and writes files in one artifact directory and is skipped
when its outputs already exist, so an interrupted run resumes where it
stopped.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import agri, checkpoint, urban
from .config import ExperimentConfig, serialize_config
from .errors import ContractError, FmeacError
from .features import BpnModel, GnnModel, PanModel, bpn_pretrain, pan_pretrain
from .tasks import bpn_dataset, make_task, pan_dataset
from .trainer import METRIC_COLUMNS, EacAgent, FeatureSource, make_agent, run_episode, train

log = logging.getLogger("fmeac")

STAGES = ("gen-maps", "pretrain-pan", "pretrain-bpn", "train", "eval", "summarize")
EVAL_COLUMNS = ("episode", "steps", "reward_pri", "reward_sec", "qos_or_aoi", "completion_time_s", "infer_ms")
TIMING_KEYS = ("online_ms_per_action", "offline_pan_ms", "offline_bpn_ms")


class StageError(FmeacError):
    """A pipeline stage could not complete; partial artifacts are kept."""


# ---------------------------------------------------------------- small io helpers

def write_csv(path: Path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _cell(v):
    # repr(float) round-trips exactly; numpy scalars would print their type name
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def eval_map_seed(cfg: ExperimentConfig) -> int:
    """Held-out map drawn by the experiment seed from the seeds not used for training."""
    rest = [s for s in range(cfg.map_family) if s not in cfg.train_maps]
    return int(np.random.default_rng([cfg.seed, 99]).choice(rest))


def stage_plan(cfg: ExperimentConfig) -> list[str]:
    plan = ["gen-maps"]
    if cfg.feature_model == "pan":
        plan.append("pretrain-pan")
    if cfg.application == "agri":
        plan.append("pretrain-bpn")
    return plan + ["train", "eval", "summarize"]


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.task = make_task(cfg)
        self.mod = urban if cfg.application == "urban" else agri

    # ---- paths
    def map_path(self, seed):
        return self.out / "maps" / f"{self.cfg.application}_{seed}.map"

    def p(self, name):
        return self.out / name

    def _prepare(self):
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_file = self.p("config.txt")
        text = serialize_config(self.cfg)
        if cfg_file.exists():
            if cfg_file.read_text(encoding="utf-8") != text:
                raise StageError(f"{self.out} holds artifacts of a different configuration; use a fresh --out")
        else:
            cfg_file.write_text(text, encoding="utf-8")

    # ---- stages
    def gen_maps(self):
        (self.out / "maps").mkdir(parents=True, exist_ok=True)
        for seed in range(self.cfg.map_family):
            path = self.map_path(seed)
            if not path.exists():
                path.write_text(self.mod.dumps_map(self.task.make_map(seed)), encoding="utf-8")

    def load_map(self, seed):
        path = self.map_path(seed)
        if not path.exists():
            self.gen_maps()
        return self.mod.loads_map(path.read_text(encoding="utf-8"))

    def train_maps(self):
        return [self.load_map(s) for s in self.cfg.train_maps]

    def pretrain_pan(self) -> PanModel:
        path = self.p("pan.ckpt")
        if path.exists():
            return PanModel.load(path)
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 20])
        t0 = time.perf_counter()
        data = pan_dataset(self.task, self.train_maps(), rng)
        history: list[float] = []
        model = pan_pretrain(data, self.task.point_dim, max_points=cfg.pan_max_points, epochs=cfg.pan_epochs,
                             batch=cfg.pan_batch, lr=cfg.lr_pan, hidden=cfg.pan_hidden, out_dim=cfg.feature_dim,
                             beta=cfg.beta_pan, rng=rng, history=history)
        ms = (time.perf_counter() - t0) * 1e3
        write_csv(self.p("pan_history.csv"), ("epoch", "loss"),
                  [{"epoch": i + 1, "loss": v} for i, v in enumerate(history)])
        self.p("pan_time.json").write_text(json.dumps({"offline_pan_ms": ms, "samples": len(data)}))
        model.save(path)
        return PanModel.load(path)

    def pretrain_bpn(self) -> BpnModel:
        path = self.p("bpn.ckpt")
        if path.exists():
            return BpnModel.load(path)
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 30])
        t0 = time.perf_counter()
        maps = self.train_maps()
        x, y = bpn_dataset(cfg, maps, rng, cfg.bpn_samples)
        n_val = max(1, len(x) // 5)
        model = bpn_pretrain(x[n_val:], y[n_val:], epochs=cfg.bpn_epochs, batch=cfg.bpn_batch, lr=cfg.lr_bpn,
                             hidden=cfg.bpn_hidden, rng=rng)
        ms = (time.perf_counter() - t0) * 1e3
        pred = model.predict(x[:n_val])
        rmse = float(np.sqrt(np.mean((pred - y[:n_val]) ** 2)))
        self.p("bpn_report.json").write_text(json.dumps({
            "offline_bpn_ms": ms, "val_rmse_j": rmse, "val_mean_label_j": float(np.mean(y[:n_val])),
            "samples": len(x)}))
        model.save(path)
        return BpnModel.load(path)

    def features(self, rng=None) -> FeatureSource:
        cfg = self.cfg
        if cfg.feature_model == "pan":
            return FeatureSource(self.task, "pan", pan=self.pretrain_pan())
        if cfg.feature_model == "gnn":
            rng = rng if rng is not None else np.random.default_rng([cfg.seed, 13])
            gnn = GnnModel(self.task.node_dim, cfg.gnn_hidden, cfg.feature_dim, cfg.beta_gnn,
                           cfg.r_adj / cfg.extent, rng=rng)
            return FeatureSource(self.task, "gnn", gnn=gnn)
        return FeatureSource(self.task, "none")

    def bpn(self):
        return self.pretrain_bpn().predict if self.cfg.application == "agri" else None

    def train(self) -> EacAgent:
        path = self.p("agent.ckpt")
        feats = self.features()
        if path.exists() and self.p("metrics.csv").exists():
            agent = make_agent(self.task, self.cfg, feats, np.random.default_rng(0))
            agent.load(path)
            return agent
        bpn = self.bpn()
        partial = self.p("metrics.partial.csv")
        fh = open(partial, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

        def log_row(row):
            writer.writerow([_cell(row[c]) for c in METRIC_COLUMNS])
            fh.flush()

        try:
            agent, _ = train(self.task, self.cfg, feats, self.train_maps(), self.cfg.seed, bpn=bpn, log=log_row)
        except FmeacError as exc:
            fh.close()
            good = getattr(exc, "last_good", None)
            if good is not None:
                checkpoint.save(self.p("agent.last_good.ckpt"), good, kind="agent")
            raise
        fh.close()
        agent.save(path)
        partial.replace(self.p("metrics.csv"))
        return agent

    def evaluate(self, agent: EacAgent | None = None):
        if self.p("eval.csv").exists():
            return read_csv(self.p("eval.csv"))
        agent = agent or self.train()
        cfg = self.cfg
        if cfg.feature_model == "pan":
            feats = FeatureSource(self.task, "pan", pan=self.pretrain_pan())
        else:
            feats = FeatureSource(self.task, cfg.feature_model, gnn=agent.gnn)
        m = self.load_map(eval_map_seed(cfg))
        rng = np.random.default_rng([cfg.seed, 40])
        bpn = self.bpn()
        rows, traj = [], []
        for ep in range(cfg.eval_episodes):
            timing: list[float] = []
            trace: list[tuple] = []
            stats, _, _ = run_episode(self.task, agent, feats, m, rng, explore=False, bpn=bpn,
                                      trace=trace, timing=timing)
            rows.append({"episode": ep, **stats, "infer_ms": float(np.median(timing)) if timing else 0.0})
            traj += [{"episode": ep, "step": s, "uav": i, "x": x, "y": y, "z": z} for s, i, x, y, z in trace]
        write_csv(self.p("trajectories.csv"), ("episode", "step", "uav", "x", "y", "z"), traj)
        write_csv(self.p("eval.csv"), EVAL_COLUMNS, rows)
        return read_csv(self.p("eval.csv"))

    def run(self, stages=None) -> dict:
        self._prepare()
        wanted = stage_plan(self.cfg) if stages is None else list(stages)
        agent = None
        for stage in wanted:
            log.info("stage %s", stage)
            if stage == "gen-maps":
                self.gen_maps()
            elif stage == "pretrain-pan":
                self.pretrain_pan()
            elif stage == "pretrain-bpn":
                if self.cfg.application != "agri":
                    raise StageError("battery prediction applies to the agricultural application only")
                self.pretrain_bpn()
            elif stage == "train":
                agent = self.train()
            elif stage == "eval":
                self.evaluate(agent)
            elif stage == "summarize":
                return summarize(self.out)
            else:
                raise StageError(f"unknown stage {stage!r}")
        return {}


# ---------------------------------------------------------------- summary

def decile_means(rewards) -> tuple[float, float]:
    r = np.asarray(rewards, dtype=np.float64)
    n = max(1, len(r) // 10)
    return float(r[:n].mean()), float(r[-n:].mean())


def summarize(out) -> dict:
    """Summary recomputed from the raw CSV files of an artifact directory."""
    out = Path(out)
    if not (out / "metrics.csv").exists():
        raise StageError(f"no training log in {out}")
    train_rows = read_csv(out / "metrics.csv")
    first, last = decile_means([r["reward_pri"] for r in train_rows])
    s = {"train_episodes": len(train_rows), "train_first_decile_reward": first,
         "train_last_decile_reward": last}
    if (out / "eval.csv").exists():
        ev = read_csv(out / "eval.csv")
        rew = np.array([r["reward_pri"] for r in ev])
        s |= {"eval_episodes": len(ev), "reward_mean": float(rew.mean()), "reward_std": float(rew.std()),
              "qos_or_aoi": float(np.mean([r["qos_or_aoi"] for r in ev])),
              "completion_time_s": float(np.mean([r["completion_time_s"] for r in ev])),
              "online_ms_per_action": float(np.mean([r["infer_ms"] for r in ev]))}
    for name, key in (("pan_time.json", "offline_pan_ms"), ("bpn_report.json", "offline_bpn_ms")):
        if (out / name).exists():
            s[key] = json.loads((out / name).read_text())[key]
    (out / "summary.json").write_text(json.dumps(s, indent=1, sort_keys=True))
    return s


def without_timing(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k not in TIMING_KEYS}


# ---------------------------------------------------------------- inference benchmark

def _median_ms(fn, repeats: int, warmup: int = 20) -> float:
    for _ in range(warmup):
        fn()
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - t0
    return float(np.median(times) * 1e3)


def bench_inference(cfg: ExperimentConfig, node_counts, repeats: int = 1000, seed: int = 0) -> list[dict]:
    """Median forward time (ms) of the graph and point-array models per input size."""
    task = make_task(cfg)
    rng = np.random.default_rng([seed, 50])
    gnn = GnnModel(task.node_dim, cfg.gnn_hidden, cfg.feature_dim, cfg.beta_gnn, cfg.r_adj / cfg.extent, rng=rng)
    pan = PanModel(task.point_dim, hidden=cfg.pan_hidden, out_dim=cfg.feature_dim, beta=cfg.beta_pan, rng=rng).freeze()
    rows = []
    for n in node_counts:
        if n < 1:
            raise ContractError("node counts must be positive")
        nodes = rng.uniform(0.0, 1.0, (n, task.node_dim))
        points = rng.uniform(0.0, 1.0, (n, task.point_dim))
        t_g = _median_ms(lambda: gnn.feature(nodes), repeats)
        t_p = _median_ms(lambda: pan.feature(points, n), repeats)
        rows.append({"n": n, "gnn_ms": t_g, "pan_ms": t_p})
    return rows


# ---------------------------------------------------------------- plot data

def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    if window < 1:
        raise ContractError("smoothing window must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_data(out, window: int = 20) -> list[Path]:
    """Smoothed reward curve and one polyline file per evaluation episode."""
    out = Path(out)
    metrics = out / "metrics.csv"
    if not metrics.exists():
        raise StageError(f"no training log in {out}")
    rows = read_csv(metrics)
    pdir = out / "plot"
    pdir.mkdir(exist_ok=True)
    rew = [r["reward_pri"] for r in rows]
    sm = smooth(rew, window)
    written = [pdir / "reward_curve.csv"]
    write_csv(written[0], ("episode", "reward_pri", "reward_smoothed"),
              [{"episode": int(r["episode"]), "reward_pri": r["reward_pri"], "reward_smoothed": float(s)}
               for r, s in zip(rows, sm)])
    tpath = out / "trajectories.csv"
    if tpath.exists():
        traj = read_csv(tpath)
        n_uav = int(max(r["uav"] for r in traj)) + 1 if traj else 0
        for ep in sorted({int(r["episode"]) for r in traj}):
            steps: dict[int, dict] = {}
            for r in traj:
                if int(r["episode"]) == ep:
                    u = int(r["uav"])
                    steps.setdefault(int(r["step"]), {"step": int(r["step"])}).update(
                        {f"x{u}": r["x"], f"y{u}": r["y"], f"z{u}": r["z"]})
            cols = ["step"] + [f"{a}{u}" for u in range(n_uav) for a in "xyz"]
            path = pdir / f"trajectory_ep{ep}.csv"
            write_csv(path, cols, [steps[k] for k in sorted(steps)])
            written.append(path)
    return written

