"""Experiment configuration: defaults, presets and the ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields

from .energy import UavBody
from .errors import ConfigError
from .radio import AntennaConfig

APPLICATIONS = ("urban", "agri")
FEATURE_MODELS = ("gnn", "pan", "none")
ACTOR_MODES = ("maxent", "deterministic")
# sequential tasks: "mode" trains Q_P on COL and Q_S on RTH transitions; "partial" trains
# Q_P on the total return and Q_S on the RTH share of it, both over every transition
CRITIC_SPLITS = ("mode", "partial")


@dataclass
class ExperimentConfig:
    # --- experiment switches
    application: str = "urban"
    preset: str = ""
    feature_model: str = "pan"
    actor_mode: str = "maxent"
    secondary_critics: bool = True
    critic_split: str = "mode"
    seed: int = 0
    map_family: int = 10
    train_maps: tuple[int, ...] = (0, 1, 2)
    episodes: int = 1000
    eval_episodes: int = 10
    warmup_steps: int = 1000
    update_every: int = 1
    log_wall_time: bool = False

    # --- networks and learning
    hidden_width: int = 128
    hidden_layers: int = 3
    feature_dim: int = 32
    gnn_hidden: int = 64
    pan_hidden: int = 64
    gamma: float = 0.99
    lr_actor: float = 1e-5
    lr_critic_pri: float = 1e-4
    lr_critic_sec: float = 1e-5
    lr_gnn: float = 1e-3
    lr_pan: float = 1e-4
    lr_bpn: float = 1e-5
    batch_size: int = 256
    buffer_size: int = 65536
    tau: float = 0.01
    alpha_temp: float = 0.2
    entropy_in_target: bool = True
    policy_delay: int = 2
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    expl_noise: float = 0.1
    gnn_actor_sign: float = -1.0
    beta_gnn: float = 0.01
    beta_pan: float = 0.01
    r_adj: float = 200.0
    pan_batch: int = 512
    pan_epochs: int = 100
    pan_traces: int = 30
    pan_max_points: int = 128
    bpn_margin: float = 1.2
    bpn_samples: int = 4000
    bpn_epochs: int = 300
    bpn_batch: int = 128
    bpn_hidden: int = 64

    # --- task space and kinematics
    x_min: float = 0.0
    x_max: float = 800.0
    y_min: float = 0.0
    y_max: float = 800.0
    z_min: float = 180.0
    z_max: float = 220.0
    d_end: float = 50.0
    v_max_x: float = 8.0
    v_max_y: float = 8.0
    v_max_z: float = 8.0
    dt: float = 1.0
    k_end: int = 100
    t_f_end: float = 500.0
    t_r_end: float = 100.0
    n_uav: int = 4

    # --- energy
    battery_capacity: float = 155520.0
    pw_cmp: float = 20.0
    pw_ut_dbm: float = 20.0
    pw_ur_dbm: float = 20.0
    comm_gating: bool = True
    m_uav: float = 0.2
    g: float = 9.8
    rho_air: float = 1.225
    v_th: float = 0.1
    c_d: float = 0.5
    n_prp: int = 4
    r_prp: float = 0.1
    eta: float = 0.8
    a_surf: float = 0.01

    # --- antenna and channel
    m_ula: int = 8
    n_ula: int = 8
    d_ula: float = 0.05
    theta_main: float = 0.0
    phi_main: float = 80.0
    light_speed: float = 3e8
    theta_3db: float = 65.0
    phi_3db: float = 65.0
    g_element: float = 5.0
    attenuation_form: str = "3gpp-squared"
    k_b: float = 1.38e-23
    t_k: float = 298.0
    bandwidth: float = 20e6
    f_bs: float = 3.5e9
    f_iot: float = 5.9e9
    nlos_coefficient: float = 71.0
    nlos_floor_los: bool = True

    # --- urban world
    uplink_limit: int = 3
    epsilon_alloc: float = 0.8
    n_bs_min: int = 3
    n_bs_max: int = 4
    gd_min: int = 20
    gd_max: int = 50
    pd_min: int = 0
    pd_max: int = 50
    cell_size: float = 20.0
    building_min: float = 10.0
    building_max: float = 120.0
    pd_speed: float = 1.4
    pw_bt_dbm: float = 46.0
    pw_it_dbm: float = 10.0
    g_iot_db: float = 0.0
    d_safe: float = 10.0
    sec_in_pri: bool = True

    # --- agricultural world
    n_ws: int = 400
    d_ws: float = 20.0
    aoi_max: float = 0.8
    t_update: tuple[float, ...] = (40.0, 50.0, 60.0)
    f_c: float = 2.8e9
    pw_wt_dbm: float = -20.0
    g_ws_db: float = 0.0
    packet_bits: int = 1000
    connect_radius: float = 60.0
    target_clearance: float = 30.0
    n_near: int = 8
    terrain_features: int = 8
    terrain_amplitude: float = 15.0

    # --- reward weights (alpha1..alpha8)
    alpha1: float = 1.0
    alpha2: float = 0.75
    alpha3: float = 2.5
    alpha4: float = 0.1
    alpha5: float = 0.75
    alpha6: float = 10.0
    alpha7: float = 0.1
    alpha8: float = 10.0

    def __post_init__(self):
        self.validate()

    # ---- derived views
    @property
    def body(self) -> UavBody:
        return UavBody(self.m_uav, self.g, self.rho_air, self.a_surf, self.n_prp,
                       self.r_prp, self.eta, self.c_d, self.v_th)

    @property
    def antenna(self) -> AntennaConfig:
        return AntennaConfig(self.m_ula, self.n_ula, self.d_ula, self.theta_main, self.phi_main,
                             self.theta_3db, self.phi_3db, self.g_element, self.f_bs,
                             self.light_speed, self.attenuation_form)

    @property
    def v_max(self) -> tuple[float, float, float]:
        return (self.v_max_x, self.v_max_y, self.v_max_z)

    @property
    def lo(self):
        return (self.x_min, self.y_min, self.z_min)

    @property
    def hi(self):
        return (self.x_max, self.y_max, self.z_max)

    @property
    def extent(self) -> float:
        return max(self.x_max - self.x_min, self.y_max - self.y_min, self.z_max)

    @property
    def noise_w(self) -> float:
        return self.k_b * self.t_k * self.bandwidth

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(getattr(self, f"alpha{i}") for i in range(1, 9))

    def validate(self) -> None:
        if self.application not in APPLICATIONS:
            raise ConfigError(f"application must be one of {APPLICATIONS}, got {self.application!r}")
        if self.feature_model not in FEATURE_MODELS:
            raise ConfigError(f"feature_model must be one of {FEATURE_MODELS}, got {self.feature_model!r}")
        if self.actor_mode not in ACTOR_MODES:
            raise ConfigError(f"actor_mode must be one of {ACTOR_MODES}, got {self.actor_mode!r}")
        if self.critic_split not in CRITIC_SPLITS:
            raise ConfigError(f"critic_split must be one of {CRITIC_SPLITS}, got {self.critic_split!r}")
        if self.attenuation_form not in ("3gpp-squared", "as-printed"):
            raise ConfigError(f"unknown attenuation_form {self.attenuation_form!r}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ConfigError("task-space bounds are empty")
        if self.n_uav < 1 or self.uplink_limit < 1 or self.dt <= 0:
            raise ConfigError("n_uav, uplink_limit and dt must be positive")
        if len(self.train_maps) == 0 or any(not 0 <= s < self.map_family for s in self.train_maps):
            raise ConfigError("train_maps must be non-empty seeds inside the map family")
        if len(self.train_maps) >= self.map_family:
            raise ConfigError("at least one map seed must remain for evaluation")
        if self.application == "agri" and self.n_ws < 1:
            raise ConfigError("agri needs at least one sensor")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


URBAN_DEFAULTS: dict = {}

AGRI_DEFAULTS = dict(
    application="agri", actor_mode="deterministic", episodes=10000,
    lr_actor=1e-4, lr_critic_pri=1e-5, lr_critic_sec=1e-5, lr_bpn=1e-5,
    batch_size=128, tau=0.005, pan_epochs=1000, pan_max_points=400, r_adj=100.0,
    x_max=400.0, y_max=400.0, z_min=30.0, z_max=150.0, d_end=30.0,
    v_max_x=10.0, v_max_y=10.0, v_max_z=5.0, pw_ur_dbm=30.0, f_c=2.8e9,
    alpha1=2.0, alpha2=0.5, alpha3=0.1, alpha4=0.01, alpha5=10.0,
    alpha6=0.1, alpha7=0.1, alpha8=1.0,
)

PRESETS: dict[str, dict] = {
    "paper-scale": {},
    "toy-urban": dict(
        application="urban", n_uav=2, x_max=300.0, y_max=300.0, gd_min=5, gd_max=10,
        pd_min=0, pd_max=5, k_end=60, episodes=200, warmup_steps=500,
        pan_epochs=40, pan_traces=10, pan_max_points=16, eval_episodes=3,
        bpn_samples=500, bpn_epochs=100,
    ),
    "toy-agri": dict(
        application="agri", n_uav=1, x_max=50.0, y_max=50.0, z_min=10.0, z_max=60.0,
        n_ws=16, d_ws=12.5, connect_radius=12.0, target_clearance=10.0, r_adj=25.0,
        d_end=8.0, t_f_end=40.0, t_r_end=20.0, battery_capacity=3000.0,
        terrain_amplitude=3.0, terrain_features=3, t_update=(10.0, 12.0, 15.0),
        episodes=300, warmup_steps=500, hidden_width=64, lr_actor=3e-4,
        lr_critic_pri=1e-3, lr_critic_sec=1e-3, lr_pan=1e-3, lr_bpn=1e-3,
        pan_epochs=60, pan_traces=30, pan_max_points=16,
        bpn_samples=1500, bpn_epochs=300, eval_episodes=5, critic_split="partial",
    ),
}


def defaults_for(application: str = "urban", preset: str = "") -> ExperimentConfig:
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        application = PRESETS[preset].get("application", application)
    if application == "agri":
        values.update(AGRI_DEFAULTS)
    elif application != "urban":
        raise ConfigError(f"application must be one of {APPLICATIONS}, got {application!r}")
    if preset:
        values.update(PRESETS[preset])
        values["preset"] = preset
    values["application"] = application
    return ExperimentConfig(**values)


# ---------------------------------------------------------------- text format

_HINTS = typing.get_type_hints(ExperimentConfig)


def _parse_value(key: str, text: str):
    hint = _HINTS[key]
    text = text.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is tuple:
            (elem, _) = typing.get_args(hint)
            return tuple(elem(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    pairs: list[tuple[str, str]] = []
    known = {f.name for f in fields(ExperimentConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        pairs.append((key, value))
    head = dict(pairs)
    base = defaults_for(head.get("application", "urban").strip(), head.get("preset", "").strip())
    updates = {k: _parse_value(k, v) for k, v in pairs}
    try:
        return base.replace(**updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = ["# fmeac experiment configuration"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
