"""Configuration: typed sections, task presets, and a flat key-value file format.

Files look like INI: `[section]` headers followed by `key = value` lines.
Every key maps 1:1 onto a dataclass field below; unknown keys are errors
(reported by name so the CLI can exit with code 2). Env vars SCREWGAIT_SEED
and SCREWGAIT_OUT override only the global seed and the output root.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields


class ConfigError(Exception):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class SimParams:
    dt_control: float = 0.05        # 20 Hz control
    substeps: int = 10              # 200 Hz physics
    contact_kn: float = 3000.0      # normal spring N/m
    contact_cn: float = 30.0        # normal damping N*s/m (scaled down by restitution)
    contact_kt: float = 80.0        # tangential viscous regularization N*s/m
    torque_limit: float = 1.0       # per finger joint, N*m
    joint_inertia: float = 2e-4     # lumped link+rotor inertia kg*m^2
    joint_damping: float = 0.02     # structural viscous damping N*m*s (besides PD kd)
    wrist_lin_rate: float = 0.15    # m/s
    wrist_ang_rate: float = 1.0     # rad/s
    gravity: float = 9.81           # acts on the object through the screw coupling only


@dataclass
class HandParams:
    link1: float = 0.045
    link2: float = 0.035
    tip_radius: float = 0.012
    mount_radius: float = 0.078     # finger bases on a ring of this radius
    mount_z: float = 0.0            # ring height in the wrist frame
    cant_2dof: float = 0.35         # flexion-axis cant for 2-DoF fingers, rad
    abd_lo: float = -0.6
    abd_hi: float = 0.6
    flex_lo: float = -0.25
    flex_hi: float = 1.45
    pad_tilt: float = 1.1           # pad normal pitch from the distal link axis, rad
    taxel_pitch: float = 0.002      # m between taxel centers
    tactile_sigma: float = 0.5      # Gaussian spread in taxel pitches (see docs/CONFIG.md)
    tactile_floor: float = 0.05     # N, sensor floor


@dataclass
class ObjectParams:
    sides: int = 6                  # polygon vertex count (24 approximates a cylinder)
    radius: float = 0.025           # circumradius at scale 1
    height: float = 0.04
    base_height: float = 0.10       # top face z at theta = 0
    pitch: float = 0.0              # m per revolution; > 0 couples height to rotation
    joint_viscous: float = 0.002    # N*m*s
    joint_coulomb: float = 0.005    # N*m
    contact_z_offset: float = 0.008 # fingertip contact depth below the top face at reset


@dataclass
class DrParams:
    scale_lo: float = 0.95
    scale_hi: float = 1.05
    mass_lo: float = 0.04
    mass_hi: float = 0.06
    com_lo: float = -0.001
    com_hi: float = 0.001
    friction_lo: float = 0.5
    friction_hi: float = 8.0
    restitution_lo: float = 0.0
    restitution_hi: float = 1.0
    kp_lo: float = 2.7
    kp_hi: float = 3.3
    kd_lo: float = 0.009
    kd_hi: float = 0.011
    obs_noise_rot: float = 0.01     # rad
    obs_noise_trans: float = 0.005  # m
    act_noise_rot: float = 0.01     # rad
    force_prob: float = 0.25        # disturbance probability per control step
    force_scale: float = 2.0        # disturbance magnitude = force_scale * mass (N)


@dataclass
class RewardParams:
    lambda_rotate: float = 6.0
    lambda_proximity: float = 2.0
    lambda_torque: float = -0.1
    lambda_work: float = -0.01
    lambda_pose: float = -0.5
    lambda_rotate_penalty: float = -0.3
    lambda_pc_z: float = -1.0
    rot_clip: float = 4.0           # rad/s
    d_thresh: float = 0.10          # m
    omega_thresh: float = 10.0      # rad/s (fixed unless curriculum enabled)
    omega_curriculum: bool = False
    omega_curr_lo: float = 7.5
    omega_curr_hi: float = 15.0


@dataclass
class TermParams:
    finger_far: float = 0.07        # m, thumb-or-index to object centroid
    window: int = 70                # control steps for stagnation / no-contact
    eps_theta: float = 0.01         # rad
    eps_force: float = 0.05         # N
    episode_len: int = 800


@dataclass
class EnvParams:
    task: str = "nutbolt"           # nutbolt | screwdriver
    mode: str = "train"             # train (pure revolute, frozen wrist) | eval (screw, free wrist)
    num_envs: int = 64
    action_scale: float = 0.05      # eta, rad per step
    obs_window: int = 3
    required_revolutions: float = 4.0
    seed: int = 0


@dataclass
class NetParams:
    z_dim: int = 8
    priv_hidden: int = 64
    state_hidden1: int = 128
    state_hidden2: int = 64
    trunk_hidden1: int = 256
    trunk_hidden2: int = 128
    phi_hidden1: int = 256
    phi_hidden2: int = 128
    log_std_init: float = -1.0


@dataclass
class PpoParams:
    rollout_steps: int = 12
    minibatch: int = 256
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    kl_threshold: float = 0.02
    max_grad_norm: float = 1.0
    lr: float = 5e-3
    lr_lo: float = 1e-6
    lr_hi: float = 1e-2
    epochs: int = 4
    total_steps: int = 2_000_000
    value_norm: bool = True
    eval_episodes: int = 64         # for the random baseline and final reporting


@dataclass
class DistillParams:
    num_envs: int = 48
    steps_per_iter: int = 512
    minibatch: int = 4096
    lr: float = 1e-3
    lr_final: float = 2e-4          # linear decay target across max_iters
    epochs_per_iter: int = 4
    max_iters: int = 60
    history_len: int = 30
    explore_std: float = 0.05
    holdout_envs: int = 16          # teacher-driven rollout collected once ...
    holdout_steps: int = 400        # ... as the frozen held-out set
    converge_tol: float = 0.01      # <1% held-out MSE improvement ...
    converge_iters: int = 10        # ... over this many consecutive iterations


@dataclass
class TeleopParams:
    max_steps: int = 1600
    operator_timeout: float = 2.0   # s without a command -> hold last
    jitter_sigma: float = 0.0       # m, scripted-operator x/y jitter
    engage_offset: float = 0.0      # extra wrist z offset during tracking
    bind: str = "127.0.0.1:8765"
    realtime: bool = False          # pace the loop at wall-clock 20 Hz


@dataclass
class BcParams:
    k_history: int = 5
    horizon: int = 16
    use_tactile: bool = True
    use_history: bool = True
    epochs: int = 200
    lr: float = 1e-3
    batch: int = 256
    replan: int = 8                 # m <= H
    enc1: int = 512
    enc2: int = 256
    bottleneck: int = 128
    tactile_hidden: int = 64
    val_frac: float = 0.1


@dataclass
class EvalParams:
    trials: int = 10
    max_steps: int = 1600
    perturb_at: int = 200           # control step where the disturbance script fires
    perturb_len: int = 20           # 1 s
    recovery_window: int = 100      # 5 s
    finger_drag_force: float = 1.0  # N
    reverse_twist_factor: float = 2.0


@dataclass
class RunConfig:
    env: EnvParams = field(default_factory=EnvParams)
    sim: SimParams = field(default_factory=SimParams)
    hand: HandParams = field(default_factory=HandParams)
    object: ObjectParams = field(default_factory=ObjectParams)
    dr: DrParams = field(default_factory=DrParams)
    reward: RewardParams = field(default_factory=RewardParams)
    term: TermParams = field(default_factory=TermParams)
    nets: NetParams = field(default_factory=NetParams)
    ppo: PpoParams = field(default_factory=PpoParams)
    distill: DistillParams = field(default_factory=DistillParams)
    teleop: TeleopParams = field(default_factory=TeleopParams)
    bc: BcParams = field(default_factory=BcParams)
    eval: EvalParams = field(default_factory=EvalParams)


def nutbolt(mode: str = "train") -> RunConfig:
    cfg = RunConfig()
    cfg.env.task = "nutbolt"
    cfg.env.mode = mode
    cfg.object.sides = 6
    cfg.object.radius = 0.025
    cfg.object.height = 0.04
    cfg.object.pitch = 0.002 if mode == "eval" else 0.0
    cfg.term.finger_far = 0.07
    cfg.term.window = 70
    return cfg


def screwdriver(mode: str = "train") -> RunConfig:
    cfg = RunConfig()
    cfg.env.task = "screwdriver"
    cfg.env.mode = mode
    cfg.object.sides = 24           # round handle
    cfg.object.radius = 0.020
    cfg.object.height = 0.08
    cfg.object.pitch = 0.006 if mode == "eval" else 0.0
    cfg.object.contact_z_offset = 0.007
    cfg.dr.scale_lo = 0.85
    cfg.dr.scale_hi = 1.25
    cfg.reward.lambda_rotate = 2.5
    cfg.reward.lambda_torque = -3.0
    cfg.reward.lambda_pose = -0.1
    cfg.reward.omega_curriculum = True
    cfg.term.finger_far = 0.10
    cfg.term.window = 60
    return cfg


_PRESETS = {"nutbolt": nutbolt, "screwdriver": screwdriver}


def preset(task: str, mode: str = "train") -> RunConfig:
    if task not in _PRESETS:
        raise ConfigError(f"unknown task: {task}", key="env.task")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode: {mode}", key="env.mode")
    return _PRESETS[task](mode)


def _coerce(raw: str, ftype, key: str):
    raw = raw.strip()
    if ftype is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad bool for {key}: {raw!r}", key=key)
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad {ftype.__name__} for {key}: {raw!r}", key=key) from None
    return raw


def apply_overrides(cfg: RunConfig, text: str, source: str = "<config>") -> RunConfig:
    """Parse flat key-value text into cfg (mutates and returns it)."""
    section = None
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in sections:
                raise ConfigError(f"{source}:{lineno}: unknown section [{name}]", key=name)
            section = name
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value", key=line)
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]", key=line.split("=")[0].strip())
        key, raw = (s.strip() for s in line.split("=", 1))
        target = sections[section]
        ftypes = {f.name: f.type for f in fields(target)}
        if key not in ftypes:
            raise ConfigError(f"{source}:{lineno}: unknown key {section}.{key}", key=f"{section}.{key}")
        ftype = {"int": int, "float": float, "bool": bool, "str": str}[ftypes[key]] \
            if isinstance(ftypes[key], str) else ftypes[key]
        setattr(target, key, _coerce(raw, ftype, f"{section}.{key}"))
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        return apply_overrides(cfg, f.read(), source=path)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"[{f.name}]")
        sec = getattr(cfg, f.name)
        for sf in fields(sec):
            lines.append(f"{sf.name} = {getattr(sec, sf.name)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def global_seed(cfg: RunConfig) -> int:
    env = os.environ.get("SCREWGAIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SCREWGAIT_SEED must be an integer, got {env!r}", key="SCREWGAIT_SEED") from None
    return cfg.env.seed


def output_root() -> str:
    return os.environ.get("SCREWGAIT_OUT", ".")


def copy_config(cfg: RunConfig) -> RunConfig:
    out = RunConfig()
    for f in fields(cfg):
        setattr(out, f.name, dataclasses.replace(getattr(cfg, f.name)))
    return out
