"""Assisted-teleoperation session engine at 20 Hz: an operator steers the
wrist and toggles the finger-rotation skill; the session records multisensory
demonstrations that replay bit-exactly.

Determinism contract: hand and wrist targets are rounded to float32 at the
apply boundary every tick, and exactly those values go into the record and
into the physics. Replaying the recorded targets against the same seed and
config therefore reproduces the simulation bit for bit.

An operator is a callable view -> command-dict-or-None, polled once per tick:
    view:    {t, q (18), theta, height, skill_active, wrist_target (6),
              wrist_home_z, slope, engage_offset, no_contact_frac, progress}
    command: {"dpos": (3,) m, "dyaw": rad, "dpitch": rad, "skill": bool|None,
              "stop": bool}   (all keys optional; None = no command this tick)
"""

from __future__ import annotations

import os
import time
from collections import deque

import numpy as np

from .config import RunConfig, apply_overrides, copy_config, dump_config
from .demo_io import DemoTrajectory, write_demo
from .distill import HistoryBuffer, load_student, student_policy_fn
from .env import FRAME_DIM, R_DIVERGED, ScrewEnv

CONTACT_WINDOW = 40          # operator-side no-contact window, ticks (2 s)
TICK_HZ = 20.0


class OperatorTimeout(RuntimeError):
    """Operator silent past the timeout. The session holds the last command;
    this type exists for adapters that want to signal a dead peer instead."""


def session_config(cfg: RunConfig) -> RunConfig:
    """Session copy of the config: the step budget is the only terminator
    besides divergence, since an operator may legitimately pause mid-demo."""
    c = copy_config(cfg)
    c.term.episode_len = c.teleop.max_steps
    c.term.window = c.teleop.max_steps + 1
    c.term.finger_far = 1e9
    return c


def tactile_summary(tact_flat: np.ndarray) -> np.ndarray:
    """(1800,) -> (5, 6, 5) per-finger force magnitude, 2x2 average-pooled."""
    t = np.asarray(tact_flat).reshape(5, 12, 10, 3)
    mag = np.linalg.norm(t, axis=-1)
    return mag.reshape(5, 6, 2, 5, 2).mean(axis=(2, 4))


def trajectory_progress(theta: np.ndarray, theta_final: float,
                        theta0: float, required_revolutions: float) -> float:
    """Running-max net advance over the whole trajectory, as a fraction of
    the required total rotation, clipped to [0, 1]."""
    best = max(float(np.max(theta) if len(theta) else theta0), float(theta_final))
    adv = max(best - theta0, 0.0)
    return min(adv / (2.0 * np.pi * required_revolutions), 1.0)


class ScriptedOperator:
    """Stands in for a human: keeps the skill on, servos wrist height to the
    descending engagement point, recenters x/y (with optional Gaussian jitter
    for demo diversity), and recovers by pure recentering when contact has
    been absent for half the watch window."""

    def __init__(self, cfg: RunConfig, seed: int = 0, jitter: float | None = None):
        self.sigma = cfg.teleop.jitter_sigma if jitter is None else jitter
        self.engage = cfg.teleop.engage_offset
        self.rng = np.random.default_rng([seed, 909])

    def __call__(self, view):
        z_des = view["wrist_home_z"] + view["slope"] * view["theta"] + self.engage
        wt = view["wrist_target"]
        dx, dy = -wt[0], -wt[1]
        recovering = view["no_contact_frac"] >= 0.5
        if self.sigma > 0 and not recovering:
            dx += self.rng.normal(0.0, self.sigma)
            dy += self.rng.normal(0.0, self.sigma)
        return {"dpos": np.array([dx, dy, z_des - wt[2]]),
                "dyaw": 0.0, "dpitch": 0.0, "skill": True}


def run_session(cfg: RunConfig, student, obs_norm, hist_norm, operator,
                seed: int = 0, operator_label: str = "scripted",
                on_frame=None, realtime: bool | None = None):
    """One recorded episode. Returns (DemoTrajectory | None, stats);
    None when the simulation diverged (episode discarded)."""
    scfg = session_config(cfg)
    T = scfg.teleop.max_steps
    env = ScrewEnv(scfg, num_envs=1, seed=seed)
    L = scfg.distill.history_len
    hist = HistoryBuffer(1, L)
    sfn = student_policy_fn(student, obs_norm, hist_norm)
    obs = env.obs()
    hist.reset(np.array([0]), obs[:, -FRAME_DIM:])
    w = env.world
    lo, hi = w.hand.q_lo, w.hand.q_hi
    eta = scfg.env.action_scale
    theta0 = float(w.theta[0])
    wrist_target = np.concatenate([w.wrist_pos[0], w.wrist_rpy[0]])
    skill = False
    timeout_ticks = 0
    silent = 0
    timeout_after = int(round(scfg.teleop.operator_timeout * TICK_HZ))
    force_win = deque(maxlen=CONTACT_WINDOW)
    pace = scfg.teleop.realtime if realtime is None else realtime
    tick_t0 = time.monotonic()

    cols = {k: [] for k in ("q", "tactile", "a_hand", "a_arm", "skill",
                            "theta", "height")}
    reason_end = None
    steps_done = 0
    rotation_final = 0.0

    for t in range(T):
        if force_win:
            ncf = float(np.mean(np.array(force_win) < scfg.term.eps_force))
        else:
            ncf = 0.0
        view = {
            "t": t,
            "q": w.proprio18()[0],
            "theta": float(w.theta[0]),
            "height": float(w.z_top[0]),
            "skill_active": skill,
            "wrist_target": wrist_target.copy(),
            "wrist_home_z": float(w.wrist_home[2]),
            "slope": float(w.slope),
            "engage_offset": scfg.teleop.engage_offset,
            "no_contact_frac": ncf,
            "progress": trajectory_progress(
                np.array([theta0]), float(w.theta[0]), theta0,
                scfg.env.required_revolutions),
        }
        cmd = operator(view)
        if cmd is None:
            silent += 1
            if silent > timeout_after:
                timeout_ticks += 1
        else:
            silent = 0
            if cmd.get("dpos") is not None:
                wrist_target[:3] += np.asarray(cmd["dpos"], dtype=np.float64)
            wrist_target[4] += float(cmd.get("dpitch", 0.0))
            wrist_target[5] += float(cmd.get("dyaw", 0.0))
            if cmd.get("skill") is not None:
                skill = bool(cmd["skill"])
            if cmd.get("stop"):
                break

        q18 = w.proprio18()[0].astype(np.float32)
        tact = env.tactile()[0].astype(np.float32)
        th32 = np.float32(w.theta[0])
        hz32 = np.float32(w.z_top[0])

        if skill:
            a12 = sfn(obs, hist.flat())[0]
            tgt = np.clip(env.prev_targets[0] + eta * a12, lo, hi)
        else:
            tgt = w.q[0]
        a_hand32 = tgt.astype(np.float32)
        a_arm32 = wrist_target.astype(np.float32)

        cols["q"].append(q18)
        cols["tactile"].append(tact)
        cols["a_hand"].append(a_hand32)
        cols["a_arm"].append(a_arm32)
        cols["skill"].append(skill)
        cols["theta"].append(th32)
        cols["height"].append(hz32)

        obs, _, done, info = env.step_targets(
            a_hand32.astype(np.float64)[None],
            wrist_cmd=a_arm32.astype(np.float64)[None], noise_on=True)
        hist.push(info["frame24"])
        force_win.append(float(w.total_normal_force()[0]))
        rotation_final = float(info["ep_rotation"][0])
        steps_done = t + 1

        if on_frame is not None:
            on_frame(state_frame(t, w, skill, tact,
                                 theta0, scfg.env.required_revolutions,
                                 info["ep_rotation"][0]))
        if pace:
            tick_t0 += 1.0 / TICK_HZ
            delay = tick_t0 - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        if done[0]:
            reason_end = int(info["reason"][0])
            if reason_end == R_DIVERGED:
                return None, {"reason": "diverged", "steps": steps_done}
            break

    theta_series = np.array(cols["theta"], dtype=np.float32)
    progress = trajectory_progress(theta_series.astype(np.float64),
                                   theta0 + rotation_final, theta0,
                                   scfg.env.required_revolutions)
    manifest = {
        "task": scfg.env.task,
        "mode": scfg.env.mode,
        "seed": seed,
        "duration_s": steps_done / TICK_HZ,
        "success": progress >= 1.0,
        "progress_ratio": progress,
        "operator": operator_label,
        "randomization": {k: np.asarray(v[0]).tolist() for k, v in env.dr.items()},
        "config": dump_config(scfg),
        "required_revolutions": scfg.env.required_revolutions,
        "timeout_ticks": timeout_ticks,
    }
    traj = DemoTrajectory(
        manifest=manifest,
        q=np.array(cols["q"], dtype=np.float32),
        tactile=np.array(cols["tactile"], dtype=np.float32),
        a_hand=np.array(cols["a_hand"], dtype=np.float32),
        a_arm=np.array(cols["a_arm"], dtype=np.float32),
        skill=np.array(cols["skill"], dtype=bool),
        theta=theta_series,
        height=np.array(cols["height"], dtype=np.float32),
    )
    stats = {"reason": "stopped" if reason_end is None else "done",
             "steps": steps_done, "progress": progress}
    return traj, stats


def state_frame(t, world, skill, tact32, theta0, required, rotation):
    """Post-step UI frame; all floats pass through float32 so a fixed seed
    yields byte-identical JSON."""
    f32 = np.float32
    return {
        "type": "state",
        "t": int(t),
        "q": [float(f32(v)) for v in world.proprio18()[0]],
        "theta": float(f32(world.theta[0])),
        "height": float(f32(world.z_top[0])),
        "skill_active": bool(skill),
        "tactile": [[float(f32(v)) for v in row]
                    for row in tactile_summary(tact32).reshape(5, 30)],
        "progress": float(f32(min(max(rotation, 0.0) /
                                  (2.0 * np.pi * required), 1.0))),
    }


def replay_demo(traj: DemoTrajectory):
    """Re-simulates a recorded demo from its embedded config and seed,
    feeding back the recorded targets. Returns a report with bit-exactness
    of the object-angle and state series."""
    cfg = RunConfig()
    apply_overrides(cfg, traj.manifest["config"], source="<manifest>")
    env = ScrewEnv(cfg, num_envs=1, seed=traj.manifest["seed"])
    w = env.world
    n = len(traj)
    first_div = -1
    q_ok = True
    for i in range(n):
        if np.float32(w.theta[0]) != traj.theta[i]:
            first_div = i
            break
        if q_ok and not np.array_equal(w.proprio18()[0].astype(np.float32),
                                       traj.q[i]):
            q_ok = False
        env.step_targets(traj.a_hand[i].astype(np.float64)[None],
                         wrist_cmd=traj.a_arm[i].astype(np.float64)[None],
                         noise_on=True)
    return {
        "match": first_div < 0,
        "first_divergence": first_div,
        "q_match": q_ok and first_div < 0,
        "steps": n,
    }


def collect_demos(cfg: RunConfig, student_path: str, out_dir: str,
                  n_demos: int, seed0: int = 0, jitter: float | None = None,
                  quiet: bool = True):
    """Scripted-operator demo batch. Writes demo_<seed>.sgdm files; skips
    diverged episodes (trying successive seeds) until n_demos are saved."""
    os.makedirs(out_dir, exist_ok=True)
    student, norms, _ = load_student(student_path, cfg)
    paths = []
    seed = seed0
    attempts = 0
    while len(paths) < n_demos and attempts < 4 * n_demos:
        attempts += 1
        op = ScriptedOperator(cfg, seed=seed, jitter=jitter)
        traj, stats = run_session(cfg, student, norms["obs"], norms["hist"],
                                  op, seed=seed)
        seed += 1
        if traj is None:
            continue
        path = os.path.join(out_dir, f"demo_{traj.manifest['seed']:04d}.sgdm")
        write_demo(traj, path)
        paths.append(path)
        if not quiet:
            print(f"demo {path} progress {traj.manifest['progress_ratio']:.3f} "
                  f"success {traj.manifest['success']}", flush=True)
    return paths
