"""Vectorized RL environment over the contact simulator.

Two tasks (nutbolt, screwdriver) differing in geometry, reward weights, DR
ranges and termination windows; two modes: train (pure revolute joint, frozen
wrist) and eval (screw-coupled height, commandable wrist). Observations are a
3-step window of (12 joint positions, 12 previous targets). The reward is a
pure function of a state snapshot so its unit suite can pin exact values.

Penalty-shaped components keep their formula signs (<= 0); weights are applied
by magnitude for those components so every penalty contributes non-positively
while the configured weight table keeps its published values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RewardParams, RunConfig
from .geom import mat_to_quat, quat_about_z
from .hand import N_JOINTS, THUMB_JOINTS
from .sim import NonFiniteError, SimWorld
from .tactile import flatten_tactile, synth_tactile

OBS_DIM = 72
FRAME_DIM = 24
ACT_DIM = 12

R_NONE, R_DIVERGED, R_FINGER_FAR, R_STAGNANT, R_NO_CONTACT, R_TIME_LIMIT = range(6)
REASON_NAMES = ("none", "diverged", "finger_far", "stagnant", "no_contact", "time_limit")

POSE_MASK = np.ones(N_JOINTS)
POSE_MASK[list(THUMB_JOINTS)] = 0.0


@dataclass
class RewardSnapshot:
    """Everything compute_reward needs, decoupled from the simulator."""
    omega: np.ndarray        # (N,) object angular velocity over the control step, rad/s
    dist_thumb: np.ndarray   # (N,) thumb tip to object centroid, m
    dist_index: np.ndarray   # (N,)
    tau: np.ndarray          # (N,12) last clamped PD torques
    qdot: np.ndarray         # (N,12)
    q: np.ndarray            # (N,12)
    q0: np.ndarray           # (N,12) canonical pose at reset


def compute_reward(snap: RewardSnapshot, rw: RewardParams, omega_thresh: float):
    """-> (total (N,), components dict). Exact weighted sum, no hidden terms."""
    rot = np.clip(snap.omega, -rw.rot_clip, rw.rot_clip)
    d = 0.5 * (snap.dist_thumb + snap.dist_index)
    prox = np.maximum(0.0, 1.0 - d / rw.d_thresh)
    torque = -np.sum(snap.tau ** 2, axis=-1)
    work = -np.sum(np.abs(snap.tau) * np.abs(snap.qdot), axis=-1) ** 2
    pose = -np.sum(POSE_MASK * (snap.q - snap.q0) ** 2, axis=-1)
    rp = -np.maximum(0.0, snap.omega - omega_thresh)
    pc_z = np.zeros_like(rot)
    components = {"rotate": rot, "proximity": prox, "torque": torque, "work": work,
                  "pose": pose, "rotate_penalty": rp, "pc_z": pc_z}
    total = (rw.lambda_rotate * rot
             + rw.lambda_proximity * prox
             + abs(rw.lambda_torque) * torque
             + abs(rw.lambda_work) * work
             + abs(rw.lambda_pose) * pose
             + abs(rw.lambda_rotate_penalty) * rp
             + abs(rw.lambda_pc_z) * pc_z)
    return total, components


def priv_dim(task: str) -> int:
    return 97 if task == "nutbolt" else 54


class ScrewEnv:
    """Batch of independent envs stepping in lockstep (single process)."""

    def __init__(self, cfg: RunConfig, num_envs: int | None = None, seed: int | None = None):
        self.cfg = cfg
        self.n = num_envs if num_envs is not None else cfg.env.num_envs
        self.seed = seed if seed is not None else cfg.env.seed
        self.world = SimWorld(cfg, self.n)
        self.rngs = [np.random.default_rng([self.seed, i]) for i in range(self.n)]
        self.disturb = cfg.env.mode == "train"
        self.training_progress = 0.0
        w = cfg.term.window
        self.prev_targets = np.tile(self.world.q0, (self.n, 1))
        self.obs_win = np.zeros((self.n, cfg.env.obs_window, FRAME_DIM))
        self.theta_buf = np.zeros((self.n, w))
        self.force_buf = np.zeros((self.n, w))
        self.buf_len = np.zeros(self.n, dtype=np.int64)
        self.buf_ptr = np.zeros(self.n, dtype=np.int64)
        self.ep_len = np.zeros(self.n, dtype=np.int64)
        self.ep_return = np.zeros(self.n)
        self.ep_theta0 = np.zeros(self.n)
        self.dr = {k: np.zeros(self.n) for k in
                   ("scale", "mass", "friction", "restitution")}
        self.dr["com"] = np.zeros((self.n, 3))
        self.dr["kp"] = np.zeros((self.n, N_JOINTS))
        self.dr["kd"] = np.zeros((self.n, N_JOINTS))
        self.reset_all()

    # -- reset ----------------------------------------------------------------

    def _sample_dr(self, i: int) -> dict:
        d = self.cfg.dr
        u = self.rngs[i].random(31)

        def lerp(a, b, t):
            return a + (b - a) * t

        return {
            "scale": lerp(d.scale_lo, d.scale_hi, u[0]),
            "mass": lerp(d.mass_lo, d.mass_hi, u[1]),
            "com": lerp(d.com_lo, d.com_hi, u[2:5]),
            "friction": lerp(d.friction_lo, d.friction_hi, u[5]),
            "restitution": lerp(d.restitution_lo, d.restitution_hi, u[6]),
            "kp": lerp(d.kp_lo, d.kp_hi, u[7:19]),
            "kd": lerp(d.kd_lo, d.kd_hi, u[19:31]),
        }

    def _reset_idx(self, idx: np.ndarray) -> None:
        for i in idx:
            s = self._sample_dr(int(i))
            for k in self.dr:
                self.dr[k][i] = s[k]
            self.world.reset_envs(int(i), scale=s["scale"], mass=s["mass"], com=s["com"],
                                  friction=s["friction"], restitution=s["restitution"],
                                  kp=s["kp"], kd=s["kd"])
        self.prev_targets[idx] = self.world.q0
        w = self.world
        w.last_tau[idx] = 0.0
        w.last_force_tip[idx] = 0.0
        w.last_fn[idx] = 0.0
        if w.last_contacts is not None:
            w.last_contacts.active[idx] = False
        frame = np.concatenate([w.q[idx], self.prev_targets[idx]], axis=-1)
        self.obs_win[idx] = frame[:, None, :]
        self.buf_len[idx] = 0
        self.buf_ptr[idx] = 0
        self.ep_len[idx] = 0
        self.ep_return[idx] = 0.0
        self.ep_theta0[idx] = self.world.theta[idx]

    def reset_all(self) -> np.ndarray:
        self._reset_idx(np.arange(self.n))
        return self.obs()

    def obs(self) -> np.ndarray:
        return self.obs_win.reshape(self.n, -1)

    # -- action & stepping ----------------------------------------------------

    def apply_action(self, f_out: np.ndarray) -> np.ndarray:
        """targets = eta * f + previous targets, clamped; becomes the new memory."""
        t = self.prev_targets + self.cfg.env.action_scale * f_out
        t = np.clip(t, self.world.hand.q_lo, self.world.hand.q_hi)
        self.prev_targets = t
        return t

    def omega_threshold(self) -> float:
        rw = self.cfg.reward
        if rw.omega_curriculum:
            return rw.omega_curr_lo + (rw.omega_curr_hi - rw.omega_curr_lo) * self.training_progress
        return rw.omega_thresh

    def set_training_progress(self, frac: float) -> None:
        self.training_progress = min(max(frac, 0.0), 1.0)

    def step(self, f_out: np.ndarray, noise_on: bool = True,
             wrist_cmd: np.ndarray | None = None,
             ext_torque: np.ndarray | None = None,
             drag_force: np.ndarray | None = None):
        """-> (obs, reward, done, info). Done envs are auto-reset; their row of
        obs is the fresh reset observation."""
        targets = self.apply_action(np.asarray(f_out, dtype=np.float64))
        return self.step_targets(targets, noise_on=noise_on, wrist_cmd=wrist_cmd,
                                 ext_torque=ext_torque, drag_force=drag_force)

    def step_targets(self, targets: np.ndarray, noise_on: bool = True,
                     wrist_cmd: np.ndarray | None = None,
                     ext_torque: np.ndarray | None = None,
                     drag_force: np.ndarray | None = None):
        """Step with absolute hand position targets, which also become the
        rate-integration memory. No clamping here: a caller that quantizes
        targets at an episode boundary must see them applied verbatim."""
        cfg = self.cfg
        targets = np.asarray(targets, dtype=np.float64).copy()
        self.prev_targets = targets
        applied = targets
        obs_eps = np.zeros((self.n, N_JOINTS))
        if noise_on:
            act_eps = np.empty((self.n, N_JOINTS))
            for i, g in enumerate(self.rngs):
                eps = g.standard_normal(2 * N_JOINTS)
                act_eps[i] = eps[:N_JOINTS]
                obs_eps[i] = eps[N_JOINTS:]
            applied = np.clip(targets + cfg.dr.act_noise_rot * act_eps,
                              self.world.hand.q_lo, self.world.hand.q_hi)

        q_ext = np.zeros(self.n)
        disturbed = np.zeros(self.n, dtype=bool)
        disturb_mag = np.zeros(self.n)
        if self.disturb:
            r = self.cfg.object.radius
            for i, g in enumerate(self.rngs):
                u = g.random(4)
                if u[0] < cfg.dr.force_prob:
                    disturbed[i] = True
                    mag = cfg.dr.force_scale * self.world.mass[i]
                    disturb_mag[i] = mag
                    beta = 2 * np.pi * u[1]
                    gamma = 2 * np.pi * u[2]
                    rr = r * self.world.scale[i]
                    px, py = rr * np.cos(beta), rr * np.sin(beta)
                    q_ext[i] = px * mag * np.sin(gamma) - py * mag * np.cos(gamma)
        if ext_torque is not None:
            q_ext = q_ext + ext_torque

        theta_prev = self.world.theta.copy()
        try:
            bad = self.world.step_physics(applied, wrist_cmd=wrist_cmd,
                                          ext_torque=q_ext, drag_force=drag_force)
        except NonFiniteError:
            bad = np.ones(self.n, dtype=bool)

        omega = (self.world.theta - theta_prev) / cfg.sim.dt_control
        fk = self.world.last_fk
        centroid = self.world.object_centroid()
        dists = np.linalg.norm(fk.tip_pos - centroid[:, None, :], axis=-1)
        snap = RewardSnapshot(omega=omega, dist_thumb=dists[:, 0], dist_index=dists[:, 1],
                              tau=self.world.last_tau, qdot=self.world.qd,
                              q=self.world.q, q0=np.tile(self.world.q0, (self.n, 1)))
        reward, components = compute_reward(snap, cfg.reward, self.omega_threshold())
        reward = np.where(bad, 0.0, reward)

        # Observation window.
        q_obs = self.world.q + (cfg.dr.obs_noise_rot * obs_eps if noise_on else 0.0)
        frame = np.concatenate([q_obs, self.prev_targets], axis=-1)
        self.obs_win = np.concatenate([self.obs_win[:, 1:], frame[:, None, :]], axis=1)

        # Termination bookkeeping.
        self.ep_len += 1
        self.ep_return += reward
        self.theta_buf[np.arange(self.n), self.buf_ptr] = self.world.theta
        self.force_buf[np.arange(self.n), self.buf_ptr] = self.world.total_normal_force()
        w = self.theta_buf.shape[1]
        self.buf_ptr = (self.buf_ptr + 1) % w
        self.buf_len = np.minimum(self.buf_len + 1, w)

        reason = self._termination(bad, dists)
        done = reason != R_NONE

        info = {
            "components": components,
            "frame24": frame,
            "reason": reason,
            "disturbed": disturbed,
            "disturb_mag": disturb_mag,
            "ep_return": self.ep_return.copy(),
            "ep_len": self.ep_len.copy(),
            "ep_rotation": self.world.theta - self.ep_theta0,
        }
        if done.any():
            self._reset_idx(np.flatnonzero(done))
        info["priv"] = self.privileged_vector()
        return self.obs(), reward, done, info

    def _termination(self, bad: np.ndarray, dists: np.ndarray) -> np.ndarray:
        t = self.cfg.term
        full = self.buf_len >= self.theta_buf.shape[1]
        finger_far = (dists[:, 0] > t.finger_far) | (dists[:, 1] > t.finger_far)
        span = self.theta_buf.max(axis=1) - self.theta_buf.min(axis=1)
        stagnant = full & (span < t.eps_theta)
        no_contact = full & (self.force_buf < t.eps_force).all(axis=1)
        time_limit = self.ep_len >= t.episode_len
        return np.select(
            [bad, finger_far, stagnant, no_contact, time_limit],
            [R_DIVERGED, R_FINGER_FAR, R_STAGNANT, R_NO_CONTACT, R_TIME_LIMIT],
            R_NONE,
        )

    # -- privileged & tactile -------------------------------------------------

    def privileged_vector(self) -> np.ndarray:
        """(N, 97) for nutbolt, (N, 54) for screwdriver; fixed field order."""
        w = self.world
        fk = w.fk_now()
        lin, ang = w.hand.tip_velocities(fk, w.qd)
        obj_pos = w.object_centroid()
        obj_quat = quat_about_z(w.theta)
        obj_linvel = np.zeros((self.n, 3))
        obj_linvel[:, 2] = w.theta_dot * w.slope
        obj_angvel = np.zeros((self.n, 3))
        obj_angvel[:, 2] = w.theta_dot
        tips2 = fk.tip_pos[:, :2].reshape(self.n, 6)
        quat2 = mat_to_quat(fk.tip_rot[:, :2]).reshape(self.n, 8)
        lin2 = lin[:, :2].reshape(self.n, 6)
        ang2 = ang[:, :2].reshape(self.n, 6)
        contact_any = (w.last_contacts.active.any(axis=1).astype(np.float64)[:, None]
                       if w.last_contacts is not None else np.zeros((self.n, 1)))
        col = [
            obj_pos,
            self.dr["scale"][:, None],
            self.dr["mass"][:, None],
            self.dr["friction"][:, None],
            self.dr["com"],
            obj_quat,
            obj_linvel,
            obj_angvel,
            self.dr["restitution"][:, None],
            tips2,
            quat2,
            lin2,
            ang2,
            contact_any,
            obj_pos,                                  # nut body position
            w.theta_dot[:, None],                     # nut joint velocity
            w.theta[:, None],                         # nut joint position
            np.full((self.n, 1), self.cfg.object.joint_coulomb),
            np.ones((self.n, 1)),                     # hand scale
        ]
        if self.cfg.env.task == "nutbolt":
            col += [
                w.wrist_pos,
                w.wrist_quat(),
                w.q,
                self.dr["kp"],
                self.dr["kd"],
            ]
        return np.concatenate(col, axis=1)

    def tactile(self) -> np.ndarray:
        """(N, 1800) from the last substep's contacts."""
        w = self.world
        fk = w.last_fk if w.last_fk is not None else w.fk_now()
        t = synth_tactile(w.hand, fk, w.last_contacts, w.last_force_tip)
        return flatten_tactile(t)


def vec_rollout(env: ScrewEnv, policy, n_steps: int, noise_on: bool = True,
                want_tactile: bool = False):
    """Collect n_steps of experience from every env.

    policy: callable(obs (N,72), priv (N,P)) -> (action, logprob, value, mean).
    Returns a dict of stacked arrays, time-major (T, N, ...), plus the
    bootstrap value row values[T].
    """
    n = env.n
    buf = {
        "obs": np.empty((n_steps, n, OBS_DIM)),
        "priv": np.empty((n_steps, n, priv_dim(env.cfg.env.task))),
        "action": np.empty((n_steps, n, ACT_DIM)),
        "logprob": np.empty((n_steps, n)),
        "value": np.empty((n_steps + 1, n)),
        "reward": np.empty((n_steps, n)),
        "done": np.empty((n_steps, n), dtype=bool),
        "mean": np.empty((n_steps, n, ACT_DIM)),
        "ep_return": np.empty((n_steps, n)),
        "ep_len": np.empty((n_steps, n), dtype=np.int64),
        "ep_rotation": np.empty((n_steps, n)),
    }
    if want_tactile:
        buf["tactile"] = np.empty((n_steps, n, 1800))
    priv = env.privileged_vector()
    tact = env.tactile() if want_tactile else None
    obs = env.obs()
    for t in range(n_steps):
        buf["obs"][t] = obs
        buf["priv"][t] = priv
        if want_tactile:
            buf["tactile"][t] = tact
        action, logprob, value, mean = policy(obs, priv, tact)
        obs, reward, done, info = env.step(action, noise_on=noise_on)
        buf["action"][t] = action
        buf["logprob"][t] = logprob
        buf["value"][t] = value
        buf["reward"][t] = reward
        buf["done"][t] = done
        buf["mean"][t] = mean
        buf["ep_return"][t] = info["ep_return"]
        buf["ep_len"][t] = info["ep_len"]
        buf["ep_rotation"][t] = info["ep_rotation"]
        priv = info["priv"]
        if want_tactile:
            tact = env.tactile()
    _, _, value, _ = policy(obs, priv, tact)
    buf["value"][n_steps] = value
    buf["last_info"] = info
    return buf
