"""Penalty-contact rigid-body world: hand + wrist + revolute/screw object.

State is batched over a leading env axis; a SimWorld with num_envs=1 is the
single-instance form used by teleop and replay. Stepping is synchronous and
deterministic: same state + commands -> bit-identical trajectories.

Integration: 10 substeps of 0.005 s per control step. Finger joints are
second-order with explicit clamped PD torque and implicit structural damping;
the object integrates its single generalized coordinate theta semi-implicitly
with implicit viscous and stop-capped Coulomb joint friction. Contact forces
are penalty springs with impulse caps sized by the pairwise effective mass,
which keeps the explicit scheme stable at high stiffness/friction draws.

The wrist is kinematic: it moves toward its target pose at bounded rates once
per control step (it does not contribute to contact velocities).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .contact import ContactBatch, regular_polygon, sphere_vs_prism
from .geom import rpy_to_quat
from .hand import HandModel, N_FINGERS, N_JOINTS

THUMB, INDEX = 0, 1


class NonFiniteError(RuntimeError):
    """Integration produced NaN/Inf; the affected env must be reset."""


@dataclass
class Contact:
    finger_id: int
    point: np.ndarray        # (3,)
    normal: np.ndarray       # (3,) outward (object -> tip)
    normal_force: float      # >= 0
    tangent_force: np.ndarray  # (2,) components in the tangent-plane basis
    penetration: float


class SimWorld:
    def __init__(self, cfg: RunConfig, num_envs: int = 1):
        self.cfg = cfg
        self.n = num_envs
        self.hand = HandModel(cfg.hand)
        self.poly = regular_polygon(cfg.object.sides, cfg.object.radius)
        self.pitch = cfg.object.pitch
        self.slope = -self.pitch / (2 * np.pi)   # dz/dtheta
        self.dt = cfg.sim.dt_control / cfg.sim.substeps

        contact_dist = cfg.object.radius + cfg.hand.tip_radius
        self.q0 = self.hand.canonical_pose(contact_dist)
        contact_z = cfg.object.base_height - cfg.object.contact_z_offset
        drop = self.hand.tip_drop(self.q0[1])
        self.wrist_home = np.array([0.0, 0.0, contact_z + drop - cfg.hand.mount_z])
        # Tip effective mass seen by contacts, reflected through the chain.
        self.m_tip = cfg.sim.joint_inertia / (cfg.hand.link1 + cfg.hand.link2) ** 2

        n = num_envs
        self.q = np.tile(self.q0, (n, 1))
        self.qd = np.zeros((n, N_JOINTS))
        self.wrist_pos = np.tile(self.wrist_home, (n, 1))
        self.wrist_rpy = np.zeros((n, 3))
        self.wrist_target = np.concatenate([self.wrist_pos, self.wrist_rpy], axis=1)
        self.theta = np.zeros(n)
        self.theta_dot = np.zeros(n)
        self.scale = np.ones(n)
        self.mass = np.full(n, 0.05)
        self.com = np.zeros((n, 3))
        self.friction = np.full(n, 1.0)
        self.restitution = np.zeros(n)
        self.kp = np.full((n, N_JOINTS), 3.0)
        self.kd = np.full((n, N_JOINTS), 0.01)
        self.inertia = self._inertia()
        # Per-control-step caches.
        self.last_tau = np.zeros((n, N_JOINTS))
        self.last_contacts: ContactBatch | None = None
        self.last_force_tip = np.zeros((n, N_FINGERS, 3))
        self.last_fn = np.zeros((n, N_FINGERS))
        self.last_fk = None

    # -- parameter/state management ------------------------------------------

    def _inertia(self) -> np.ndarray:
        r = self.cfg.object.radius * self.scale
        izz = 0.5 * self.mass * r * r + self.mass * (self.com[:, 0] ** 2 + self.com[:, 1] ** 2)
        return izz + self.mass * self.slope ** 2

    def reset_envs(self, idx, scale=None, mass=None, com=None, friction=None,
                   restitution=None, kp=None, kd=None) -> None:
        """Reset the given envs to the canonical grasp with new object params."""
        if scale is not None:
            self.scale[idx] = scale
        if mass is not None:
            self.mass[idx] = mass
        if com is not None:
            self.com[idx] = com
        if friction is not None:
            self.friction[idx] = friction
        if restitution is not None:
            self.restitution[idx] = restitution
        if kp is not None:
            self.kp[idx] = kp
        if kd is not None:
            self.kd[idx] = kd
        self.q[idx] = self.q0
        self.qd[idx] = 0.0
        self.wrist_pos[idx] = self.wrist_home
        self.wrist_rpy[idx] = 0.0
        self.wrist_target[idx, :3] = self.wrist_home
        self.wrist_target[idx, 3:] = 0.0
        self.theta[idx] = 0.0
        self.theta_dot[idx] = 0.0
        self.inertia = self._inertia()
        self.last_tau[idx] = 0.0
        self.last_force_tip[idx] = 0.0
        self.last_fn[idx] = 0.0
        self.last_contacts = None

    @property
    def z_top(self) -> np.ndarray:
        return self.cfg.object.base_height + self.slope * self.theta

    @property
    def z_bot(self) -> np.ndarray:
        return self.z_top - self.cfg.object.height * self.scale

    @property
    def z_center(self) -> np.ndarray:
        return self.z_top - 0.5 * self.cfg.object.height * self.scale

    def object_centroid(self) -> np.ndarray:
        c = np.zeros((self.n, 3))
        c[:, 2] = self.z_center
        return c

    def wrist_rot(self) -> np.ndarray:
        from .geom import quat_to_mat
        return quat_to_mat(self.wrist_quat())

    def wrist_quat(self) -> np.ndarray:
        return rpy_to_quat(self.wrist_rpy[:, 0], self.wrist_rpy[:, 1], self.wrist_rpy[:, 2])

    def fk_now(self):
        return self.hand.fk(self.q, self.wrist_pos, self.wrist_rot())

    def proprio18(self) -> np.ndarray:
        return np.concatenate([self.q, self.wrist_pos, self.wrist_rpy], axis=1)

    # -- contact force model -------------------------------------------------

    def _contact_forces(self, fk, contacts: ContactBatch):
        """Force on each tip (N,5,3), normal magnitudes, tangential magnitudes,
        and the generalized torque on the object's coordinate."""
        cfg = self.cfg
        tip_vel, _ = self.hand.tip_velocities(fk, self.qd)
        cp = contacts.point
        # Object surface velocity at the contact point: rotation + screw feed.
        w = self.theta_dot[:, None]
        v_obj = np.stack([-w * cp[..., 1], w * cp[..., 0],
                          np.broadcast_to((self.theta_dot * self.slope)[:, None], cp.shape[:2])],
                         axis=-1)
        v_rel = tip_vel - v_obj
        nrm = contacts.normal
        vn = np.sum(v_rel * nrm, axis=-1)
        vt_vec = v_rel - vn[..., None] * nrm
        vt = np.linalg.norm(vt_vec, axis=-1)

        inv_i = 1.0 / self.inertia[:, None]

        def w_obj(d):
            lever = cp[..., 0] * d[..., 1] - cp[..., 1] * d[..., 0] + self.slope * d[..., 2]
            return lever ** 2 * inv_i

        cn_eff = cfg.sim.contact_cn * (1.0 - 0.5 * self.restitution)[:, None]
        fn_raw = cfg.sim.contact_kn * contacts.penetration - cn_eff * vn
        m_eff_n = 1.0 / (1.0 / self.m_tip + w_obj(nrm))
        cap_n = m_eff_n * (np.maximum(-vn, 0.0) + contacts.penetration / self.dt) / self.dt
        fn = np.clip(fn_raw, 0.0, cap_n)
        fn = np.where(contacts.active, fn, 0.0)

        that = vt_vec / np.maximum(vt, 1e-12)[..., None]
        m_eff_t = 1.0 / (1.0 / self.m_tip + w_obj(that))
        ft = np.minimum(np.minimum(self.friction[:, None] * fn, cfg.sim.contact_kt * vt),
                        m_eff_t * vt / self.dt)
        ft = np.where(contacts.active, ft, 0.0)

        f_tip = fn[..., None] * nrm - ft[..., None] * that
        # Reaction on the object, projected onto the theta coordinate.
        lever_f = cp[..., 0] * f_tip[..., 1] - cp[..., 1] * f_tip[..., 0] \
            + self.slope * f_tip[..., 2]
        q_obj = -np.sum(lever_f, axis=-1)
        return f_tip, fn, ft, q_obj

    # -- stepping ------------------------------------------------------------

    def _move_wrist(self) -> None:
        cfg = self.cfg
        if self.cfg.env.mode == "train":
            return
        dp = self.wrist_target[:, :3] - self.wrist_pos
        dist = np.linalg.norm(dp, axis=1)
        max_d = cfg.sim.wrist_lin_rate * cfg.sim.dt_control
        f = np.where(dist > max_d, max_d / np.maximum(dist, 1e-12), 1.0)
        self.wrist_pos = self.wrist_pos + dp * f[:, None]
        da = self.wrist_target[:, 3:] - self.wrist_rpy
        max_a = cfg.sim.wrist_ang_rate * cfg.sim.dt_control
        self.wrist_rpy = self.wrist_rpy + np.clip(da, -max_a, max_a)

    def command_wrist(self, target: np.ndarray) -> None:
        """Set the absolute wrist pose target (N,6): xyz + rpy."""
        self.wrist_target = np.asarray(target, dtype=np.float64).reshape(self.n, 6).copy()

    def step_physics(self, hand_targets: np.ndarray, wrist_cmd: np.ndarray | None = None,
                     ext_torque: np.ndarray | None = None,
                     drag_force: np.ndarray | None = None) -> np.ndarray:
        """Advance one control step (cfg.sim.substeps substeps).

        hand_targets (N,12); wrist_cmd optional absolute pose target (N,6);
        ext_torque optional generalized torque on the object (N,); drag_force
        optional external force on each fingertip (N,5,3). Returns a bool mask
        of envs that went non-finite (their state is left as-is for the caller
        to reset); raises NonFiniteError for a single-env world.
        """
        cfg = self.cfg
        tgt = np.clip(hand_targets, self.hand.q_lo, self.hand.q_hi)
        if wrist_cmd is not None:
            self.command_wrist(wrist_cmd)
        self._move_wrist()
        wrot = self.wrist_rot()
        ext = ext_torque if ext_torque is not None else 0.0
        q_grav = self.mass * cfg.sim.gravity * self.pitch / (2 * np.pi)
        dt = self.dt
        inv_ij = 1.0 / cfg.sim.joint_inertia
        verts = self.poly[None, :, :] * self.scale[:, None, None]

        for _ in range(cfg.sim.substeps):
            fk = self.hand.fk(self.q, self.wrist_pos, wrot)
            contacts = sphere_vs_prism(fk.tip_pos, cfg.hand.tip_radius, verts,
                                       self.theta, self.z_bot, self.z_top)
            f_tip, fn, ft, q_obj = self._contact_forces(fk, contacts)
            tau_c = self.hand.contact_torques(fk, contacts.point, f_tip)
            if drag_force is not None:
                tau_c = tau_c + self.hand.contact_torques(fk, fk.tip_pos, drag_force)

            tau_pd = np.clip(self.kp * (tgt - self.q) - self.kd * self.qd,
                             -cfg.sim.torque_limit, cfg.sim.torque_limit)
            qd_new = (self.qd + dt * (tau_pd + tau_c) * inv_ij) \
                / (1.0 + dt * cfg.sim.joint_damping * inv_ij)
            q_new = self.q + dt * qd_new
            low = q_new < self.hand.q_lo
            high = q_new > self.hand.q_hi
            q_new = np.clip(q_new, self.hand.q_lo, self.hand.q_hi)
            qd_new = np.where(low | high, 0.0, qd_new)
            self.q, self.qd = q_new, qd_new

            q_total = q_obj + ext + q_grav
            w_new = (self.theta_dot + dt * q_total / self.inertia) \
                / (1.0 + dt * self.cfg.object.joint_viscous / self.inertia)
            dv = dt * self.cfg.object.joint_coulomb / self.inertia
            w_new = np.sign(w_new) * np.maximum(np.abs(w_new) - dv, 0.0)
            self.theta = self.theta + dt * w_new
            self.theta_dot = w_new

            self.last_tau = tau_pd
            self.last_contacts = contacts
            self.last_force_tip = f_tip
            self.last_fn = fn
            self.last_fk = fk

        bad = ~(np.isfinite(self.q).all(axis=1) & np.isfinite(self.qd).all(axis=1)
                & np.isfinite(self.theta) & np.isfinite(self.theta_dot))
        if bad.any() and self.n == 1:
            raise NonFiniteError("simulation state became non-finite")
        return bad

    # -- inspection ----------------------------------------------------------

    def detect_contacts(self) -> list[Contact]:
        """Current contacts as typed records (single- or multi-env: env 0)."""
        fk = self.fk_now()
        verts = self.poly[None, :, :] * self.scale[:, None, None]
        contacts = sphere_vs_prism(fk.tip_pos, self.cfg.hand.tip_radius, verts,
                                   self.theta, self.z_bot, self.z_top)
        f_tip, fn, ft, _ = self._contact_forces(fk, contacts)
        out = []
        for f in range(N_FINGERS):
            if contacts.active[0, f]:
                out.append(Contact(
                    finger_id=f,
                    point=contacts.point[0, f].copy(),
                    normal=contacts.normal[0, f].copy(),
                    normal_force=float(fn[0, f]),
                    tangent_force=np.array([-float(ft[0, f]), 0.0]),
                    penetration=float(contacts.penetration[0, f]),
                ))
        return out

    def total_normal_force(self) -> np.ndarray:
        return self.last_fn.sum(axis=1)
