"""Hand kinematics: a 12-DoF five-finger hand on a 6-DoF kinematic wrist.

Fingers sit on a ring around the grasp axis, bases evenly spaced. Thumb and
index carry an abduction joint (about the mount vertical) plus two flexion
joints; the other three fingers have two flexion joints about an axis canted
so that flexion sweeps partly tangentially. All five chains share one
vectorized closed form: abduction Rz(qa) composed with planar flexion about a
per-finger canted axis.

Frames: mount x points inward (toward the axis), z up, y = z cross x. A
finger's tip frame has x along the distal link, y along the flexion axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HandParams
from .geom import cross3

N_FINGERS = 5
N_JOINTS = 12
FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# Padded (finger, slot) layout: slot 0 = abduction, 1 = MCP, 2 = PIP.
# q12 order: thumb[abd,mcp,pip], index[abd,mcp,pip], middle[mcp,pip], ring, pinky.
PAD_F = np.array([0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 4, 4])
PAD_S = np.array([0, 1, 2, 0, 1, 2, 1, 2, 1, 2, 1, 2])
HAS_ABD = np.array([True, True, False, False, False])
THUMB_JOINTS = (0, 1, 2)


@dataclass
class FkResult:
    tip_pos: np.ndarray     # (N,5,3) fingertip sphere centers, world
    tip_rot: np.ndarray     # (N,5,3,3) tip frames, columns = axes
    elbow_pos: np.ndarray   # (N,5,3) PIP pivot, world
    mount_pos: np.ndarray   # (N,5,3) finger base, world
    abd_axis: np.ndarray    # (N,5,3) abduction axis, world (zero rows for 2-DoF fingers)
    flex_axis: np.ndarray   # (N,5,3) flexion axis (MCP & PIP share direction), world


class HandModel:
    def __init__(self, params: HandParams):
        self.params = params
        p = params
        self.alpha = np.pi / 2 + 2 * np.pi / N_FINGERS * np.arange(N_FINGERS)
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        # Mount basis columns: x inward, y = z cross x, z up.
        self.mount_rot = np.zeros((N_FINGERS, 3, 3))
        self.mount_rot[:, 0, 0] = -ca
        self.mount_rot[:, 1, 0] = -sa
        self.mount_rot[:, 0, 1] = sa
        self.mount_rot[:, 1, 1] = -ca
        self.mount_rot[:, 2, 2] = 1.0
        self.mount_off = np.stack([p.mount_radius * ca, p.mount_radius * sa,
                                   np.full(N_FINGERS, p.mount_z)], axis=-1)
        self.cant = np.where(HAS_ABD, 0.0, p.cant_2dof)
        self.u_local = np.stack([np.zeros(N_FINGERS), np.cos(self.cant), np.sin(self.cant)], axis=-1)
        lo = np.empty(N_JOINTS)
        hi = np.empty(N_JOINTS)
        abd = PAD_S == 0
        lo[abd], hi[abd] = p.abd_lo, p.abd_hi
        lo[~abd], hi[~abd] = p.flex_lo, p.flex_hi
        self.q_lo, self.q_hi = lo, hi
        ct, st = np.cos(p.pad_tilt), np.sin(p.pad_tilt)
        self.pad_dir_local = np.array([ct, 0.0, st])  # pad normal in the tip frame

    def pad_q(self, q: np.ndarray) -> np.ndarray:
        """(N,12) -> (N,5,3) with zero abduction slots for 2-DoF fingers."""
        out = np.zeros(q.shape[:-1] + (N_FINGERS, 3), dtype=np.float64)
        out[..., PAD_F, PAD_S] = q
        return out

    def unpad(self, padded: np.ndarray) -> np.ndarray:
        return padded[..., PAD_F, PAD_S]

    def fk_basis(self, wrist_pos: np.ndarray, wrist_rot: np.ndarray):
        """Wrist-dependent part of fk; constant across substeps."""
        world = np.einsum("nij,fjk->nfik", wrist_rot, self.mount_rot)
        mount_w = wrist_pos[:, None, :] + np.einsum("nij,fj->nfi", wrist_rot, self.mount_off)
        return world, mount_w

    def fk(self, q: np.ndarray, wrist_pos: np.ndarray, wrist_rot: np.ndarray,
           basis=None) -> FkResult:
        """q (N,12), wrist_pos (N,3), wrist_rot (N,3,3) -> FkResult."""
        p = self.params
        qp = self.pad_q(q)
        qa, q1 = qp[..., 0], qp[..., 1]
        q12 = q1 + qp[..., 2]
        cx, sx = np.cos(self.cant), np.sin(self.cant)

        def flex_dir(th):
            # Rodrigues about (0, cos cant, sin cant) applied to (1,0,0).
            cth, sth = np.cos(th), np.sin(th)
            out = np.empty(th.shape + (3,))
            out[..., 0] = cth
            out[..., 1] = sx * sth
            out[..., 2] = -cx * sth
            return out

        d1 = flex_dir(q1)
        d2 = flex_dir(q12)
        elbow0 = p.link1 * d1
        tip0 = elbow0 + p.link2 * d2

        caq, saq = np.cos(qa), np.sin(qa)

        def rz(v):
            out = np.empty(v.shape)
            out[..., 0] = caq * v[..., 0] - saq * v[..., 1]
            out[..., 1] = saq * v[..., 0] + caq * v[..., 1]
            out[..., 2] = v[..., 2]
            return out

        tip_l = rz(tip0)
        elbow_l = rz(elbow0)
        link2_l = rz(d2)
        flex_l = rz(np.broadcast_to(self.u_local, d1.shape))

        world, mount_w = basis if basis is not None else \
            self.fk_basis(wrist_pos, wrist_rot)

        def to_world(v):
            return np.einsum("nfij,nfj->nfi", world, v)

        tip_pos = mount_w + to_world(tip_l)
        elbow_pos = mount_w + to_world(elbow_l)
        xd = to_world(link2_l)
        yd = to_world(flex_l)
        zd = cross3(xd, yd)
        tip_rot = np.empty(xd.shape + (3,))
        tip_rot[..., :, 0] = xd
        tip_rot[..., :, 1] = yd
        tip_rot[..., :, 2] = zd
        abd_axis = np.where(HAS_ABD[:, None], world[..., :, 2], 0.0)
        return FkResult(tip_pos, tip_rot, elbow_pos, mount_w, abd_axis, yd)

    def tip_velocities(self, fk: FkResult, qd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Linear and angular tip velocities from joint rates (wrist static).

        Returns (lin (N,5,3), ang (N,5,3)).
        """
        qp = self.pad_q(qd)
        r_mount = fk.tip_pos - fk.mount_pos
        r_elbow = fk.tip_pos - fk.elbow_pos
        lin = (qp[..., 0:1] * cross3(fk.abd_axis, r_mount)
               + qp[..., 1:2] * cross3(fk.flex_axis, r_mount)
               + qp[..., 2:3] * cross3(fk.flex_axis, r_elbow))
        ang = qp[..., 0:1] * fk.abd_axis + (qp[..., 1:2] + qp[..., 2:3]) * fk.flex_axis
        return lin, ang

    def contact_torques(self, fk: FkResult, point: np.ndarray, force: np.ndarray) -> np.ndarray:
        """Map world contact forces at `point` (N,5,3) to joint torques (N,12)."""
        rm = point - fk.mount_pos
        re = point - fk.elbow_pos
        mom_m = cross3(rm, force)
        mom_e = cross3(re, force)
        tau = np.stack([
            np.sum(fk.abd_axis * mom_m, axis=-1),
            np.sum(fk.flex_axis * mom_m, axis=-1),
            np.sum(fk.flex_axis * mom_e, axis=-1),
        ], axis=-1)
        return self.unpad(tau)

    def pad_frames(self, fk: FkResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pad normal and in-plane (u, v) axes per fingertip, world. (N,5,3) each."""
        n = np.einsum("nfij,j->nfi", fk.tip_rot, self.pad_dir_local)
        u = fk.tip_rot[..., :, 1]           # flexion axis
        v = cross3(n, u)
        return n, u, v

    def solve_touch_flexion(self, target_axis_dist: float, cant: float = 0.0) -> float:
        """Flexion phi with q1 = q2 = phi putting the tip at the given distance
        from the grasp axis (abduction 0). Bisection; distance grows with phi."""
        p = self.params

        def dist(phi):
            reach = p.link1 * np.cos(phi) + p.link2 * np.cos(2 * phi)
            tang = np.sin(cant) * (p.link1 * np.sin(phi) + p.link2 * np.sin(2 * phi))
            return np.hypot(p.mount_radius - reach, tang)

        lo, hi = 0.0, min(p.flex_hi, 1.4)
        if dist(lo) > target_axis_dist:
            return lo
        if dist(hi) < target_axis_dist:
            return hi
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if dist(mid) < target_axis_dist:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def tip_drop(self, phi: float, cant: float = 0.0) -> float:
        """Vertical drop of the tip below the mount ring at q1 = q2 = phi."""
        p = self.params
        return np.cos(cant) * (p.link1 * np.sin(phi) + p.link2 * np.sin(2 * phi))

    def canonical_pose(self, contact_axis_dist: float) -> np.ndarray:
        """q0 (12,): per-finger flexion solved so tips sit at the contact radius."""
        q0 = np.zeros(N_JOINTS)
        for f in range(N_FINGERS):
            phi = self.solve_touch_flexion(contact_axis_dist, self.cant[f])
            sl = joint_slice(f)
            q0[sl.stop - 2] = phi
            q0[sl.stop - 1] = phi
        return q0

    def descriptor(self) -> dict:
        """Machine-readable geometry for the UI schematic (shared, no drift)."""
        p = self.params
        return {
            "fingers": list(FINGER_NAMES),
            "mount_radius": p.mount_radius,
            "mount_angles": [float(a) for a in self.alpha],
            "link1": p.link1,
            "link2": p.link2,
            "tip_radius": p.tip_radius,
            "cant": [float(c) for c in self.cant],
            "has_abduction": [bool(b) for b in HAS_ABD],
            "joint_lo": [float(v) for v in self.q_lo],
            "joint_hi": [float(v) for v in self.q_hi],
        }


def joint_slice(finger: int) -> slice:
    starts = (0, 3, 6, 8, 10)
    widths = (3, 3, 2, 2, 2)
    return slice(starts[finger], starts[finger] + widths[finger])
