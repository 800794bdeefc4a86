"""Sphere-vs-extruded-convex-polygon closest points, batched.

The object is a convex polygon extruded along z, rotated about z by theta,
spanning [z_bot, z_top] in world. Fingertips are spheres. For each (env,
finger) pair we return the closest point on the solid's surface, the outward
normal at that point, and the sphere penetration depth (> 0 means contact).
Centers inside the solid resolve against the nearest face.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def regular_polygon(sides: int, radius: float) -> np.ndarray:
    """CCW vertex list (sides, 2), first vertex on +x."""
    ang = 2 * np.pi * np.arange(sides) / sides
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=-1)


@dataclass
class ContactBatch:
    active: np.ndarray       # (N,5) bool
    point: np.ndarray        # (N,5,3) closest surface point, world
    normal: np.ndarray       # (N,5,3) outward unit normal (object -> tip)
    penetration: np.ndarray  # (N,5) >= 0 where active


def closest_point_poly2d(p: np.ndarray, verts: np.ndarray):
    """Point vs convex CCW polygon in 2D, batched.

    p: (..., 2); verts: (..., V, 2) broadcastable to p's batch shape.
    Returns (closest (..., 2), signed_dist (...,), edge_normal (..., 2)) where
    signed_dist < 0 inside; for inside points closest/edge_normal refer to the
    nearest edge.
    """
    a = verts
    b = np.roll(verts, -1, axis=-2)
    e = b - a
    elen2 = np.sum(e * e, axis=-1)
    # Outward normals for CCW winding.
    n = np.empty(e.shape)
    n[..., 0] = e[..., 1]
    n[..., 1] = -e[..., 0]
    n = n / np.maximum(np.sqrt(elen2)[..., None], 1e-300)
    rel = p[..., None, :] - a
    side = np.sum(rel * n, axis=-1)                      # (..., V) signed edge-plane dist
    inside = np.all(side <= 0.0, axis=-1)

    batch = side.shape[:-1]
    V = side.shape[-1]
    B = int(np.prod(batch)) if batch else 1
    rows = np.arange(B)

    # Outside: closest point on each edge segment, take the min.
    t = np.clip(np.sum(rel * e, axis=-1) / np.maximum(elen2, 1e-300), 0.0, 1.0)
    cp_e = a + t[..., None] * e                          # (..., V, 2) full batch
    d2 = np.sum((p[..., None, :] - cp_e) ** 2, axis=-1)
    d2f = d2.reshape(B, V)
    k_out = np.argmin(d2f, axis=-1)
    cp_out = cp_e.reshape(B, V, 2)[rows, k_out].reshape(batch + (2,))
    d_out = np.sqrt(d2f[rows, k_out]).reshape(batch)

    # Inside: nearest edge plane.
    sidef = side.reshape(B, V)
    k_in = np.argmax(sidef, axis=-1)
    s_in = sidef[rows, k_in].reshape(batch)
    nb = np.broadcast_to(n, batch + (V, 2)).reshape(B, V, 2)
    n_in = nb[rows, k_in].reshape(batch + (2,))
    cp_in = p - s_in[..., None] * n_in

    closest = np.where(inside[..., None], cp_in, cp_out)
    sd = np.where(inside, s_in, d_out)
    vec_out = p - cp_out
    n_out = vec_out / np.maximum(d_out[..., None], 1e-300)
    normal = np.where(inside[..., None], n_in, n_out)
    return closest, sd, normal


def sphere_vs_prism(centers: np.ndarray, radius: float, verts2d: np.ndarray,
                    theta: np.ndarray, z_bot: np.ndarray, z_top: np.ndarray) -> ContactBatch:
    """centers (N,F,3) world; verts2d (N,V,2) object-frame cross-section;
    theta/z_bot/z_top (N,). Rotates centers into the object frame, solves the
    2D+axial closest point, and maps back to world.
    """
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    x = c * centers[..., 0] + s * centers[..., 1]
    y = -s * centers[..., 0] + c * centers[..., 1]
    z = centers[..., 2]
    p2 = np.empty(x.shape + (2,))                        # (N,F,2)
    p2[..., 0] = x
    p2[..., 1] = y

    cp2, sd2, n2 = closest_point_poly2d(p2, verts2d[:, None, :, :])
    inside2 = sd2 < 0.0
    zb = z_bot[:, None]
    zt = z_top[:, None]
    below, above = z < zb, z > zt
    in_z = ~(below | above)

    sh3 = sd2.shape + (3,)

    # Lateral surface (z clamped is z itself when in range).
    lat_cp = np.empty(sh3)
    lat_cp[..., :2] = cp2
    lat_cp[..., 2] = z
    lat_dist = np.abs(sd2)
    lat_n = np.empty(sh3)
    lat_n[..., :2] = n2
    lat_n[..., 2] = 0.0

    # Cap faces: clamp xy to the polygon only when outside it.
    cap_z = np.where(above, zt, zb)
    cap_cp = np.empty(sh3)
    cap_cp[..., :2] = np.where(inside2[..., None], p2, cp2)
    cap_cp[..., 2] = cap_z
    dzs = z - cap_z                                      # signed: >0 above, <0 below
    out2 = np.maximum(sd2, 0.0)
    cap_dist = np.sqrt(out2 ** 2 + dzs ** 2)
    cap_n_in = np.zeros(sh3)
    cap_n_in[..., 2] = np.where(above, 1.0, -1.0)
    cap_n_out = np.empty(sh3)
    cap_n_out[..., :2] = n2 * out2[..., None]
    cap_n_out[..., 2] = dzs
    cap_n_out = cap_n_out / np.maximum(cap_dist[..., None], 1e-300)
    cap_n = np.where(inside2[..., None], cap_n_in, cap_n_out)

    interior = inside2 & in_z
    # Interior: nearest of lateral plane vs caps; depth is positive inside.
    depth3 = np.empty(sh3)
    depth3[..., 0] = -sd2
    depth3[..., 1] = zt - z
    depth3[..., 2] = z - zb
    which = np.argmin(depth3, axis=-1)
    B = which.size
    int_depth = depth3.reshape(B, 3)[np.arange(B), which.reshape(B)].reshape(which.shape)
    axial_n = np.zeros(sh3)
    axial_n[..., 2] = np.where(which == 1, 1.0, -1.0)
    wl = (which == 0)[..., None]
    int_n = np.where(wl, lat_n, axial_n)
    axial_cp = np.empty(sh3)
    axial_cp[..., :2] = p2
    axial_cp[..., 2] = np.where(which == 1, zt * np.ones_like(z), zb * np.ones_like(z))
    int_cp = np.where(wl, lat_cp, axial_cp)

    surf_cp = np.where(in_z[..., None], lat_cp, cap_cp)
    surf_dist = np.where(in_z, lat_dist, cap_dist)
    surf_n = np.where(in_z[..., None], lat_n, cap_n)

    cp_o = np.where(interior[..., None], int_cp, surf_cp)
    n_o = np.where(interior[..., None], int_n, surf_n)
    pen = np.where(interior, radius + int_depth, radius - surf_dist)
    active = pen > 0.0

    # Back to world.
    def un_rot(v):
        out = np.empty(v.shape)
        out[..., 0] = c * v[..., 0] - s * v[..., 1]
        out[..., 1] = s * v[..., 0] + c * v[..., 1]
        out[..., 2] = v[..., 2]
        return out

    return ContactBatch(active, un_rot(cp_o), un_rot(n_o), np.maximum(pen, 0.0))
