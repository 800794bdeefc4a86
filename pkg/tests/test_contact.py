"""Closest-point queries checked against a brute-force surface-sampling oracle.

The oracle never reuses the production math: it samples the prism surface
(lateral rectangles and cap triangles) on parameter grids and refines around
the best sample until the spacing is far below the comparison tolerance.
"""

import numpy as np
import pytest

from screwgait.contact import closest_point_poly2d, regular_polygon, sphere_vs_prism


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_patch(corner, e1, e2, n):
    """Points on a parallelogram patch, (n+1)^2 grid including edges."""
    t = np.linspace(0.0, 1.0, n + 1)
    u, v = np.meshgrid(t, t, indexing="ij")
    return corner[None, :] + u.reshape(-1, 1) * e1[None, :] + v.reshape(-1, 1) * e2[None, :]


def oracle_surface_closest(p, verts2d, theta, z_bot, z_top, rounds=4, grid=80):
    """Closest point on the rotated prism surface to world point p."""
    r = rot_z(theta)
    patches = []
    v3b = np.concatenate([verts2d, np.full((len(verts2d), 1), z_bot)], axis=1)
    up = np.array([0.0, 0.0, z_top - z_bot])
    for i in range(len(verts2d)):
        a, b = v3b[i], v3b[(i + 1) % len(verts2d)]
        patches.append((a, b - a, up))                      # lateral face
    centroid = verts2d.mean(axis=0)
    for zc in (z_bot, z_top):
        c3 = np.array([centroid[0], centroid[1], zc])
        for i in range(len(verts2d)):
            a = np.array([verts2d[i][0], verts2d[i][1], zc])
            b = np.array([verts2d[(i + 1) % len(verts2d)][0], verts2d[(i + 1) % len(verts2d)][1], zc])
            patches.append((c3, a - c3, b - a))             # cap fan triangle (sheared patch covers it)
    best_d, best_pt = np.inf, None
    for corner, e1, e2 in patches:
        lo = np.zeros(2)
        hi = np.ones(2)
        for _ in range(rounds):
            t1 = np.linspace(lo[0], hi[0], grid + 1)
            t2 = np.linspace(lo[1], hi[1], grid + 1)
            u, v = np.meshgrid(t1, t2, indexing="ij")
            pts = corner[None, :] + u.reshape(-1, 1) * e1[None, :] + v.reshape(-1, 1) * e2[None, :]
            world = pts @ r.T
            d = np.linalg.norm(world - p[None, :], axis=1)
            k = int(np.argmin(d))
            cu, cv = u.reshape(-1)[k], v.reshape(-1)[k]
            su, sv = (hi[0] - lo[0]) / grid, (hi[1] - lo[1]) / grid
            lo = np.array([max(cu - su, 0.0), max(cv - sv, 0.0)])
            hi = np.array([min(cu + su, 1.0), min(cv + sv, 1.0)])
            if d[k] < best_d:
                best_d, best_pt = d[k], world[k]
    return best_pt, best_d


def point_inside(p, verts2d, theta, z_bot, z_top):
    """Inside test via per-edge cross products in the object frame."""
    if not (z_bot < p[2] < z_top):
        return False
    r = rot_z(theta)
    q = r.T @ p
    n = len(verts2d)
    for i in range(n):
        a, b = verts2d[i], verts2d[(i + 1) % n]
        e = b - a
        if e[0] * (q[1] - a[1]) - e[1] * (q[0] - a[0]) < 0.0:
            return False
    return True


HEX = regular_polygon(6, 0.025)
RADIUS = 0.012


def query(centers, theta=0.0, z_bot=0.0, z_top=0.04, verts=HEX):
    centers = np.asarray(centers, dtype=np.float64).reshape(1, -1, 3)
    return sphere_vs_prism(centers, RADIUS, verts[None], np.array([theta]),
                           np.array([z_bot]), np.array([z_top]))


def test_far_center_is_inactive():
    out = query([[0.2, 0.0, 0.02], [0.0, 0.0, 0.3], [-0.1, 0.1, -0.2]])
    assert not out.active.any()
    assert (out.penetration == 0.0).all()


def test_center_on_face_plane_full_penetration():
    # Midpoint of the edge joining the vertices at 0 and 60 degrees; its
    # outward normal points along the 30-degree direction.
    m = 0.5 * (HEX[0] + HEX[1])
    out = query([[m[0], m[1], 0.02]])
    n_want = np.array([np.cos(np.pi / 6), np.sin(np.pi / 6), 0.0])
    assert out.active[0, 0]
    assert np.allclose(out.penetration[0, 0], RADIUS, atol=1e-15)
    assert np.allclose(out.normal[0, 0], n_want, atol=1e-12)
    assert np.allclose(out.point[0, 0], [m[0], m[1], 0.02], atol=1e-15)


def test_near_edge_matches_sampling_oracle():
    # Just outside the vertical edge at vertex 0, penetrating.
    c = np.array([0.025 + 0.008, 0.004, 0.02])
    out = query([c])
    assert out.active[0, 0]
    pt, d = oracle_surface_closest(c, HEX, 0.0, 0.0, 0.04)
    assert np.linalg.norm(out.point[0, 0] - pt) < 1e-6
    assert abs((RADIUS - out.penetration[0, 0]) - d) < 1e-6


def test_random_outside_points_match_oracle():
    g = np.random.default_rng(0)
    theta = 0.37
    z_bot, z_top = 0.01, 0.05
    n_checked = 0
    for _ in range(40):
        c = np.array([g.uniform(-0.05, 0.05), g.uniform(-0.05, 0.05), g.uniform(-0.02, 0.08)])
        if point_inside(c, HEX, theta, z_bot, z_top):
            continue
        out = query([c], theta=theta, z_bot=z_bot, z_top=z_top)
        pt, d = oracle_surface_closest(c, HEX, theta, z_bot, z_top)
        got_d = RADIUS - out.penetration[0, 0] if out.active[0, 0] \
            else np.linalg.norm(c - out.point[0, 0])
        assert abs(got_d - d) < 1e-6, c
        # The closest point itself can be ambiguous only on symmetry sets;
        # random draws avoid those, so compare it too.
        assert np.linalg.norm(out.point[0, 0] - pt) < 1e-6, c
        n_checked += 1
    assert n_checked > 20


def test_interior_center_matches_oracle_distance():
    g = np.random.default_rng(1)
    theta = -0.6
    z_bot, z_top = 0.0, 0.04
    n_checked = 0
    for _ in range(40):
        c = np.array([g.uniform(-0.02, 0.02), g.uniform(-0.02, 0.02), g.uniform(0.002, 0.038)])
        if not point_inside(c, HEX, theta, z_bot, z_top):
            continue
        out = query([c], theta=theta, z_bot=z_bot, z_top=z_top)
        pt, d = oracle_surface_closest(c, HEX, theta, z_bot, z_top)
        assert out.active[0, 0]
        # For interior centers penetration = radius + distance to surface.
        assert abs(out.penetration[0, 0] - (RADIUS + d)) < 1e-6
        assert np.linalg.norm(out.point[0, 0] - pt) < 1e-6
        n_checked += 1
    assert n_checked > 15


def test_cap_and_corner_regions():
    cases = [
        np.array([0.0, 0.0, 0.045]),            # above top cap, over the middle
        np.array([0.0, 0.01, -0.008]),          # below bottom cap
        np.array([0.03, 0.0, 0.047]),           # above top, outside polygon (rim)
        np.array([0.028, -0.01, -0.006]),       # below bottom, outside polygon
    ]
    for c in cases:
        out = query([c])
        pt, d = oracle_surface_closest(c, HEX, 0.0, 0.0, 0.04)
        got_d = RADIUS - out.penetration[0, 0]
        assert abs(got_d - d) < 1e-6, c
        assert np.linalg.norm(out.point[0, 0] - pt) < 1e-6, c


def test_normals_unit_and_outward():
    g = np.random.default_rng(2)
    pts = np.stack([g.uniform(-0.05, 0.05, 30), g.uniform(-0.05, 0.05, 30),
                    g.uniform(-0.02, 0.06, 30)], axis=-1)
    out = query(pts.tolist())
    norms = np.linalg.norm(out.normal, axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-9)
    for f in range(pts.shape[0]):
        if not point_inside(pts[f], HEX, 0.0, 0.0, 0.04):
            # Outward normal points from surface toward the exterior center.
            v = pts[f] - out.point[0, f]
            if np.linalg.norm(v) > 1e-9:
                assert np.dot(v, out.normal[0, f]) > 0
