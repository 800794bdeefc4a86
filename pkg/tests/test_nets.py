import math

import numpy as np
import pytest

from screwgait.config import NetParams
from screwgait.nets import (
    ActorCritic,
    Adam,
    CheckpointError,
    Hourglass,
    Mlp,
    Normalizer,
    ShapeMismatch,
    StudentPolicy,
    clip_grad_norm,
    load_checkpoint,
    save_checkpoint,
)


def naive_mlp(ws, bs, x, out_act):
    """Reference forward: explicit per-unit dot products, scalar math."""
    h = [float(v) for v in x]
    n_layers = len(ws)
    for li in range(n_layers):
        w, b = ws[li], bs[li]
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(s)
        if li < n_layers - 1:
            h = [v if v > 0 else math.exp(v) - 1.0 for v in out]
        elif out_act == "tanh":
            h = [math.tanh(v) for v in out]
        elif out_act == "elu":
            h = [v if v > 0 else math.exp(v) - 1.0 for v in out]
        else:
            h = out
    return np.array(h)


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("out_act", ["linear", "tanh", "elu"])
def test_mlp_forward_matches_naive(out_act):
    rng = np.random.default_rng(3)
    net = Mlp([7, 11, 5], rng, out_act=out_act)
    for _ in range(5):
        x = rng.standard_normal(7)
        y, _ = net.forward(x)
        ref = naive_mlp(net.w, net.b, x, out_act)
        assert np.max(np.abs(y - ref)) < 1e-12


def test_mlp_batch_forward_rows_independent():
    rng = np.random.default_rng(4)
    net = Mlp([6, 9, 3], rng)
    xb = rng.standard_normal((8, 6))
    yb, _ = net.forward(xb)
    for i in range(8):
        yi, _ = net.forward(xb[i])
        # batched and single-row matmuls may differ by summation order
        assert np.max(np.abs(yb[i] - yi)) < 1e-12


def test_identity_single_layer_passthrough():
    net = Mlp([5, 5], np.random.default_rng(0))
    net.w[0][...] = np.eye(5)
    net.b[0][...] = 0.0
    x = np.random.default_rng(1).standard_normal(5)
    y, _ = net.forward(x)
    assert np.array_equal(y, x)


def test_zero_weights_zero_output():
    net = Mlp([4, 6, 3], np.random.default_rng(0))
    for w in net.w:
        w[...] = 0.0
    y, _ = net.forward(np.ones(4))
    assert np.array_equal(y, np.zeros(3))


def test_shape_mismatch_raises():
    net = Mlp([4, 3], np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros(5))


def test_backward_without_cache_raises():
    net = Mlp([4, 3], np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        net.backward(None, np.zeros(3))


def test_hourglass_forward_matches_composed_mlps():
    rng = np.random.default_rng(9)
    hg = Hourglass(10, 12, 9, 6, 8, rng)
    x = rng.standard_normal(10)

    def lin(i, v):
        return v @ hg.w[i] + hg.b[i]

    h1 = np.where(lin(0, x) > 0, lin(0, x), np.expm1(lin(0, x)))
    h2 = np.where(lin(1, h1) > 0, lin(1, h1), np.expm1(lin(1, h1)))
    h3 = np.where(lin(2, h2) > 0, lin(2, h2), np.expm1(lin(2, h2)))
    z4 = lin(3, h3) + h2
    h4 = np.where(z4 > 0, z4, np.expm1(z4))
    z5 = lin(4, h4) + h1
    h5 = np.where(z5 > 0, z5, np.expm1(z5))
    ref = lin(5, h5)
    y, _ = hg.forward(x)
    assert np.max(np.abs(y - ref)) < 1e-12


def test_hourglass_skips_change_output():
    # Zeroing the middle weights must not kill the signal path: the skip
    # connections alone still carry layer-1 features to the output.
    rng = np.random.default_rng(10)
    hg = Hourglass(10, 12, 9, 6, 8, rng)
    for i in (2, 3):
        hg.w[i][...] = 0.0
        hg.b[i][...] = 0.0
    x = rng.standard_normal(10)
    y, _ = hg.forward(x)
    assert np.max(np.abs(y)) > 1e-6


# ---------------------------------------------------------------- gradients


def fd_subset_check(loss_and_grads, params, rng, n_coords, h=1e-5, tol=1e-4):
    """Central-difference check on a random subset of parameter coordinates."""
    loss0, grads = loss_and_grads()
    assert np.isfinite(loss0)
    names = sorted(params)
    sizes = [params[k].size for k in names]
    total = sum(sizes)
    edges = np.cumsum([0] + sizes)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    coords = []
    for flat_idx in picks:
        ti = int(np.searchsorted(edges, flat_idx, side="right") - 1)
        coords.append((names[ti], int(flat_idx - edges[ti])))
    checked = 0
    for k, idx in coords:
        p = params[k]
        flat = p.reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        lp, _ = loss_and_grads()
        flat[idx] = old - h
        lm, _ = loss_and_grads()
        flat[idx] = old
        fd = (lp - lm) / (2 * h)
        an = grads[k].reshape(-1)[idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        assert rel < tol, f"{k}[{idx}]: fd={fd} analytic={an} rel={rel}"
        checked += 1
    assert checked == min(n_coords, total)


def complete_fd_check(loss_and_grads, params, h=1e-5, tol=1e-4):
    _, grads = loss_and_grads()
    for k in sorted(params):
        p = params[k]
        flat = p.reshape(-1)
        gflat = grads[k].reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            lp, _ = loss_and_grads()
            flat[idx] = old - h
            lm, _ = loss_and_grads()
            flat[idx] = old
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-6)
            assert rel < tol, f"{k}[{idx}]: fd={fd} analytic={gflat[idx]}"


@pytest.mark.parametrize("out_act", ["linear", "tanh"])
def test_mlp_gradients_complete(out_act):
    rng = np.random.default_rng(11)
    net = Mlp([6, 9, 4], rng, out_act=out_act)
    x = rng.standard_normal((3, 6))
    c = rng.standard_normal((3, 4))

    def lag():
        y, cache = net.forward(x)
        grads, _ = net.backward(cache, c)
        return float(np.sum(c * y)), grads

    complete_fd_check(lag, net.params())


def test_mlp_input_gradient():
    rng = np.random.default_rng(12)
    net = Mlp([5, 8, 3], rng)
    x = rng.standard_normal(5)
    c = rng.standard_normal(3)
    y, cache = net.forward(x)
    _, gx = net.backward(cache, c)
    h = 1e-5
    for i in range(5):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        fd = (np.sum(c * net.forward(xp)[0]) - np.sum(c * net.forward(xm)[0])) / (2 * h)
        assert abs(fd - gx[i]) / max(abs(fd), abs(gx[i]), 1e-6) < 1e-4


def test_backward_linearity():
    rng = np.random.default_rng(13)
    net = Mlp([6, 9, 4], rng, out_act="tanh")
    x = rng.standard_normal((2, 6))
    g = rng.standard_normal((2, 4))
    _, cache = net.forward(x)
    g1, gx1 = net.backward(cache, g)
    g2, gx2 = net.backward(cache, 2.0 * g)
    for k in g1:
        assert np.max(np.abs(g2[k] - 2.0 * g1[k])) < 1e-12 * max(1.0, np.max(np.abs(g1[k])))
    assert np.max(np.abs(gx2 - 2.0 * gx1)) < 1e-12 * max(1.0, np.max(np.abs(gx1)))


def test_hourglass_gradients_complete_small():
    rng = np.random.default_rng(14)
    hg = Hourglass(7, 8, 6, 4, 5, rng)
    x = rng.standard_normal((2, 7))
    c = rng.standard_normal((2, 5))

    def lag():
        y, cache = hg.forward(x)
        grads, _ = hg.backward(cache, c)
        return float(np.sum(c * y)), grads

    complete_fd_check(lag, hg.params())


def test_hourglass_gradients_full_width_subset():
    rng = np.random.default_rng(15)
    hg = Hourglass(110, 512, 256, 128, 16 * 18, rng)
    x = rng.standard_normal((2, 110))
    c = rng.standard_normal((2, 16 * 18))

    def lag():
        y, cache = hg.forward(x)
        grads, _ = hg.backward(cache, c)
        return float(np.sum(c * y)), grads

    fd_subset_check(lag, hg.params(), rng, n_coords=120)


@pytest.mark.parametrize("mode", ["oracle", "nopriv", "asymmetric"])
def test_actor_critic_gradients(mode):
    rng = np.random.default_rng(16)
    net = ActorCritic(NetParams(), 72, 97, 12, mode, seed=5, tactile_dim=1800)
    obs = rng.standard_normal((3, 72))
    priv = rng.standard_normal((3, 97))
    tact = rng.standard_normal((3, 1800)) * 0.1
    cm = rng.standard_normal((3, 12))
    cv = rng.standard_normal(3)

    def lag():
        out = net.forward(obs, priv, tact)
        grads = net.backward(out["cache"], cm, cv)
        return float(np.sum(cm * out["mean"]) + np.sum(cv * out["value"])), grads

    fd_subset_check(lag, net.params(), rng, n_coords=180)


def test_student_gradients_with_latent_target():
    rng = np.random.default_rng(17)
    net = StudentPolicy(NetParams(), 72, 720, 12, seed=6)
    obs = rng.standard_normal((3, 72))
    hist = rng.standard_normal((3, 720)) * 0.3
    cm = rng.standard_normal((3, 12))
    cz = rng.standard_normal((3, 8))

    def lag():
        out = net.forward(obs, hist)
        grads = net.backward(out["cache"], cm, d_zhat=cz)
        return float(np.sum(cm * out["mean"]) + np.sum(cz * out["zhat"])), grads

    fd_subset_check(lag, net.params(), rng, n_coords=180)


# ---------------------------------------------------------------- structure


def test_actor_critic_shapes_oracle():
    net = ActorCritic(NetParams(), 72, 97, 12, "oracle", seed=0)
    p = net.params()
    assert p["se.w0"].shape == (72, 128)
    assert p["se.w1"].shape == (128, 64)
    assert p["pe.w0"].shape == (97, 64)
    assert p["pe.w1"].shape == (64, 8)
    assert p["trunk.w0"].shape == (72, 256)
    assert p["trunk.w1"].shape == (256, 128)
    assert p["ah.w0"].shape == (128, 12)
    assert p["vh.w0"].shape == (128, 1)
    assert p["log_std"].shape == (12,)
    assert np.all(p["log_std"] == -1.0)
    out = net.forward(np.zeros((4, 72)), np.zeros((4, 97)))
    assert out["mean"].shape == (4, 12)
    assert out["value"].shape == (4,)
    assert out["z"].shape == (4, 8)


def test_actor_critic_shapes_asymmetric():
    net = ActorCritic(NetParams(), 72, 54, 12, "asymmetric", seed=0)
    p = net.params()
    assert p["c_te.w0"].shape == (1800, 64)
    assert p["c_pe.w0"].shape == (54, 64)
    assert p["c_trunk.w0"].shape == (64 + 8 + 64, 256)
    out = net.forward(np.zeros((2, 72)), np.zeros((2, 54)), np.zeros((2, 1800)))
    assert out["mean"].shape == (2, 12)
    assert out["value"].shape == (2,)


def test_nopriv_ignores_privileged_input():
    net = ActorCritic(NetParams(), 72, 97, 12, "nopriv", seed=1)
    obs = np.random.default_rng(0).standard_normal((3, 72))
    a = net.forward(obs, None)
    b = net.forward(obs, np.ones((3, 97)))
    assert np.array_equal(a["mean"], b["mean"])
    assert np.array_equal(a["value"], b["value"])


def test_action_mean_bounded():
    net = ActorCritic(NetParams(), 72, 97, 12, "oracle", seed=2)
    obs = np.random.default_rng(1).standard_normal((16, 72)) * 50.0
    priv = np.random.default_rng(2).standard_normal((16, 97)) * 50.0
    out = net.forward(obs, priv)
    assert np.all(np.abs(out["mean"]) < 1.0)


def test_student_shapes_and_oracle_init():
    oracle = ActorCritic(NetParams(), 72, 97, 12, "oracle", seed=3)
    stu = StudentPolicy(NetParams(), 72, 720, 12, seed=4)
    p = stu.params()
    assert p["phi.w0"].shape == (720, 256)
    assert p["phi.w1"].shape == (256, 128)
    assert p["phi.w2"].shape == (128, 8)
    stu.init_from_oracle(oracle)
    for name in ("se.w0", "se.w1", "trunk.w0", "trunk.w1", "ah.w0"):
        assert np.array_equal(stu.params()[name], oracle.params()[name])


def test_student_zero_phi_gives_zero_latent():
    stu = StudentPolicy(NetParams(), 72, 720, 12, seed=7)
    for i in range(stu.phi.n_layers):
        stu.phi.w[i][...] = 0.0
        stu.phi.b[i][...] = 0.0
    out = stu.forward(np.zeros((2, 72)), np.random.default_rng(0).standard_normal((2, 720)))
    assert np.array_equal(out["zhat"], np.zeros((2, 8)))


# ---------------------------------------------------------------- adam


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(20)
    p = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}
    p0 = {k: v.copy() for k, v in p.items()}
    g = {k: rng.standard_normal(v.shape) for k, v in p.items()}
    opt = Adam(p, lr=1e-3, eps=1e-8)
    opt.step(g)
    for k in p:
        expect = p0[k] - 1e-3 * g[k] / (np.abs(g[k]) + 1e-8)
        assert np.max(np.abs(p[k] - expect)) < 1e-12


def test_adam_zero_grad_no_motion():
    p = {"w": np.random.default_rng(0).standard_normal(5)}
    p0 = p["w"].copy()
    opt = Adam(p, lr=0.1)
    for _ in range(3):
        opt.step({"w": np.zeros(5)})
    assert np.array_equal(p["w"], p0)


def test_adam_three_steps_match_hand_rollout():
    w = np.array([1.0, -2.0])
    gs = [np.array([0.3, -0.1]), np.array([-0.2, 0.4]), np.array([0.05, 0.05])]
    p = {"w": w.copy()}
    opt = Adam(p, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    for g in gs:
        opt.step({"w": g})
    # independent rollout of the update equations
    m = np.zeros(2)
    v = np.zeros(2)
    ref = w.copy()
    for t, g in enumerate(gs, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9 ** t)
        vhat = v / (1 - 0.999 ** t)
        ref = ref - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.max(np.abs(p["w"] - ref)) < 1e-14


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(21)
        net = Mlp([6, 8, 3], rng)
        opt = Adam(net.params(), lr=1e-3)
        x = rng.standard_normal((4, 6))
        tgt = rng.standard_normal((4, 3))
        for _ in range(20):
            y, cache = net.forward(x)
            grads, _ = net.backward(cache, 2 * (y - tgt))
            opt.step(grads)
        return {k: v.copy() for k, v in net.params().items()}

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_grad_norm_clip():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(g, 1.0)
    assert abs(norm - 5.0) < 1e-12
    post = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
    assert post <= 1.0 + 1e-9
    g2 = {"a": np.array([0.3, 0.4])}
    norm2 = clip_grad_norm(g2, 1.0)
    assert abs(norm2 - 0.5) < 1e-12
    assert np.array_equal(g2["a"], np.array([0.3, 0.4]))


# ---------------------------------------------------------------- normalizer


def test_normalizer_round_trip():
    rng = np.random.default_rng(30)
    data = rng.standard_normal((500, 6)) * 3.0 + 1.0
    nz = Normalizer(6).fit(data)
    x = rng.standard_normal((40, 6)) * 3.0 + 1.0
    back = nz.denormalize(nz.normalize(x))
    assert np.max(np.abs(back - x)) < 1e-10


def test_normalizer_streaming_matches_batch():
    rng = np.random.default_rng(31)
    data = rng.standard_normal((10_000, 4)) * np.array([1.0, 5.0, 0.2, 2.0]) + 7.0
    nz = Normalizer(4)
    for chunk in np.array_split(data, 13):
        nz.update(chunk)
    assert np.max(np.abs(nz.mean - data.mean(axis=0))) < 1e-9
    assert np.max(np.abs(nz.std - data.std(axis=0))) < 1e-9


def test_normalizer_large_sample_recovers_moments():
    rng = np.random.default_rng(32)
    data = rng.normal(3.0, 2.0, size=(100_000, 1))
    nz = Normalizer(1).fit(data)
    assert abs(nz.mean[0] - 3.0) < 0.03
    assert abs(nz.std[0] - 2.0) < 0.03


def test_normalizer_constant_dim_floored():
    data = np.full((100, 3), 5.0)
    data[:, 1] = np.linspace(0, 1, 100)
    nz = Normalizer(3).fit(data)
    out = nz.normalize(data)
    assert np.array_equal(out[:, 0], np.zeros(100))
    assert np.array_equal(out[:, 2], np.zeros(100))
    assert nz.std[0] == 1e-6


def test_normalizer_empty_raises():
    nz = Normalizer(3)
    with pytest.raises(ValueError):
        nz.update(np.zeros((0, 3)))


def test_normalizer_clip_and_state_round_trip(tmp_path):
    rng = np.random.default_rng(33)
    nz = Normalizer(2, clip=5.0).fit(rng.standard_normal((200, 2)))
    out = nz.normalize(np.array([[1e6, -1e6]]))
    assert np.array_equal(out, np.array([[5.0, -5.0]]))
    nz2 = Normalizer(2, clip=5.0).load_state(nz.state())
    x = rng.standard_normal((10, 2))
    assert np.array_equal(nz.normalize(x), nz2.normalize(x))


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(40)
    tensors = {
        "net.w0": rng.standard_normal((7, 5)).astype(np.float32),
        "net.b0": rng.standard_normal(5).astype(np.float32),
        "log_std": np.full(12, -1.0, dtype=np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    meta = {"kind": "oracle", "config_hash": "abc123", "iter": 17}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, tensors, meta)
    loaded, meta2 = load_checkpoint(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert np.asarray(tensors[k]).shape == loaded[k].shape
        assert np.asarray(tensors[k]).tobytes() == loaded[k].tobytes()


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    rng = np.random.default_rng(41)
    tensors = {"a": rng.standard_normal((3, 3)).astype(np.float32)}
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    save_checkpoint(p1, tensors, {"x": 1})
    loaded, meta = load_checkpoint(p1)
    save_checkpoint(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"a": np.ones(4, dtype=np.float32)}, {})
    blob = bytearray(path.read_bytes())
    blob[-6] ^= 0xFF    # flip a payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all............")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path2 = tmp_path / "ver.bin"
    save_checkpoint(path2, {"a": np.ones(2, dtype=np.float32)}, {})
    blob = bytearray(path2.read_bytes())
    blob[4] = 99        # version field
    path2.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path2)


def test_float64_params_survive_f32_round_trip_exactly_when_f32():
    # Training keeps float64; saving casts to f32. A net whose params are
    # exactly representable in f32 must reload bit-identically.
    net = Mlp([4, 3], np.random.default_rng(42))
    for w in net.w:
        w[...] = w.astype(np.float32).astype(np.float64)
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck.bin")
        save_checkpoint(path, net.params(), {})
        loaded, _ = load_checkpoint(path)
        for k, v in net.params().items():
            assert np.array_equal(loaded[k].astype(np.float64), v)
