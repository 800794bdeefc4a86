"""Dense networks with hand-written forward/backward passes, Adam, running
observation normalization, and a self-describing checkpoint container.

Everything is float64 numpy. Backward passes are exact reverse-mode
derivatives of the forward code; finite-difference tests hold them to 1e-4
relative. Parameters live in flat name->array dicts whose arrays are shared
with the module objects, so in-place optimizer updates mutate the nets."""

from __future__ import annotations

import binascii
import json
import struct

import numpy as np

CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def elu(z):
    return np.where(z > 0.0, z, np.expm1(z))


def elu_grad(z, a):
    # For z <= 0, d/dz elu = exp(z) = a + 1.
    return np.where(z > 0.0, 1.0, a + 1.0)


class Mlp:
    """Dense stack: widths[0] -> ... -> widths[-1], ELU between layers.

    out_act: "linear" | "tanh" | "elu" applied after the final matmul.
    """

    def __init__(self, widths, rng=None, out_act="linear", final_scale=1.0):
        self.widths = list(widths)
        self.out_act = out_act
        self.w = []
        self.b = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            scale = np.sqrt(2.0 / fan_in)
            if i == len(widths) - 2:
                scale *= final_scale
            self.w.append(rng.standard_normal((fan_in, widths[i + 1])) * scale)
            self.b.append(np.zeros(widths[i + 1]))

    @property
    def n_layers(self):
        return len(self.w)

    def params(self, prefix=""):
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}w{i}"] = self.w[i]
            out[f"{prefix}b{i}"] = self.b[i]
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatch(f"input dim {x.shape[-1]} != {self.widths[0]}")
        cache = {"x": [], "z": [], "a": []}
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            cache["x"].append(h)
            z = h @ self.w[i] + self.b[i]
            cache["z"].append(z)
            if i < last:
                h = elu(z)
            elif self.out_act == "tanh":
                h = np.tanh(z)
            elif self.out_act == "elu":
                h = elu(z)
            else:
                h = z
            cache["a"].append(h)
        return h, cache

    def backward(self, cache, g_out):
        """-> (grads dict like params(), gradient w.r.t. the input)."""
        if cache is None:
            raise RuntimeError("no forward cache")
        grads = {}
        g = np.asarray(g_out, dtype=np.float64)
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            z, a, x = cache["z"][i], cache["a"][i], cache["x"][i]
            if i < last or self.out_act == "elu":
                g = g * elu_grad(z, a)
            elif self.out_act == "tanh":
                g = g * (1.0 - a * a)
            gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            grads[f"w{i}"] = gw
            grads[f"b{i}"] = gb
            g = g @ self.w[i].T
        return grads, g


class Hourglass:
    """Encoder-decoder stack with additive skips onto the mirrored layers.

    widths: [d_in, e1, e2, bottleneck, e2, e1, d_out]. The first-layer output
    feeds the fifth layer's pre-activation and the second feeds the fourth.
    """

    def __init__(self, d_in, e1, e2, bottleneck, d_out, rng=None):
        widths = [d_in, e1, e2, bottleneck, e2, e1, d_out]
        self.widths = widths
        self.w = []
        self.b = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i in range(6):
            scale = np.sqrt(2.0 / widths[i])
            if i == 5:
                scale *= 0.1
            self.w.append(rng.standard_normal((widths[i], widths[i + 1])) * scale)
            self.b.append(np.zeros(widths[i + 1]))

    def params(self, prefix=""):
        out = {}
        for i in range(6):
            out[f"{prefix}w{i}"] = self.w[i]
            out[f"{prefix}b{i}"] = self.b[i]
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatch(f"input dim {x.shape[-1]} != {self.widths[0]}")
        c = {"x": x}
        c["z1"] = x @ self.w[0] + self.b[0]
        c["h1"] = elu(c["z1"])
        c["z2"] = c["h1"] @ self.w[1] + self.b[1]
        c["h2"] = elu(c["z2"])
        c["z3"] = c["h2"] @ self.w[2] + self.b[2]
        c["h3"] = elu(c["z3"])
        c["z4"] = c["h3"] @ self.w[3] + self.b[3] + c["h2"]
        c["h4"] = elu(c["z4"])
        c["z5"] = c["h4"] @ self.w[4] + self.b[4] + c["h1"]
        c["h5"] = elu(c["z5"])
        out = c["h5"] @ self.w[5] + self.b[5]
        return out, c

    def backward(self, cache, g_out):
        c = cache
        if c is None:
            raise RuntimeError("no forward cache")
        g = np.asarray(g_out, dtype=np.float64)
        grads = {}

        def mm(a, b):
            return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

        def bsum(g_):
            return g_.reshape(-1, g_.shape[-1]).sum(axis=0)

        grads["w5"], grads["b5"] = mm(c["h5"], g), bsum(g)
        g5 = (g @ self.w[5].T) * elu_grad(c["z5"], c["h5"])
        grads["w4"], grads["b4"] = mm(c["h4"], g5), bsum(g5)
        g_h1_skip = g5
        g4 = (g5 @ self.w[4].T) * elu_grad(c["z4"], c["h4"])
        grads["w3"], grads["b3"] = mm(c["h3"], g4), bsum(g4)
        g_h2_skip = g4
        g3 = (g4 @ self.w[3].T) * elu_grad(c["z3"], c["h3"])
        grads["w2"], grads["b2"] = mm(c["h2"], g3), bsum(g3)
        g_h2 = g3 @ self.w[2].T + g_h2_skip
        g2 = g_h2 * elu_grad(c["z2"], c["h2"])
        grads["w1"], grads["b1"] = mm(c["h1"], g2), bsum(g2)
        g_h1 = g2 @ self.w[1].T + g_h1_skip
        g1 = g_h1 * elu_grad(c["z1"], c["h1"])
        grads["w0"], grads["b0"] = mm(c["x"], g1), bsum(g1)
        g_in = g1 @ self.w[0].T
        return grads, g_in


def prefix_grads(prefix, grads):
    return {prefix + k: v for k, v in grads.items()}


class ActorCritic:
    """Policy/value network in one of three information regimes.

    oracle:     actor and critic share [state enc + priv enc -> trunk];
    nopriv:     shared trunk on the state encoding alone;
    asymmetric: actor = state enc -> trunk -> action head (obs only);
                critic = own state enc + priv enc + tactile enc -> trunk -> value.
    Action mean is tanh-bounded; log_std is a free parameter vector.
    """

    def __init__(self, nets_cfg, obs_dim, priv_dim, act_dim, mode, seed=0,
                 tactile_dim=1800):
        self.mode = mode
        self.obs_dim = obs_dim
        self.priv_dim = priv_dim
        self.act_dim = act_dim
        self.tactile_dim = tactile_dim
        n = nets_cfg
        g = np.random.default_rng([seed, 101])
        se_w = [obs_dim, n.state_hidden1, n.state_hidden2]
        self.se = Mlp(se_w, g, out_act="elu")
        trunk_in = n.state_hidden2
        self.pe = None
        if mode == "oracle":
            self.pe = Mlp([priv_dim, n.priv_hidden, n.z_dim], g)
            trunk_in += n.z_dim
        self.trunk = Mlp([trunk_in, n.trunk_hidden1, n.trunk_hidden2], g, out_act="elu")
        self.ah = Mlp([n.trunk_hidden2, act_dim], g, out_act="tanh", final_scale=0.01)
        self.log_std = np.full(act_dim, n.log_std_init)
        if mode == "asymmetric":
            self.c_se = Mlp(se_w, g, out_act="elu")
            self.c_pe = Mlp([priv_dim, n.priv_hidden, n.z_dim], g)
            self.c_te = Mlp([tactile_dim, n.priv_hidden], g, out_act="elu")
            c_in = n.state_hidden2 + n.z_dim + n.priv_hidden
            self.c_trunk = Mlp([c_in, n.trunk_hidden1, n.trunk_hidden2], g, out_act="elu")
            self.vh = Mlp([n.trunk_hidden2, 1], g)
        else:
            self.vh = Mlp([n.trunk_hidden2, 1], g)

    def params(self):
        p = {"log_std": self.log_std}
        p.update(self.se.params("se."))
        if self.pe is not None:
            p.update(self.pe.params("pe."))
        p.update(self.trunk.params("trunk."))
        p.update(self.ah.params("ah."))
        p.update(self.vh.params("vh."))
        if self.mode == "asymmetric":
            p.update(self.c_se.params("c_se."))
            p.update(self.c_pe.params("c_pe."))
            p.update(self.c_te.params("c_te."))
            p.update(self.c_trunk.params("c_trunk."))
        return p

    def set_params(self, values):
        mine = self.params()
        for k, v in values.items():
            if k not in mine:
                raise ShapeMismatch(f"unknown parameter {k}")
            if mine[k].shape != v.shape:
                raise ShapeMismatch(f"{k}: {mine[k].shape} vs {v.shape}")
            mine[k][...] = v

    def forward(self, obs, priv=None, tactile=None):
        """-> dict(mean, value, z (oracle), cache)."""
        s, c_se = self.se.forward(obs)
        cache = {"se": c_se}
        z = None
        if self.mode == "oracle":
            z, c_pe = self.pe.forward(priv)
            cache["pe"] = c_pe
            t_in = np.concatenate([s, z], axis=-1)
        else:
            t_in = s
        t, c_tr = self.trunk.forward(t_in)
        cache["trunk"] = c_tr
        mean, c_ah = self.ah.forward(t)
        cache["ah"] = c_ah
        if self.mode == "asymmetric":
            cs, c_cse = self.c_se.forward(obs)
            cz, c_cpe = self.c_pe.forward(priv)
            ct, c_cte = self.c_te.forward(tactile)
            cin = np.concatenate([cs, cz, ct], axis=-1)
            ctr, c_ctr = self.c_trunk.forward(cin)
            v, c_vh = self.vh.forward(ctr)
            cache.update(c_se2=c_cse, c_pe2=c_cpe, c_te2=c_cte, c_trunk2=c_ctr, vh=c_vh)
        else:
            v, c_vh = self.vh.forward(t)
            cache["vh"] = c_vh
        return {"mean": mean, "value": v[..., 0], "z": z, "cache": cache}

    def backward(self, cache, d_mean, d_value):
        """Accumulate gradients from both heads. d_value shape (N,)."""
        grads = {}
        g_ah, g_t = self.ah.backward(cache["ah"], d_mean)
        grads.update(prefix_grads("ah.", g_ah))
        dv = np.asarray(d_value)[..., None]
        if self.mode == "asymmetric":
            g_vh, g_ctr = self.vh.backward(cache["vh"], dv)
            grads.update(prefix_grads("vh.", g_vh))
            g_ctrunk, g_cin = self.c_trunk.backward(cache["c_trunk2"], g_ctr)
            grads.update(prefix_grads("c_trunk.", g_ctrunk))
            n1 = self.c_se.widths[-1]
            n2 = n1 + self.c_pe.widths[-1]
            g_cse, _ = self.c_se.backward(cache["c_se2"], g_cin[..., :n1])
            g_cpe, _ = self.c_pe.backward(cache["c_pe2"], g_cin[..., n1:n2])
            g_cte, _ = self.c_te.backward(cache["c_te2"], g_cin[..., n2:])
            grads.update(prefix_grads("c_se.", g_cse))
            grads.update(prefix_grads("c_pe.", g_cpe))
            grads.update(prefix_grads("c_te.", g_cte))
        else:
            g_vh, g_t_v = self.vh.backward(cache["vh"], dv)
            grads.update(prefix_grads("vh.", g_vh))
            g_t = g_t + g_t_v
        g_trunk, g_tin = self.trunk.backward(cache["trunk"], g_t)
        grads.update(prefix_grads("trunk.", g_trunk))
        if self.mode == "oracle":
            ns = self.se.widths[-1]
            g_se, _ = self.se.backward(cache["se"], g_tin[..., :ns])
            g_pe, _ = self.pe.backward(cache["pe"], g_tin[..., ns:])
            grads.update(prefix_grads("pe.", g_pe))
        else:
            g_se, _ = self.se.backward(cache["se"], g_tin)
        grads.update(prefix_grads("se.", g_se))
        grads["log_std"] = np.zeros_like(self.log_std)
        return grads


class StudentPolicy:
    """Sensorimotor policy: history encoder phi predicts the latent, which
    joins the state encoding in the oracle-shaped trunk. No privileged input."""

    def __init__(self, nets_cfg, obs_dim, hist_dim, act_dim, seed=0):
        n = nets_cfg
        g = np.random.default_rng([seed, 202])
        self.se = Mlp([obs_dim, n.state_hidden1, n.state_hidden2], g, out_act="elu")
        self.phi = Mlp([hist_dim, n.phi_hidden1, n.phi_hidden2, n.z_dim], g)
        self.trunk = Mlp([n.state_hidden2 + n.z_dim, n.trunk_hidden1, n.trunk_hidden2],
                         g, out_act="elu")
        self.ah = Mlp([n.trunk_hidden2, act_dim], g, out_act="tanh", final_scale=0.01)

    def params(self):
        p = {}
        p.update(self.se.params("se."))
        p.update(self.phi.params("phi."))
        p.update(self.trunk.params("trunk."))
        p.update(self.ah.params("ah."))
        return p

    def set_params(self, values):
        mine = self.params()
        for k, v in values.items():
            if k not in mine:
                raise ShapeMismatch(f"unknown parameter {k}")
            mine[k][...] = v

    def init_from_oracle(self, oracle: ActorCritic):
        for src, dst in ((oracle.se, self.se), (oracle.trunk, self.trunk),
                         (oracle.ah, self.ah)):
            for i in range(src.n_layers):
                dst.w[i][...] = src.w[i]
                dst.b[i][...] = src.b[i]

    def forward(self, obs, hist):
        s, c_se = self.se.forward(obs)
        zhat, c_phi = self.phi.forward(hist)
        t_in = np.concatenate([s, zhat], axis=-1)
        t, c_tr = self.trunk.forward(t_in)
        mean, c_ah = self.ah.forward(t)
        return {"mean": mean, "zhat": zhat,
                "cache": {"se": c_se, "phi": c_phi, "trunk": c_tr, "ah": c_ah}}

    def backward(self, cache, d_mean, d_zhat=None):
        grads = {}
        g_ah, g_t = self.ah.backward(cache["ah"], d_mean)
        grads.update(prefix_grads("ah.", g_ah))
        g_trunk, g_tin = self.trunk.backward(cache["trunk"], g_t)
        grads.update(prefix_grads("trunk.", g_trunk))
        ns = self.se.widths[-1]
        g_se, _ = self.se.backward(cache["se"], g_tin[..., :ns])
        grads.update(prefix_grads("se.", g_se))
        g_z = g_tin[..., ns:]
        if d_zhat is not None:
            g_z = g_z + d_zhat
        g_phi, _ = self.phi.backward(cache["phi"], g_z)
        grads.update(prefix_grads("phi.", g_phi))
        return grads


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{k}: grad {g.shape} vs param {p.shape}")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def grad_global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = grad_global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Normalizer:
    """Streaming per-dimension mean/std with a floor; clip on normalize."""

    def __init__(self, dim, clip=10.0, eps_std=1e-6):
        self.dim = dim
        self.clip = clip
        self.eps_std = eps_std
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty dataset")
        bm = x.mean(axis=0)
        bv = x.var(axis=0)
        delta = bm - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * (n / tot)
        self.m2 = self.m2 + bv * n + delta * delta * (self.count * n / tot)
        self.count = tot

    def fit(self, x):
        self.count = 0.0
        self.mean[:] = 0.0
        self.m2[:] = 0.0
        self.update(x)
        return self

    @property
    def std(self):
        if self.count <= 0:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self.m2 / self.count), self.eps_std)

    def normalize(self, x):
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def denormalize(self, xn):
        return xn * self.std + self.mean

    def state(self):
        return {"count": np.array([self.count]), "mean": self.mean.copy(),
                "m2": self.m2.copy()}

    def load_state(self, s):
        self.count = float(s["count"][0])
        self.mean = np.asarray(s["mean"], dtype=np.float64).copy()
        self.m2 = np.asarray(s["m2"], dtype=np.float64).copy()
        return self


# -- checkpoint container -----------------------------------------------------

def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Header (JSON: names, shapes, meta) + packed little-endian f32 + crc32."""
    names = sorted(tensors.keys())
    header = {
        "version": CKPT_VERSION,
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(np.asarray(tensors[k]).shape)}
                    for k in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(np.asarray(tensors[k], dtype=np.float32)).tobytes("C")
        for k in names)
    crc = binascii.crc32(hbytes + payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path):
    """-> (tensors dict of float32 arrays, meta dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hbytes = blob[12:12 + hlen]
    body = blob[12 + hlen:-4]
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if binascii.crc32(hbytes + body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checksum mismatch")
    header = json.loads(hbytes.decode("utf-8"))
    tensors = {}
    off = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        tensors[spec["name"]] = arr.copy()
        off += 4 * n
    if off != len(body):
        raise CheckpointError("payload length mismatch")
    return tensors, header["meta"]
