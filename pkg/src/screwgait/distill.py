"""Distills the privileged teacher into a sensorimotor student: the student
acts, the frozen teacher labels each visited state with its deterministic
action and latent, and Adam regresses the student onto both. The student's
only inputs are proprioception and a 30-step history of it."""

from __future__ import annotations

import csv
import os
from collections import deque

import numpy as np

from .config import ConfigError, RunConfig, config_hash
from .env import ACT_DIM, FRAME_DIM, OBS_DIM, ScrewEnv, priv_dim
from .nets import Adam, Normalizer, StudentPolicy, load_checkpoint, save_checkpoint
from .ppo import load_policy

HIST_LEN_DEFAULT = 30


class HistoryBuffer:
    """Per-env ring of the last `length` proprioceptive frames, oldest first.
    Reset pads the whole ring with the first frame of the new episode."""

    def __init__(self, n_envs: int, length: int = HIST_LEN_DEFAULT,
                 frame_dim: int = FRAME_DIM):
        self.n = n_envs
        self.length = length
        self.frame_dim = frame_dim
        self.buf = np.zeros((n_envs, length, frame_dim))

    def reset(self, idx, frame):
        """idx: env indices; frame (len(idx), frame_dim)."""
        self.buf[idx] = np.asarray(frame)[:, None, :]

    def push(self, frames):
        self.buf[:, :-1] = self.buf[:, 1:]
        self.buf[:, -1] = frames

    def flat(self):
        return self.buf.reshape(self.n, self.length * self.frame_dim)


def predict_embedding(phi, history_flat):
    """Deterministic latent estimate from flattened history."""
    z, _ = phi.forward(history_flat)
    return z


def distill_loss(pred_mean, pred_z, label_a, label_z):
    """Per-sample squared-error sum over both heads, averaged over the batch.
    Returns (loss, d_mean, d_z) with gradients of the batch mean."""
    da = pred_mean - label_a
    dz = pred_z - label_z
    per_sample = np.sum(da * da, axis=-1) + np.sum(dz * dz, axis=-1)
    loss = float(np.mean(per_sample))
    b = max(pred_mean.shape[0], 1) if pred_mean.ndim > 1 else 1
    return loss, 2.0 * da / b, 2.0 * dz / b


class SensorimotorTrainer:
    def __init__(self, cfg: RunConfig, teacher, teacher_norms, seed: int | None = None):
        if teacher.mode != "oracle":
            raise ConfigError("teacher must be an oracle-mode policy",
                              key="distill.teacher")
        d = cfg.distill
        self.cfg = cfg
        self.seed = cfg.env.seed if seed is None else seed
        self.teacher = teacher
        self.t_obs_norm = teacher_norms["obs"]
        self.t_priv_norm = teacher_norms["priv"]
        self.env = ScrewEnv(cfg, num_envs=d.num_envs, seed=self.seed)
        self.student = StudentPolicy(cfg.nets, OBS_DIM,
                                     d.history_len * FRAME_DIM, ACT_DIM,
                                     seed=self.seed)
        self.student.init_from_oracle(teacher)
        self.hist = HistoryBuffer(d.num_envs, d.history_len)
        # frame stats = the teacher obs normalizer's newest-frame slice,
        # frozen so the student's input scaling never drifts mid-training
        self.hist_norm = Normalizer(FRAME_DIM)
        self.hist_norm.load_state({
            "count": np.array([self.t_obs_norm.count]),
            "mean": self.t_obs_norm.mean[-FRAME_DIM:],
            "m2": self.t_obs_norm.m2[-FRAME_DIM:],
        })
        self.opt = Adam(self.student.params(), lr=d.lr)
        self.rng = np.random.default_rng([self.seed, 303])
        self.iteration = 0
        self.holdout_hist = deque(maxlen=200)
        self.fixed_holdout = self._collect_holdout()
        obs = self.env.obs()
        self.hist.reset(np.arange(d.num_envs), obs[:, -FRAME_DIM:])

    def _lr(self):
        d = self.cfg.distill
        frac = min(self.iteration / max(d.max_iters, 1), 1.0)
        return d.lr + (d.lr_final - d.lr) * frac

    def _labels(self, obs, priv):
        out = self.teacher.forward(self.t_obs_norm.normalize(obs),
                                   self.t_priv_norm.normalize(priv))
        return out["mean"], out["z"]

    def student_action(self, obs, hist_flat, deterministic=True):
        on = self.t_obs_norm.normalize(obs)
        hn = self.hist_norm.normalize(
            hist_flat.reshape(-1, FRAME_DIM)).reshape(hist_flat.shape)
        out = self.student.forward(on, hn)
        a = out["mean"]
        if not deterministic:
            a = a + self.cfg.distill.explore_std * self.rng.standard_normal(a.shape)
        return a, out

    def dagger_iteration(self):
        """Student-driven rollout, teacher labels, minibatch regression.
        Returns loss metrics including held-out action MSE."""
        d = self.cfg.distill
        n, T = d.num_envs, d.steps_per_iter
        obs = self.env.obs()
        priv = self.env.privileged_vector()
        obs_buf = np.empty((T, n, OBS_DIM))
        hist_buf = np.empty((T, n, d.history_len * FRAME_DIM))
        la_buf = np.empty((T, n, ACT_DIM))
        lz_buf = np.empty((T, n, self.cfg.nets.z_dim))
        for t in range(T):
            hist_flat = self.hist.flat()
            obs_buf[t] = obs
            hist_buf[t] = hist_flat
            la_buf[t], lz_buf[t] = self._labels(obs, priv)
            action, _ = self.student_action(obs, hist_flat, deterministic=False)
            obs, _, done, info = self.env.step(action)
            priv = info["priv"]
            self.hist.push(info["frame24"])
            if done.any():
                idx = np.nonzero(done)[0]
                self.hist.reset(idx, obs[idx, -FRAME_DIM:])

        total = T * n
        obs_n = self.t_obs_norm.normalize(obs_buf.reshape(total, -1))
        hist_n = self.hist_norm.normalize(
            hist_buf.reshape(-1, FRAME_DIM)).reshape(total, -1)
        la = la_buf.reshape(total, -1)
        lz = lz_buf.reshape(total, -1)

        lr = self._lr()
        loss_sum = a_mse_sum = z_mse_sum = 0.0
        n_up = 0
        for _ in range(d.epochs_per_iter):
            perm = self.rng.permutation(total)
            for s in range(0, total, d.minibatch):
                mb = perm[s:s + d.minibatch]
                out = self.student.forward(obs_n[mb], hist_n[mb])
                loss, d_mean, d_z = distill_loss(out["mean"], out["zhat"],
                                                 la[mb], lz[mb])
                grads = self.student.backward(out["cache"], d_mean, d_z)
                self.opt.step(grads, lr)
                loss_sum += loss
                a_mse_sum += float(np.mean((out["mean"] - la[mb]) ** 2))
                z_mse_sum += float(np.mean((out["zhat"] - lz[mb]) ** 2))
                n_up += 1

        holdout_a_mse, holdout_z_mse = self._holdout_mse()
        self.holdout_hist.append(holdout_a_mse)
        self.iteration += 1
        return {
            "iteration": self.iteration,
            "loss": loss_sum / max(n_up, 1),
            "action_mse": a_mse_sum / max(n_up, 1),
            "z_mse": z_mse_sum / max(n_up, 1),
            "holdout_action_mse": holdout_a_mse,
            "holdout_z_mse": holdout_z_mse,
        }

    def _collect_holdout(self):
        """One-time held-out set: states from teacher-driven rollouts in a
        separate env, with labels. The inputs are frozen, so the held-out MSE
        is a deterministic function of the student parameters, and the DAgger
        training distribution converges toward this set as the student
        approaches the teacher."""
        d = self.cfg.distill
        env = ScrewEnv(self.cfg, num_envs=d.holdout_envs,
                       seed=self.seed + 555_555)
        hist = HistoryBuffer(d.holdout_envs, d.history_len)
        obs = env.obs()
        hist.reset(np.arange(d.holdout_envs), obs[:, -FRAME_DIM:])
        priv = env.privileged_vector()
        rng = np.random.default_rng([self.seed, 404])
        O, H, A, Z = [], [], [], []
        for _ in range(d.holdout_steps):
            la, lz = self._labels(obs, priv)
            O.append(obs.copy())
            H.append(hist.flat().copy())
            A.append(la)
            Z.append(lz)
            a = la + d.explore_std * rng.standard_normal(la.shape)
            obs, _, done, info = env.step(a)
            priv = info["priv"]
            hist.push(info["frame24"])
            if done.any():
                idx = np.nonzero(done)[0]
                hist.reset(idx, obs[idx, -FRAME_DIM:])
        obs_n = self.t_obs_norm.normalize(np.concatenate(O))
        hist_flat = np.concatenate(H)
        hist_n = self.hist_norm.normalize(
            hist_flat.reshape(-1, FRAME_DIM)).reshape(hist_flat.shape)
        return {"obs": obs_n, "hist": hist_n,
                "la": np.concatenate(A), "lz": np.concatenate(Z)}

    def _holdout_mse(self):
        fh = self.fixed_holdout
        se_a = se_z = 0.0
        n = fh["obs"].shape[0]
        for s in range(0, n, 4096):
            out = self.student.forward(fh["obs"][s:s + 4096],
                                       fh["hist"][s:s + 4096])
            k = out["mean"].shape[0]
            se_a += float(np.sum((out["mean"] - fh["la"][s:s + k]) ** 2)) / out["mean"].shape[1]
            se_z += float(np.sum((out["zhat"] - fh["lz"][s:s + k]) ** 2)) / out["zhat"].shape[1]
        return se_a / n, se_z / n

    def converged(self):
        """<1% relative held-out improvement over the last converge_iters."""
        d = self.cfg.distill
        h = list(self.holdout_hist)
        if len(h) < d.converge_iters + 1:
            return False
        window = h[-(d.converge_iters + 1):]
        base = window[0]
        if base <= 0:
            return True
        best = min(window[1:])
        return (base - best) / base < d.converge_tol

    def save(self, path, extra_meta=None):
        tensors = dict(self.student.params())
        for prefix, nz in (("norm_obs.", self.t_obs_norm),
                           ("norm_hist.", self.hist_norm)):
            for k, v in nz.state().items():
                tensors[prefix + k] = v
        meta = {
            "kind": "student",
            "task": self.cfg.env.task,
            "config_hash": config_hash(self.cfg),
            "obs_dim": OBS_DIM,
            "hist_len": self.cfg.distill.history_len,
            "frame_dim": FRAME_DIM,
            "act_dim": ACT_DIM,
            "iteration": self.iteration,
            "seed": self.seed,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, tensors, meta)


def load_student(path, cfg: RunConfig):
    """-> (StudentPolicy, norms {obs, hist}, meta)."""
    tensors, meta = load_checkpoint(path)
    net = StudentPolicy(cfg.nets, meta["obs_dim"],
                        meta["hist_len"] * meta["frame_dim"],
                        meta["act_dim"], seed=0)
    net.set_params({k: v.astype(np.float64) for k, v in tensors.items()
                    if not k.startswith("norm_")})
    norms = {}
    for name, dim in (("obs", meta["obs_dim"]), ("hist", meta["frame_dim"])):
        nz = Normalizer(dim)
        nz.load_state({k.split(".", 1)[1]: tensors[k].astype(np.float64)
                       for k in tensors if k.startswith(f"norm_{name}.")})
        norms[name] = nz
    return net, norms, meta


def student_policy_fn(student, obs_norm, hist_norm):
    """(obs, hist_flat) -> deterministic action. Proprioception only."""
    def fn(obs, hist_flat):
        on = obs_norm.normalize(obs)
        hn = hist_norm.normalize(
            hist_flat.reshape(-1, FRAME_DIM)).reshape(hist_flat.shape)
        return student.forward(on, hn)["mean"]
    return fn


def evaluate_student(cfg: RunConfig, student, obs_norm, hist_norm,
                     episodes: int, seed: int = 1, noise_on: bool = True,
                     hist_len: int | None = None):
    """Rolls the student with deterministic actions; history + obs only."""
    L = hist_len if hist_len is not None else cfg.distill.history_len
    env = ScrewEnv(cfg, num_envs=episodes, seed=seed)
    hist = HistoryBuffer(episodes, L)
    fn = student_policy_fn(student, obs_norm, hist_norm)
    obs = env.obs()
    hist.reset(np.arange(episodes), obs[:, -FRAME_DIM:])
    returns = np.zeros(episodes)
    rots = np.zeros(episodes)
    lens = np.zeros(episodes)
    got = np.zeros(episodes, dtype=bool)
    for _ in range(cfg.term.episode_len + 1):
        a = fn(obs, hist.flat())
        obs, _, done, info = env.step(a, noise_on=noise_on)
        hist.push(info["frame24"])
        new = done & ~got
        returns[new] = info["ep_return"][new]
        rots[new] = info["ep_rotation"][new]
        lens[new] = info["ep_len"][new]
        got |= new
        if done.any():
            idx = np.nonzero(done)[0]
            hist.reset(idx, obs[idx, -FRAME_DIM:])
        if got.all():
            break
    k = max(int(got.sum()), 1)
    return {
        "mean_return": float(returns.sum() / k),
        "mean_rotation": float(rots.sum() / k),
        "mean_ep_len": float(lens.sum() / k),
        "episodes": int(got.sum()),
    }


DISTILL_CURVE_FIELDS = ("iteration", "loss", "action_mse", "z_mse",
                        "holdout_action_mse")


def train_sensorimotor(cfg: RunConfig, teacher_path: str, out_dir: str,
                       seed: int | None = None, iterations: int | None = None,
                       quiet: bool = True, stop_on_converge: bool = True):
    """DAgger loop to convergence or budget. Writes student.ckpt and
    distill_curves.csv; returns the trainer and its final metrics.
    stop_on_converge=False runs the full budget even past convergence,
    for fixed-length curve studies."""
    os.makedirs(out_dir, exist_ok=True)
    teacher, t_norms, t_meta = load_policy(teacher_path, cfg)
    trainer = SensorimotorTrainer(cfg, teacher, t_norms, seed=seed)
    n_iter = iterations if iterations is not None else cfg.distill.max_iters
    last = {}
    with open(os.path.join(out_dir, "distill_curves.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DISTILL_CURVE_FIELDS)
        for i in range(n_iter):
            m = trainer.dagger_iteration()
            w.writerow([m["iteration"], f"{m['loss']:.8f}",
                        f"{m['action_mse']:.8f}", f"{m['z_mse']:.8f}",
                        f"{m['holdout_action_mse']:.8f}"])
            last = m
            if not quiet:
                print(f"distill iter {m['iteration']} loss {m['loss']:.5f} "
                      f"a_mse {m['action_mse']:.6f} z_mse {m['z_mse']:.5f} "
                      f"holdout {m['holdout_action_mse']:.6f}", flush=True)
            if stop_on_converge and trainer.converged():
                break
    trainer.save(os.path.join(out_dir, "student.ckpt"),
                 {"teacher_iteration": t_meta.get("iteration")})
    return trainer, last
