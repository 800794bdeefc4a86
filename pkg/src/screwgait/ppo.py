"""Clipped-surrogate policy optimization with GAE and a KL-adaptive
learning rate. Three information regimes: oracle (actor and critic see the
privileged vector), asymmetric (critic additionally sees tactile, actor sees
proprioception only), nopriv (neither sees privileged state)."""

from __future__ import annotations

import csv
import os
from collections import deque

import numpy as np

from .config import ConfigError, RunConfig, config_hash
from .env import ACT_DIM, OBS_DIM, ScrewEnv, priv_dim, vec_rollout
from .nets import (
    ActorCritic,
    Adam,
    Normalizer,
    clip_grad_norm,
    load_checkpoint,
    save_checkpoint,
)

LOG2PI = float(np.log(2.0 * np.pi))

MODES = ("oracle", "asymmetric", "nopriv")


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


def compute_gae(rewards, values, dones, gamma, lam):
    """Generalized advantage estimation, time-major.

    values carries one extra bootstrap row at index T. done masks both the
    bootstrap and the advantage recursion at that step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones)
    T = rewards.shape[0]
    if values.shape[0] != T + 1:
        raise LengthMismatch(f"values rows {values.shape[0]}, need {T + 1}")
    if dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise LengthMismatch("rewards/values/dones shapes disagree")
    nd = 1.0 - dones.astype(np.float64)
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] * nd[t] - values[t]
        carry = delta + gamma * lam * nd[t] * carry
        adv[t] = carry
    returns = adv + values[:T]
    return adv, returns


def normalize_advantages(adv):
    mu = adv.mean()
    sd = adv.std()
    if sd < 1e-12:
        return adv - mu
    return (adv - mu) / sd


def gaussian_logprob(mean, log_std, action):
    z = (action - mean) / np.exp(log_std)
    return (-0.5 * np.sum(z * z, axis=-1)
            - np.sum(log_std)
            - 0.5 * LOG2PI * mean.shape[-1])


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new):
    """KL(old || new) per sample, summed over action dims."""
    v_old = np.exp(2.0 * log_std_old)
    v_new = np.exp(2.0 * log_std_new)
    d = mean_old - mean_new
    per_dim = log_std_new - log_std_old + (v_old + d * d) / (2.0 * v_new) - 0.5
    return np.sum(per_dim, axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (1.0 + LOG2PI)))


def ppo_minibatch_update(net, opt, batch, ppo_cfg, lr):
    """One gradient step on one minibatch. Returns metrics including the
    analytic KL against the rollout-time policy; raises NonFiniteLoss
    (without stepping) when the loss or gradients go bad."""
    out = net.forward(batch["obs"], batch.get("priv"), batch.get("tactile"))
    mean, value = out["mean"], out["value"]
    log_std = net.log_std
    action = batch["action"]
    lp = gaussian_logprob(mean, log_std, action)
    ratio = np.exp(lp - batch["logprob_old"])
    adv = batch["adv"]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - ppo_cfg.clip, 1.0 + ppo_cfg.clip) * adv
    surr = np.minimum(unclipped, clipped)
    policy_loss = -float(surr.mean())
    v_target = batch["v_target"]
    verr = value - v_target
    value_loss = float(np.mean(verr * verr))
    if ppo_cfg.entropy_coef != 0.0:
        entropy_term = -ppo_cfg.entropy_coef * gaussian_entropy(log_std)
    else:
        entropy_term = 0.0
    loss = policy_loss + ppo_cfg.value_coef * value_loss + entropy_term
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss={loss}")

    n = adv.shape[0]
    # gradient flows through the ratio only where the unclipped branch is min
    gate = (unclipped <= clipped).astype(np.float64)
    dlp = -(adv * gate * ratio) / n
    var = np.exp(2.0 * log_std)
    diff = action - mean
    d_mean = dlp[:, None] * diff / var
    g_log_std = np.sum(dlp[:, None] * (diff * diff / var - 1.0), axis=0)
    if ppo_cfg.entropy_coef != 0.0:
        g_log_std -= ppo_cfg.entropy_coef
    d_value = ppo_cfg.value_coef * 2.0 * verr / n

    grads = net.backward(out["cache"], d_mean, d_value)
    grads["log_std"] = grads["log_std"] + g_log_std
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss("non-finite gradient")
    grad_norm = clip_grad_norm(grads, ppo_cfg.max_grad_norm)
    # divergence of the pre-step policy from the rollout policy
    kl = float(np.mean(gaussian_kl(batch["mean_old"], batch["log_std_old"],
                                   mean, log_std)))
    opt.step(grads, lr)
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > ppo_cfg.clip))
    return {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy_term": entropy_term,
        "clip_frac": clip_frac,
        "grad_norm": grad_norm,
        "kl": kl,
    }


class PpoTrainer:
    def __init__(self, cfg: RunConfig, mode: str, seed: int | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown ppo mode {mode!r}", key="ppo.mode")
        p = cfg.ppo
        if (cfg.env.num_envs * p.rollout_steps) % p.minibatch != 0:
            raise ConfigError("minibatch must divide rollout size",
                              key="ppo.minibatch")
        self.cfg = cfg
        self.mode = mode
        self.seed = cfg.env.seed if seed is None else seed
        self.env = ScrewEnv(cfg, seed=self.seed)
        self.pdim = priv_dim(cfg.env.task)
        self.net = ActorCritic(cfg.nets, OBS_DIM, self.pdim, ACT_DIM, mode,
                               seed=self.seed)
        self.opt = Adam(self.net.params(), lr=p.lr)
        self.lr = p.lr
        self.obs_norm = Normalizer(OBS_DIM)
        self.priv_norm = Normalizer(self.pdim)
        self.tact_norm = Normalizer(1800)
        self.ret_norm = Normalizer(1)
        self.rng = np.random.default_rng([self.seed, 77])
        self.env_steps = 0
        self.iteration = 0
        self.ep_returns = deque(maxlen=100)
        self.ep_lens = deque(maxlen=100)
        self.ep_rotations = deque(maxlen=100)
        self.rollback_count = 0

    @property
    def want_tactile(self):
        return self.mode == "asymmetric"

    @property
    def norms(self):
        return {"obs": self.obs_norm, "priv": self.priv_norm,
                "tact": self.tact_norm, "ret": self.ret_norm}

    def _value_denorm(self, v):
        if not self.cfg.ppo.value_norm:
            return v
        return v * self.ret_norm.std[0] + self.ret_norm.mean[0]

    def policy(self, obs, priv, tact=None, deterministic=False):
        on = self.obs_norm.normalize(obs)
        pn = self.priv_norm.normalize(priv) if self.mode != "nopriv" else None
        tn = self.tact_norm.normalize(tact) if (self.want_tactile and tact is not None) else None
        out = self.net.forward(on, pn, tn)
        mean = out["mean"]
        if deterministic:
            action = mean
        else:
            std = np.exp(self.net.log_std)
            action = mean + std * self.rng.standard_normal(mean.shape)
        lp = gaussian_logprob(mean, self.net.log_std, action)
        return action, lp, self._value_denorm(out["value"]), mean

    def train_iteration(self):
        cfg, p = self.cfg, self.cfg.ppo
        T, n = p.rollout_steps, self.env.n
        buf = vec_rollout(self.env, self.policy, T,
                          want_tactile=self.want_tactile)
        self.env_steps += T * n
        done = buf["done"]
        if done.any():
            idx = np.nonzero(done)
            self.ep_returns.extend(buf["ep_return"][idx])
            self.ep_lens.extend(buf["ep_len"][idx])
            self.ep_rotations.extend(buf["ep_rotation"][idx])

        adv, returns = compute_gae(buf["reward"], buf["value"], done,
                                   p.gamma, p.gae_lambda)
        adv = normalize_advantages(adv)
        if p.value_norm:
            self.ret_norm.update(returns.reshape(-1, 1))
            v_target = ((returns - self.ret_norm.mean[0])
                        / self.ret_norm.std[0])
        else:
            v_target = returns

        flat = {
            "obs": self.obs_norm.normalize(buf["obs"].reshape(T * n, -1)),
            "action": buf["action"].reshape(T * n, -1),
            "logprob_old": buf["logprob"].reshape(-1),
            "adv": adv.reshape(-1),
            "v_target": v_target.reshape(-1),
            "mean_old": buf["mean"].reshape(T * n, -1),
        }
        if self.mode != "nopriv":
            flat["priv"] = self.priv_norm.normalize(buf["priv"].reshape(T * n, -1))
        if self.want_tactile:
            flat["tactile"] = self.tact_norm.normalize(buf["tactile"].reshape(T * n, -1))
        log_std_old = self.net.log_std.copy()

        snapshot = {k: v.copy() for k, v in self.net.params().items()}
        agg = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0,
               "entropy_term": 0.0, "grad_norm": 0.0, "kl": 0.0}
        n_updates = 0
        total = T * n
        try:
            for _ in range(p.epochs):
                order = self.rng.permutation(total)
                epoch_kl = []
                for s in range(0, total, p.minibatch):
                    mb = order[s:s + p.minibatch]
                    batch = {k: v[mb] for k, v in flat.items()}
                    batch["log_std_old"] = log_std_old
                    m = ppo_minibatch_update(self.net, self.opt, batch, p, self.lr)
                    for k in agg:
                        agg[k] += m[k]
                    n_updates += 1
                    epoch_kl.append(m["kl"])
                # adapt once per epoch so a bad lr corrects within the
                # iteration without slamming between the bounds
                ekl = float(np.mean(epoch_kl))
                if ekl > 2.0 * p.kl_threshold:
                    self.lr = max(self.lr / 2.0, p.lr_lo)
                elif ekl < 0.5 * p.kl_threshold:
                    self.lr = min(self.lr * 1.5, p.lr_hi)
        except NonFiniteLoss:
            self.net.set_params(snapshot)
            self.rollback_count += 1
        if n_updates:
            for k in agg:
                agg[k] /= n_updates
        kl = agg["kl"]

        # stats feed the next iteration's normalization
        self.obs_norm.update(buf["obs"].reshape(T * n, -1))
        if self.mode != "nopriv":
            self.priv_norm.update(buf["priv"].reshape(T * n, -1))
        if self.want_tactile:
            self.tact_norm.update(buf["tactile"].reshape(T * n, -1))

        self.iteration += 1
        agg.update(kl=kl, lr=self.lr, env_steps=self.env_steps,
                   iteration=self.iteration,
                   mean_reward=float(np.mean(self.ep_returns)) if self.ep_returns else 0.0,
                   mean_ep_len=float(np.mean(self.ep_lens)) if self.ep_lens else 0.0,
                   mean_rotation=float(np.mean(self.ep_rotations)) if self.ep_rotations else 0.0)
        return agg

    def save(self, path, extra_meta=None):
        tensors = dict(self.net.params())
        for prefix, nz in (("norm_obs.", self.obs_norm),
                           ("norm_priv.", self.priv_norm),
                           ("norm_tact.", self.tact_norm),
                           ("norm_ret.", self.ret_norm)):
            for k, v in nz.state().items():
                tensors[prefix + k] = v
        meta = {
            "kind": "policy",
            "mode": self.mode,
            "task": self.cfg.env.task,
            "config_hash": config_hash(self.cfg),
            "obs_dim": OBS_DIM,
            "priv_dim": self.pdim,
            "act_dim": ACT_DIM,
            "env_steps": self.env_steps,
            "iteration": self.iteration,
            "seed": self.seed,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, tensors, meta)


def load_policy(path, cfg: RunConfig):
    """-> (net, norms dict, meta). Parameters come back as float64 copies of
    the stored f32 values, so two loads are bit-identical."""
    tensors, meta = load_checkpoint(path)
    net = ActorCritic(cfg.nets, meta["obs_dim"], meta["priv_dim"],
                      meta["act_dim"], meta["mode"], seed=0)
    net.set_params({k: v.astype(np.float64) for k, v in tensors.items()
                    if not k.startswith("norm_")})
    norms = {}
    for name, dim in (("obs", meta["obs_dim"]), ("priv", meta["priv_dim"]),
                      ("tact", 1800), ("ret", 1)):
        nz = Normalizer(dim)
        nz.load_state({k.split(".", 1)[1]: tensors[k].astype(np.float64)
                       for k in tensors if k.startswith(f"norm_{name}.")})
        norms[name] = nz
    return net, norms, meta


def policy_fn_from(net, norms, rng=None, deterministic=True):
    """Wrap a loaded policy as the callable vec_rollout expects."""
    log_std = net.log_std

    def fn(obs, priv, tact=None):
        on = norms["obs"].normalize(obs)
        pn = norms["priv"].normalize(priv) if net.mode != "nopriv" else None
        tn = None
        if net.mode == "asymmetric":
            tn = norms["tact"].normalize(tact if tact is not None else np.zeros((obs.shape[0], 1800)))
        out = net.forward(on, pn, tn)
        mean = out["mean"]
        if deterministic or rng is None:
            action = mean
        else:
            action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        lp = gaussian_logprob(mean, log_std, action)
        return action, lp, out["value"], mean

    return fn


def random_baseline(cfg: RunConfig, episodes: int, seed: int = 0):
    """Mean episode return of a uniform random policy under training
    conditions. The comparison floor for trained policies."""
    c = cfg
    env = ScrewEnv(c, num_envs=episodes, seed=seed)
    rng = np.random.default_rng([seed, 991])
    returns = np.zeros(episodes)
    got = np.zeros(episodes, dtype=bool)
    for _ in range(c.term.episode_len + 1):
        a = rng.uniform(-1.0, 1.0, size=(episodes, ACT_DIM))
        _, _, done, info = env.step(a)
        new = done & ~got
        returns[new] = info["ep_return"][new]
        got |= new
        if got.all():
            break
    return float(np.mean(returns[got])) if got.any() else 0.0


def evaluate_policy(cfg: RunConfig, net, norms, episodes: int, seed: int = 1,
                    noise_on: bool = True):
    """Deterministic-action evaluation under training conditions.
    Returns mean episode return, rotation (rad), and length."""
    env = ScrewEnv(cfg, num_envs=episodes, seed=seed)
    fn = policy_fn_from(net, norms, deterministic=True)
    want_tact = net.mode == "asymmetric"
    returns = np.zeros(episodes)
    rots = np.zeros(episodes)
    lens = np.zeros(episodes)
    got = np.zeros(episodes, dtype=bool)
    obs = env.obs()
    priv = env.privileged_vector()
    for _ in range(cfg.term.episode_len + 1):
        tact = env.tactile() if want_tact else None
        a, _, _, _ = fn(obs, priv, tact)
        obs, _, done, info = env.step(a, noise_on=noise_on)
        priv = info["priv"]
        new = done & ~got
        returns[new] = info["ep_return"][new]
        rots[new] = info["ep_rotation"][new]
        lens[new] = info["ep_len"][new]
        got |= new
        if got.all():
            break
    k = max(int(got.sum()), 1)
    return {
        "mean_return": float(returns.sum() / k),
        "mean_rotation": float(rots.sum() / k),
        "mean_ep_len": float(lens.sum() / k),
        "episodes": int(got.sum()),
    }


CURVE_FIELDS = ("iteration", "env_steps", "mean_reward", "mean_ep_len", "kl", "lr")


def train_oracle(cfg: RunConfig, mode: str, out_dir: str,
                 seed: int | None = None, iterations: int | None = None,
                 log_every: int = 10, quiet: bool = True):
    """Full training loop: rollouts, GAE, minibatch epochs, adaptive lr.
    Writes policy.ckpt and curves.csv into out_dir and returns the trainer."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = PpoTrainer(cfg, mode, seed=seed)
    p = cfg.ppo
    per_iter = cfg.env.num_envs * p.rollout_steps
    n_iter = iterations if iterations is not None else -(-p.total_steps // per_iter)
    baseline = random_baseline(cfg, min(p.eval_episodes, 32),
                               seed=trainer.seed + 1)
    curve_path = os.path.join(out_dir, "curves.csv")
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_FIELDS)
        for i in range(n_iter):
            m = trainer.train_iteration()
            w.writerow([m["iteration"], m["env_steps"],
                        f"{m['mean_reward']:.6f}", f"{m['mean_ep_len']:.2f}",
                        f"{m['kl']:.8f}", f"{m['lr']:.8f}"])
            if not quiet and (i % log_every == 0 or i == n_iter - 1):
                print(f"iter {m['iteration']} steps {m['env_steps']} "
                      f"rew {m['mean_reward']:.2f} len {m['mean_ep_len']:.0f} "
                      f"rot {m['mean_rotation']:.2f} kl {m['kl']:.4f} "
                      f"lr {m['lr']:.2e}", flush=True)
    trainer.save(os.path.join(out_dir, "policy.ckpt"),
                 {"baseline_return": baseline})
    return trainer, baseline
