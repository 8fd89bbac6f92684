"""PPO with GAE on the particle environments.

One policy network is shared by all agents of a scenario; the value
function is a separate network of the same architecture.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import envs as E
from .graph import GraphBatch
from .layers import PenguinNetwork, alpha_stats, load_networks, save_networks
from .nn import AdamState, adam_step, clip_grad_norm
from .tensor import NonFiniteError, Tape, Tensor, backward, clip, exp, minimum, parameter

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_BOUNDS = (-5.0, 1.0)
CURVE_COLUMNS = ["iteration", "env_steps", "mean_reward", "std_reward", "alpha_min", "alpha_mean", "alpha_max", "seed"]


@dataclass
class PpoConfig:
    train_batch: int = 2000
    minibatch: int = 1000
    clip: float = 0.2
    lr: float = 3.0e-4
    sgd_iters: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 100_000
    log_std_init: float = math.log(0.5)
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.train_batch % self.minibatch:
            raise ValueError("minibatch must divide train_batch")


class GaussianPolicy:
    """Diagonal Gaussian around the network's coordinate output, state-independent std."""

    def __init__(self, net: PenguinNetwork, log_std_init: float = math.log(0.5)):
        self.net = net
        self.log_std = parameter(np.full(net.dim, log_std_init), "log_std")

    def parameters(self):
        return self.net.parameters() + [self.log_std]

    def clamp(self) -> None:
        np.clip(self.log_std.data, *LOG_STD_BOUNDS, out=self.log_std.data)

    def clamped_log_std(self) -> Tensor:
        return clip(self.log_std, *LOG_STD_BOUNDS)

    def log_prob(self, actions, mean: Tensor, log_std: Tensor) -> Tensor:
        z = (Tensor(actions) - mean) * exp(-log_std)
        return (z * z).sum(axis=-1) * -0.5 - log_std.sum() - 0.5 * LOG_2PI * mean.shape[-1]

    def entropy(self, log_std: Tensor) -> Tensor:
        return log_std.sum() + 0.5 * (1.0 + LOG_2PI) * log_std.shape[0]

    def act(self, batch: GraphBatch, rng: np.random.Generator, deterministic: bool = False):
        """Sample actions; returns (actions, log_probs, alpha)."""
        out = self.net.forward(batch)
        mean = out.policy_mean.data
        if not np.all(np.isfinite(mean)):
            raise NonFiniteError("policy produced non-finite means")
        log_std = np.clip(self.log_std.data, *LOG_STD_BOUNDS)
        if deterministic:
            actions = mean.copy()
        else:
            actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        z = (actions - mean) / np.exp(log_std)
        logp = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * LOG_2PI * mean.shape[-1]
        return actions, logp, out.alpha


class ValueNorm:
    """Running mean / variance of return targets.

    The critic predicts standardised returns; ``denormalize`` maps its
    output back to reward units for advantage estimation.
    """

    def __init__(self, eps: float = 1e-4):
        self.mean = 0.0
        self.var = 1.0
        self.count = eps

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        b_mean, b_var, b_count = float(x.mean()), float(x.var()), x.size
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean += delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 1e-8))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def as_array(self) -> np.ndarray:
        return np.array([self.mean, self.var, self.count])

    @classmethod
    def from_array(cls, arr) -> "ValueNorm":
        vn = cls()
        vn.mean, vn.var, vn.count = (float(a) for a in arr)
        return vn


# ----------------------------------------------------------------------------------
def compute_gae(rewards, values, gamma: float = 0.99, lam: float = 0.95, bootstrap=None):
    """Generalised advantage estimates over a fixed-length rollout.

    ``rewards`` and ``values`` are ``(T,)`` or ``(T, M)`` with M independent
    episodes in the columns. ``bootstrap`` is the value after the final step
    (0 when omitted, i.e. a true terminal state).
    Returns ``(advantages, returns)`` without normalisation.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ in shape")
    adv = np.zeros_like(r)
    next_v = np.zeros_like(r[0]) if r.ndim > 1 else 0.0
    if bootstrap is not None:
        next_v = next_v + np.asarray(bootstrap, dtype=np.float64)
    running = np.zeros_like(next_v)
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * next_v - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class RolloutBatch:
    obs: GraphBatch
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: np.ndarray
    alpha_stats: tuple[float, float, float]

    def __len__(self) -> int:
        return len(self.actions)


def make_envs(cfg: E.ScenarioConfig, count: int, seed: int) -> list[E.ParticleEnv]:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [E.ParticleEnv(cfg, seed=int(s.generate_state(1)[0])) for s in seeds]


def envs_needed(cfg: E.ScenarioConfig, train_batch: int) -> int:
    return math.ceil(train_batch / (cfg.num_agents * cfg.episode_length))


def collect_rollouts(
    policy: GaussianPolicy,
    value_net: PenguinNetwork,
    envs: list[E.ParticleEnv],
    cfg: PpoConfig,
    rng: np.random.Generator,
    deterministic: bool = False,
    value_norm: ValueNorm | None = None,
) -> RolloutBatch:
    """Run one episode in every env and keep exactly ``cfg.train_batch`` agent steps.

    Advantages are computed on the full episodes before truncation, then
    normalised over the kept batch. With ``value_norm`` the critic output
    is read as a standardised return and the normaliser is updated with the
    new return targets.
    """
    obs_list = [env.reset() for env in envs]
    a = obs_list[0].size
    horizon = envs[0].cfg.episode_length
    if len(envs) * a * horizon < cfg.train_batch:
        raise ValueError("not enough environments to fill the train batch")
    steps: dict[str, list] = {k: [] for k in ("h", "u", "v", "types", "act", "logp", "rew", "val")}
    alphas = []
    for _ in range(horizon):
        batch = GraphBatch(
            np.concatenate([o.h for o in obs_list]),
            np.concatenate([o.u for o in obs_list]),
            np.concatenate([o.v for o in obs_list]),
            np.concatenate([o.node_type for o in obs_list]),
        )
        actions, logp, alpha = policy.act(batch, rng, deterministic)
        values = value_net.forward(batch).value.data
        if value_norm is not None:
            values = value_norm.denormalize(values)
        if alpha is not None:
            alphas.append(alpha)
        rews = []
        new_obs = []
        for k, env in enumerate(envs):
            o, r, _ = env.step(np.clip(actions[k * a : (k + 1) * a], -1.0, 1.0))
            new_obs.append(o)
            rews.append(r)
        for key, val in (("h", batch.h), ("u", batch.u), ("v", batch.v), ("types", batch.node_type),
                         ("act", actions), ("logp", logp), ("rew", np.concatenate(rews)), ("val", values)):
            steps[key].append(val)
        obs_list = new_obs

    rew = np.stack(steps["rew"])  # (T, envs*agents)
    val = np.stack(steps["val"])
    # the horizon is a time limit, not a terminal state, so bootstrap from the last observation
    last = GraphBatch(
        np.concatenate([o.h for o in obs_list]),
        np.concatenate([o.u for o in obs_list]),
        np.concatenate([o.v for o in obs_list]),
        np.concatenate([o.node_type for o in obs_list]),
    )
    tail = value_net.forward(last).value.data
    if value_norm is not None:
        tail = value_norm.denormalize(tail)
    adv, ret = compute_gae(rew, val, cfg.gamma, cfg.gae_lambda, bootstrap=tail)
    if value_norm is not None:
        value_norm.update(ret)

    def flat(x):  # (T, M, ...) -> (M*T, ...), episode-contiguous
        x = np.stack(x) if isinstance(x, list) else x
        return np.swapaxes(x, 0, 1).reshape((-1,) + x.shape[2:])[: cfg.train_batch]

    obs = GraphBatch(flat(steps["h"]), flat(steps["u"]), flat(steps["v"]), flat(steps["types"]).astype(int))
    per_env = rew.sum(axis=0).reshape(len(envs), a).mean(axis=1)
    adv_flat = flat(adv)
    return RolloutBatch(
        obs=obs,
        actions=flat(steps["act"]),
        log_probs=flat(steps["logp"]),
        rewards=flat(rew),
        values=flat(val),
        advantages=normalize_advantages(adv_flat),
        returns=flat(ret),
        episode_returns=per_env,
        alpha_stats=alpha_stats(np.concatenate([x.reshape(-1) for x in alphas]) if alphas else None),
    )


def ppo_losses(
    policy: GaussianPolicy,
    value_net: PenguinNetwork,
    mb: RolloutBatch,
    cfg: PpoConfig,
    value_norm: ValueNorm | None = None,
) -> dict:
    """Clipped surrogate, value and entropy terms for one minibatch (on the active tape)."""
    out = policy.net.forward(mb.obs)
    log_std = policy.clamped_log_std()
    logp = policy.log_prob(mb.actions, out.policy_mean, log_std)
    ratio = exp(logp - Tensor(mb.log_probs))
    adv = Tensor(mb.advantages)
    surrogate = minimum(ratio * adv, clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv).mean()
    target = mb.returns if value_norm is None else value_norm.normalize(mb.returns)
    err = value_net.forward(mb.obs).value - Tensor(target)
    value_loss = (err * err).mean()
    entropy = policy.entropy(log_std)
    total = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    return {"loss": total, "surrogate": surrogate, "value_loss": value_loss, "entropy": entropy, "ratio": ratio}


def _subset(batch: RolloutBatch, idx: np.ndarray) -> RolloutBatch:
    return RolloutBatch(
        batch.obs[idx], batch.actions[idx], batch.log_probs[idx], batch.rewards[idx], batch.values[idx],
        batch.advantages[idx], batch.returns[idx], batch.episode_returns, batch.alpha_stats,
    )


def ppo_update(
    policy: GaussianPolicy,
    value_net: PenguinNetwork,
    batch: RolloutBatch,
    cfg: PpoConfig,
    opt: AdamState,
    rng: np.random.Generator,
    value_norm: ValueNorm | None = None,
) -> dict:
    """``sgd_iters`` passes over shuffled minibatches; returns mean diagnostics."""
    pol_params, val_params = policy.parameters(), value_net.parameters()
    params = pol_params + val_params
    diag = {"surrogate": [], "value_loss": [], "entropy": [], "clip_frac": [], "grad_norm": []}
    skipped = 0
    n = len(batch)
    for _ in range(cfg.sgd_iters):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = _subset(batch, order[start : start + cfg.minibatch])
            try:
                with Tape():
                    terms = ppo_losses(policy, value_net, mb, cfg, value_norm)
                    grads = backward(terms["loss"], params)
                # each network is clipped on its own so the value loss scale cannot starve the policy
                pol = {p: grads[p] for p in pol_params}
                val = {p: grads[p] for p in val_params}
                diag["grad_norm"].append(clip_grad_norm(pol, cfg.max_grad_norm))
                clip_grad_norm(val, cfg.max_grad_norm)
                grads = {**pol, **val}
                adam_step(params, grads, cfg.lr, opt)
            except NonFiniteError as err:
                skipped += 1
                log.warning("skipping minibatch: %s", err)
                continue
            policy.clamp()
            r = terms["ratio"].data
            diag["clip_frac"].append(float(np.mean(np.abs(r - 1.0) > cfg.clip)))
            for k in ("surrogate", "value_loss", "entropy"):
                diag[k].append(terms[k].item())
    out = {k: float(np.mean(v)) if v else float("nan") for k, v in diag.items()}
    out["skipped"] = skipped
    return out


# ----------------------------------------------------------------------------------
@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    policy: GaussianPolicy | None = None
    value_net: PenguinNetwork | None = None
    out_dir: Path | None = None


def build_agent(arch: str, alpha_mode, seed: int, cfg: PpoConfig, dim: int = 2):
    policy_net = PenguinNetwork(E.NUM_FEATURES, dim, arch, alpha_mode, seed=seed)
    value_net = PenguinNetwork(E.NUM_FEATURES, dim, arch, alpha_mode, seed=seed + 10_000)
    return GaussianPolicy(policy_net, cfg.log_std_init), value_net


def save_agent(
    path,
    policy: GaussianPolicy,
    value_net: PenguinNetwork,
    meta: dict | None = None,
    value_norm: ValueNorm | None = None,
) -> None:
    extra = {"log_std": policy.log_std.data}
    if value_norm is not None:
        extra["value_norm"] = value_norm.as_array()
    save_networks(path, {"policy": policy.net, "value": value_net}, meta, extra)


def load_agent(path) -> tuple[GaussianPolicy, PenguinNetwork, dict]:
    """Policy, critic and metadata; a stored return normaliser lands in ``meta["value_norm"]``."""
    nets, meta, extra = load_networks(path)
    policy = GaussianPolicy(nets["policy"])
    if "log_std" in extra:
        policy.log_std.data = extra["log_std"].copy()
    if "value_norm" in extra:
        meta["value_norm"] = ValueNorm.from_array(extra["value_norm"])
    return policy, nets["value"], meta


def write_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in CURVE_COLUMNS})


def read_curve(path) -> list[dict]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(
    scenario: E.ScenarioConfig,
    arch: str = "penguin",
    alpha_mode="learned",
    cfg: PpoConfig | None = None,
    seed: int = 0,
    out_dir=None,
) -> TrainResult:
    """Collect / advantage / update until ``cfg.total_steps`` agent steps are used.

    With ``out_dir`` set, writes ``curve.csv`` after every iteration and
    checkpoints every ``cfg.checkpoint_every`` iterations plus ``final.ckpt``.
    """
    cfg = cfg or PpoConfig()
    rng = np.random.default_rng(seed)
    policy, value_net = build_agent(arch, alpha_mode, seed, cfg)
    envs = make_envs(scenario, envs_needed(scenario, cfg.train_batch), seed)
    opt = AdamState()
    value_norm = ValueNorm()
    out = Path(out_dir) if out_dir is not None else None
    meta = {"scenario": asdict(scenario), "ppo": asdict(cfg), "seed": seed}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_curve(out / "curve.csv", [])
    result = TrainResult(policy=policy, value_net=value_net, out_dir=out)
    iterations = cfg.total_steps // cfg.train_batch
    for it in range(iterations):
        batch = collect_rollouts(policy, value_net, envs, cfg, rng, value_norm=value_norm)
        diag = ppo_update(policy, value_net, batch, cfg, opt, rng, value_norm)
        a_min, a_mean, a_max = batch.alpha_stats
        row = {
            "iteration": it,
            "env_steps": (it + 1) * cfg.train_batch,
            "mean_reward": float(np.mean(batch.episode_returns)),
            "std_reward": float(np.std(batch.episode_returns)),
            "alpha_min": a_min,
            "alpha_mean": a_mean,
            "alpha_max": a_max,
            "seed": seed,
            **diag,
        }
        result.rows.append(row)
        log.info("%s seed %d it %d reward %.3f alpha %.3f", arch, seed, it, row["mean_reward"], a_mean)
        if out is not None:
            write_curve(out / "curve.csv", result.rows)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_agent(out / f"checkpoint_{it + 1:04d}.ckpt", policy, value_net, meta, value_norm)
    if out is not None:
        save_agent(out / "final.ckpt", policy, value_net, meta, value_norm)
    return result


def smooth(values, window: int = 5) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def aggregate_curves(curves: list[list[dict]], key: str = "mean_reward") -> list[dict]:
    """Mean and standard error across seeds, aligned by iteration."""
    n = min(len(c) for c in curves) if curves else 0
    rows = []
    for i in range(n):
        vals = np.array([c[i][key] for c in curves])
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append({"iteration": i, "env_steps": curves[0][i]["env_steps"], "mean": float(np.mean(vals)),
                     "stderr": se, "seeds": len(vals)})
    return rows
