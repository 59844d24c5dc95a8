"""Actor-critic agent with a quantile critic and a Pareto-tail target.

The critic maps (state, action) to N quantile values of the return
distribution.  Bellman targets mix a learned quantile body with samples from
a generalized Pareto tail fitted below a moving threshold; the tail head is
a small network emitting (scale > 0, shape in (0,1)) so the tail always has
a finite mean.  The actor ascends the configured quantile risk measure of
the critic's output.  With ``baseline_mode`` the target degenerates to the
plain quantile Bellman target and the tail model is inert.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .gpd import GpdParams, gpd_log_likelihood, gpd_loglik_grad
from .market import HedgingEnv, Transition
from .nets import AdamState, MlpSpec
from .quantiles import RiskMeasureSpec, sorted_risk_index, qr_loss_and_grad

logger = logging.getLogger(__name__)

TAIL_SENTINEL = float("nan")   # fills tail metric columns in baseline mode


@dataclass(frozen=True)
class AgentConfig:
    n_quantiles: int = 100
    m_tail: int = 5
    beta: float = 0.95
    risk: RiskMeasureSpec = field(default_factory=lambda: RiskMeasureSpec("cvar", 0.95))
    lr_critic: float = 1e-4
    lr_actor: float = 1e-5
    lr_tail: float = 1e-4
    replay_capacity: int = 100_000
    batch_size: int = 64
    baseline_mode: bool = False
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    discount: float = 1.0
    exploration_noise: float = 0.1
    noise_floor: float = 0.02
    noise_anneal_steps: int = 8_000
    target_sync_period: int = 1
    tail_weighting: str = "two_part"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.n_quantiles < 2:
            raise ValueError("n_quantiles must be >= 2")
        if self.m_tail < 1:
            raise ValueError("m_tail must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.m_body < 1:
            raise ValueError("m_body = round(m_tail*beta/(1-beta)) must be >= 1")
        if self.n_body < 1:
            raise ValueError(
                "body level set is empty: beta * n_quantiles < 1 is not a valid split")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("need replay_capacity >= batch_size >= 1")
        if self.target_sync_period < 1:
            raise ValueError("target_sync_period must be >= 1")
        if self.tail_weighting not in ("two_part", "pooled"):
            raise ValueError("tail_weighting must be 'two_part' or 'pooled'")
        if not self.hidden_sizes:
            raise ValueError("need at least one hidden layer")

    @property
    def m_body(self) -> int:
        return round(self.m_tail * self.beta / (1.0 - self.beta))

    @property
    def n_tail(self) -> int:
        return round((1.0 - self.beta) * self.n_quantiles)

    @property
    def n_body(self) -> int:
        return self.n_quantiles - self.n_tail

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.n_quantiles) / self.n_quantiles


def config_hash(cfg: AgentConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


class RunningNorm:
    """Welford running mean/variance used to standardize observations."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        for row in x:
            self.count += 1
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(self.m2 / self.count + 1e-8)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(x, dtype=float)
        return (np.asarray(x, dtype=float) - self.mean) / self.std()

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(),
                "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunningNorm":
        out = cls(len(d["mean"]))
        out.count = int(d["count"])
        out.mean = np.asarray(d["mean"], dtype=float)
        out.m2 = np.asarray(d["m2"], dtype=float)
        return out


@dataclass
class AgentNets:
    """Critic, its target copy, actor, tail head, and their optimizer state."""

    critic_spec: MlpSpec
    actor_spec: MlpSpec
    tail_spec: MlpSpec
    critic: np.ndarray
    target: np.ndarray
    actor: np.ndarray
    tail: np.ndarray
    critic_opt: AdamState
    actor_opt: AdamState
    tail_opt: AdamState
    obs_norm: RunningNorm


def build_nets(cfg: AgentConfig, obs_dim: int, rng: np.random.Generator) -> AgentNets:
    critic_spec = MlpSpec((obs_dim + 1, *cfg.hidden_sizes, cfg.n_quantiles),
                          nets.uniform_heads("identity", cfg.n_quantiles))
    actor_spec = MlpSpec((obs_dim, *cfg.hidden_sizes, 1), ("unit",))
    tail_spec = MlpSpec((obs_dim + 1, *cfg.hidden_sizes, 2), ("positive", "unit"))
    critic = nets.init_params(critic_spec, rng)
    return AgentNets(
        critic_spec=critic_spec, actor_spec=actor_spec, tail_spec=tail_spec,
        critic=critic, target=critic.copy(),
        actor=nets.init_params(actor_spec, rng),
        tail=nets.init_params(tail_spec, rng),
        critic_opt=AdamState.zeros(critic.size),
        actor_opt=AdamState.zeros(nets.n_params(actor_spec)),
        tail_opt=AdamState.zeros(nets.n_params(tail_spec)),
        obs_norm=RunningNorm(obs_dim),
    )


def actor_action(agent: AgentNets, obs: np.ndarray) -> float:
    out = nets.forward(agent.actor_spec, agent.actor, agent.obs_norm.normalize(obs))
    return float(out[0])


def critic_quantiles(agent: AgentNets, obs: np.ndarray, action: float) -> np.ndarray:
    x = np.concatenate([agent.obs_norm.normalize(obs), [action]])
    return nets.forward(agent.critic_spec, agent.critic, x)


def tail_params_at(agent: AgentNets, obs: np.ndarray, action: float) -> tuple[float, float]:
    x = np.concatenate([agent.obs_norm.normalize(obs), [action]])
    sig, eps = nets.forward(agent.tail_spec, agent.tail, x)
    return float(sig), float(eps)


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    obs_next: np.ndarray
    act_next: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Uniform ring buffer of transitions."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros(capacity)
        self.rew = np.zeros(capacity)
        self.obs_next = np.zeros((capacity, obs_dim))
        self.act_next = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, tr: Transition) -> None:
        i = self._next
        self.obs[i] = tr.s
        self.act[i] = tr.a
        self.rew[i] = tr.r
        self.obs_next[i] = tr.s_next
        self.act_next[i] = tr.a_next
        self.done[i] = tr.done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        idx = rng.integers(0, self._size, size=n)
        return Batch(self.obs[idx], self.act[idx], self.rew[idx],
                     self.obs_next[idx], self.act_next[idx], self.done[idx])

    def random_obs(self, rng: np.random.Generator) -> np.ndarray:
        return self.obs[rng.integers(0, self._size)]


# -- target construction ----------------------------------------------------

def _gpd_quantile_rows(u: np.ndarray, sig: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Row-wise GPD inverse CDF; mirrors gpd.gpd_quantile with array params."""
    return (sig / eps) * np.expm1(-eps * np.log1p(-u))


def sample_targets_batch(batch: Batch, agent: AgentNets, cfg: AgentConfig,
                         rng: np.random.Generator):
    """Bellman target samples (z_tail, z_body) for every transition.

    Body values come from the sorted target-critic quantiles at and above
    the threshold (the sorted value at index n_tail); tail samples are GPD
    draws negated and shifted to end at the threshold, so every tail sample
    lies at or below R + discount * u.  In baseline mode the body is the
    full set of target quantiles and z_tail is None.
    """
    bsz = batch.obs.shape[0]
    s_n = agent.obs_norm.normalize(batch.obs_next)
    a_next = nets.forward(agent.actor_spec, agent.actor, s_n)
    x = np.concatenate([s_n, a_next], axis=1)
    phi = nets.forward(agent.critic_spec, agent.target, x)
    scale = cfg.discount * (~batch.done).astype(float)[:, None]
    rew = batch.rew[:, None]

    if cfg.baseline_mode:
        return None, rew + scale * phi

    phi_sorted = np.sort(phi, axis=1)
    u = phi_sorted[:, cfg.n_tail][:, None]
    sig_eps = nets.forward(agent.tail_spec, agent.tail, x)
    draws = rng.random((bsz, cfg.m_tail))
    x_gpd = _gpd_quantile_rows(draws, sig_eps[:, :1], sig_eps[:, 1:2])
    z_tail = rew + scale * (u - x_gpd)

    body_vals = phi_sorted[:, cfg.n_tail:]
    pick = rng.integers(0, cfg.n_body, size=(bsz, cfg.m_body))
    z_body = rew + scale * np.take_along_axis(body_vals, pick, axis=1)
    return z_tail, z_body


def sample_target(tr: Transition, agent: AgentNets, cfg: AgentConfig,
                  rng: np.random.Generator):
    """Single-transition version of :func:`sample_targets_batch`."""
    batch = Batch(obs=np.asarray(tr.s, dtype=float)[None, :],
                  act=np.array([tr.a]), rew=np.array([tr.r]),
                  obs_next=np.asarray(tr.s_next, dtype=float)[None, :],
                  act_next=np.array([tr.a_next]),
                  done=np.array([tr.done]))
    z_tail, z_body = sample_targets_batch(batch, agent, cfg, rng)
    return (None if z_tail is None else z_tail[0]), z_body[0]


# -- update steps -------------------------------------------------------------

def critic_update(batch: Batch, agent: AgentNets, cfg: AgentConfig,
                  rng: np.random.Generator) -> float:
    """One descent step on the batch-mean two-part QR loss."""
    z_tail, z_body = sample_targets_batch(batch, agent, cfg, rng)
    s_n = agent.obs_norm.normalize(batch.obs)
    x = np.concatenate([s_n, batch.act[:, None]], axis=1)
    theta = nets.forward(agent.critic_spec, agent.critic, x)
    loss_vec, grad = qr_loss_and_grad(theta, cfg.levels, z_body, z_tail,
                                      weighting=cfg.tail_weighting)
    loss = float(np.mean(loss_vec))
    if not np.isfinite(loss):
        raise RuntimeError(
            "non-finite critic loss; diagnostics: "
            f"theta range [{np.min(theta):.4g}, {np.max(theta):.4g}], "
            f"body range [{np.min(z_body):.4g}, {np.max(z_body):.4g}], "
            f"tail present: {z_tail is not None}")
    pgrads, _ = nets.backward(agent.critic_spec, agent.critic, x,
                              grad / batch.obs.shape[0])
    agent.critic, agent.critic_opt = nets.opt_step(
        agent.critic, pgrads, agent.critic_opt, cfg.lr_critic)
    return loss


def _risk_selector(theta: np.ndarray, risk: RiskMeasureSpec):
    """Per-row risk measure values and dRisk/dtheta selector matrix."""
    bsz, n = theta.shape
    k = sorted_risk_index(risk.alpha, n)
    order = np.argsort(theta, axis=1)
    rows = np.arange(bsz)
    var_vals = theta[rows, order[:, k]]
    sel = np.zeros_like(theta)
    if risk.kind == "var":
        sel[rows, order[:, k]] = 1.0
        return var_vals, sel
    mask = theta <= var_vals[:, None]
    counts = mask.sum(axis=1)
    sel = mask / counts[:, None]
    return (theta * mask).sum(axis=1) / counts, sel


def actor_update(obs_batch: np.ndarray, agent: AgentNets, cfg: AgentConfig) -> float:
    """Ascend the risk measure of the critic at the actor's action.

    The critic is read-only here; its input gradient with respect to the
    action carries the policy gradient into the actor.
    """
    bsz = obs_batch.shape[0]
    s_n = agent.obs_norm.normalize(obs_batch)
    a = nets.forward(agent.actor_spec, agent.actor, s_n)
    x = np.concatenate([s_n, a], axis=1)
    theta = nets.forward(agent.critic_spec, agent.critic, x)
    risk_vals, sel = _risk_selector(theta, cfg.risk)
    _, xgrad = nets.backward(agent.critic_spec, agent.critic, x, sel / bsz)
    da = xgrad[:, -1:]
    agrads, _ = nets.backward(agent.actor_spec, agent.actor, s_n, da)
    agent.actor, agent.actor_opt = nets.opt_step(
        agent.actor, -agrads, agent.actor_opt, cfg.lr_actor)
    return float(np.mean(risk_vals))


@dataclass
class TailUpdateResult:
    skipped: bool
    sigma: float = TAIL_SENTINEL
    eps: float = TAIL_SENTINEL
    log_likelihood: float = TAIL_SENTINEL


def tail_update(obs: np.ndarray, agent: AgentNets, cfg: AgentConfig) -> TailUpdateResult:
    """One ascent step of the tail head's GPD log-likelihood.

    Fits the head to the critic's sub-threshold quantiles at (obs, actor
    action): the lowest n_tail sorted values that fall strictly below the
    target-side threshold, transformed to positive exceedances u - theta.
    Skips (logged) when fewer than two usable exceedances exist.
    """
    s_n = agent.obs_norm.normalize(obs)[None, :]
    a = nets.forward(agent.actor_spec, agent.actor, s_n)
    x = np.concatenate([s_n, a], axis=1)
    phi = nets.forward(agent.critic_spec, agent.target, x)[0]
    u = float(np.sort(phi)[cfg.n_tail])
    theta = nets.forward(agent.critic_spec, agent.critic, x)[0]
    cand = np.sort(theta)[:cfg.n_tail]
    xs = u - cand[cand < u]
    if xs.size < 2:
        logger.debug("tail update skipped: %d usable exceedances", xs.size)
        return TailUpdateResult(skipped=True)

    sig, eps = nets.forward(agent.tail_spec, agent.tail, x)[0]
    p = GpdParams(float(sig), float(eps))
    d_sig, d_eps = gpd_loglik_grad(xs, p)
    tgrads, _ = nets.backward(agent.tail_spec, agent.tail, x,
                              np.array([[d_sig, d_eps]]))
    agent.tail, agent.tail_opt = nets.opt_step(
        agent.tail, -tgrads, agent.tail_opt, cfg.lr_tail)
    return TailUpdateResult(skipped=False, sigma=p.sigma, eps=p.epsilon,
                            log_likelihood=gpd_log_likelihood(xs, p))


def target_sync(agent: AgentNets) -> None:
    """Hard copy of the critic into the target body."""
    agent.target = agent.critic.copy()


def exploration_std(cfg: AgentConfig, step: int) -> float:
    if cfg.exploration_noise <= 0.0:
        return 0.0
    frac = min(step / max(cfg.noise_anneal_steps, 1), 1.0)
    return cfg.noise_floor + (cfg.exploration_noise - cfg.noise_floor) * (1.0 - frac)


def train_step(env: HedgingEnv, agent: AgentNets, buffer: ReplayBuffer,
               cfg: AgentConfig, rng: np.random.Generator, step: int) -> dict:
    """One environment transition plus, once the buffer holds a batch, one
    critic step, one actor step, one tail step and a target sync."""
    obs = env.state.observation.copy()
    agent.obs_norm.update(obs)
    a_greedy = actor_action(agent, obs)
    a = float(np.clip(a_greedy + rng.normal(0.0, exploration_std(cfg, step)), 0.0, 1.0))
    state_next, reward, done = env.step(a)
    obs_next = state_next.observation.copy()
    a_next = actor_action(agent, obs_next)
    buffer.add(Transition(obs, a, reward, obs_next, a_next, done))

    metrics = {"step": step, "reward": reward,
               "qr_loss": float("nan"), "actor_objective": float("nan"),
               "gpd_sigma_mean": TAIL_SENTINEL, "gpd_eps_mean": TAIL_SENTINEL,
               "tail_update_skips": TAIL_SENTINEL}
    if len(buffer) >= cfg.batch_size:
        batch = buffer.sample(rng, cfg.batch_size)
        metrics["qr_loss"] = critic_update(batch, agent, cfg, rng)
        metrics["actor_objective"] = actor_update(batch.obs, agent, cfg)
        if not cfg.baseline_mode:
            res = tail_update(buffer.random_obs(rng), agent, cfg)
            metrics["gpd_sigma_mean"] = res.sigma
            metrics["gpd_eps_mean"] = res.eps
            metrics["tail_update_skips"] = float(res.skipped)
        if step % cfg.target_sync_period == 0:
            target_sync(agent)
    if done:
        env.reset()
    return metrics


# -- checkpointing ------------------------------------------------------------

def _adam_to_dict(s: AdamState) -> dict:
    return {"m": s.m.tolist(), "v": s.v.tolist(), "t": s.t}


def _adam_from_dict(d: dict) -> AdamState:
    return AdamState(m=np.asarray(d["m"], dtype=float),
                     v=np.asarray(d["v"], dtype=float), t=int(d["t"]))


def save_checkpoint(path, agent: AgentNets, cfg: AgentConfig, step: int = 0) -> None:
    payload = {
        "config_hash": config_hash(cfg),
        "step": step,
        "nets": {
            "critic": nets.params_to_dict(agent.critic_spec, agent.critic),
            "target": nets.params_to_dict(agent.critic_spec, agent.target),
            "actor": nets.params_to_dict(agent.actor_spec, agent.actor),
            "tail": nets.params_to_dict(agent.tail_spec, agent.tail),
        },
        "opt": {
            "critic": _adam_to_dict(agent.critic_opt),
            "actor": _adam_to_dict(agent.actor_opt),
            "tail": _adam_to_dict(agent.tail_opt),
        },
        "obs_norm": agent.obs_norm.to_dict(),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[AgentNets, str, int]:
    """Returns (nets, config_hash, step).  The caller checks the hash
    against its own agent configuration."""
    d = json.loads(Path(path).read_text())
    critic_spec, critic = nets.params_from_dict(d["nets"]["critic"])
    _, target = nets.params_from_dict(d["nets"]["target"])
    actor_spec, actor = nets.params_from_dict(d["nets"]["actor"])
    tail_spec, tail = nets.params_from_dict(d["nets"]["tail"])
    agent = AgentNets(
        critic_spec=critic_spec, actor_spec=actor_spec, tail_spec=tail_spec,
        critic=critic, target=target, actor=actor, tail=tail,
        critic_opt=_adam_from_dict(d["opt"]["critic"]),
        actor_opt=_adam_from_dict(d["opt"]["actor"]),
        tail_opt=_adam_from_dict(d["opt"]["tail"]),
        obs_norm=RunningNorm.from_dict(d["obs_norm"]),
    )
    return agent, d["config_hash"], int(d["step"])
