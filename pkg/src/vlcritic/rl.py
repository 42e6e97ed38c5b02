"""Soft actor-critic on the state-vector version of the task world."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import taskworld as tw
from .reward_adapter import RewardAdapter, RewardCombinerConfig

log = logging.getLogger(__name__)

REWARD_SOURCES = ("sparse", "vlc_plus_sparse")
OBS_DIM = 8
ACT_DIM = 2
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
TRAIN_SEED_BASE = 20_000_000
EVAL_SEED_BASE = 90_000_000


class RLDiverged(RuntimeError):
    pass


@dataclass
class RLConfig:
    gamma: float = 0.99
    total_steps: int = 30_000
    eval_every: int = 2_000
    eval_episodes: int = 50
    hidden: tuple = (256, 256, 256)
    replay_capacity: int = 100_000
    batch_size: int = 256
    learning_starts: int = 1_000
    lr: float = 3e-4
    tau: float = 0.005
    policy_every: int = 2
    # None means -|A|
    target_entropy: Optional[float] = None
    seed: int = 0
    reward_source: str = "sparse"
    w_vlc: float = 1.0
    w_sparse: float = 50.0
    reward_ordering: str = "offset_combine_scale"
    # pass sparse-only rewards through the same weight-and-scale pipeline
    normalize_sparse: bool = True
    # stop once converged (10 consecutive evaluations averaging >= 0.98)
    stop_on_convergence: bool = False
    threads: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.reward_source not in REWARD_SOURCES:
            raise ValueError(f"reward_source must be one of {REWARD_SOURCES}")
        if self.total_steps < 1 or self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("total_steps, eval_every and batch_size must be positive")


@dataclass
class TrainingCurve:
    points: list = field(default_factory=list)
    window: int = 10
    level: float = 0.98

    def add(self, env_steps: int, success_rate: float) -> None:
        if self.points and env_steps <= self.points[-1]["env_steps"]:
            raise ValueError("env_steps must be strictly increasing")
        if not 0.0 <= success_rate <= 1.0:
            raise ValueError("success_rate must lie in [0, 1]")
        self.points.append({"env_steps": int(env_steps), "success_rate": float(success_rate)})

    @property
    def converged_at(self) -> Optional[int]:
        rates = [p["success_rate"] for p in self.points]
        for i in range(self.window - 1, len(rates)):
            if np.mean(rates[i - self.window + 1: i + 1]) >= self.level:
                return self.points[i]["env_steps"]
        return None

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.points:
                fh.write(json.dumps(p, sort_keys=True) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path) -> "TrainingCurve":
        curve = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    p = json.loads(line)
                    curve.add(p["env_steps"], p["success_rate"])
        return curve


def steps_to_threshold(curve: TrainingCurve, threshold: float) -> Optional[int]:
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    for p in curve.points:
        if p["success_rate"] >= threshold:
            return p["env_steps"]
    return None


# -- networks -----------------------------------------------------------------

def _mlp(sizes: list) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Actor(nn.Module):
    def __init__(self, hidden):
        super().__init__()
        self.trunk = _mlp([OBS_DIM, *hidden])
        self.head = nn.Linear(hidden[-1], 2 * ACT_DIM)

    def forward(self, obs):
        h = F.relu(self.trunk(obs))
        mean, log_std = self.head(h).chunk(2, dim=-1)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (torch.tanh(log_std) + 1)
        return mean, log_std

    def sample(self, obs):
        mean, log_std = self(obs)
        std = log_std.exp()
        x = mean + std * torch.randn_like(mean)
        y = torch.tanh(x)
        logp = (-0.5 * ((x - mean) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        logp = logp - torch.log(1 - y.pow(2) + 1e-6).sum(-1)
        return y, logp

    @torch.no_grad()
    def act(self, obs: np.ndarray, deterministic: bool = True) -> np.ndarray:
        o = torch.as_tensor(obs, dtype=torch.float32)
        if deterministic:
            return torch.tanh(self(o)[0]).numpy()
        return self.sample(o)[0].numpy()


class TwinQ(nn.Module):
    """Two independent Q networks evaluated as one batched ensemble."""

    def __init__(self, hidden, n: int = 2):
        super().__init__()
        sizes = [OBS_DIM + ACT_DIM, *hidden, 1]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i in range(len(sizes) - 1):
            w = torch.empty(n, sizes[i], sizes[i + 1])
            b = torch.empty(n, 1, sizes[i + 1])
            for k in range(n):
                ref = nn.Linear(sizes[i], sizes[i + 1])
                w[k] = ref.weight.detach().T
                b[k, 0] = ref.bias.detach()
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(b))
        self.n = n

    def forward(self, obs, act):
        h = torch.cat([obs, act], dim=-1).unsqueeze(0).expand(self.n, -1, -1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.baddbmm(b, h, w)
            if i < last:
                h = F.relu(h)
        return h.squeeze(-1)      # [n, B]


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.obs = np.zeros((capacity, OBS_DIM), dtype=np.float32)
        self.next_obs = np.zeros((capacity, OBS_DIM), dtype=np.float32)
        self.act = np.zeros((capacity, ACT_DIM), dtype=np.float32)
        self.rew = np.zeros(capacity, dtype=np.float32)
        self.term = np.zeros(capacity, dtype=np.float32)
        self.capacity = capacity
        self.size = 0
        self.ptr = 0

    def add(self, o, a, r, o2, terminal):
        i = self.ptr
        self.obs[i], self.act[i], self.rew[i], self.next_obs[i], self.term[i] = o, a, r, o2, terminal
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.size, size=n)
        return tuple(torch.from_numpy(a[idx]) for a in
                     (self.obs, self.act, self.rew, self.next_obs, self.term))


class SACPolicy:
    """Deterministic (mean-action) wrapper around a trained actor."""

    is_expert = False

    def __init__(self, actor: Actor, meta: Optional[dict] = None):
        self.actor = actor.eval()
        self.meta = meta or {}

    def reset(self, seed: int) -> None:
        pass

    def act_batch(self, obs: np.ndarray) -> np.ndarray:
        return self.actor.act(obs)

    def __call__(self, state: tw.WorldState, task: tw.TaskSpec) -> np.ndarray:
        return self.actor.act(state.vector()[None])[0].astype(np.float64)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(self.actor.state_dict(), path / "policy.bin")
        with open(path / "meta.json", "w", encoding="utf-8") as fh:
            json.dump({"kind": "sac_policy", **self.meta}, fh, indent=2, sort_keys=True, default=str)
        return path

    @classmethod
    def load(cls, path) -> "SACPolicy":
        path = Path(path)
        with open(path / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        actor = Actor(tuple(meta["rl_config"]["hidden"]))
        actor.load_state_dict(torch.load(path / "policy.bin", map_location="cpu", weights_only=True))
        return cls(actor, meta)


# -- evaluation ---------------------------------------------------------------

def eval_seed(seed: int, i: int) -> int:
    return EVAL_SEED_BASE + seed * 10_000 + i


def evaluate_policy(policy, task: tw.TaskSpec, n_episodes: int, seed: int = 0) -> float:
    """Success fraction over ``n_episodes`` seeded deterministic rollouts.

    Policies exposing ``act_batch`` are stepped in lockstep across episodes.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    states = [tw.reset(task, eval_seed(seed, i)) for i in range(n_episodes)]
    if not hasattr(policy, "act_batch"):
        wins = 0
        for i, s in enumerate(states):
            if hasattr(policy, "reset"):
                policy.reset(eval_seed(seed, i))
            done, r = False, 0
            while not done:
                a = np.clip(np.asarray(policy(s, task), dtype=np.float64), -1, 1)
                s, r, done = tw.step(s, a, task)
            wins += r
        return wins / n_episodes
    live = list(range(n_episodes))
    success = np.zeros(n_episodes, dtype=bool)
    while live:
        obs = np.stack([states[i].vector() for i in live])
        acts = np.clip(policy.act_batch(obs).astype(np.float64), -1.0, 1.0)
        nxt = []
        for i, a in zip(live, acts):
            states[i], r, done = tw.step(states[i], a, task)
            if r:
                success[i] = True
            if not done:
                nxt.append(i)
        live = nxt
    return float(success.mean())


# -- training -----------------------------------------------------------------

def sac_train(task: tw.TaskSpec, cfg: RLConfig, reward_adapter: Optional[RewardAdapter] = None,
              curve_path=None, progress: bool = False):
    """Train SAC on ``task``; returns ``(SACPolicy, TrainingCurve)``.

    The VLC source needs a :class:`RewardAdapter`; its per-step reward
    already includes the weighted sparse term and the variance scaling. The
    sparse source builds a critic-free adapter (``w_vlc = 0``) so both sources
    see identical normalization, unless ``normalize_sparse`` is off, in which
    case the raw 0/1 reward is used.
    """
    if cfg.reward_source == "vlc_plus_sparse":
        if reward_adapter is None:
            raise ValueError("reward_source vlc_plus_sparse requires a reward adapter")
    elif reward_adapter is not None:
        raise ValueError("a reward adapter is only used with reward_source vlc_plus_sparse")
    elif cfg.normalize_sparse:
        reward_adapter = RewardAdapter(None, gamma=cfg.gamma,
                                       combiner=RewardCombinerConfig(0.0, cfg.w_sparse),
                                       ordering=cfg.reward_ordering)

    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 7])
    actor = Actor(cfg.hidden)
    q = TwinQ(cfg.hidden)
    q_targ = TwinQ(cfg.hidden)
    q_targ.load_state_dict(q.state_dict())
    for p in q_targ.parameters():
        p.requires_grad_(False)
    log_alpha = torch.zeros(1, requires_grad=True)
    target_entropy = -float(ACT_DIM) if cfg.target_entropy is None else cfg.target_entropy
    q_opt = torch.optim.Adam(q.parameters(), lr=cfg.lr)
    pi_opt = torch.optim.Adam(actor.parameters(), lr=cfg.lr)
    a_opt = torch.optim.Adam([log_alpha], lr=cfg.lr)
    buf = ReplayBuffer(cfg.replay_capacity)
    curve = TrainingCurve()
    meta = {"task_id": task.task_id, "rl_config": _cfg_dict(cfg)}
    policy = SACPolicy(actor, meta)

    episode = 0
    needs_frames = reward_adapter is not None and reward_adapter.critic is not None

    def frame(s):
        return tw.render(s, task, as_float=False) if needs_frames else None

    def new_episode():
        nonlocal episode
        s = tw.reset(task, TRAIN_SEED_BASE + cfg.seed * 1_000_000 + episode)
        episode += 1
        if reward_adapter is not None:
            reward_adapter.begin_episode(task.caption, frame(s))
        return s

    state = new_episode()
    obs = state.vector()
    t0 = time.time()
    for t in range(1, cfg.total_steps + 1):
        if t <= cfg.learning_starts:
            action = rng.uniform(-1.0, 1.0, size=ACT_DIM)
        else:
            with torch.no_grad():
                action = actor.sample(torch.as_tensor(obs[None]))[0][0].numpy().astype(np.float64)
        action = np.clip(action, -1.0, 1.0)
        state, sparse, done = tw.step(state, action, task)
        nobs = state.vector()
        if reward_adapter is not None:
            reward = reward_adapter.step(frame(state), sparse, done)
        else:
            reward = float(sparse)
        # horizon cut-offs still bootstrap; only success terminates
        buf.add(obs, action, reward, nobs, float(sparse))
        obs = nobs
        if done:
            state = new_episode()
            obs = state.vector()

        if t > cfg.learning_starts:
            _update(t, buf, rng, cfg, actor, q, q_targ, log_alpha, target_entropy,
                    q_opt, pi_opt, a_opt)

        if t % cfg.eval_every == 0:
            rate = evaluate_policy(policy, task, cfg.eval_episodes, cfg.seed)
            actor.train()
            curve.add(t, rate)
            if progress:
                log.info("%s step %d success %.2f (%.0fs)", task.task_id, t, rate, time.time() - t0)
            if curve_path is not None:
                curve.write_jsonl(curve_path)
            if cfg.stop_on_convergence and curve.converged_at is not None:
                break
    meta["converged_at"] = curve.converged_at
    return policy, curve


def _update(t, buf, rng, cfg, actor, q, q_targ, log_alpha, target_entropy, q_opt, pi_opt, a_opt):
    o, a, r, o2, term = buf.sample(rng, cfg.batch_size)
    alpha = log_alpha.exp().detach()
    with torch.no_grad():
        a2, logp2 = actor.sample(o2)
        qt = q_targ(o2, a2).min(0).values - alpha * logp2
        y = r + cfg.gamma * (1.0 - term) * qt
    qv = q(o, a)
    q_loss = F.mse_loss(qv[0], y) + F.mse_loss(qv[1], y)
    if not torch.isfinite(q_loss):
        raise RLDiverged(f"non-finite critic loss at env step {t}")
    q_opt.zero_grad()
    q_loss.backward()
    q_opt.step()

    if t % cfg.policy_every == 0:
        for _ in range(cfg.policy_every):
            pa, logp = actor.sample(o)
            for p in q.parameters():
                p.requires_grad_(False)
            pi_loss = (alpha * logp - q(o, pa).min(0).values).mean()
            for p in q.parameters():
                p.requires_grad_(True)
            if not torch.isfinite(pi_loss):
                raise RLDiverged(f"non-finite actor loss at env step {t}")
            pi_opt.zero_grad()
            pi_loss.backward()
            pi_opt.step()
            a_loss = -(log_alpha * (logp.detach() + target_entropy)).mean()
            a_opt.zero_grad()
            a_loss.backward()
            a_opt.step()
            alpha = log_alpha.exp().detach()

    with torch.no_grad():
        for p, pt in zip(q.parameters(), q_targ.parameters()):
            pt.mul_(1.0 - cfg.tau).add_(p, alpha=cfg.tau)


def _cfg_dict(cfg: RLConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


def make_adapter(model, cfg: RLConfig) -> RewardAdapter:
    return RewardAdapter(model, gamma=cfg.gamma,
                         combiner=RewardCombinerConfig(cfg.w_vlc, cfg.w_sparse),
                         ordering=cfg.reward_ordering)
