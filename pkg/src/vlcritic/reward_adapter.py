"""Turn critic scores into RL rewards.

Per step: raw prefix score, episode offset (first reward is 0), weighted sum
with the sparse success reward, then running-return variance scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .critic import CriticModel
from .dataio import FrameSampleConfig, subsample_indices
from .taskworld import to_float

ORDERINGS = ("offset_combine_scale", "offset_scale_combine", "combine_only")


@dataclass
class EpisodeBuffer:
    """Frames observed so far in one episode, plus the first raw score."""

    caption: str
    frames: list = field(default_factory=list)
    first_raw: Optional[float] = None
    # per-frame embeddings, filled lazily by the scorer
    embeddings: list = field(default_factory=list)

    def append(self, frame: np.ndarray) -> None:
        self.frames.append(frame)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class NormalizerState:
    gamma: float = 0.99
    mean: float = 0.0
    var: float = 1.0
    count: float = 1e-4
    ret: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def update(self, x: float) -> None:
        """Merge one sample (batch mean ``x``, variance 0, count 1)."""
        delta = x - self.mean
        tot = self.count + 1.0
        m2 = self.var * self.count + delta * delta * self.count / tot
        self.mean += delta / tot
        self.var = m2 / tot
        self.count = tot

    def end_episode(self) -> None:
        self.ret = 0.0


@dataclass(frozen=True)
class RewardCombinerConfig:
    w_vlc: float = 1.0
    w_sparse: float = 50.0

    def __post_init__(self):
        if not (math.isfinite(self.w_vlc) and math.isfinite(self.w_sparse)):
            raise ValueError("reward weights must be finite")


class CachedCritic:
    """Read-only critic wrapper caching caption and per-frame embeddings."""

    def __init__(self, model: CriticModel, budget: Optional[int] = None):
        self.model = model.eval()
        self.sampling = FrameSampleConfig(budget or model.cfg.max_frames, "deterministic_midpoint")
        self._text: dict = {}

    def text(self, caption: str) -> torch.Tensor:
        if caption not in self._text:
            with torch.no_grad():
                self._text[caption] = self.model.encode_captions([caption])
        return self._text[caption]

    def _embed_missing(self, buffer: EpisodeBuffer) -> None:
        pending = buffer.frames[len(buffer.embeddings):]
        if not pending:
            return
        x = np.stack([to_float(f) if f.dtype == np.uint8 else f for f in pending])
        with torch.no_grad():
            e = self.model.encode_videos(torch.from_numpy(x).to(self.model.dtype)[None])[0]
        buffer.embeddings.extend(e)

    def prefix_score(self, buffer: EpisodeBuffer) -> float:
        self._embed_missing(buffer)
        idx = subsample_indices(len(buffer), self.sampling)
        fe = torch.stack([buffer.embeddings[i] for i in idx])[None]
        with torch.no_grad():
            return float(self.model.paired_scores(fe, self.text(buffer.caption))[0, -1])


def raw_reward(buffer: EpisodeBuffer, model, t: Optional[int] = None) -> float:
    """Critic score of the (subsampled) prefix of the first ``t`` frames."""
    if len(buffer) == 0:
        raise ValueError("cannot score an empty episode buffer")
    scorer = model if isinstance(model, CachedCritic) else CachedCritic(model)
    if t is not None and t != len(buffer):
        if not 1 <= t <= len(buffer):
            raise ValueError(f"prefix length {t} outside [1, {len(buffer)}]")
        buffer = EpisodeBuffer(buffer.caption, buffer.frames[:t], buffer.first_raw,
                               buffer.embeddings[:t])
    return scorer.prefix_score(buffer)


def offset(buffer: EpisodeBuffer, raw: float) -> float:
    if buffer.first_raw is None:
        buffer.first_raw = float(raw)
        return 0.0
    return float(raw) - buffer.first_raw


def scale(state: NormalizerState, r: float) -> float:
    if not math.isfinite(r):
        raise ValueError(f"non-finite reward {r}")
    state.ret = state.gamma * state.ret + r
    state.update(state.ret)
    return r / math.sqrt(state.var + state.eps)


def combine(vlc_r: float, sparse_r: float, cfg: RewardCombinerConfig = RewardCombinerConfig()) -> float:
    return cfg.w_vlc * vlc_r + cfg.w_sparse * sparse_r


class RewardAdapter:
    """Stateful per-environment reward pipeline.

    ``ordering`` selects where the variance scaler sits:
    ``offset_combine_scale`` (default) scales the combined reward,
    ``offset_scale_combine`` scales the VLC part only and adds the weighted
    sparse reward afterwards, ``combine_only`` skips scaling.
    """

    def __init__(self, critic, gamma: float = 0.99,
                 combiner: RewardCombinerConfig = RewardCombinerConfig(),
                 ordering: str = "offset_combine_scale"):
        if ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if critic is not None and not isinstance(critic, CachedCritic):
            critic = CachedCritic(critic)
        self.critic = critic
        self.combiner = combiner
        self.ordering = ordering
        self.state = NormalizerState(gamma=gamma)
        self.buffer: Optional[EpisodeBuffer] = None

    def begin_episode(self, caption: str, first_frame: np.ndarray) -> None:
        self.buffer = EpisodeBuffer(caption)
        self.buffer.append(first_frame)

    def step(self, frame: np.ndarray, sparse: float, done: bool) -> float:
        """Reward for the transition that produced ``frame``."""
        if self.buffer is None:
            raise RuntimeError("begin_episode must be called first")
        self.buffer.append(frame)
        vlc = 0.0
        if self.critic is not None and self.combiner.w_vlc != 0.0:
            vlc = offset(self.buffer, raw_reward(self.buffer, self.critic))
        if self.ordering == "offset_combine_scale":
            r = scale(self.state, combine(vlc, sparse, self.combiner))
        elif self.ordering == "offset_scale_combine":
            r = self.combiner.w_vlc * scale(self.state, vlc) + self.combiner.w_sparse * sparse
        else:
            r = combine(vlc, sparse, self.combiner)
        if done:
            self.state.end_episode()
        return r
