"""Critic-quality evaluations.

Scorers are duck-typed: anything with
``episode_prefix_scores(episodes, captions, perturbation=None)`` returning one
array of prefix scores per episode works (:class:`~vlcritic.critic.CriticScorer`
via :class:`CriticEpisodeScorer`, :class:`OracleScorer`, :class:`ConstantScorer`).
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import taskworld as tw
from .critic import batch_prefix_scores
from .dataio import FrameSampleConfig, subsample_indices

MONOTONE_TOL = 1e-6
GROUP_SEED_BASE = 50_000_000
# groups scored per batched critic call; bounds memory for streamed group sets
CHUNK_GROUPS = 32


@dataclass
class EpisodeGroup:
    success_episode: tw.EpisodeRecord
    failure_episodes: list
    caption: str

    def __post_init__(self):
        if not self.failure_episodes:
            raise ValueError("a group needs at least one failure")
        seeds = {self.success_episode.seed, *(e.seed for e in self.failure_episodes)}
        if len(seeds) != 1:
            raise ValueError("all episodes of a group must share the reset seed")

    @property
    def task_id(self) -> str:
        return self.success_episode.task_id

    @property
    def episodes(self) -> list:
        return [self.success_episode, *self.failure_episodes]


def _episode_key(ep: tw.EpisodeRecord) -> int:
    return zlib.crc32(f"{ep.task_id}:{ep.seed}:{ep.num_frames}:{int(ep.success)}".encode())


def perturb_video(frames: np.ndarray, brightness: float, noise_high: float, seed: int,
                  indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Perturb every frame with a noise stream keyed by its original index.

    Because each frame's noise depends only on ``(seed, index)``, perturbing
    then subsampling equals subsampling then perturbing.
    """
    idx = range(len(frames)) if indices is None else indices
    return np.stack([tw.perturb_frame(f, brightness, noise_high, [seed, int(i)])
                     for f, i in zip(frames, idx)])


def select_indices(T: int, sampling: FrameSampleConfig) -> list:
    return subsample_indices(T, sampling)


class CriticEpisodeScorer:
    """Scores episodes with a trained critic; subsampling is deterministic."""

    def __init__(self, model, sampling: Optional[FrameSampleConfig] = None):
        self.model = model.eval()
        self.sampling = sampling or FrameSampleConfig(model.cfg.max_frames, "deterministic_midpoint")

    def select(self, T: int) -> list:
        return select_indices(T, self.sampling)

    def episode_prefix_scores(self, episodes, captions, perturbation=None) -> list:
        videos = []
        for ep in episodes:
            idx = self.select(ep.num_frames)
            frames = ep.frames[np.asarray(idx)]
            if perturbation is not None:
                b, n, seed = perturbation
                frames = perturb_video(frames, b, n, [seed, _episode_key(ep)], idx)
            videos.append(frames)
        return batch_prefix_scores(self.model, videos, captions)


class OracleScorer:
    """Uses the success label: rising scores for successes, zeros otherwise."""

    def __init__(self, budget: int = 12):
        self.budget = budget

    def episode_prefix_scores(self, episodes, captions, perturbation=None) -> list:
        out = []
        for ep, cap in zip(episodes, captions):
            n = min(ep.num_frames, self.budget)
            task = tw.task_by_id(ep.task_id)
            good = ep.success and cap == task.caption
            out.append(np.arange(1, n + 1) / n if good else np.zeros(n))
        return out


class ConstantScorer:
    def __init__(self, value: float = 0.0, budget: int = 12):
        self.value = value
        self.budget = budget

    def episode_prefix_scores(self, episodes, captions, perturbation=None) -> list:
        return [np.full(min(ep.num_frames, self.budget), self.value) for ep in episodes]


# -- group construction -------------------------------------------------------

def group_seed(seed: int, g: int) -> int:
    return GROUP_SEED_BASE + seed * 100_000 + g


def build_primitive_groups(task: tw.TaskSpec, n_groups: int, k_failures: int = 5,
                           seed: int = 0, max_tries: int = 200) -> list:
    """Scene-matched groups: one expert success plus ``k`` wrong-target rollouts.

    Failures use the same controller aimed at uniformly sampled targets; an
    episode is rejected if it satisfies the true success predicate anywhere.
    """
    if n_groups < 1 or k_failures < 1:
        raise ValueError("n_groups and k_failures must be >= 1")
    rng = np.random.default_rng([seed, zlib.crc32(task.task_id.encode())])
    groups = []
    g = 0
    while len(groups) < n_groups:
        s = group_seed(seed, g)
        g += 1
        success = tw.generate_episode(task, tw.ExpertPolicy(), s)
        if not success.success:
            continue
        failures = []
        tries = 0
        while len(failures) < k_failures and tries < max_tries:
            tries += 1
            target = rng.uniform(0.05, 0.95, size=2)
            policy = tw.TargetPolicy(target)
            ep = tw.generate_episode(task, policy, s, stop=lambda st, p=policy: p.achieved(st, task))
            if ep.success or any(tw.is_success(st, task) for st in ep.states):
                continue
            ep.meta["target"] = [float(v) for v in target]
            failures.append(ep)
        if len(failures) == k_failures:
            groups.append(EpisodeGroup(success, failures, task.caption))
    return groups


# -- metrics ------------------------------------------------------------------

class GroupStream:
    """Re-iterable evaluation groups generated one task at a time.

    Holding thousands of groups as rendered frames does not fit in a few GB,
    so each pass regenerates them deterministically from the seeds instead.
    """

    def __init__(self, tasks, n_groups: int, k_failures: int = 5, seed: int = 0):
        if n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        self.tasks = list(tasks)
        self.n_groups = n_groups
        self.k_failures = k_failures
        self.seed = seed

    def __iter__(self):
        for task in self.tasks:
            yield from build_primitive_groups(task, self.n_groups, self.k_failures, self.seed)

    def __len__(self):
        return len(self.tasks) * self.n_groups

    @property
    def task_ids(self) -> list:
        return [t.task_id for t in self.tasks for _ in range(self.n_groups)]


def ranking_accuracy(scorer, groups: Iterable[EpisodeGroup], perturbation=None) -> float:
    """Fraction of groups whose success strictly outscores every failure."""
    return float(np.mean(group_outcomes(scorer, groups, perturbation)))


def _empty():
    raise ValueError("need at least one group")


def _chunks(items: Iterable, size: int):
    chunk = []
    for it in items:
        chunk.append(it)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def _score_groups(scorer, groups, perturbation):
    out, task_ids = [], []
    for chunk in _chunks(groups, CHUNK_GROUPS):
        episodes, captions = [], []
        for grp in chunk:
            episodes.extend(grp.episodes)
            captions.extend([grp.caption] * len(grp.episodes))
        finals = [s[-1] for s in scorer.episode_prefix_scores(episodes, captions, perturbation)]
        pos = 0
        for grp in chunk:
            f = finals[pos:pos + len(grp.episodes)]
            out.append(f[0] > max(f[1:]))
            task_ids.append(grp.task_id)
            pos += len(grp.episodes)
    if not out:
        _empty()
    return np.asarray(out, dtype=bool), task_ids


def group_outcomes(scorer, groups: Iterable[EpisodeGroup], perturbation=None) -> np.ndarray:
    """Per-group success flags, scored in chunks so ``groups`` may be a stream."""
    return _score_groups(scorer, groups, perturbation)[0]


def monotonicity_of(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        return 1.0
    return float(np.mean(s[1:] >= s[:-1] - MONOTONE_TOL))


def monotonicity_rate(scorer, success_episodes, perturbation=None) -> float:
    """Mean fraction of non-decreasing consecutive prefix-score pairs."""
    rates = []
    for eps in _chunks(success_episodes, 6 * CHUNK_GROUPS):
        scores = scorer.episode_prefix_scores(eps, [_caption(e) for e in eps], perturbation)
        rates.extend(monotonicity_of(s) for s in scores)
    if not rates:
        raise ValueError("need at least one episode")
    return float(np.mean(rates))


def _caption(ep: tw.EpisodeRecord) -> str:
    return ep.caption if ep.caption is not None else tw.task_by_id(ep.task_id).caption


@dataclass
class EvalSet:
    """Groups and success episodes; either may be a re-iterable stream."""

    groups: Iterable
    successes: Iterable = field(default_factory=list)
    split: str = "test"


def robustness_report(scorer, eval_set: EvalSet, perturbations, seed: int = 0,
                      per_task: bool = True) -> list:
    """Ranking accuracy and monotonicity per perturbation level.

    ``perturbations`` holds ``(brightness, noise_high)`` pairs; ``(1, 0)`` is
    the unperturbed reference. Rows follow the report schema
    ``{metric, split, perturbation, value, n, seed}`` plus ``task`` (None for
    the aggregate row).
    """
    rows = []
    for b, n in perturbations:
        pert = None if (b == 1.0 and n == 0.0) else (b, n, seed)
        label = f"{b:g},{n:g}"
        outcomes, task_ids = _score_groups(scorer, eval_set.groups, pert)
        rows.append(_row("ranking_accuracy", eval_set.split, label, float(outcomes.mean()),
                         len(outcomes), seed))
        if per_task:
            by_task = {}
            for tid, ok in zip(task_ids, outcomes):
                by_task.setdefault(tid, []).append(ok)
            for tid in sorted(by_task):
                rows.append(_row("ranking_accuracy", eval_set.split, label,
                                 float(np.mean(by_task[tid])), len(by_task[tid]), seed, tid))
        if eval_set.successes:
            rows.append(_row("monotonicity_rate", eval_set.split, label,
                             monotonicity_rate(scorer, eval_set.successes, pert),
                             len(eval_set.successes), seed))
    return rows


def _row(metric, split, perturbation, value, n, seed, task=None) -> dict:
    return {"metric": metric, "split": split, "perturbation": perturbation,
            "value": value, "n": n, "seed": seed, "task": task}


def write_report(rows, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"rows": rows, **(extra or {})}, fh, indent=2, sort_keys=True)
    return path


def export_reward_curves(scorer, episodes, out_path, plot: bool = True) -> list:
    """One CSV (frame_index, raw_score, offset_score) and one PNG per episode."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reward curves to {out}: {exc}") from exc
    eps = list(episodes)
    scores = scorer.episode_prefix_scores(eps, [_caption(e) for e in eps])
    written = []
    for i, (ep, s) in enumerate(zip(eps, scores)):
        idx = select_indices(ep.num_frames, getattr(scorer, "sampling", FrameSampleConfig()))[: len(s)]
        stem = f"episode_{i:03d}_{ep.task_id}_{'success' if ep.success else 'failure'}"
        csv_path = out / f"{stem}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "raw_score", "offset_score"])
            for fi, raw in zip(idx, s):
                w.writerow([int(fi), f"{raw:.9g}", f"{raw - s[0]:.9g}"])
        written.append(csv_path)
        if plot:
            written.append(_plot_curve(out / f"{stem}.png", idx, np.asarray(s) - s[0], ep))
    return written


def _plot_curve(path: Path, idx, offset, ep) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 2.5), dpi=80)
    ax.plot(idx, offset, marker="o", color="tab:green" if ep.success else "tab:red")
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("reward (offset)")
    ax.set_title(f"{ep.task_id} ({'success' if ep.success else 'failure'})", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
