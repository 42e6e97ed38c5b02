"""Mini-batch construction, optimisation loop, validation and checkpoint selection."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import evalsuite
from .critic import CriticConfig, CriticModel, Vocab, save_checkpoint
from .dataio import AugmentConfig, EpisodeSource, FrameSampleConfig, augment, subsample_indices
from .objective import (BatchScores, ObjectiveConfig, binary_classification_loss, total_loss,
                        xent_directional)
from .taskworld import task_by_id, to_float

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class TrainConfig:
    n_success: int = 16
    n_failure: int = 8
    epochs: int = 30
    lr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    # draw failures from the batch's own tasks first
    hard_negatives: bool = True
    steps_per_epoch: Optional[int] = None
    val_fraction: float = 0.1
    val_pool: int = 16
    threads: int = 1
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    sampling: FrameSampleConfig = field(
        default_factory=lambda: FrameSampleConfig(12, "random_in_interval"))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_sampling: FrameSampleConfig = field(
        default_factory=lambda: FrameSampleConfig(12, "deterministic_midpoint"))

    def __post_init__(self):
        if self.n_success < 2:
            raise ValueError("n_success must be >= 2 (contrastive learning needs negatives)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.objective.objective == "binary_classification":
            if self.sampling.mode != "first_last":
                self.sampling = FrameSampleConfig(2, "first_last")
            if self.eval_sampling.mode != "first_last":
                self.eval_sampling = FrameSampleConfig(2, "first_last")


@dataclass
class TrainBatch:
    success_frames: np.ndarray      # [N_s, K, H, W, 3] float32, zero padded
    success_lengths: np.ndarray
    captions: list
    failure_frames: np.ndarray      # [N_f, K, H, W, 3]
    failure_lengths: np.ndarray
    failure_captions: list          # task captions of the failures
    success_indices: list
    failure_indices: list


@dataclass
class Checkpoint:
    epoch: int
    train_loss: float
    metrics: dict
    path: Optional[Path] = None
    state: Optional[dict] = None
    meta: dict = field(default_factory=dict)
    critic_cfg: Optional[CriticConfig] = None
    vocab: Optional[Vocab] = None

    def load(self) -> CriticModel:
        """Rebuild the model with this epoch's weights (eval mode)."""
        if self.state is None:
            from .critic import load_checkpoint
            return load_checkpoint(self.path)[0]
        model = CriticModel(self.critic_cfg, self.vocab)
        model.load_state_dict(self.state)
        return model.eval()


def _seed_ints(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


def _prepare(frames_u8: np.ndarray, sampling: FrameSampleConfig, aug: Optional[AugmentConfig],
             seed_seq: np.random.SeedSequence) -> np.ndarray:
    s_idx, s_aug = seed_seq.spawn(2)
    idx = subsample_indices(len(frames_u8), sampling, np.random.default_rng(s_idx))
    clip = frames_u8[np.asarray(idx)]
    if aug is not None and aug.enabled:
        return augment(clip, aug, np.random.default_rng(s_aug))
    return to_float(clip)


def _stack(videos: list, K: int) -> tuple:
    if not videos:
        return np.zeros((0, K, 1, 1, 3), dtype=np.float32), np.zeros(0, dtype=np.int64)
    shape = videos[0].shape[1:]
    out = np.zeros((len(videos), K) + shape, dtype=np.float32)
    for i, v in enumerate(videos):
        out[i, : len(v)] = v
    return out, np.array([len(v) for v in videos], dtype=np.int64)


def build_batch(source: EpisodeSource, cfg: TrainConfig, step_seed: int,
                augment_frames: bool = True) -> TrainBatch:
    """Sample ``n_success`` caption-distinct successes and ``n_failure`` failures."""
    rng = np.random.default_rng(_seed_ints(cfg.seed, step_seed, 17))
    succ = source.success_indices
    fail = source.failure_indices
    if len({source.entries[i].caption for i in succ}) < cfg.n_success:
        raise InsufficientData(f"need {cfg.n_success} distinct captioned episodes, "
                               f"dataset has {len({source.entries[i].caption for i in succ})}")
    if len(fail) < cfg.n_failure:
        raise InsufficientData(f"need {cfg.n_failure} failure episodes, dataset has {len(fail)}")

    chosen, seen = [], set()
    for i in rng.permutation(succ):
        cap = source.entries[i].caption
        if cap not in seen:
            seen.add(cap)
            chosen.append(int(i))
            if len(chosen) == cfg.n_success:
                break

    fchosen: list = []
    if cfg.n_failure:
        tasks = {source.entries[i].task_id for i in chosen}
        pool = rng.permutation(fail)
        if cfg.hard_negatives:
            near = [int(i) for i in pool if source.entries[i].task_id in tasks]
            fchosen = near[: cfg.n_failure]
        rest = [int(i) for i in pool if i not in set(fchosen)]
        fchosen += rest[: cfg.n_failure - len(fchosen)]

    aug = cfg.augment if augment_frames else None
    K = cfg.sampling.budget if cfg.sampling.mode != "first_last" else 2
    root = _seed_ints(cfg.seed, step_seed, 23)
    seeds = root.spawn(len(chosen) + len(fchosen))
    svids = [_prepare(source.frames(i), cfg.sampling, aug, seeds[n]) for n, i in enumerate(chosen)]
    fvids = [_prepare(source.frames(i), cfg.sampling, aug, seeds[len(chosen) + n])
             for n, i in enumerate(fchosen)]
    sf, sl = _stack(svids, K)
    ff, fl = _stack(fvids, K)
    if len(fvids) == 0:
        ff = np.zeros((0, K) + sf.shape[2:], dtype=np.float32)
    return TrainBatch(
        success_frames=sf, success_lengths=sl,
        captions=[source.entries[i].caption for i in chosen],
        failure_frames=ff, failure_lengths=fl,
        failure_captions=[task_by_id(source.entries[i].task_id).caption for i in fchosen],
        success_indices=chosen, failure_indices=fchosen,
    )


def batch_scores(model: CriticModel, batch: TrainBatch) -> BatchScores:
    """Forward pass producing the contrastive matrices and own-caption prefix scores."""
    frames = np.concatenate([batch.success_frames, batch.failure_frames], axis=0)
    lengths = np.concatenate([batch.success_lengths, batch.failure_lengths])
    fe = model.encode_videos(torch.from_numpy(frames).to(model.dtype))
    te = model.encode_captions(batch.captions)
    S = model.all_pair_scores(fe, te)                          # [C, V, K]
    last = torch.as_tensor(lengths - 1)
    final = S[:, torch.arange(S.shape[1]), last]               # [C, V]
    temp = model.cfg.temperature
    if temp:
        final = final / temp
    n = len(batch.captions)
    prefixes = [S[i, i, : int(batch.success_lengths[i])] for i in range(n)]
    return BatchScores(final[:, :n], final[:, n:], prefixes)


def classification_loss(model: CriticModel, batch: TrainBatch) -> torch.Tensor:
    """Binary baseline: matched pairs vs mismatched, time-reversed and failure pairs."""
    n = len(batch.captions)
    sf = torch.from_numpy(batch.success_frames).to(model.dtype)
    rev = torch.stack([torch.flip(sf[i, : int(L)], dims=[0]) for i, L in
                       enumerate(batch.success_lengths)]) if n else sf
    ff = torch.from_numpy(batch.failure_frames).to(model.dtype)
    e_s = model.encode_videos(sf)
    e_r = model.encode_videos(rev)
    e_f = model.encode_videos(ff) if len(ff) else e_s[:0]
    t_s = model.encode_captions(batch.captions)
    t_f = model.encode_captions(batch.failure_captions) if batch.failure_captions else t_s[:0]
    shift = torch.roll(torch.arange(n), 1)
    frames = torch.cat([e_s, e_s, e_r, e_f])
    texts = torch.cat([t_s, t_s[shift], t_s, t_f])
    labels = [1] * n + [0] * (2 * n + len(e_f))
    lengths = np.concatenate([batch.success_lengths, batch.success_lengths,
                              batch.success_lengths, batch.failure_lengths])
    scores = model.paired_scores(frames, texts)
    final = scores[torch.arange(len(frames)), torch.as_tensor(lengths - 1)]
    return binary_classification_loss(scores=final, labels=labels)


def compute_loss(model: CriticModel, batch: TrainBatch, cfg: TrainConfig) -> torch.Tensor:
    if cfg.objective.objective == "binary_classification":
        return classification_loss(model, batch)
    return total_loss(batch_scores(model, batch), cfg.objective)


# -- validation ---------------------------------------------------------------

def caption_pools(source: EpisodeSource, size: int = 16) -> list:
    """Disjoint pools of success episodes with pairwise-distinct captions."""
    buckets: dict = {}
    for i in source.success_indices:
        e = source.entries[i]
        buckets.setdefault(e.caption, []).append(i)
    for b in buckets.values():
        b.sort(key=lambda i: (source.entries[i].seed, i))
    pools = []
    while True:
        live = sorted((c for c in buckets if buckets[c]), key=lambda c: (-len(buckets[c]), c))
        if len(live) < size:
            break
        pools.append([buckets[c].pop(0) for c in live[:size]])
    if not pools:
        live = sorted(c for c in buckets if buckets[c])
        if len(live) >= 2:
            pools.append([buckets[c][0] for c in live[:size]])
    return pools


def v2t_xent(scorer, source: EpisodeSource, pool_size: int = 16,
             sampling: FrameSampleConfig = FrameSampleConfig()) -> float:
    """Mean video-to-text cross-entropy over caption-distinct pools.

    ``scorer`` is either a critic model or any callable
    ``(frames_list, captions) -> [C, V]`` final-score matrix.
    """
    pools = caption_pools(source, pool_size)
    if not pools:
        raise ValueError("validation set has no usable caption pool")
    losses = []
    for pool in pools:
        caps = [source.entries[i].caption for i in pool]
        frames = [source.frames(i) for i in pool]
        S = _final_matrix(scorer, frames, caps, sampling)
        losses.append(float(xent_directional(torch.as_tensor(S).T)))
    return float(np.mean(losses))


def _final_matrix(scorer, frames, caps, sampling: FrameSampleConfig = FrameSampleConfig()):
    if not isinstance(scorer, CriticModel):
        return np.asarray(scorer(frames, caps), dtype=np.float64)
    clips = [to_float(f[np.asarray(subsample_indices(len(f), sampling))]) for f in frames]
    x, lengths = _stack(clips, max(len(c) for c in clips))
    with torch.no_grad():
        S = scorer.all_pair_scores(scorer.encode_videos(torch.from_numpy(x).to(scorer.dtype)),
                                   scorer.encode_captions(caps))
        return S[:, torch.arange(len(clips)), torch.as_tensor(lengths - 1)].double().numpy()


def validate(model: CriticModel, val_set: EpisodeSource, cfg: Optional[TrainConfig] = None,
             groups: Optional[list] = None) -> dict:
    """v2t cross-entropy, monotonicity and (given groups) ranking accuracy."""
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    cfg = cfg or TrainConfig()
    model.eval()
    sampling = cfg.eval_sampling
    try:
        v2t = v2t_xent(model, val_set, cfg.val_pool, sampling)
    except ValueError:
        v2t = float("nan")
    scorer = evalsuite.CriticEpisodeScorer(model, sampling)
    succ = [val_set.record(i) for i in val_set.success_indices]
    metrics = {
        "v2t_xent": v2t,
        "monotonicity_rate": evalsuite.monotonicity_rate(scorer, succ) if succ else float("nan"),
    }
    if groups:
        metrics["ranking_accuracy"] = evalsuite.ranking_accuracy(scorer, groups)
    return metrics


def select_checkpoint(checkpoints):
    """Lowest validation v2t cross-entropy; ties go to the earliest epoch."""
    cks = list(checkpoints)
    if not cks:
        raise ValueError("no checkpoints")
    return min(cks, key=lambda c: (_v2t(c), c.epoch))


def _v2t(c) -> float:
    v = c.metrics.get("v2t_xent", float("inf"))
    return float("inf") if v is None or math.isnan(v) else v


# -- training loop ------------------------------------------------------------

def split_validation(source: EpisodeSource, fraction: float, seed: int):
    """Hold out a fraction of episodes (not tasks) for validation."""
    rng = np.random.default_rng(_seed_ints(seed, 99))
    idx = rng.permutation(len(source))
    n_val = int(round(fraction * len(source)))
    val = sorted(int(i) for i in idx[:n_val])
    train = sorted(int(i) for i in idx[n_val:])
    return source.subset(train), source.subset(val)


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


def train(source: EpisodeSource, cfg: TrainConfig, critic_cfg: Optional[CriticConfig] = None,
          val_source: Optional[EpisodeSource] = None, out_dir=None, groups=None,
          extra_meta: Optional[dict] = None, log_path=None) -> list:
    """Train a critic; one :class:`Checkpoint` per epoch.

    Without ``val_source`` a ``val_fraction`` of episodes is held out. With
    ``out_dir`` each epoch lands in ``ckpt_{epoch:04}/`` and the step log in
    ``train_log.jsonl``; otherwise weights are kept in memory.
    """
    critic_cfg = critic_cfg or CriticConfig()
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    if val_source is None:
        source, val_source = split_validation(source, cfg.val_fraction, cfg.seed)
    dataset_hash = source.content_hash()
    vocab = Vocab.build([e.caption for e in source.entries if e.caption])
    model = CriticModel(critic_cfg, vocab)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    steps = cfg.steps_per_epoch or max(1, math.ceil(len(source.success_indices) / cfg.n_success))
    total = steps * cfg.epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path or out / "train_log.jsonl", "w") if (out or log_path) else None
    checkpoints = []
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            losses = []
            t0 = time.time()
            for _ in range(steps):
                batch = build_batch(source, cfg, step)
                lr = _lr_at(step, total, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                loss = compute_loss(model, batch, cfg)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                losses.append(loss.item())
                if log_fh:
                    log_fh.write(json.dumps({"step": step, "loss": losses[-1], "lr": lr}) + "\n")
                step += 1
            if log_fh:
                log_fh.flush()
            metrics = validate(model, val_source, cfg, groups) if len(val_source) else {}
            ck = Checkpoint(epoch, float(np.mean(losses)), metrics,
                            critic_cfg=critic_cfg, vocab=vocab)
            meta = {
                "epoch": epoch,
                "train_loss": ck.train_loss,
                "metrics": metrics,
                "dataset_hash": dataset_hash,
                "train_config": _jsonable(asdict(cfg)),
                "eval_sampling": asdict(cfg.eval_sampling),
                **(extra_meta or {}),
            }
            if out is not None:
                ck.path = save_checkpoint(out / f"ckpt_{epoch:04d}", model, meta)
            else:
                ck.state = copy.deepcopy(model.state_dict())
            ck.meta = meta
            checkpoints.append(ck)
            log.info("epoch %d loss %.4f %s (%.0fs)", epoch, ck.train_loss, metrics, time.time() - t0)
    finally:
        if log_fh:
            log_fh.close()
    return checkpoints


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))
