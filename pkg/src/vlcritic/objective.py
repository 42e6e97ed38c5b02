"""Contrastive, sequence-ranking and binary-classification losses.

Every function accepts tensors (autograd flows through) or plain arrays,
which are promoted to float64 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

OBJECTIVES = ("vlc", "contrastive_only", "binary_classification")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class ObjectiveConfig:
    alpha: float = 33.0
    objective: str = "vlc"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.objective == "contrastive_only" else self.alpha


@dataclass
class BatchScores:
    """Scores for one training batch.

    ``success_matrix[i, j]``: caption i vs success video j (final prefix).
    ``failure_matrix[i, j]``: caption i vs failure video j.
    ``prefix_scores[i]``: all valid prefix scores of success video i under
    its own caption.
    """

    success_matrix: torch.Tensor
    failure_matrix: Optional[torch.Tensor] = None
    prefix_scores: Sequence = field(default_factory=list)

    def __post_init__(self):
        self.success_matrix = _t(self.success_matrix)
        n = self.success_matrix.shape[0]
        if self.failure_matrix is None:
            self.failure_matrix = self.success_matrix.new_zeros((n, 0))
        else:
            self.failure_matrix = _t(self.failure_matrix).reshape(n, -1)

    @property
    def n_success(self) -> int:
        return int(self.success_matrix.shape[0])


def xent_directional(score_rows, positive_index=None) -> torch.Tensor:
    """Mean over rows of ``-log softmax(row)[positive]``; defaults to the diagonal."""
    S = _t(score_rows)
    if S.ndim != 2 or S.numel() == 0:
        raise ValueError("score matrix must be a non-empty 2-D array")
    N = S.shape[0]
    if positive_index is None:
        pos = torch.arange(N)
    else:
        pos = torch.as_tensor(positive_index, dtype=torch.long).reshape(N)
        if pos.min() < 0 or pos.max() >= S.shape[1]:
            raise ValueError("positive index out of range")
    return (torch.logsumexp(S, dim=1) - S[torch.arange(N), pos]).mean()


def text_to_video_xent(batch: BatchScores) -> torch.Tensor:
    return xent_directional(torch.cat([batch.success_matrix, batch.failure_matrix], dim=1))


def video_to_text_xent(batch: BatchScores) -> torch.Tensor:
    # rows: success videos; candidates: success captions only
    return xent_directional(batch.success_matrix.T)


def symmetric_xent(batch: BatchScores) -> torch.Tensor:
    if batch.n_success == 0:
        raise ValueError("need at least one success pair")
    return 0.5 * (text_to_video_xent(batch) + video_to_text_xent(batch))


def ranking_loss(prefix_scores, mask=None) -> torch.Tensor:
    """Sum over consecutive valid pairs of ``max(s[t] - s[t+1], 0)``."""
    s = _t(getattr(prefix_scores, "scores", prefix_scores)).reshape(-1)
    if mask is None and hasattr(prefix_scores, "mask"):
        mask = prefix_scores.mask
    if mask is not None:
        s = s[torch.as_tensor(np.asarray(mask, dtype=bool))]
    if s.numel() < 2:
        return s.sum() * 0.0
    return F.relu(s[:-1] - s[1:]).sum()


def total_loss(batch: BatchScores, cfg: ObjectiveConfig) -> torch.Tensor:
    if cfg.objective == "binary_classification":
        raise ValueError("binary_classification uses binary_classification_loss")
    loss = symmetric_xent(batch)
    alpha = cfg.effective_alpha
    if alpha == 0:
        return loss
    rank = sum(ranking_loss(p) for p in batch.prefix_scores)
    return loss + alpha / batch.n_success * rank


def binary_classification_loss(pairs=None, *, scores=None, labels=None) -> torch.Tensor:
    """Mean sigmoid cross-entropy of final scores against 0/1 labels.

    Pass ``pairs`` as ``[(score, label), ...]`` or ``scores``/``labels`` tensors.
    """
    if pairs is not None:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("need at least one pair")
        scores = torch.stack([_t(s).reshape(()) for s, _ in pairs])
        labels = [lab for _, lab in pairs]
    s = _t(scores).reshape(-1)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.numel() == 0:
        raise ValueError("need at least one pair")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("labels must be 0 or 1")
    return F.binary_cross_entropy_with_logits(s, torch.as_tensor(lab, dtype=s.dtype))
