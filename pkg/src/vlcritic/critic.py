"""Video-language critic: text encoder, per-frame encoder, temporal aggregators.

The critic maps a (video prefix, caption) pair to a scalar score. All prefix
scores of a video come out of one causally masked pass; frame ``t`` only ever
sees the caption and frames ``<= t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import FrameSampleConfig, subsample_indices
from .taskworld import to_float

AGGREGATORS = ("tight", "sequence_cosine", "mean_pool")
PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"


@dataclass
class CriticConfig:
    embed_dim: int = 128
    text_layers: int = 2
    frame_layers: int = 1
    frame_patch: int = 8
    frame_size: int = 64
    temporal_layers: int = 2
    temporal_heads: int = 4
    aggregator: str = "tight"
    max_frames: int = 12
    max_caption_len: int = 16
    mlp_ratio: int = 2
    logit_scale: float = 10.0
    # None keeps bare scores in the contrastive softmax
    temperature: Optional[float] = None

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.embed_dim % self.temporal_heads:
            raise ValueError("embed_dim must be divisible by temporal_heads")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        if self.frame_size % self.frame_patch:
            raise ValueError("frame_size must be a multiple of frame_patch")


@dataclass
class Vocab:
    words: list = field(default_factory=list)

    def __post_init__(self):
        self.words = [PAD, UNK, CLS] + [w for w in self.words if w not in (PAD, UNK, CLS)]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, captions: Sequence[str]) -> "Vocab":
        return cls(sorted({w for c in captions if c for w in c.lower().split()}))

    def __len__(self):
        return len(self.words)

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def cls_id(self):
        return 2

    def to_json(self) -> list:
        return self.words[3:]


@dataclass(frozen=True)
class TokenizedCaption:
    token_ids: tuple
    length: int


@dataclass
class PrefixScores:
    scores: np.ndarray
    mask: np.ndarray

    @property
    def final(self) -> float:
        valid = np.flatnonzero(self.mask)
        return float(self.scores[valid[-1]])


def tokenize(caption: str, vocab: Vocab) -> TokenizedCaption:
    words = caption.lower().split() if caption else []
    if not words:
        raise ValueError("caption must be non-empty")
    ids = tuple(vocab.index.get(w, vocab.unk_id) for w in words)
    return TokenizedCaption(ids, len(ids))


class Block(nn.Module):
    """Pre-norm Transformer block with an explicit additive attention mask."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, bias=None):
        B, L, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(self.ln1(x)).view(B, L, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if bias is not None:
            att = att + bias
        out = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.proj(out)
        return x + self.mlp(self.ln2(x))


def _mask_bias(allowed: torch.Tensor, dtype) -> torch.Tensor:
    return torch.zeros(allowed.shape, dtype=dtype).masked_fill(~allowed, float("-inf"))


class TextEncoder(nn.Module):
    def __init__(self, cfg: CriticConfig, vocab_size: int):
        super().__init__()
        d = cfg.embed_dim
        self.tok = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.randn(cfg.max_caption_len + 1, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.temporal_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.text_layers))
        self.ln = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """``ids``: [C, L] with CLS first and PAD (0) at the tail."""
        x = self.tok(ids) + self.pos[: ids.shape[1]]
        keys = ids != 0
        bias = _mask_bias(keys[:, None, None, :].expand(-1, 1, ids.shape[1], -1), x.dtype)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.out(self.ln(x[:, 0]))


class FrameEncoder(nn.Module):
    """Patch-embedding Transformer applied to each frame on its own."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        d, p = cfg.embed_dim, cfg.frame_patch
        self.patch = p
        n = (cfg.frame_size // p) ** 2
        self.embed = nn.Linear(p * p * 3, d)
        self.pos = nn.Parameter(torch.randn(n, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.temporal_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.frame_layers))
        self.ln = nn.LayerNorm(d)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``frames``: [N, H, W, 3] in [0, 1] -> [N, d]."""
        N, H, W, C = frames.shape
        p = self.patch
        x = frames.reshape(N, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(N, (H // p) * (W // p), p * p * C)
        x = self.embed((x - 0.5) * 4.0) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x.mean(dim=1))


class TightAggregator(nn.Module):
    """Caption token followed by frame tokens; one score per frame position."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        d = cfg.embed_dim
        self.tpos = nn.Parameter(torch.randn(cfg.max_frames, d) * 0.02)
        self.text_type = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.temporal_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.temporal_layers))
        self.ln = nn.LayerNorm(d)
        self.head = nn.Linear(d, 1)

    @staticmethod
    def allowed(K: int) -> torch.Tensor:
        allowed = torch.zeros(K + 1, K + 1, dtype=torch.bool)
        allowed[0, 0] = True
        allowed[1:, 0] = True
        allowed[1:, 1:] = torch.tril(torch.ones(K, K, dtype=torch.bool))
        return allowed

    def forward(self, frame_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """Paired inputs ``[B, K, d]`` and ``[B, d]`` -> scores ``[B, K]``."""
        B, K, _ = frame_emb.shape
        x = torch.cat([(text_emb + self.text_type)[:, None], frame_emb + self.tpos[:K]], dim=1)
        bias = _mask_bias(self.allowed(K), x.dtype)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.head(self.ln(x[:, 1:])).squeeze(-1)


class SequenceAggregator(nn.Module):
    """Frames-only causal Transformer; output at t embeds the prefix 1..t."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        d = cfg.embed_dim
        self.tpos = nn.Parameter(torch.randn(cfg.max_frames, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.temporal_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.temporal_layers))
        self.ln = nn.LayerNorm(d)

    def forward(self, frame_emb: torch.Tensor) -> torch.Tensor:
        K = frame_emb.shape[1]
        x = frame_emb + self.tpos[:K]
        bias = _mask_bias(torch.tril(torch.ones(K, K, dtype=torch.bool)), x.dtype)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.ln(x)


def cumulative_mean(frame_emb: torch.Tensor) -> torch.Tensor:
    # float64 accumulation keeps the mean independent of frame order
    counts = torch.arange(1, frame_emb.shape[1] + 1, dtype=torch.float64)[None, :, None]
    return (torch.cumsum(frame_emb.double(), dim=1) / counts).to(frame_emb.dtype)


class CriticModel(nn.Module):
    def __init__(self, cfg: CriticConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.text = TextEncoder(cfg, len(vocab))
        self.frames = FrameEncoder(cfg)
        if cfg.aggregator == "tight":
            self.agg = TightAggregator(cfg)
        elif cfg.aggregator == "sequence_cosine":
            self.agg = SequenceAggregator(cfg)
        else:
            self.agg = None

    @property
    def dtype(self):
        return self.text.pos.dtype

    # -- encoders ------------------------------------------------------
    def token_tensor(self, captions: Sequence[str]) -> torch.Tensor:
        toks = [tokenize(c, self.vocab) for c in captions]
        L = min(max(t.length for t in toks), self.cfg.max_caption_len) + 1
        ids = torch.zeros(len(toks), L, dtype=torch.long)
        for i, t in enumerate(toks):
            row = (self.vocab.cls_id,) + t.token_ids[: L - 1]
            ids[i, : len(row)] = torch.tensor(row)
        return ids

    def encode_captions(self, captions: Sequence[str]) -> torch.Tensor:
        return self.text(self.token_tensor(captions))

    def encode_videos(self, frames: torch.Tensor) -> torch.Tensor:
        """[V, K, H, W, 3] -> [V, K, d]."""
        V, K = frames.shape[:2]
        return self.frames(frames.reshape(V * K, *frames.shape[2:])).reshape(V, K, -1)

    # -- aggregation ---------------------------------------------------
    def _check_K(self, K: int) -> None:
        if K < 1 or K > self.cfg.max_frames:
            raise ValueError(f"need 1 <= K <= {self.cfg.max_frames} frames, got {K}")

    def paired_scores(self, frame_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """Row-aligned pairs: ``[B, K, d]`` x ``[B, d]`` -> prefix scores ``[B, K]``."""
        self._check_K(frame_emb.shape[1])
        if self.cfg.aggregator == "tight":
            return self.agg(frame_emb, text_emb)
        video = self.agg(frame_emb) if self.agg is not None else cumulative_mean(frame_emb)
        return self.cfg.logit_scale * F.cosine_similarity(video, text_emb[:, None, :], dim=-1, eps=1e-8)

    def all_pair_scores(self, frame_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """Every caption against every video: ``[C, V, K]``."""
        self._check_K(frame_emb.shape[1])
        C, V = text_emb.shape[0], frame_emb.shape[0]
        if self.cfg.aggregator == "tight":
            fe = frame_emb[None].expand(C, -1, -1, -1).reshape(C * V, *frame_emb.shape[1:])
            te = text_emb[:, None].expand(-1, V, -1).reshape(C * V, -1)
            return self.agg(fe, te).reshape(C, V, -1)
        video = self.agg(frame_emb) if self.agg is not None else cumulative_mean(frame_emb)
        vn = F.normalize(video, dim=-1, eps=1e-8)
        tn = F.normalize(text_emb, dim=-1, eps=1e-8)
        return self.cfg.logit_scale * torch.einsum("vkd,cd->cvk", vn, tn)

    def forward(self, frames: torch.Tensor, captions: Sequence[str]) -> torch.Tensor:
        return self.all_pair_scores(self.encode_videos(frames), self.encode_captions(captions))


# -- functional API ----------------------------------------------------------

def _as_tensor(frames, dtype) -> torch.Tensor:
    if isinstance(frames, torch.Tensor):
        return frames.to(dtype)
    arr = to_float(frames) if frames.dtype == np.uint8 else np.asarray(frames, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _check_aggregator(model: CriticModel, aggregator: Optional[str]) -> None:
    if aggregator is not None and aggregator != model.cfg.aggregator:
        raise ValueError(f"model was built with aggregator {model.cfg.aggregator!r}, "
                         f"not {aggregator!r}")


def encode_text(tokens: TokenizedCaption, model: CriticModel) -> torch.Tensor:
    ids = torch.tensor([(model.vocab.cls_id,) + tokens.token_ids[: model.cfg.max_caption_len]])
    with torch.no_grad():
        return model.text(ids)[0]


def encode_frames(frames, model: CriticModel) -> torch.Tensor:
    with torch.no_grad():
        return model.frames(_as_tensor(frames, model.dtype))


def score_prefixes(video_frames, caption: str, model: CriticModel,
                   aggregator: Optional[str] = None) -> PrefixScores:
    """Prefix scores for K already-subsampled frames in one masked pass."""
    _check_aggregator(model, aggregator)
    x = _as_tensor(video_frames, model.dtype)
    if x.shape[0] == 0:
        raise ValueError("need at least one frame")
    model._check_K(x.shape[0])
    with torch.no_grad():
        fe = model.frames(x)[None]
        te = model.encode_captions([caption])
        s = model.paired_scores(fe, te)[0].cpu().numpy()
    return PrefixScores(s, np.ones(len(s), dtype=bool))


def score_prefixes_reference(video_frames, caption: str, model: CriticModel) -> PrefixScores:
    """Slow path: rerun the aggregator separately on every prefix 1..t."""
    x = _as_tensor(video_frames, model.dtype)
    model._check_K(x.shape[0])
    out = []
    with torch.no_grad():
        te = model.encode_captions([caption])
        for t in range(1, x.shape[0] + 1):
            fe = model.frames(x[:t])[None]
            out.append(float(model.paired_scores(fe, te)[0, -1]))
    return PrefixScores(np.asarray(out), np.ones(len(out), dtype=bool))


def score(video_frames, caption: str, model: CriticModel, aggregator: Optional[str] = None) -> float:
    return score_prefixes(video_frames, caption, model, aggregator).final


def batch_prefix_scores(model: CriticModel, videos: Sequence[np.ndarray], captions: Sequence[str],
                        chunk: int = 64) -> list:
    """Prefix scores of row-aligned (video, caption) pairs.

    Videos are already subsampled (at most ``max_frames`` frames, uint8 or
    float); shorter videos are zero-padded, which the causal mask keeps from
    influencing their valid positions.
    """
    out = []
    for start in range(0, len(videos), chunk):
        vids = videos[start:start + chunk]
        lengths = [len(v) for v in vids]
        batch = np.zeros((len(vids), max(lengths)) + tuple(vids[0].shape[1:]), dtype=np.float32)
        for i, v in enumerate(vids):
            batch[i, : len(v)] = to_float(v) if v.dtype == np.uint8 else v
        with torch.no_grad():
            fe = model.encode_videos(torch.from_numpy(batch).to(model.dtype))
            te = model.encode_captions(list(captions[start:start + chunk]))
            s = model.paired_scores(fe, te).cpu().numpy()
        out.extend(s[i, :n].astype(np.float64) for i, n in enumerate(lengths))
    return out


class CriticScorer:
    """Eval-mode wrapper scoring full-length videos with deterministic subsampling."""

    def __init__(self, model: CriticModel, sampling: FrameSampleConfig = None):
        self.model = model.eval()
        self.sampling = sampling or FrameSampleConfig(model.cfg.max_frames, "deterministic_midpoint")

    def subsample(self, frames: np.ndarray) -> np.ndarray:
        return frames[np.asarray(subsample_indices(len(frames), self.sampling))]

    def prefix_scores_many(self, videos: Sequence[np.ndarray], captions: Sequence[str]) -> list:
        return batch_prefix_scores(self.model, [self.subsample(v) for v in videos], captions)

    def prefix_scores(self, frames: np.ndarray, caption: str) -> np.ndarray:
        return self.prefix_scores_many([frames], [caption])[0]

    def final_scores(self, videos, captions) -> np.ndarray:
        return np.array([s[-1] for s in self.prefix_scores_many(videos, captions)])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: CriticModel, meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.bin")
    full = dict(meta)
    full["config"] = asdict(model.cfg)
    full["vocab"] = model.vocab.to_json()
    full.setdefault("kind", "critic")
    with open(path / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(full, fh, indent=2, sort_keys=True)
    return path


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing checkpoint metadata {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        return json.load(fh)


def load_checkpoint(path) -> tuple[CriticModel, dict]:
    meta = read_meta(path)
    if meta.get("kind", "critic") != "critic":
        raise ValueError(f"{path} is a {meta['kind']!r} checkpoint, not a critic")
    model = CriticModel(CriticConfig(**meta["config"]), Vocab(list(meta["vocab"])))
    state = torch.load(Path(path) / "weights.bin", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model.eval(), meta
