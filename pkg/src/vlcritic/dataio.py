"""Dataset persistence, task splits, frame subsampling and augmentation.

On-disk layout of a dataset directory::

    manifest.jsonl                one JSON object per episode
    episodes/ep_000000.bin        8-byte header (T, H, W, C as little-endian
                                  uint16) followed by T*H*W*C uint8 levels
    episodes/ep_000000.json       sidecar: states, actions, caption, flags
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .taskworld import EpisodeRecord, TaskSpec, WorldState, to_float

MANIFEST = "manifest.jsonl"
HEADER = struct.Struct("<4H")
SPLITS = ("train", "val", "test")
SAMPLING_MODES = ("deterministic_midpoint", "random_in_interval", "first_last")


class DatasetError(RuntimeError):
    """Missing or corrupt dataset files; the message names the path."""


@dataclass(frozen=True)
class FrameSampleConfig:
    budget: int = 12
    mode: str = "deterministic_midpoint"

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("frame budget must be >= 1")
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class AugmentConfig:
    brightness_jitter: float = 0.2
    noise_high: float = 0.05
    crop_jitter: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.brightness_jitter < 0 or self.noise_high < 0 or self.crop_jitter < 0:
            raise ValueError("augmentation ranges must be non-negative")


@dataclass
class ManifestEntry:
    episode_path: str
    task_id: str
    success: bool
    caption: Optional[str]
    num_frames: int
    seed: int

    def to_json(self, split: str) -> dict:
        return {
            "episode_path": self.episode_path,
            "task_id": self.task_id,
            "success": self.success,
            "caption": self.caption,
            "num_frames": self.num_frames,
            "seed": self.seed,
            "split": split,
        }


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    split_tag: str = "train"

    def __len__(self):
        return len(self.entries)


def subsample_indices(T: int, cfg: FrameSampleConfig = FrameSampleConfig(), seed=None) -> list[int]:
    """Pick at most ``cfg.budget`` strictly increasing frame indices from ``range(T)``.

    Interval ``k`` is ``[k*T//K, (k+1)*T//K)``. The deterministic mode takes
    ``floor((k + 0.5) * T / K)``; the random mode draws one index per interval.
    ``first_last`` (two-frame conditioning) ignores the budget.
    """
    if T < 1:
        raise ValueError(f"cannot subsample a video of length {T}")
    if cfg.mode == "first_last":
        return [0, T - 1] if T > 1 else [0]
    K = cfg.budget
    if T <= K:
        return list(range(T))
    if cfg.mode == "deterministic_midpoint":
        return [((2 * k + 1) * T) // (2 * K) for k in range(K)]
    rng = np.random.default_rng(seed)
    lo = np.arange(K) * T // K
    hi = (np.arange(K) + 1) * T // K
    return [int(v) for v in rng.integers(lo, hi)]


def augment(frames: np.ndarray, cfg: AugmentConfig, seed) -> np.ndarray:
    """Episode-level photometric and shift jitter; returns float32 in [0, 1].

    One brightness factor, one noise amplitude and one integer shift are drawn
    per call and shared by every frame.
    """
    x = to_float(frames) if frames.dtype == np.uint8 else np.asarray(frames, dtype=np.float32)
    if not cfg.enabled:
        return x.copy() if x is frames else x
    rng = np.random.default_rng(seed)
    factor = rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
    amp = rng.uniform(0.0, cfg.noise_high) if cfg.noise_high > 0 else 0.0
    c = cfg.crop_jitter
    dy, dx = (rng.integers(-c, c + 1, size=2) if c > 0 else (0, 0))
    out = x * np.float32(factor)
    if c > 0 and (dy or dx):
        H, W = x.shape[-3], x.shape[-2]
        pad = [(0, 0)] * (x.ndim - 3) + [(c, c), (c, c), (0, 0)]
        padded = np.pad(out, pad, mode="edge")
        out = padded[..., c + dy:c + dy + H, c + dx:c + dx + W, :]
    if amp > 0:
        out = out + rng.uniform(0.0, amp, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def split_tasks(tasks: Sequence[TaskSpec], k: int = 5):
    """Hold out every ``k``-th task (indices k-1, 2k-1, ...) of an alphabetical list."""
    ids = [t.task_id for t in tasks]
    if ids != sorted(ids):
        raise ValueError("tasks must be sorted alphabetically by task_id")
    heldout = [t for i, t in enumerate(tasks) if i % k == k - 1]
    train = [t for i, t in enumerate(tasks) if i % k != k - 1]
    return train, heldout


# --- persistence ---------------------------------------------------------

def _state_row(s: WorldState) -> list:
    return [*s.agent_pos, *s.object_pos, *s.goal_pos, s.step_index]


def _state_from_row(row) -> WorldState:
    return WorldState((row[0], row[1]), (row[2], row[3]), (row[4], row[5]), int(row[6]))


def write_frames(path: Path, frames: np.ndarray) -> None:
    if frames.dtype != np.uint8 or frames.ndim != 4:
        raise ValueError("frames must be a uint8 array of shape (T, H, W, C)")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(*frames.shape))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frames(path, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
    except OSError as exc:
        raise DatasetError(f"cannot read frame file {path}: {exc}") from exc
    if len(head) != HEADER.size:
        raise DatasetError(f"truncated frame header in {path}")
    shape = HEADER.unpack(head)
    expected = HEADER.size + int(np.prod(shape))
    if path.stat().st_size != expected:
        raise DatasetError(f"frame file {path} has {path.stat().st_size} bytes, expected {expected}")
    if mmap:
        return np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER.size, shape=shape)
    return np.fromfile(path, dtype=np.uint8, offset=HEADER.size).reshape(shape)


def write_dataset(episodes, root_path, split_tag: str = "train") -> DatasetManifest:
    if split_tag not in SPLITS:
        raise ValueError(f"split_tag must be one of {SPLITS}")
    root = Path(root_path)
    (root / "episodes").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(split_tag=split_tag)
    lines = []
    for i, ep in enumerate(episodes):
        if (ep.caption is None) == bool(ep.success):
            raise ValueError(f"episode {i} ({ep.task_id}, seed {ep.seed}): caption must be "
                             "present exactly when the episode succeeded")
        rel = f"episodes/ep_{i:06d}"
        write_frames(root / f"{rel}.bin", ep.frames)
        sidecar = {
            "task_id": ep.task_id,
            "seed": ep.seed,
            "success": bool(ep.success),
            "caption": ep.caption,
            "states": [_state_row(s) for s in ep.states],
            "actions": np.asarray(ep.actions).tolist(),
            "meta": ep.meta,
        }
        with open(root / f"{rel}.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh)
        entry = ManifestEntry(f"{rel}.bin", ep.task_id, bool(ep.success), ep.caption,
                              ep.num_frames, int(ep.seed))
        manifest.entries.append(entry)
        lines.append(json.dumps(entry.to_json(split_tag), sort_keys=True))
    with open(root / MANIFEST, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return manifest


def read_manifest(root_path) -> DatasetManifest:
    path = Path(root_path) / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    entries = []
    tags = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append(ManifestEntry(obj["episode_path"], obj["task_id"], bool(obj["success"]),
                                             obj["caption"], int(obj["num_frames"]), int(obj["seed"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"corrupt manifest line {lineno} in {path}: {exc}") from exc
            tags.add(obj.get("split", "train"))
    if len(tags) > 1:
        raise DatasetError(f"mixed split tags {sorted(tags)} in {path}")
    return DatasetManifest(entries, tags.pop() if tags else "train")


def load_episode(root_path, entry: ManifestEntry, mmap: bool = False) -> EpisodeRecord:
    root = Path(root_path)
    frames = read_frames(root / entry.episode_path, mmap=mmap)
    if frames.shape[0] != entry.num_frames:
        raise DatasetError(f"{root / entry.episode_path}: {frames.shape[0]} frames, "
                           f"manifest says {entry.num_frames}")
    side = (root / entry.episode_path).with_suffix(".json")
    try:
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read sidecar {side}: {exc}") from exc
    return EpisodeRecord(
        frames=frames,
        states=[_state_from_row(r) for r in meta["states"]],
        actions=np.asarray(meta["actions"], dtype=np.float64).reshape(-1, 2),
        caption=meta["caption"],
        success=bool(meta["success"]),
        task_id=meta["task_id"],
        seed=int(meta["seed"]),
        meta=meta.get("meta", {}),
    )


def read_dataset(root_path) -> tuple[Iterator[EpisodeRecord], DatasetManifest]:
    manifest = read_manifest(root_path)

    def _iter():
        for entry in manifest.entries:
            yield load_episode(root_path, entry)

    return _iter(), manifest


def dataset_hash(root_path) -> str:
    """Content hash of a stored dataset (labels plus frame bytes, manifest order)."""
    return EpisodeSource.from_dir(root_path).content_hash()


class EpisodeSource:
    """Random access to episode frames and labels, stored or in memory.

    Items are either :class:`EpisodeRecord` objects or ``(root, entry)`` pairs
    whose frames are memory-mapped on first access.
    """

    def __init__(self, items):
        self._items = list(items)
        self.entries = [self._entry(it) for it in self._items]
        self._cache = {}

    @staticmethod
    def _entry(item) -> ManifestEntry:
        if isinstance(item, EpisodeRecord):
            return ManifestEntry("", item.task_id, bool(item.success), item.caption,
                                 item.num_frames, int(item.seed))
        return item[1]

    @classmethod
    def from_dir(cls, root) -> "EpisodeSource":
        root = Path(root)
        return cls([(root, e) for e in read_manifest(root).entries])

    @classmethod
    def concat(cls, *sources: "EpisodeSource") -> "EpisodeSource":
        return cls([it for src in sources for it in src._items])

    def __len__(self):
        return len(self._items)

    def frames(self, i: int) -> np.ndarray:
        item = self._items[i]
        if isinstance(item, EpisodeRecord):
            return item.frames
        arr = self._cache.get(i)
        if arr is None:
            root, entry = item
            arr = read_frames(root / entry.episode_path, mmap=True)
            self._cache[i] = arr
        return arr

    def record(self, i: int) -> EpisodeRecord:
        item = self._items[i]
        if isinstance(item, EpisodeRecord):
            return item
        return load_episode(*item)

    def subset(self, indices) -> "EpisodeSource":
        return EpisodeSource([self._items[i] for i in indices])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for i, e in enumerate(self.entries):
            h.update(json.dumps([e.task_id, e.seed, e.success, e.caption, e.num_frames]).encode())
            h.update(np.ascontiguousarray(self.frames(i)).tobytes())
        return h.hexdigest()

    @property
    def success_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.success]

    @property
    def failure_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if not e.success]


# -- generation ---------------------------------------------------------------

ROLE_SUCCESS, ROLE_FAILURE = 0, 1
# validation episodes use roles 2 and 3
ROLE_SPAN = 4_000


def episode_seed(data_seed: int, task_index: int, role: int, i: int) -> int:
    """Reset seed of the ``i``-th episode of one role for one task.

    Ranges stay below 20 million for ``data_seed < 20``, which keeps them
    disjoint from the evaluation-group and RL seed ranges.
    """
    if not 0 <= i < ROLE_SPAN:
        raise ValueError("episode index out of range")
    return data_seed * 1_000_000 + task_index * 16_000 + role * ROLE_SPAN + i


def generate_task_episodes(task: TaskSpec, task_index: int, n_success: int, n_failure: int,
                           corrupt_p: float = 0.7, data_seed: int = 0, validation: bool = False):
    """Expert successes plus corrupted-expert failures for one task.

    Corrupted rollouts that happen to succeed are discarded so every failure
    is a genuine failure. ``validation`` draws from a disjoint seed range.
    """
    from .taskworld import ExpertPolicy, corrupt_policy, generate_episode

    shift = 2 if validation else 0
    succ = []
    for i in range(n_success):
        s = episode_seed(data_seed, task_index, ROLE_SUCCESS + shift, i)
        ep = generate_episode(task, ExpertPolicy(), s)
        if not ep.success:
            raise DatasetError(f"expert failed on {task.task_id} seed {s}")
        succ.append(ep)
    fail = []
    j = 0
    while len(fail) < n_failure:
        s = episode_seed(data_seed, task_index, ROLE_FAILURE + shift, j)
        j += 1
        policy = corrupt_policy(ExpertPolicy(), corrupt_p, s)
        ep = generate_episode(task, policy, s)
        if not ep.success:
            ep.meta["corrupt_p"] = corrupt_p
            fail.append(ep)
    return succ, fail
