"""Command-line entry point: ``vlcritic <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalsuite, rl, taskworld as tw
from .config import ConfigError, RunConfig, load_config
from .critic import read_meta
from .dataio import (DatasetError, EpisodeSource, FrameSampleConfig, dataset_hash,
                     generate_task_episodes, split_tasks, write_dataset)

log = logging.getLogger("vlcritic")

SPLIT_DIRS = {"train": ("train", "train"), "val": ("val", "val"), "heldout": ("heldout", "test")}


class CliError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _write_json(path: Path, obj: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
    return path


def _data_section_hash(cfg: RunConfig) -> str:
    from .config import from_dict
    return from_dict({"data": cfg.to_dict()["data"]}).hash()


def _task_split(cfg: RunConfig):
    return split_tasks(tw.enumerate_tasks(), cfg.data.heldout_every)


def load_scorer(path):
    """Episode scorer for a critic or oracle-stub checkpoint directory."""
    path = Path(path)
    if not path.is_dir():
        raise CliError(f"checkpoint not found: {path}")
    meta = read_meta(path)
    if meta.get("kind") == "oracle":
        return evalsuite.OracleScorer(meta.get("budget", 12)), meta
    from .critic import load_checkpoint

    model, meta = load_checkpoint(path)
    sampling = FrameSampleConfig(**meta["eval_sampling"]) if "eval_sampling" in meta else None
    return evalsuite.CriticEpisodeScorer(model, sampling), meta


def write_oracle_checkpoint(path, budget: int = 12) -> Path:
    return _write_json(Path(path) / "meta.json", {"kind": "oracle", "budget": budget})


def _split_source(data_dir: Path, split: str) -> EpisodeSource:
    sub = data_dir / SPLIT_DIRS[split][0]
    if not (sub / "manifest.jsonl").is_file():
        raise CliError(f"dataset split {split!r} not found under {data_dir}")
    return EpisodeSource.from_dir(sub)


def build_eval_set(tasks, cfg: RunConfig, successes=(), split: str = "test",
                   groups_per_task: Optional[int] = None) -> evalsuite.EvalSet:
    n = groups_per_task or cfg.eval.groups_per_task
    groups = evalsuite.GroupStream(tasks, n, cfg.eval.k_failures, cfg.eval.seed)
    return evalsuite.EvalSet(groups, successes, split)


class _StoredEpisodes:
    """Re-iterable view that loads stored episodes on demand."""

    def __init__(self, source: EpisodeSource, indices):
        self.source = source
        self.indices = list(indices)

    def __iter__(self):
        return (self.source.record(i) for i in self.indices)

    def __len__(self):
        return len(self.indices)


# -- commands -------------------------------------------------------------------

def cmd_generate_data(args) -> dict:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
        for name in ("train", "val", "heldout", "dataset.json"):
            target = out / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    train_tasks, heldout_tasks = _task_split(cfg)
    index = {t.task_id: i for i, t in enumerate(tw.enumerate_tasks())}
    d = cfg.data
    n_val_s = max(1, round(d.successes_per_task * d.val_fraction)) if d.val_fraction else 0
    n_val_f = max(1, round(d.failures_per_task * d.val_fraction)) if d.val_fraction else 0
    splits = {"train": [], "val": [], "heldout": []}
    for task in train_tasks:
        s, f = generate_task_episodes(task, index[task.task_id], d.successes_per_task,
                                      d.failures_per_task, d.corrupt_p, d.seed)
        splits["train"] += s + f
        if n_val_s:
            s, f = generate_task_episodes(task, index[task.task_id], n_val_s, n_val_f,
                                          d.corrupt_p, d.seed, validation=True)
            splits["val"] += s + f
    for task in heldout_tasks:
        s, f = generate_task_episodes(task, index[task.task_id], d.successes_per_task,
                                      d.failures_per_task, d.corrupt_p, d.seed)
        splits["heldout"] += s + f
    summary = {"provenance": cfg.provenance(), "data_config_hash": _data_section_hash(cfg),
               "splits": {}}
    for name, eps in splits.items():
        if not eps:
            continue
        sub, tag = SPLIT_DIRS[name]
        write_dataset(eps, out / sub, tag)
        summary["splits"][name] = {
            "episodes": len(eps),
            "successes": sum(e.success for e in eps),
            "tasks": sorted({e.task_id for e in eps}),
            "content_hash": dataset_hash(out / sub),
        }
    _write_json(out / "dataset.json", summary)
    return {"out": str(out), **{k: v["episodes"] for k, v in summary["splits"].items()}}


def _check_dataset(data_dir: Path, cfg: RunConfig, split: str = "train") -> dict:
    info_path = data_dir / "dataset.json"
    if not info_path.is_file():
        raise CliError(f"missing dataset summary {info_path}")
    info = json.loads(info_path.read_text(encoding="utf-8"))
    if info.get("data_config_hash") != _data_section_hash(cfg):
        raise CliError(f"dataset {data_dir} was generated with a different data config "
                       f"({info.get('data_config_hash')} != {_data_section_hash(cfg)})")
    actual = dataset_hash(data_dir / SPLIT_DIRS[split][0])
    if info["splits"][split]["content_hash"] != actual:
        raise CliError(f"dataset split {split} content hash mismatch: files changed since generation")
    return info


def cmd_train_critic(args) -> dict:
    from .trainer import select_checkpoint, train

    cfg = _config(args)
    data_dir = Path(args.data)
    _check_dataset(data_dir, cfg)
    source = _split_source(data_dir, "train")
    if args.max_episodes:
        source = _limit(source, args.max_episodes, cfg.seed)
    val = _split_source(data_dir, "val") if (data_dir / "val").is_dir() else None
    out = Path(args.out)
    cks = train(source, cfg.trainer, cfg.critic, val_source=val, out_dir=out,
                extra_meta={"provenance": cfg.provenance(), "run_config": cfg.to_dict()})
    best = select_checkpoint(cks)
    selected = out / "selected"
    if selected.exists():
        shutil.rmtree(selected)
    shutil.copytree(best.path, selected)
    summary = {"selected_epoch": best.epoch, "metrics": best.metrics,
               "epochs": [{"epoch": c.epoch, "train_loss": c.train_loss, **c.metrics} for c in cks],
               **cfg.provenance()}
    _write_json(out / "summary.json", summary)
    return {"selected": str(selected), "epoch": best.epoch, "v2t_xent": best.metrics.get("v2t_xent")}


def _limit(source: EpisodeSource, n: int, seed: int) -> EpisodeSource:
    """Deterministic sub-sample keeping the success/failure ratio."""
    rng = np.random.default_rng([seed, 5])
    s, f = source.success_indices, source.failure_indices
    ns = min(len(s), max(2, round(n * len(s) / len(source))))
    keep = sorted(rng.choice(s, ns, replace=False).tolist()
                  + rng.choice(f, min(len(f), n - ns), replace=False).tolist())
    return source.subset(keep)


def _split_tasks_for(split: str, cfg: RunConfig):
    train_tasks, heldout_tasks = _task_split(cfg)
    return heldout_tasks if split == "heldout" else train_tasks


def _parse_perturb(text: str):
    try:
        b, n = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise CliError(f"--perturb expects 'brightness,noise', got {text!r}") from exc
    return (b, n)


def cmd_eval_critic(args) -> dict:
    cfg = _config(args)
    scorer, meta = load_scorer(args.checkpoint)
    data_dir = Path(args.data)
    source = _split_source(data_dir, args.split)
    tasks = _split_tasks_for(args.split, cfg)
    idx = source.success_indices
    if args.max_successes:
        idx = idx[: args.max_successes]
    succ = _StoredEpisodes(source, idx)
    eval_set = build_eval_set(tasks, cfg, succ, args.split, args.groups)
    perts = [tuple(p) for p in cfg.eval.perturbations]
    for p in args.perturb or []:
        pp = _parse_perturb(p)
        if pp not in perts:
            perts.append(pp)
    rows = evalsuite.robustness_report(scorer, eval_set, perts, cfg.eval.seed)
    out = Path(args.out)
    evalsuite.write_report(rows, out, {**cfg.provenance(), "checkpoint": str(args.checkpoint),
                                       "checkpoint_kind": meta.get("kind", "critic")})
    agg = {f"{r['metric']}@{r['perturbation']}": r["value"] for r in rows if r["task"] is None}
    return {"report": str(out), **agg}


def cmd_train_policy(args) -> dict:
    cfg = _config(args)
    try:
        task = tw.task_by_id(args.task)
    except KeyError as exc:
        raise CliError(f"unknown task id {args.task!r}") from exc
    source = "vlc_plus_sparse" if args.reward == "vlc" else "sparse"
    rcfg = replace(cfg.rl, reward_source=source)
    if args.steps:
        rcfg = replace(rcfg, total_steps=args.steps)
    adapter = None
    if source == "vlc_plus_sparse":
        if not args.checkpoint:
            raise CliError("--reward vlc requires --checkpoint")
        from .critic import load_checkpoint

        if not Path(args.checkpoint).is_dir():
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        model, _ = load_checkpoint(args.checkpoint)
        adapter = rl.make_adapter(model, rcfg)
    out = Path(args.out)
    t0 = time.time()
    policy, curve = rl.sac_train(task, rcfg, adapter, curve_path=out / "curve.jsonl",
                                 progress=True)
    wall = time.time() - t0
    curve.write_jsonl(out / "curve.jsonl")
    policy.meta.update(cfg.provenance())
    policy.meta["checkpoint"] = args.checkpoint
    policy.save(out / "policy")
    _write_json(out / "curve.meta.json", {**cfg.provenance(), "task_id": task.task_id,
                                          "reward_source": source, "wall_seconds": wall,
                                          "converged_at": curve.converged_at,
                                          "steps_to_0.9": rl.steps_to_threshold(curve, 0.9)})
    return {"curve": str(out / "curve.jsonl"), "converged_at": curve.converged_at,
            "steps_to_0.9": rl.steps_to_threshold(curve, 0.9)}


def cmd_rank_trajectories(args) -> dict:
    cfg = _config(args)
    if args.groups < 1:
        raise CliError("--groups must be >= 1")
    try:
        task = tw.task_by_id(args.task)
    except KeyError as exc:
        raise CliError(f"unknown task id {args.task!r}") from exc
    scorer, _ = load_scorer(args.checkpoint)
    groups = evalsuite.build_primitive_groups(task, args.groups, cfg.eval.k_failures, cfg.eval.seed)
    acc = evalsuite.ranking_accuracy(scorer, groups)
    return {"task_id": task.task_id, "groups": len(groups), "ranking_accuracy": acc,
            **cfg.provenance()}


def cmd_plot_rewards(args) -> dict:
    cfg = _config(args)
    scorer, _ = load_scorer(args.checkpoint)
    source = _split_source(Path(args.data), args.split)
    n = args.episodes or cfg.eval.curve_episodes
    # alternate successes and failures so both kinds are shown
    picks = []
    for s, f in zip(source.success_indices, source.failure_indices):
        picks += [s, f]
    picks = picks[:n]
    files = evalsuite.export_reward_curves(scorer, [source.record(i) for i in picks], args.out)
    _write_json(Path(args.out) / "provenance.json", cfg.provenance())
    return {"files": len(files), "out": str(args.out)}


ABLATION_AXES = {
    "alpha": [("objective.alpha", v) for v in (0, 3.3, 10, 33, 100)],
    "aggregator": [("critic.aggregator", v) for v in ("tight", "sequence_cosine", "mean_pool")],
    "sampling": [("trainer.sampling.mode", v) for v in ("random_in_interval", "deterministic_midpoint")],
}


def cmd_ablate(args) -> dict:
    """Train and evaluate one run per override in the chosen axes."""
    base = _config(args)
    axes = args.axis or list(ABLATION_AXES)
    results = []
    out = Path(args.out)
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise CliError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
        for key, value in ABLATION_AXES[axis]:
            name = f"{axis}={value}"
            run_dir = out / name.replace("=", "_")
            sets = list(args.set or []) + [f"{key}={value}"]
            common = argparse.Namespace(config=args.config, set=sets, seed=args.seed)
            log.info("ablation run %s", name)
            trained = cmd_train_critic(argparse.Namespace(**vars(common), data=args.data,
                                                          out=run_dir, max_episodes=args.max_episodes))
            row = {"axis": axis, "override": f"{key}={value}", **trained}
            for split in args.splits:
                rep = cmd_eval_critic(argparse.Namespace(
                    **vars(common), checkpoint=trained["selected"], data=args.data, split=split,
                    perturb=None, out=run_dir / f"report_{split}.json", groups=args.groups,
                    max_successes=None))
                row[split] = {k: v for k, v in rep.items() if k != "report"}
            results.append(row)
    _write_json(out / "ablation.json", {"runs": results, **base.provenance()})
    return {"runs": len(results), "table": str(out / "ablation.json")}


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlcritic", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. trainer.epochs=2")
        sp.add_argument("--seed", type=int, help="global seed")
        return sp

    g = common(sub.add_parser("generate-data", help="generate train/val/heldout datasets"))
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_data)

    t = common(sub.add_parser("train-critic", help="train a critic and select a checkpoint"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--max-episodes", type=int, default=None)
    t.set_defaults(func=cmd_train_critic)

    e = common(sub.add_parser("eval-critic", help="ranking, monotonicity and robustness report"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=sorted(SPLIT_DIRS), default="heldout")
    e.add_argument("--perturb", action="append", metavar="B,N")
    e.add_argument("--groups", type=int, default=None, help="groups per task")
    e.add_argument("--max-successes", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_critic)

    r = common(sub.add_parser("train-policy", help="train SAC with sparse or VLC reward"))
    r.add_argument("--task", required=True)
    r.add_argument("--reward", choices=("sparse", "vlc"), default="sparse")
    r.add_argument("--checkpoint")
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_train_policy)

    k = common(sub.add_parser("rank-trajectories", help="1-vs-K ranking accuracy on one task"))
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--task", required=True)
    k.add_argument("--groups", type=int, default=50)
    k.set_defaults(func=cmd_rank_trajectories)

    c = common(sub.add_parser("plot-rewards", help="export reward curves"))
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", choices=sorted(SPLIT_DIRS), default="heldout")
    c.add_argument("--episodes", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_plot_rewards)

    a = common(sub.add_parser("ablate", help="run an ablation grid"))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--axis", action="append", choices=sorted(ABLATION_AXES))
    a.add_argument("--splits", nargs="+", default=["train", "heldout"], choices=sorted(SPLIT_DIRS))
    a.add_argument("--groups", type=int, default=None)
    a.add_argument("--max-episodes", type=int, default=None)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except (CliError, ConfigError, DatasetError, FileNotFoundError, ValueError, KeyError,
            OSError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
