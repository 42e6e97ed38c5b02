"""Produce the trained artifacts the acceptance suite evaluates.

Every stage shells out to the ``vlcritic`` CLI and is skipped when its output
already exists, so the script can be interrupted and resumed::

    python scripts/run_experiments.py --root runs critics
    python scripts/run_experiments.py --root runs rl-sparse rl-vlc

Layout under ``--root``::

    data/                       generated dataset
    critic_a33_s{0,1,2}/        full objective, three trainer seeds
    critic_a0_s{0,1,2}/         ranking term disabled
    critic_meanpool_s0/         order-invariant aggregator
    rl/{task}/{sparse,vlc}_s{k}/curve.jsonl
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path

CRITICS = {
    "critic_a33_s0": [],
    "critic_a33_s1": ["trainer.seed=1"],
    "critic_a33_s2": ["trainer.seed=2"],
    "critic_a0_s0": ["objective.alpha=0"],
    "critic_a0_s1": ["objective.alpha=0", "trainer.seed=1"],
    "critic_a0_s2": ["objective.alpha=0", "trainer.seed=2"],
    "critic_meanpool_s0": ["critic.aggregator=mean_pool"],
}
RL_TASKS = ("push-blue-square-top", "push-green-triangle-right", "push-red-circle-left")
RL_SEEDS = (0, 1, 2, 3, 4)
RL_STEPS = 30_000
RL_SETTINGS = ["rl.hidden=[128,128,128]"]
REWARD_CRITIC = "critic_a33_s0"


def _run(cmd: list[str], log: Path) -> None:
    log.parent.mkdir(parents=True, exist_ok=True)
    print("+", " ".join(cmd), flush=True)
    with open(log, "a") as fh:
        proc = subprocess.run(cmd, stdout=fh, stderr=subprocess.STDOUT)
    if proc.returncode:
        raise SystemExit(f"command failed ({proc.returncode}); see {log}")


def _sets(pairs) -> list[str]:
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


def stage_data(root: Path) -> None:
    if not (root / "data" / "dataset.json").exists():
        _run(["vlcritic", "generate-data", "--out", str(root / "data")], root / "data.log")


def stage_critics(root: Path, only=None) -> None:
    stage_data(root)
    for name, sets in CRITICS.items():
        if only and name not in only:
            continue
        out = root / name
        if (out / "summary.json").exists():
            continue
        _run(["vlcritic", "train-critic", "--data", str(root / "data"), "--out", str(out)]
             + _sets(sets), root / f"{name}.log")


def _rl(root: Path, reward: str) -> None:
    ckpt = root / REWARD_CRITIC / "selected"
    if reward == "vlc" and not ckpt.is_dir():
        raise SystemExit(f"reward critic missing: {ckpt}")
    for task in RL_TASKS:
        for seed in RL_SEEDS:
            out = root / "rl" / task / f"{reward}_s{seed}"
            if (out / "curve.meta.json").exists():
                continue
            cmd = ["vlcritic", "train-policy", "--task", task, "--reward", reward,
                   "--steps", str(RL_STEPS), "--out", str(out)]
            cmd += _sets(RL_SETTINGS + [f"rl.seed={seed}"])
            if reward == "vlc":
                cmd += ["--checkpoint", str(ckpt)]
            _run(cmd, out.parent / f"{reward}_s{seed}.log")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default="runs")
    parser.add_argument("--only", nargs="*", help="restrict the critics stage to these runs")
    parser.add_argument("stages", nargs="+", choices=["data", "critics", "rl-sparse", "rl-vlc"])
    args = parser.parse_args(argv)
    root = Path(args.root)
    for stage in args.stages:
        if stage == "data":
            stage_data(root)
        elif stage == "critics":
            stage_critics(root, args.only)
        else:
            _rl(root, stage.split("-")[1])
    return 0


if __name__ == "__main__":
    sys.exit(main())
