"""Compare the compiled and pure-Python kernel backends.

Usage::

    python3 benchmarks/bench_kernels.py [--repeats 5] [--frames 2000]

Prints per-call timings for ``render_frame`` and ``push_step`` for every
importable backend, plus the end-to-end cost of generating expert episodes.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from vlcritic import kernels


def _time(fn, n: int, repeats: int) -> float:
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(n)
        best.append((time.perf_counter() - t0) / n)
    return statistics.median(best)


def bench_backend(mod, n_frames: int, repeats: int) -> dict:
    rng = np.random.default_rng(0)
    pos = rng.uniform(0.05, 0.95, size=(n_frames, 6))
    out = np.empty((64, 64, 3), dtype=np.uint8)

    def render(n):
        for i in range(n):
            ax, ay, ox, oy, gx, gy = pos[i % n_frames]
            mod.render_frame(out, ax, ay, ox, oy, gx, gy, i % 3, 220, 40, 40, True,
                             0.045, 0.03, 0.08, 0.6 / 64)

    def push(n):
        for i in range(n):
            ax, ay, ox, oy, vx, vy = pos[i % n_frames]
            mod.push_step(ax, ay, ox, oy, (vx - 0.5) * 0.1, (vy - 0.5) * 0.1, 0.075)

    return {"render_frame_us": 1e6 * _time(render, n_frames, repeats),
            "push_step_us": 1e6 * _time(push, 20 * n_frames, repeats)}


def episode_throughput(backend: str, n: int) -> float:
    """Episodes per second for expert rollouts, measured in a fresh process."""
    code = (
        "import time; from vlcritic import taskworld as tw\n"
        "tasks = tw.enumerate_tasks()\n"
        f"t = time.perf_counter()\n"
        f"for i in range({n}): tw.generate_episode(tasks[i % len(tasks)], tw.ExpertPolicy(), i)\n"
        "print(time.perf_counter() - t)\n"
    )
    env = {**os.environ, "VLCRITIC_BACKEND": backend}
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    return n / float(res.stdout.strip())


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--frames", type=int, default=2000)
    p.add_argument("--episodes", type=int, default=300)
    args = p.parse_args(argv)

    results = {}
    for name, mod in kernels.backends().items():
        results[name] = bench_backend(mod, args.frames, args.repeats)
        results[name]["episodes_per_s"] = episode_throughput(name, args.episodes)
    if "cython" in results and "python" in results:
        results["speedup"] = {k: results["python"][k] / results["cython"][k]
                              for k in ("render_frame_us", "push_step_us")}
        results["speedup"]["episodes"] = (results["cython"]["episodes_per_s"]
                                          / results["python"]["episodes_per_s"])
    print(json.dumps(results, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
