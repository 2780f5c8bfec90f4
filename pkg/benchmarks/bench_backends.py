"""Wall time of the compiled and pure-Python simulation loops.

Usage::

    python benchmarks/bench_backends.py [--duration 4] [--repeat 3]

Both loops run the same plan; the script also reports the largest
difference between their joint trajectories.
"""

import argparse
import time

import numpy as np

from gazestab import _backend
from gazestab.scenarios import ScenarioConfig, build_plan


def bench(plan, backend, repeat):
    best, trace = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        trace = _backend.simulate(plan, backend)
        best = min(best, time.perf_counter() - t0)
    return best, trace


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--duration", type=float, default=4.0, help="simulated seconds")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--controller", default="reafference")
    args = p.parse_args(argv)

    cfg = ScenarioConfig.reference("SelfRobot", controller=args.controller, frequency=1.0, duration=args.duration)
    plan = build_plan(cfg)
    print(f"{cfg.label}, {cfg.n_ticks} ticks at {cfg.control_rate:g} Hz")
    results = {}
    for backend in _backend.available():
        seconds, trace = bench(plan, backend, args.repeat)
        results[backend] = trace
        print(f"  {backend:<7} {seconds:8.3f} s   {1e6 * seconds / cfg.n_ticks:8.1f} us/tick")
    if len(results) == 2:
        diff = np.abs(results["c"].q - results["python"].q).max()
        print(f"  max |q_c - q_python| = {diff:.2e}")


if __name__ == "__main__":
    main()
