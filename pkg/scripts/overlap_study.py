#!/usr/bin/env python3
"""Sweep overlap models and slowdown factors on one training scenario.

Shows how ratio-based stretching and bandwidth-aware contention move the
step time and the exposed communication per rank.

    python3 scripts/overlap_study.py [scenario.yaml]
"""

import sys

sys.path.insert(0, "src")

from charon.cli import _run_scenario
from charon.scenario import load_scenario
from charon.scheduler import SlowdownFactors, exposed_comm


def run(path: str) -> None:
    rows = []
    for overlap, factors in [
        ("none", SlowdownFactors()),
        ("ratio", SlowdownFactors()),
        ("ratio", SlowdownFactors(compute=1.2, comm=1.1)),
        ("ratio", SlowdownFactors(compute=1.5, comm=1.3)),
        ("bandwidth", SlowdownFactors()),
    ]:
        scn = load_scenario(path)
        scn.overlap = overlap
        scn.factors = factors
        timeline, report, _ = _run_scenario(scn)
        exposed = max(exposed_comm(timeline).values()) / 1e3
        rows.append(
            (
                f"{overlap} sc={factors.compute} sm={factors.comm}",
                report.step_time_us,
                report.mfu,
                exposed,
            )
        )
    print(f"{'configuration':34} {'step_us':>12} {'mfu':>8} {'exposed_us':>12}")
    for name, step, mfu, exp in rows:
        print(f"{name:34} {step:12.3f} {mfu:8.4f} {exp:12.3f}")


if __name__ == "__main__":
    run(sys.argv[1] if len(sys.argv) > 1 else "scenarios/tiny_train.yaml")
