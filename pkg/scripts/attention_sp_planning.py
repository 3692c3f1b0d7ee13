#!/usr/bin/env python3
"""Per-request sequence-parallel planning versus uniform zigzag.

Plans (sp, zigzag) per request for batches mixing short and long prompts
and reports the predicted attention-latency saving over running every
request at the maximum zigzag SP.

    python3 scripts/attention_sp_planning.py
"""

import random
import sys

sys.path.insert(0, "src")

from charon.blocks import ModelConfig
from charon.dse import plan_dynamic_sp, uniform_zigzag_baseline
from charon.hardware import load_hardware

MODEL = ModelConfig(
    hidden_size=1024, num_heads=16, num_kv_heads=16, head_dim=64, ffn_hidden=2048,
    num_layers=1, vocab_size=32000, batch=1, seq_len=1024,
)


def run() -> None:
    with open("scenarios/tiny_hw.yaml") as fh:
        hw = load_hardware(fh.read())
    rng = random.Random(0)
    allowed = [1, 2, 4]
    print(f"{'batch mix':42} {'planned_us':>12} {'uniform_us':>12} {'saving':>8}")
    for trial in range(8):
        batch = sorted(
            rng.choice([64, 256, 1024, 4096, 16384]) for _ in range(rng.randint(2, 5))
        )
        # keep every length splittable by the largest zigzag option
        batch = [max(8, (s // 8) * 8) for s in batch]
        plan = plan_dynamic_sp(batch, allowed, MODEL, hw)
        base = uniform_zigzag_baseline(batch, max(allowed), MODEL, hw)
        saving = 1 - plan.total_us / base
        mix = ",".join(str(s) for s in batch)
        choices = " ".join(
            f"sp{r.sp}{'z' if r.zigzag else ''}" for r in plan.requests
        )
        print(f"{mix:42} {plan.total_us:12.2f} {base:12.2f} {saving:7.1%}  [{choices}]")


if __name__ == "__main__":
    run()
