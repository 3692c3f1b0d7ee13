#!/usr/bin/env python3
"""Exhaustive serve-mode sweep with pruning and frontier extraction.

Evaluates TP/PP/batch combinations for a small decoder, prints every
feasible point and marks the TPS/GPU-vs-TPS/user frontier, then the best
configuration under an example TPOT SLO.

    python3 scripts/search_inference_frontier.py
"""

import sys

sys.path.insert(0, "src")

from charon.blocks import ModelConfig
from charon.dse import (
    SearchSpace,
    SLOConstraints,
    best_under_slo,
    default_rules,
    enumerate_space,
    evaluate_all,
    pareto_frontier,
    prune,
)
from charon.engines import build_stack
from charon.hardware import load_hardware

MODEL = ModelConfig(
    hidden_size=512, num_heads=8, num_kv_heads=8, head_dim=64, ffn_hidden=1024,
    num_layers=8, vocab_size=32000, batch=1, seq_len=512,
)


def run() -> None:
    with open("scenarios/tiny_hw.yaml") as fh:
        hw = load_hardware(fh.read())
    stack = build_stack(hw)
    space = SearchSpace(
        world_sizes=[8],
        tp=[1, 2, 4, 8],
        pp=[1, 2, 4],
        microbatches=[1],
        decode_batch=[1, 4, 16, 64],
        prefill_chunk=[0, 128],
    )
    candidates = enumerate_space(space)
    kept, pruned = prune(candidates, default_rules(hw, MODEL))
    print(f"{len(candidates)} candidates, {len(pruned)} pruned, evaluating {len(kept)}")
    points = evaluate_all(kept, MODEL, hw, stack, mode="serve", workers=8)
    frontier = {id(p) for p in pareto_frontier(points)}
    print(f"{'tp':>3} {'pp':>3} {'batch':>6} {'chunk':>6} {'ttft_us':>12} "
          f"{'tpot_us':>10} {'tps/gpu':>10} {'tps/user':>10}  front")
    for p in points:
        if not p.feasible:
            continue
        c = p.candidate
        mark = "*" if id(p) in frontier else ""
        print(
            f"{c.tp:>3} {c.pp:>3} {c.decode_batch:>6} {c.prefill_chunk:>6} "
            f"{p.ttft_us:12.1f} {p.tpot_us:10.2f} {p.tps_per_gpu:10.1f} "
            f"{p.tps_per_user:10.1f}  {mark}"
        )
    best = best_under_slo(points, SLOConstraints(tpot_us=300.0))
    if best:
        c = best.candidate
        print(
            f"\nbest under TPOT<=300us: tp={c.tp} pp={c.pp} batch={c.decode_batch} "
            f"-> {best.tps_per_gpu:.1f} TPS/GPU at {best.tps_per_user:.1f} TPS/user"
        )


if __name__ == "__main__":
    run()
