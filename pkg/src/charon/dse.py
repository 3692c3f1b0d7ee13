"""Design-space exploration: enumeration, pruning, evaluation, frontiers,
and the per-request dynamic sequence-parallel planner.

charon-space/1 files are YAML:

    version: charon-space/1
    world_sizes: [8]
    tp: [1, 2, 4, 8]
    pp: [1, 2]
    dp: [1, 2, 4, 8]
    microbatches: [8]
    decode_batch: [1, 8, 32]
    prefill_chunk: [0]          # 0 = unchunked
    schedules: [one_f_one_b]
    rules: [intra_node_tp, static_memory, microbatch_floor]
    slo: {ttft_ms: 500, tpot_ms: 50, tps_per_user: 20}
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import yaml

from .analyzers import MemoryCalibration, memory_timeline
from .blocks import ModelConfig, build_dense_block, build_moe_block
from .backward import derive_backward
from .collectives import collective_cost
from .engines import EngineStack, roofline_time
from .hardware import HardwareSpec
from .ir import ConfigError, OperatorGraph, TensorMeta
from .parallel import ParallelismConfig, apply_dp, apply_ep, apply_tp, validate_config
from .scheduler import SlowdownFactors, simulate
from .schedules import build_pp_schedule, split_stages

SPACE_VERSION = "charon-space/1"


@dataclass
class Candidate:
    tp: int = 1
    sp: int = 1
    ep: int = 1
    pp: int = 1
    dp: int = 1
    world: int = 1
    microbatches: int = 1
    pp_schedule: str = "one_f_one_b"
    dp_mode: str = "ddp"
    prefill_batch: int = 1
    decode_batch: int = 1
    prefill_chunk: int = 0

    def key(self) -> tuple:
        return (
            self.world, self.tp, self.sp, self.ep, self.pp, self.dp,
            self.microbatches, self.pp_schedule, self.dp_mode,
            self.prefill_batch, self.decode_batch, self.prefill_chunk,
        )

    def parallelism(self) -> ParallelismConfig:
        return ParallelismConfig(
            tp=self.tp, sp=self.sp, ep=self.ep, pp=self.pp, dp=self.dp,
            dp_mode=self.dp_mode, pp_schedule=self.pp_schedule,
            microbatches=self.microbatches, world_size=self.world,
        )


@dataclass
class SearchSpace:
    world_sizes: list[int] = field(default_factory=lambda: [1])
    tp: list[int] = field(default_factory=lambda: [1])
    sp: list[int] = field(default_factory=lambda: [1])
    ep: list[int] = field(default_factory=lambda: [1])
    pp: list[int] = field(default_factory=lambda: [1])
    dp: list[int] | None = None  # None: derived as world/(tp*pp)
    microbatches: list[int] = field(default_factory=lambda: [1])
    pp_schedules: list[str] = field(default_factory=lambda: ["one_f_one_b"])
    dp_modes: list[str] = field(default_factory=lambda: ["ddp"])
    prefill_batch: list[int] = field(default_factory=lambda: [1])
    decode_batch: list[int] = field(default_factory=lambda: [1])
    prefill_chunk: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        for name in ("world_sizes", "tp", "sp", "ep", "pp", "microbatches",
                     "pp_schedules", "dp_modes", "prefill_batch", "decode_batch",
                     "prefill_chunk"):
            if not getattr(self, name):
                raise ConfigError(f"search-space axis {name} is empty")


@dataclass
class PruneRule:
    name: str
    predicate: "callable"  # Candidate -> bool (True = prune)
    rationale: str


@dataclass
class EvalPoint:
    candidate: Candidate
    feasible: bool = True
    reason: str = ""
    step_time_us: float = 0.0
    ttft_us: float = 0.0
    tpot_us: float = 0.0
    tps_per_gpu: float = 0.0
    tps_per_user: float = 0.0
    peak_mem_bytes: int = 0
    mfu: float = 0.0


def enumerate_space(space: SearchSpace) -> list[Candidate]:
    """Cartesian product filtered by validate_config; deterministic order.

    Model-shape divisibility is a prune rule, not an enumeration filter, so
    pruned candidates stay visible with their rejection reason.
    """
    out: list[Candidate] = []
    dp_axis = space.dp
    for world in space.world_sizes:
        for tp, sp, ep, pp, mb, sched, mode, pb, db, chunk in itertools.product(
            space.tp, space.sp, space.ep, space.pp, space.microbatches,
            space.pp_schedules, space.dp_modes, space.prefill_batch,
            space.decode_batch, space.prefill_chunk,
        ):
            dps = dp_axis if dp_axis is not None else [world // (tp * pp)] if world % (tp * pp) == 0 else []
            for dp in dps:
                cand = Candidate(
                    tp=tp, sp=sp, ep=ep, pp=pp, dp=dp, world=world,
                    microbatches=mb, pp_schedule=sched, dp_mode=mode,
                    prefill_batch=pb, decode_batch=db, prefill_chunk=chunk,
                )
                if validate_config(cand.parallelism(), world):
                    continue
                out.append(cand)
    out.sort(key=lambda c: c.key())
    return out


def _divisible(model: ModelConfig, cand: Candidate) -> bool:
    if model.num_heads % cand.tp or model.num_kv_heads % cand.tp:
        return False
    if model.ffn_hidden % cand.tp:
        return False
    if cand.sp > 1 and model.seq_len % cand.sp:
        return False
    if model.moe is not None and model.moe.num_experts % cand.ep:
        return False
    if model.moe is None and cand.ep > 1:
        return False
    if model.num_layers % cand.pp:
        return False
    return True


def default_rules(hw: HardwareSpec, model: ModelConfig, intra_node: int = 8) -> list[PruneRule]:
    def static_memory(c: Candidate) -> bool:
        g = _build_block(model)
        params = g.weight_bytes() / c.tp
        if c.dp_mode in ("zero3", "fsdp"):
            params /= c.dp
        opt = (g.weight_params() / c.tp) * 8 / (c.dp if c.dp_mode != "ddp" else 1)
        return (params + opt) * (model.num_layers / c.pp) > hw.memory_capacity

    return [
        PruneRule("divisibility", lambda c: not _divisible(model, c),
                  "model dimensions must divide evenly across the shards"),
        PruneRule("intra_node_tp", lambda c: c.tp > intra_node,
                  "TP groups must fit inside one node"),
        PruneRule("static_memory", static_memory,
                  "persistent bytes alone exceed device capacity"),
        PruneRule("microbatch_floor", lambda c: c.pp_schedule == "one_f_one_b" and c.microbatches < c.pp,
                  "1F1B needs microbatches >= pipeline stages"),
    ]


def prune(
    candidates: list[Candidate], rules: list[PruneRule]
) -> tuple[list[Candidate], list[tuple[Candidate, str]]]:
    kept: list[Candidate] = []
    pruned: list[tuple[Candidate, str]] = []
    for cand in candidates:
        hit = next((r.name for r in rules if r.predicate(cand)), None)
        if hit is None:
            kept.append(cand)
        else:
            pruned.append((cand, hit))
    return kept, pruned


def _build_block(model: ModelConfig, kv_len: int | None = None) -> OperatorGraph:
    if model.moe is not None:
        return build_moe_block(model, kv_len=kv_len)
    return build_dense_block(model, kv_len=kv_len)


def _shard_for(cand: Candidate, g: OperatorGraph) -> OperatorGraph:
    if cand.ep > 1:
        g = apply_ep(g, cand.ep, rank_stride=cand.tp)
    return apply_tp(g, cand.tp, sp_enabled=cand.sp > 1)


def evaluate(
    cand: Candidate,
    model: ModelConfig,
    hw: HardwareSpec,
    stack: EngineStack,
    mode: str = "train",
    factors: SlowdownFactors | None = None,
    overlap: str = "ratio",
    calib: MemoryCalibration | None = None,
) -> EvalPoint:
    """Build -> shard -> simulate -> extract metrics for one candidate."""
    point = EvalPoint(candidate=cand)
    try:
        if mode == "train":
            _eval_train(point, cand, model, hw, stack, factors, overlap, calib)
        else:
            _eval_serve(point, cand, model, hw, stack, factors, overlap, calib)
    except ConfigError as exc:
        point.feasible = False
        point.reason = str(exc)
    if point.feasible and point.peak_mem_bytes > hw.memory_capacity:
        point.feasible = False
        point.reason = "memory"
    return point


def _eval_train(point, cand, model, hw, stack, factors, overlap, calib) -> None:
    per_rank_batch = model.batch
    micro = replace(
        model, batch=max(per_rank_batch // cand.microbatches, 1)
    ) if cand.microbatches > 1 else model
    g = derive_backward(_build_block(micro))
    g = _shard_for(cand, g)
    g, tags = apply_dp(g, cand.dp, cand.dp_mode, rank_stride=cand.tp)
    stages = split_stages(g, cand.pp)
    program = build_pp_schedule(stages, cand.parallelism())
    tl = simulate(program, stack, hw, factors, overlap)
    point.step_time_us = tl.makespan_ns / 1e3
    model_flops = g.model_flops() * g.block_multiplier * cand.microbatches
    point.mfu = model_flops * cand.tp / (
        (tl.makespan_ns / 1e9) * hw.peak(model.precision) * cand.tp * cand.pp
    )
    mem = memory_timeline(stages[0], tags, calib)
    in_flight = min(cand.pp, cand.microbatches)
    point.peak_mem_bytes = mem.max_allocated + (in_flight - 1) * mem.peak_activation_bytes


def _eval_serve(point, cand, model, hw, stack, factors, overlap, calib) -> None:
    # TTFT: prefill of the full prompt, optionally in chunks
    chunk = cand.prefill_chunk or model.seq_len
    chunk = min(chunk, model.seq_len)
    ttft_ns = 0.0
    done = 0
    while done < model.seq_len:
        cur = min(chunk, model.seq_len - done)
        pre_cfg = replace(model, seq_len=cur, batch=cand.prefill_batch)
        g = _build_block(pre_cfg, kv_len=done if done else None)
        g = _shard_for(cand, g)
        stages = split_stages(g, cand.pp)
        program = build_pp_schedule(stages, cand.parallelism())
        tl = simulate(program, stack, hw, factors, overlap)
        ttft_ns += tl.makespan_ns
        done += cur
    point.ttft_us = ttft_ns / 1e3

    # TPOT: steady decode step at the target batch with a full kv cache
    dec_cfg = replace(model, seq_len=1, batch=cand.decode_batch)
    g = _build_block(dec_cfg, kv_len=model.seq_len)
    g = _shard_for(cand, g)
    stages = split_stages(g, cand.pp)
    program = build_pp_schedule(stages, cand.parallelism())
    tl = simulate(program, stack, hw, factors, overlap)
    point.tpot_us = tl.makespan_ns / 1e3
    point.tps_per_user = 1e6 / point.tpot_us if point.tpot_us > 0 else 0.0
    point.tps_per_gpu = cand.decode_batch * point.tps_per_user / cand.world
    mem = memory_timeline(stages[0], None, calib, optimizer_states=False)
    point.peak_mem_bytes = mem.max_allocated
    point.step_time_us = point.tpot_us


def evaluate_all(
    candidates: list[Candidate],
    model: ModelConfig,
    hw: HardwareSpec,
    stack: EngineStack,
    mode: str = "train",
    workers: int = 4,
    **kw,
) -> list[EvalPoint]:
    """Concurrent evaluation, results ordered by candidate index."""
    if workers <= 1 or len(candidates) <= 1:
        return [evaluate(c, model, hw, stack, mode, **kw) for c in candidates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(evaluate, c, model, hw, stack, mode, **kw) for c in candidates
        ]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Frontier
# ---------------------------------------------------------------------------


def pareto_frontier(
    points: list[EvalPoint],
    objectives: tuple = (lambda p: p.tps_per_gpu, lambda p: p.tps_per_user),
) -> list[EvalPoint]:
    """Non-dominated subset under component-wise >= with one strict.

    Two-objective sweep: sort by the first objective descending and keep
    points that raise the running second-objective maximum. Exact duplicates
    of a kept point stay (equal points never dominate each other).
    """
    if len(objectives) != 2:
        raise ConfigError("pareto_frontier expects exactly two objectives")
    feasible = [p for p in points if p.feasible]
    order = sorted(
        range(len(feasible)),
        key=lambda i: (
            -objectives[0](feasible[i]),
            -objectives[1](feasible[i]),
            feasible[i].candidate.key(),
        ),
    )
    keep: list[EvalPoint] = []
    best_second = -float("inf")
    last_kept: tuple | None = None
    for i in order:
        p = feasible[i]
        vals = (objectives[0](p), objectives[1](p))
        if vals[1] > best_second or vals == last_kept:
            keep.append(p)
            best_second = max(best_second, vals[1])
            last_kept = vals
    keep.sort(key=lambda p: p.candidate.key())
    return keep


@dataclass
class SLOConstraints:
    ttft_us: float | None = None
    tpot_us: float | None = None
    tps_per_user: float | None = None


def best_under_slo(points: list[EvalPoint], slo: SLOConstraints) -> EvalPoint | None:
    """Max TPS/GPU among SLO-satisfying points; ties to smaller deployments."""
    ok = [
        p
        for p in points
        if p.feasible
        and (slo.ttft_us is None or p.ttft_us <= slo.ttft_us)
        and (slo.tpot_us is None or p.tpot_us <= slo.tpot_us)
        and (slo.tps_per_user is None or p.tps_per_user >= slo.tps_per_user)
    ]
    if not ok:
        return None
    return min(ok, key=lambda p: (-p.tps_per_gpu, p.candidate.world, p.candidate.key()))


# ---------------------------------------------------------------------------
# Dynamic sequence-parallel planning
# ---------------------------------------------------------------------------


@dataclass
class SPChoice:
    sp: int
    zigzag: bool
    predicted_us: float
    chunks: dict[int, list[int]] = field(default_factory=dict)


@dataclass
class SPPlan:
    requests: list[SPChoice]

    @property
    def total_us(self) -> float:
        return sum(r.predicted_us for r in self.requests)


def zigzag_chunks(sp: int, rank: int) -> list[int]:
    """Zigzag assignment over 2*sp equal chunks: rank r owns {r, 2sp-1-r}."""
    return [rank, 2 * sp - 1 - rank]


def _attention_cost_us(
    seq: int, sp: int, zigzag: bool, model: ModelConfig, hw: HardwareSpec
) -> float | None:
    """Per-rank attention latency + gather cost for one request.

    Zigzag balances the causal triangle, so per-rank work is total/sp;
    contiguous splits bottleneck on the last rank ((2sp-1)/sp^2 of total).
    Returns None when the sequence does not split evenly.
    """
    if sp > 1:
        if zigzag and seq % (2 * sp) != 0:
            return None
        if not zigzag and seq % sp != 0:
            return None
    probe = replace(model, seq_len=seq, batch=1)
    g = build_dense_block(probe)
    attn = g.node("attn")
    full_s = roofline_time(g, attn, hw)
    if sp == 1:
        return full_s * 1e6
    share = 1.0 / sp if zigzag else (2 * sp - 1) / (sp * sp)
    compute_s = full_s * share
    gather_bytes = TensorMeta(
        (1, seq, model.hidden_size), model.precision
    ).bytes
    comm_s = collective_cost("all_gather", gather_bytes, list(range(sp)), hw).seconds
    return (compute_s + comm_s) * 1e6


def plan_dynamic_sp(
    batch: list[int],
    allowed_sp: list[int],
    model: ModelConfig,
    hw: HardwareSpec,
) -> SPPlan:
    """Per-request (sp, zigzag) choice minimizing predicted attention latency."""
    if not allowed_sp:
        raise ConfigError("allowed_sp is empty")
    choices: list[SPChoice] = []
    for seq in batch:
        best: SPChoice | None = None
        for sp in sorted(set(allowed_sp)):
            options = [(sp, False)] if sp == 1 else [(sp, True), (sp, False)]
            for sp_i, zz in options:
                cost = _attention_cost_us(seq, sp_i, zz, model, hw)
                if cost is None:
                    continue
                if best is None or cost < best.predicted_us:
                    chunks = (
                        {r: zigzag_chunks(sp_i, r) for r in range(sp_i)} if zz else {}
                    )
                    best = SPChoice(sp_i, zz, cost, chunks)
        if best is None:
            raise ConfigError(f"no feasible SP option for sequence length {seq}")
        choices.append(best)
    return SPPlan(choices)


def uniform_zigzag_baseline(
    batch: list[int], sp: int, model: ModelConfig, hw: HardwareSpec
) -> float:
    """Every request at the same zigzag sp; predicted total latency in us."""
    total = 0.0
    for seq in batch:
        cost = _attention_cost_us(seq, sp, True, model, hw)
        if cost is None:
            raise ConfigError(f"sequence {seq} not divisible by 2*sp={2 * sp}")
        total += cost
    return total


# ---------------------------------------------------------------------------
# Space file loading
# ---------------------------------------------------------------------------


def load_space(text: str) -> tuple[SearchSpace, list[str], SLOConstraints]:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or doc.get("version") != SPACE_VERSION:
        raise ConfigError(f"search-space file must declare version {SPACE_VERSION!r}")
    space = SearchSpace(
        world_sizes=[int(x) for x in doc.get("world_sizes", [1])],
        tp=[int(x) for x in doc.get("tp", [1])],
        sp=[int(x) for x in doc.get("sp", [1])],
        ep=[int(x) for x in doc.get("ep", [1])],
        pp=[int(x) for x in doc.get("pp", [1])],
        dp=[int(x) for x in doc["dp"]] if "dp" in doc else None,
        microbatches=[int(x) for x in doc.get("microbatches", [1])],
        pp_schedules=list(doc.get("schedules", ["one_f_one_b"])),
        dp_modes=list(doc.get("dp_modes", ["ddp"])),
        prefill_batch=[int(x) for x in doc.get("prefill_batch", [1])],
        decode_batch=[int(x) for x in doc.get("decode_batch", [1])],
        prefill_chunk=[int(x) for x in doc.get("prefill_chunk", [0])],
    )
    rules = list(doc.get("rules", []))
    slo_doc = doc.get("slo", {})
    slo = SLOConstraints(
        ttft_us=float(slo_doc["ttft_ms"]) * 1e3 if "ttft_ms" in slo_doc else None,
        tpot_us=float(slo_doc["tpot_ms"]) * 1e3 if "tpot_ms" in slo_doc else None,
        tps_per_user=float(slo_doc["tps_per_user"]) if "tps_per_user" in slo_doc else None,
    )
    return space, rules, slo
