"""Scenario configuration: the single document a simulation run consumes.

charon-scenario/1 files are YAML:

    version: charon-scenario/1
    model: {hidden_size: ..., num_heads: ..., ...}   # or {ir: block.ir.json}
    hardware: hw.yaml
    parallelism: {tp: 2, pp: 2, dp: 2, microbatches: 4, dp_mode: ddp}
    passes: passes.yaml                               # optional
    engines: {order: [profile, prediction, analytical],
              profile_db: [db.csv], collective_algo: ring}
    mode: train | prefill | decode | serve
    decode: {kv_len: 1024, batch: 8}                  # decode/serve modes
    overlap: ratio                                    # ratio | bandwidth | none
    factors: {compute: 1.0, comm: 1.0, comm_comm: 1.0}
    memory: {fragmentation: 1.05, comm_buffer_bytes: 0}
    outputs: {report: report.json, trace: trace.json}

model.batch is the per-data-parallel-rank batch; microbatches divide it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .analyzers import MemoryCalibration
from .blocks import ModelConfig, MoEConfig
from .engines import EngineStack, build_stack
from .hardware import HardwareSpec, load_hardware
from .ir import ConfigError, OperatorGraph, Precision
from .ir_io import parse_ir
from .parallel import ParallelismConfig
from .passes import PassPipeline, load_pipeline
from .predictor import train_predictor
from .profiledb import ProfileDB
from .scheduler import SlowdownFactors

SCENARIO_VERSION = "charon-scenario/1"

MODEL_FIELDS = (
    "hidden_size",
    "num_heads",
    "num_kv_heads",
    "head_dim",
    "ffn_hidden",
    "num_layers",
    "vocab_size",
    "batch",
    "seq_len",
)


@dataclass
class Scenario:
    model: ModelConfig | None
    ir_graph: OperatorGraph | None
    hardware: HardwareSpec
    parallelism: ParallelismConfig
    pipeline: PassPipeline | None
    stack: EngineStack
    mode: str
    decode_kv_len: int
    decode_batch: int
    overlap: str
    factors: SlowdownFactors
    memory: MemoryCalibration
    report_path: str | None
    trace_path: str | None
    seed: int = 42
    include_embedding_head: bool = False


def _read(path: str, base: str) -> str:
    full = path if os.path.isabs(path) else os.path.join(base, path)
    if not os.path.exists(full):
        raise ConfigError(f"referenced file does not exist: {full}")
    with open(full, "r", encoding="utf-8") as fh:
        return fh.read()


def _model_config(doc: dict) -> ModelConfig:
    missing = [f for f in MODEL_FIELDS if f not in doc]
    if missing:
        raise ConfigError(f"model config missing fields: {missing}")
    moe = None
    if "moe" in doc and doc["moe"]:
        m = doc["moe"]
        moe = MoEConfig(
            num_experts=int(m["num_experts"]),
            top_k=int(m["top_k"]),
            expert_ffn_hidden=int(m["expert_ffn_hidden"]),
            load_factor=float(m.get("load_factor", 1.0)),
        )
    return ModelConfig(
        **{f: int(doc[f]) for f in MODEL_FIELDS},
        precision=Precision(doc.get("precision", "bf16")),
        moe=moe,
    )


def load_scenario(path: str, engine_order: list[str] | None = None, overlap: str | None = None, seed: int | None = None) -> Scenario:
    base = os.path.dirname(os.path.abspath(path))
    doc = yaml.safe_load(_read(os.path.basename(path), base))
    if not isinstance(doc, dict) or doc.get("version") != SCENARIO_VERSION:
        raise ConfigError(f"scenario must declare version {SCENARIO_VERSION!r}")
    for f in ("model", "hardware", "mode"):
        if f not in doc:
            raise ConfigError(f"scenario missing field {f!r}")

    model = None
    ir_graph = None
    if "ir" in doc["model"]:
        ir_graph = parse_ir(_read(doc["model"]["ir"], base))
    else:
        model = _model_config(doc["model"])

    hw = load_hardware(_read(doc["hardware"], base))

    par_doc = doc.get("parallelism", {})
    par = ParallelismConfig(
        tp=int(par_doc.get("tp", 1)),
        sp=int(par_doc.get("sp", 1)),
        ep=int(par_doc.get("ep", 1)),
        pp=int(par_doc.get("pp", 1)),
        dp=int(par_doc.get("dp", 1)),
        dp_mode=str(par_doc.get("dp_mode", "ddp")),
        pp_schedule=str(par_doc.get("pp_schedule", "one_f_one_b")),
        microbatches=int(par_doc.get("microbatches", 1)),
        world_size=int(
            par_doc.get(
                "world_size",
                int(par_doc.get("tp", 1)) * int(par_doc.get("pp", 1)) * int(par_doc.get("dp", 1)),
            )
        ),
    )

    pipeline = None
    if doc.get("passes"):
        pipeline = load_pipeline(_read(doc["passes"], base))

    eng = doc.get("engines", {})
    order = engine_order or list(eng.get("order", ["profile", "prediction", "analytical"]))
    order = ["prediction" if o == "predict" else o for o in order]
    db = None
    for db_path in eng.get("profile_db", []):
        loaded = ProfileDB.from_text(_read(db_path, base))
        if db is None:
            db = loaded
        else:
            for rec in loaded.records():
                db.add(rec)
    predictors = {}
    if db is not None and "prediction" in order:
        run_seed = seed if seed is not None else int(doc.get("seed", 42))
        for kind in sorted({r.op_kind for r in db.records()}):
            if len(db.by_kind(kind)) >= 50:
                predictors[kind] = train_predictor(db, kind, seed=run_seed)
    stack = build_stack(
        hw, order, db, predictors, algo=str(eng.get("collective_algo", "ring"))
    )

    mode = str(doc["mode"])
    if mode not in ("train", "prefill", "decode", "serve"):
        raise ConfigError(f"unknown mode {mode!r}")
    dec = doc.get("decode", {})
    if mode in ("decode", "serve") and "kv_len" not in dec:
        raise ConfigError(f"mode {mode!r} requires decode.kv_len")

    fac = doc.get("factors", {})
    factors = SlowdownFactors(
        compute=float(fac.get("compute", 1.0)),
        comm=float(fac.get("comm", 1.0)),
        comm_comm=float(fac.get("comm_comm", 1.0)),
    )
    mem = doc.get("memory", {})
    calib = MemoryCalibration(
        fragmentation=float(mem.get("fragmentation", 1.05)),
        comm_buffer_bytes=int(mem.get("comm_buffer_bytes", 0)),
    )
    outputs = doc.get("outputs", {})

    def out_path(key: str) -> str | None:
        if key not in outputs:
            return None
        p = outputs[key]
        return p if os.path.isabs(p) else os.path.join(base, p)

    return Scenario(
        model=model,
        ir_graph=ir_graph,
        hardware=hw,
        parallelism=par,
        pipeline=pipeline,
        stack=stack,
        mode=mode,
        decode_kv_len=int(dec.get("kv_len", 0)),
        decode_batch=int(dec.get("batch", 1)),
        overlap=overlap or str(doc.get("overlap", "ratio")),
        factors=factors,
        memory=calib,
        report_path=out_path("report"),
        trace_path=out_path("trace"),
        seed=seed if seed is not None else int(doc.get("seed", 42)),
        include_embedding_head=bool(doc.get("include_embedding_head", False)),
    )
