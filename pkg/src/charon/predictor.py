"""Tree-ensemble latency predictor trained on profile-database records.

One compact random-forest regressor per operator kind, fit on log latency
over features derived from the record's shape signature: log2 of each input
extent (fixed-width, zero padded), a precision code, and derived log2
FLOP / byte / arithmetic-intensity terms. Positive predictions by
construction (exp of the regressed log).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .ir import (
    ConfigError,
    OperatorGraph,
    OpKind,
    OpNode,
    Precision,
    TensorMeta,
    op_bytes,
    op_flops,
)
from .profiledb import ProfileDB, shape_signature

N_EXTENTS = 8
_PRECISION_CODE = {p.value: i for i, p in enumerate(Precision)}

HYPERPARAMS = dict(n_estimators=50, max_depth=12, min_samples_leaf=2, max_features=0.8)


class TrainingError(ConfigError):
    """Not enough data to train a predictor."""


def _parse_signature(signature: str) -> tuple[dict, list[tuple[int, ...]]]:
    attr_part, _, shape_part = signature.partition("|")
    attrs: dict = {}
    for pair in filter(None, attr_part.split(";")):
        k, _, v = pair.partition("=")
        if v in ("true", "false"):
            attrs[k] = v == "true"
        else:
            try:
                attrs[k] = int(v)
            except ValueError:
                try:
                    attrs[k] = float(v)
                except ValueError:
                    attrs[k] = v
    shapes = [
        tuple(int(d) for d in s.split("x"))
        for s in filter(None, shape_part.split("_"))
    ]
    return attrs, shapes


def _infer_output(kind: str, shapes: list[tuple[int, ...]], attrs: dict) -> tuple[int, ...]:
    if kind in ("matmul", "batched_matmul"):
        a, b = shapes[0], shapes[1]
        m = a[-1] if attrs.get("transpose_a") else int(np.prod(a[:-1]))
        nn = int(np.prod(b[:-1])) if attrs.get("transpose_b") else b[-1]
        return (m, nn)
    return shapes[0]


def features_for(kind: str, signature: str, precision: str) -> np.ndarray:
    attrs, shapes = _parse_signature(signature)
    extents: list[int] = [d for s in shapes for d in s]
    logs = [float(np.log2(d)) for d in extents[:N_EXTENTS]]
    logs += [0.0] * (N_EXTENTS - len(logs))

    out = _infer_output(kind, shapes, attrs) if shapes else (1,)
    # throwaway single-node graph reuses the exact cost rules
    inputs = {f"i{j}": TensorMeta(s, Precision(precision)) for j, s in enumerate(shapes)}
    node = OpNode(
        "probe",
        OpKind(kind),
        list(inputs),
        [TensorMeta(out, Precision(precision))],
        dict(attrs),
    )
    g = OperatorGraph([node], inputs, ["probe"])
    flops = max(op_flops(g, node), 1)
    nbytes = max(op_bytes(g, node), 1)
    return np.array(
        logs
        + [
            float(_PRECISION_CODE.get(precision, -1)),
            float(np.log2(flops)),
            float(np.log2(nbytes)),
            float(np.log2(flops / nbytes)),
        ]
    )


@dataclass
class Predictor:
    op_kind: str
    model: RandomForestRegressor
    sample_count: int
    holdout_mae: float  # relative, on the 20% held-out split
    seed: int

    def predict_ns(self, signature: str, precision: str) -> float:
        x = features_for(self.op_kind, signature, precision).reshape(1, -1)
        return float(np.exp(self.model.predict(x)[0]))


def train_predictor(db: ProfileDB, op_kind: str, seed: int = 42) -> Predictor:
    records = db.by_kind(op_kind)
    if len(records) < 50:
        raise TrainingError(
            f"predictor for kind {op_kind!r} needs >= 50 records, have {len(records)}"
        )
    x = np.stack([features_for(op_kind, r.shape_signature, r.precision) for r in records])
    y = np.log(np.array([r.latency_ns_mean for r in records]))

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n_test = max(1, len(records) // 5)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    model = RandomForestRegressor(random_state=seed, **HYPERPARAMS)
    model.fit(x[train_idx], y[train_idx])

    pred = np.exp(model.predict(x[test_idx]))
    truth = np.exp(y[test_idx])
    mae = float(np.mean(np.abs(pred - truth) / truth))
    return Predictor(op_kind, model, len(records), mae, seed)


def predict_time(g: OperatorGraph, n: OpNode, predictor: Predictor) -> float:
    """Predicted duration in seconds for node n."""
    if n.kind.value != predictor.op_kind:
        raise ConfigError(
            f"predictor for {predictor.op_kind!r} cannot price kind {n.kind.value!r}"
        )
    precision = (n.outputs[0] if n.outputs else g.resolve(n.inputs[0])).precision
    ns = predictor.predict_ns(shape_signature(g, n), precision.value)
    return ns / 1e9
