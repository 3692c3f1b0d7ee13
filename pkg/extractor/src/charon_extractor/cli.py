"""charon-extract: capture a PyTorch block into charon-ir/1 files.

    charon-extract --model builtin:tiny --mode forward --out block.ir.json
    charon-extract --model mypkg.blocks:make_block --mode joint ...
    charon-extract --model builtin:tiny --mode prefill-decode --out pre.json \
        --decode-out dec.json --kv-len 128

Model sources: "builtin:tiny" (the reference block) or "module:factory"
where the factory returns (nn.Module, example_inputs) for the bound shapes.
A warning manifest (unmapped ops, folded parameters) lands next to the IR.
"""

from __future__ import annotations

import argparse
import importlib
import json
import sys

from .backward import derive_joint
from .reference import build_reference, build_reference_decode
from .trace import ExtractionError, trace_module


def _resolve_model(spec: str, args):
    if spec == "builtin:tiny":
        return build_reference(args.hidden, args.heads, args.ffn, args.batch, args.seq)
    if ":" in spec:
        mod_name, factory = spec.split(":", 1)
        mod = importlib.import_module(mod_name)
        return getattr(mod, factory)()
    raise ExtractionError(f"unknown model source {spec!r} (use builtin:tiny or module:factory)")


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="charon-extract", description=__doc__)
    ap.add_argument("--model", default="builtin:tiny")
    ap.add_argument("--mode", choices=["forward", "joint", "prefill-decode"], default="forward")
    ap.add_argument("--out", required=True)
    ap.add_argument("--decode-out", default=None)
    ap.add_argument("--manifest", default=None)
    ap.add_argument("--layers", type=int, default=1, help="block multiplier")
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--ffn", type=int, default=128)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--seq", type=int, default=16)
    ap.add_argument("--kv-len", type=int, default=64)
    args = ap.parse_args(argv)

    try:
        module, example = _resolve_model(args.model, args)
        graph, manifest = trace_module(module, example, block_multiplier=args.layers)
        if args.mode == "joint":
            graph = derive_joint(graph)
        _write(args.out, graph.emit())
        print(f"wrote {args.out} ({len(graph.nodes)} nodes)")
        if args.mode == "prefill-decode":
            if not args.decode_out:
                raise ExtractionError("prefill-decode mode needs --decode-out")
            if args.model != "builtin:tiny":
                raise ExtractionError("prefill-decode supports builtin:tiny only")
            dec_module, dec_example = build_reference_decode(
                args.hidden, args.heads, args.ffn, args.batch, args.kv_len
            )
            dec_graph, dec_manifest = trace_module(
                dec_module, dec_example, block_multiplier=args.layers
            )
            manifest.unmapped += dec_manifest.unmapped
            manifest.notes += dec_manifest.notes
            _write(args.decode_out, dec_graph.emit())
            print(f"wrote {args.decode_out} ({len(dec_graph.nodes)} nodes)")
        manifest_path = args.manifest or args.out + ".manifest.json"
        _write(manifest_path, json.dumps(manifest.doc(), indent=1) + "\n")
        return 0
    except ExtractionError as exc:
        print(f"extraction error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
