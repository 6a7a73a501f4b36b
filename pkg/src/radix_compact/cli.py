"""Command-line entry point: plan, verify, bench, predict.

Exit codes: 0 success, 1 tolerance failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench, cost
from .errors import RadixCompactError
from .model import ModelConfig, init_params, load_checkpoint
from .ragged import load_batch
from .trie import build_plan_auto, load_plan, pad_plan, save_plan, should_enable

VERIFY_MAX_DLOGIT = 1e-9
VERIFY_MAX_DGRAD_REL = 1e-6


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radix-compact",
        description="Prefix-deduplication planning, verification and benchmarks "
        "for packed transformer batches.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build a compaction plan from a batch JSON file")
    p.add_argument("batch", help="batch JSON ({token_ids, position_ids?, cu_seqlens})")
    p.add_argument("-o", "--output", help="plan output path")
    p.add_argument("--binary", action="store_true", help="write the packed binary format")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--bucket-size", type=int, default=1)
    p.add_argument("--json", action="store_true", dest="as_json")

    v = sub.add_parser("verify", help="equivalence table: compact vs plain pass")
    v.add_argument("fixtures", nargs="?", help="checkpoint fixture directory (optional)")
    v.add_argument("--patterns", nargs="+", choices=[pt.value for pt in bench.Pattern])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", action="store_true", dest="as_json")

    b = sub.add_parser("bench", help="plan-build / forward timing sweep")
    b.add_argument("specs", nargs="?", help="JSON list of {B, P, S, vocab?, seed?}")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--threshold", type=float, default=0.95)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    b.add_argument("--forward", action="store_true", help="time model forward passes too")
    b.add_argument("--pipeline", action="store_true", help="add pipelined-overlap columns")
    b.add_argument("--json", action="store_true", dest="as_json")
    b.add_argument("-o", "--output", help="write the report here instead of stdout")

    pr = sub.add_parser("predict", help="analytical speedup prediction")
    pr.add_argument("inputs", help="JSON CostInputs object or list "
                    "({d, d_int, L, B, P, S, f_c?})")
    pr.add_argument("--json", action="store_true", dest="as_json")
    return parser


def cmd_plan(args) -> int:
    batch = load_batch(args.batch)
    plan = build_plan_auto(batch)
    if args.bucket_size > 1:
        plan = pad_plan(plan, args.bucket_size)
    enabled = should_enable(plan, args.threshold)
    if args.output:
        save_plan(plan, args.output, binary=args.binary)
    if args.as_json:
        print(json.dumps({
            "N": plan.n_original, "N_compact": plan.n_compact,
            "gamma": plan.gamma, "enabled": enabled,
        }))
    else:
        print(
            f"N={plan.n_original} N'={plan.n_compact} "
            f"gamma={plan.gamma:.3f} enabled={'true' if enabled else 'false'}"
        )
    return 0


def cmd_verify(args) -> int:
    plan_override = None
    if args.fixtures:
        config, params = load_checkpoint(args.fixtures)
        plan_override = _load_plan_overrides(args.fixtures)
    else:
        config = ModelConfig()
        params = init_params(config, seed=args.seed)
    patterns = None
    if args.patterns:
        patterns = [bench.Pattern(p) for p in args.patterns]
    results = bench.run_verify(
        config, params, patterns=patterns, seed=args.seed, plan_override=plan_override
    )
    ok = all(
        r.max_dlogit <= VERIFY_MAX_DLOGIT and r.max_dgrad_rel <= VERIFY_MAX_DGRAD_REL
        for r in results
    )
    if args.as_json:
        print(json.dumps({"pass": ok, "results": [r.to_json() for r in results]}, indent=1))
    else:
        header = f"{'pattern':<22}{'tokens':>7}{'gamma':>8}{'max|dlogit|':>14}{'max|dgrad|rel':>15}"
        print(header)
        for r in results:
            tag = " (bypassed)" if r.bypassed else ""
            print(
                f"{r.pattern:<22}{r.n_tokens:>7}{r.gamma:>8.3f}"
                f"{r.max_dlogit:>14.3e}{r.max_dgrad_rel:>15.3e}{tag}"
            )
        print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _load_plan_overrides(directory):
    import os

    plans_dir = os.path.join(directory, "plans")
    if not os.path.isdir(plans_dir):
        return None
    overrides = {}
    for name in os.listdir(plans_dir):
        stem = name.rsplit(".", 1)[0]
        overrides[stem] = load_plan(os.path.join(plans_dir, name))
    return overrides


# the published sweep grid: (prefix, suffix) at batch size 32
DEFAULT_SWEEP = [
    *[(p, 256) for p in (1, 16, 32, 128, 256, 512, 1024, 2048)],
    *[(p, 1024) for p in (1, 32, 128, 256, 512, 1024, 2048)],
]


def cmd_bench(args) -> int:
    if args.repeats < 3:
        print("--repeats must be >= 3", file=sys.stderr)
        return 2
    if args.specs:
        with open(args.specs) as f:
            raw = json.load(f)
        specs = [
            bench.SyntheticSpec(
                B=o["B"], prefix_len=o["P"], suffix_len=o["S"],
                vocab=o.get("vocab", 1024), seed=o.get("seed", args.seed),
            )
            for o in raw
        ]
    else:
        specs = [
            bench.SyntheticSpec(B=32, prefix_len=p, suffix_len=s, seed=args.seed)
            for p, s in DEFAULT_SWEEP
        ]
    config = ModelConfig() if args.forward else None
    reports = bench.run_bench(
        specs, config=config, repeats=args.repeats,
        threshold=args.threshold, run_forward=args.forward,
    )
    out = bench.reports_to_json(reports) if args.as_json else bench.reports_to_csv(reports)
    if args.pipeline:
        out = out.rstrip("\n") + "\n" + _pipeline_summary(specs[: min(4, len(specs))], args.as_json)
    if args.output:
        with open(args.output, "w") as f:
            f.write(out)
    else:
        print(out, end="" if out.endswith("\n") else "\n")
    return 0


def _pipeline_summary(specs, as_json: bool) -> str:
    batches = [bench.make_synthetic_batch(s) for s in specs]

    def worker(batch, plan):
        # stand-in compute: a position-wise touch of every token row
        np.sqrt(np.arange(batch.num_tokens, dtype=np.float64)).sum()

    report = bench.pipelined_run(batches, worker)
    payload = {
        "pipeline_total_s": report.total_s,
        "pipeline_hidden_fraction": report.hidden_fraction,
        "pipeline_tokens_per_sec": report.tokens_per_sec,
    }
    if as_json:
        return json.dumps(payload, indent=1) + "\n"
    return (
        f"pipeline: total={report.total_s * 1e3:.2f}ms "
        f"hidden_fraction={report.hidden_fraction:.2f} "
        f"tokens_per_sec={report.tokens_per_sec:,.0f}\n"
    )


def cmd_predict(args) -> int:
    with open(args.inputs) as f:
        raw = json.load(f)
    rows = raw if isinstance(raw, list) else [raw]
    predictions = []
    for o in rows:
        inputs = cost.CostInputs(d=o["d"], d_int=o["d_int"], L=o["L"],
                                 B=o["B"], P=o["P"], S=o["S"])
        predictions.append(cost.predict(inputs, f_c=o.get("f_c")))
    if args.as_json:
        print(json.dumps([p.to_json() for p in predictions], indent=1))
    else:
        print("f_c,r,gamma,predicted_speedup")
        for p in predictions:
            print(f"{p.f_c:.4f},{p.r:.4f},{p.gamma:.4f},{p.predicted_speedup:.4f}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "plan": cmd_plan,
        "verify": cmd_verify,
        "bench": cmd_bench,
        "predict": cmd_predict,
    }
    try:
        return handlers[args.command](args)
    except RadixCompactError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
