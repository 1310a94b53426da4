"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or input error.
IBKIT_THREADS caps internal (numba) parallelism; 0 or unset means auto.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import jsonschema
import numpy as np

from . import adapter, corruptions, harness, reporting, schemas, verify

GRADCHECK_TOL = 1e-4
EQUIVALENCE_TOL = 1e-10


class _UsageError(Exception):
    pass


def _apply_thread_cap():
    raw = os.environ.get("IBKIT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise _UsageError(f"IBKIT_THREADS must be an integer, got {raw!r}")
    if n > 0:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _load_json(path, schema=None):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise _UsageError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise _UsageError(f"malformed JSON in {path}: {exc}")
    if schema is not None:
        try:
            jsonschema.validate(data, schema)
        except jsonschema.ValidationError as exc:
            raise _UsageError(f"{path}: {exc.message}")
    return data


def cmd_gradcheck(args) -> int:
    report = verify.fused_gradcheck(seed=args.seed, n_tokens=args.n,
                                    dim=args.d, heads=args.heads)
    worst = 0.0
    for name, err in report.items():
        print(json.dumps({"slot": name, "rel_error": err,
                          "ok": err < GRADCHECK_TOL}))
        worst = max(worst, err)
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_verify_ib(args) -> int:
    rows = verify.ib_equivalence_sweep(args.seeds, args.kind, bias_b=args.bias)
    ok = True
    for row in rows:
        row["ok"] = row["deviation"] < EQUIVALENCE_TOL
        ok = ok and row["ok"]
        print(json.dumps(row))
    return 0 if ok else 1


def cmd_corrupt(args) -> int:
    try:
        spec = corruptions.CorruptionSpec(args.kind, args.severity, seed=args.seed)
    except (corruptions.UnsupportedCorruptionError, ValueError) as exc:
        raise _UsageError(str(exc))
    if not os.path.exists(args.infile):
        raise _UsageError(f"input image not found: {args.infile}")
    img = corruptions.load_image(args.infile)
    corruptions.save_image(args.out, corruptions.corrupt(img, spec))
    print(json.dumps({"out": args.out, "kind": spec.kind,
                      "severity": spec.severity, "seed": spec.seed}))
    return 0


def cmd_train(args) -> int:
    cfg_raw = _load_json(args.config, schemas.TRAIN_CONFIG_SCHEMA) if args.config else {}
    if args.model:
        cfg_raw["model_kind"] = args.model
    try:
        config = harness.TrainConfig(**cfg_raw)
    except (TypeError, ValueError) as exc:
        raise _UsageError(f"bad training config: {exc}")
    dataset = harness.make_toy_dataset(config.seed, config.n_train)
    model, trace = harness.train_policy(dataset, config)
    adapter.write_slots(args.out, model.slots(),
                        meta={"model": model.meta(),
                              "config": cfg_raw,
                              "final_loss": trace[-1][1] if trace else None})
    with open(os.path.join(args.out, "trace.csv"), "w") as fh:
        fh.write("step,loss\n")
        for step, loss in trace:
            fh.write(f"{step},{loss:.10g}\n")
    print(json.dumps({"checkpoint": args.out, "steps": config.steps,
                      "final_loss": trace[-1][1] if trace else None}))
    return 0


def _load_model(ckpt_dir):
    try:
        values, meta = adapter.read_slots(ckpt_dir)
    except (FileNotFoundError, ValueError) as exc:
        raise _UsageError(f"cannot read checkpoint {ckpt_dir}: {exc}")
    m = meta.get("model", {})
    cfg = meta.get("config", {})
    model = harness.PolicyModel(m.get("kind", "fused"),
                                dim=m.get("dim", harness.DEFAULT_DIM),
                                heads=m.get("heads") or 4,
                                seed=cfg.get("seed", 0),
                                lambda_init=cfg.get("lambda_init", 0.3),
                                p_drop=m.get("p_drop") or 0.0)
    adapter.load_into(model.slots(), values)
    return model, meta


def cmd_eval(args) -> int:
    grid = _load_json(args.grid, schemas.GRID_SCHEMA)
    for kind in grid["kinds"]:
        try:
            corruptions.CorruptionSpec(kind, 1)
        except (corruptions.UnsupportedCorruptionError, ValueError) as exc:
            raise _UsageError(str(exc))
    model, _ = _load_model(args.ckpt)
    dataset = harness.make_toy_dataset(grid.get("eval_seed", 9999),
                                       grid.get("n_eval", 256))
    report = harness.evaluate_grid(model, dataset, grid["kinds"],
                                   grid["severities"],
                                   seed=grid.get("eval_seed", 9999),
                                   purity_scenes=grid.get("purity_scenes", 64))
    report["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    jsonschema.validate(report, schemas.REPORT_SCHEMA)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"report": args.out, "clean_accuracy":
                      report["clean_accuracy"]}))
    return 0


def cmd_report(args) -> int:
    a = _load_json(args.a, schemas.REPORT_SCHEMA)
    b = _load_json(args.b, schemas.REPORT_SCHEMA)
    rows = reporting.compare_reports(a, b)
    if not rows:
        raise _UsageError("reports share no (kind, severity) cells")
    print(reporting.format_comparison(a, b, rows))
    if args.out_dir:
        for path in reporting.write_comparison(a, b, rows, args.out_dir):
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the fused block")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--d", type=int, default=16)
    g.add_argument("--heads", type=int, default=4)
    g.set_defaults(fn=cmd_gradcheck)

    v = sub.add_parser("verify-ib", help="clustering/attention equivalence sweep")
    v.add_argument("--seeds", type=int, default=100)
    v.add_argument("--kind", choices=["softmax", "sigmoid"], required=True)
    v.add_argument("--bias", type=float, default=1.0)
    v.set_defaults(fn=cmd_verify_ib)

    c = sub.add_parser("corrupt", help="apply a corruption to an image file")
    c.add_argument("--in", dest="infile", required=True)
    c.add_argument("--kind", required=True)
    c.add_argument("--severity", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_corrupt)

    t = sub.add_parser("train", help="train a policy on the toy scene task")
    t.add_argument("--model", choices=["mlp", "ib", "fused"])
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="corruption-grid evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--grid", required=True, help="JSON grid description")
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="side-by-side comparison of two reports")
    r.add_argument("--a", required=True)
    r.add_argument("--b", required=True)
    r.add_argument("--out-dir", help="write deltas.csv and figures here")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
