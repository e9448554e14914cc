"""Command-line entry point: ``cgls {synth,stratify,plan,train,eval,report}``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import curriculum, evalsuite, stratify, trainer
from .checkpoint import load_checkpoint
from .errors import CGLSError, ConfigError, ConfigValidationError, InputError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(data, out=None):
    text = json.dumps(data, indent=2, sort_keys=True, default=str)
    print(text, file=out or sys.stdout)


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    tiers = curriculum.TIERS if args.tier == "all" else (args.tier,)
    docs, labels = [], []
    for t in tiers:
        for text in stratify.synth_documents(t, args.docs, args.seed):
            labels.append({"id": len(docs), "tier": t})
            docs.append(text)
    curriculum.write_shard(args.out, docs)
    if args.labels_out:
        Path(args.labels_out).write_text("".join(json.dumps(r) + "\n" for r in labels),
                                         encoding="utf-8")
    print(f"wrote {len(docs)} documents to {args.out}")
    return EXIT_OK


def cmd_stratify(args):
    docs = curriculum.read_shard(args.input)
    if args.labels:
        source = stratify.FileLabelSource(args.labels)
    else:
        source = stratify.RemoteLabeler(stratify.RemoteLabelerConfig.from_file(args.remote))
    result = source.label(list(enumerate(docs)))
    clf = stratify.fit_stratifier(result.labeled, seed=args.seed)
    out = Path(args.out_dir)
    _, assigned = stratify.stratify_corpus(clf, docs, out)
    report = {
        "input": str(args.input), "documents": len(docs), "labeled": len(result.labeled),
        "label_errors": result.errors, "held_out_accuracy": clf.accuracy,
        "min_accuracy": args.min_accuracy, "classifier": clf.metadata,
        "tier_counts": {t: assigned.count(t) for t in curriculum.TIERS},
    }
    (out / "classifier_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    (out / "classifier.json").write_text(json.dumps(clf.to_dict()), encoding="utf-8")
    _dump({k: report[k] for k in ("documents", "labeled", "held_out_accuracy", "tier_counts")})
    if clf.accuracy < args.min_accuracy:
        print(f"held-out accuracy {clf.accuracy:.4f} is below --min-accuracy {args.min_accuracy}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_plan(args):
    cfg = trainer.load_config(args.config)
    _dump(trainer.plan_budget(cfg).audit())
    return EXIT_OK


def cmd_train(args):
    cfg = trainer.load_config(args.config)
    if args.threads:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            report = trainer.run_pipeline(cfg, out_dir=args.out_dir, threads=args.threads,
                                          keep_params=False)
    else:
        report = trainer.run_pipeline(cfg, out_dir=args.out_dir, keep_params=False)
    _dump(report.summary())
    return EXIT_OK


def cmd_eval(args):
    params, _, _ = load_checkpoint(args.checkpoint)
    if args.suite == "perplexity":
        ppl = evalsuite.perplexity(params, curriculum.read_shard(args.items))
        _dump({"suite": "perplexity", "perplexity": ppl})
        return EXIT_OK
    if args.suite == "final_word":
        rep = evalsuite.final_word_acc(params, evalsuite.read_passages(args.items))
    else:
        items = evalsuite.read_items(args.items)
        rep = (evalsuite.acc_token if args.suite == "acc_token" else evalsuite.acc_pmi)(params, items)
    _dump(rep.to_dict())
    return EXIT_OK


def _read_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.jsonl"
    if not path.is_file():
        raise InputError(f"{run_dir} has no metrics.jsonl")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def stage_summary(metrics: list[dict]) -> list[dict]:
    rows: dict = {}
    for r in metrics:
        key = (r["stage"], r["phase"])
        row = rows.setdefault(key, {"stage": r["stage"], "phase": r["phase"], "steps": 0,
                                    "first_loss": r["loss"], "loss_sum": 0.0})
        row["steps"] += 1
        row["loss_sum"] += r["loss"]
        row["last_loss"] = r["loss"]
        row["tokens_seen"] = r["tokens_seen"]
        row["flops_consumed"] = r["flops_consumed"]
    out = []
    for row in rows.values():
        row["mean_loss"] = row.pop("loss_sum") / row["steps"]
        out.append(row)
    return out


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args):
    runs = []
    for rd in args.run_dir:
        rd = Path(rd)
        metrics = _read_metrics(rd)
        manifest = json.loads((rd / "manifest.json").read_text(encoding="utf-8"))
        stages = stage_summary(metrics)
        (rd / "reports").mkdir(exist_ok=True)
        (rd / "reports" / "stages.csv").write_text(
            _csv(stages, ["stage", "phase", "steps", "first_loss", "last_loss", "mean_loss",
                          "tokens_seen", "flops_consumed"]), encoding="utf-8")
        (rd / "reports" / "curve.csv").write_text(
            _csv(metrics, ["step", "loss", "lr", "flops_consumed"]), encoding="utf-8")
        runs.append({"run_dir": str(rd), "method": manifest.get("method"),
                     "steps": len(metrics),
                     "realized_flops": metrics[-1]["flops_consumed"] if metrics else 0.0,
                     "final_loss": metrics[-1]["loss"] if metrics else None})
    out = {"runs": runs}
    if len(runs) > 1:
        flops = [r["realized_flops"] for r in runs]
        out["realized_flops_spread"] = (max(flops) - min(flops)) / max(flops)
    if args.out:
        Path(args.out).write_text(_csv(runs, ["run_dir", "method", "steps", "realized_flops",
                                              "final_loss"]), encoding="utf-8")
    _dump(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cgls", description="Curriculum-guided layer scaling at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic tier shard")
    s.add_argument("--tier", required=True, choices=list(curriculum.TIERS) + ["all"])
    s.add_argument("--docs", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--labels-out", help="also write {id, tier} records for every line")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("stratify", help="label, train the tier classifier, split a shard")
    s.add_argument("--in", dest="input", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", help="JSON-lines file of {id, tier}; ids are line numbers")
    src.add_argument("--remote", help="remote labeler config (JSON)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--min-accuracy", type=float, default=0.90)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_stratify)

    s = sub.add_parser("plan", help="print the budget audit for a config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("train", help="run a training pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--suite", required=True,
                   choices=["perplexity", "acc_token", "acc_pmi", "final_word"])
    s.add_argument("--items", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="summarize run directories")
    s.add_argument("--run-dir", required=True, action="append")
    s.add_argument("--out", help="write the cross-run comparison as CSV")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigValidationError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CGLSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
