"""Command-line interface.

Every subcommand accepts the global flags ``--config``, ``--seed`` and
``--out``.  Experiment-level commands (``synth``, ``train``, ``attack``,
``run``) take either a JSON experiment config or ``--preset NAME``.

Examples::

    celest run --preset transfer --out runs/transfer
    celest synth --preset poison-recover --out data/poison
    celest tokenize data/poison/test/mirai.log --out tokens.jsonl
    celest embed-train data/a.log data/b.log --out emb.bin
    celest featurize data/a.log --embedding emb.bin --fit-layout --layout layout.json --out a.npz
    celest featurize data/test/mirai.log --embedding runs/transfer/embedding_federated.bin --layout runs/transfer/layout.json --out test.npz
    celest evaluate --checkpoint runs/transfer/federated/global.ckpt --features test.npz
    celest report runs/transfer
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .embed import load_embedding, save_embedding
from .errors import CelestError, ConfigError
from .experiment import (
    PRESETS,
    EmbedSettings,
    ExperimentConfig,
    preset,
    read_metrics,
    run_experiment,
    train_embeddings,
)
from .featurize import Featurizer, FeatureLayout, fit_layout
from .logmodel import FORMATS, Label, parse_log_file
from .metrics import fpr_at_recall, pr_auc, precision_recall_f1
from .nn import load_checkpoint, predict
from .synth import assemble_scenario, write_scenario
from .tokenizer import corpus_from_records

log = logging.getLogger("celest")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _experiment(args) -> ExperimentConfig:
    if getattr(args, "preset", None) and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if getattr(args, "preset", None):
        obj = preset(args.preset, seed=args.seed or 0)
    elif args.config:
        obj = json.loads(args.config.read_text(encoding="utf-8"))
    else:
        raise ConfigError("an experiment needs --preset or --config")
    if args.seed is not None:
        obj["seed"] = args.seed
        obj["scenario"]["seed"] = args.seed
    return ExperimentConfig.from_dict(obj)


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    return args.out


def _print_summaries(summaries: dict) -> None:
    for name, s in summaries.items():
        for client, sets in s["final"].items():
            for test, metrics in sets.items():
                vals = "  ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
                print(f"{name:<24} {client:<10} {test:<10} {vals}")
        if "detection" in s:
            print(f"{name:<24} detection {json.dumps(s['detection'], sort_keys=True)}")


# --- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _experiment(args)
    out = _require_out(args)
    data = assemble_scenario(cfg.scenario)
    write_scenario(data, out, args.format)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(data.clients)} clients, {sum(len(v) for v in data.test_sets.values())} test records to {out}")
    return 0


def cmd_tokenize(args) -> int:
    out = _require_out(args)
    n = 0
    with open(out, "w", encoding="utf-8") as fh:
        for path in args.logs:
            parsed = parse_log_file(path, args.format)
            for rec in parsed.records:
                for sent in corpus_from_records([rec]):
                    row = {"uid": rec.uid, "source": sent.source_field, "tokens": [[t.text, t.category.value] for t in sent]}
                    fh.write(json.dumps(row) + "\n")
                    n += 1
    print(f"wrote {n} sentences to {out}")
    return 0


def cmd_embed_train(args) -> int:
    out = _require_out(args)
    settings = EmbedSettings(mode=args.mode, d=args.dim, rounds=args.rounds, min_count=args.min_count)
    corpora = [corpus_from_records(parse_log_file(p, args.format).records) for p in args.logs]
    model = train_embeddings(corpora, settings, args.seed or 0, centralized=args.centralized)
    save_embedding(model, out)
    print(f"trained {settings.mode} embeddings (d={settings.d}) on {len(corpora)} corpora -> {out}")
    return 0


def cmd_featurize(args) -> int:
    out = _require_out(args)
    model = load_embedding(args.embedding)
    records = [r for p in args.logs for r in parse_log_file(p, args.format).records]
    if args.fit_layout:
        layout = fit_layout(records, model)
        layout.save(args.layout)
    else:
        layout = FeatureLayout.load(args.layout)
    X = Featurizer(layout, model).transform(records)
    y = np.array([{Label.MALICIOUS: 1, Label.BENIGN: 0}.get(r.label, -1) for r in records], dtype=np.int8)
    np.savez(out, X=X, y=y, uid=np.array([r.uid or "" for r in records]))
    print(f"featurized {len(records)} records into {X.shape[1]} dims -> {out}")
    return 0


def _run(args, select) -> int:
    cfg = _experiment(args)
    names = [v.name for v in cfg.variants if select(v)]
    if args.variants:
        names = [n for n in names if n in args.variants.split(",")]
    if not names:
        raise ConfigError("no variant of this config matches the command")
    summaries = run_experiment(cfg, _require_out(args), names)
    _print_summaries(summaries)
    return 0


def cmd_train(args) -> int:
    return _run(args, lambda v: v.mode == args.mode and not v.attack)


def cmd_attack(args) -> int:
    return _run(args, lambda v: v.attack)


def cmd_run(args) -> int:
    return _run(args, lambda v: True)


def cmd_evaluate(args) -> int:
    weights, header = load_checkpoint(args.checkpoint)
    data = np.load(args.features)
    keep = data["y"] >= 0
    X, y = data["X"][keep], data["y"][keep]
    scores = np.atleast_1d(predict(weights, X))
    p, r, f1 = precision_recall_f1(scores, y, args.threshold)
    result = {
        "n": int(len(y)),
        "positives": int(y.sum()),
        "pr_auc": pr_auc(scores, y),
        "fpr_at_recall_0.9": fpr_at_recall(scores, y, 0.9),
        "precision": p,
        "recall": r,
        "f1": f1,
    }
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_report(args) -> int:
    """Final-round metrics of every variant under a run directory."""
    rows = []
    for path in sorted(args.run_dir.glob("*/metrics.csv")):
        metrics = read_metrics(path)
        if not metrics:
            continue
        last = max(m["round"] for m in metrics)
        best: dict[tuple, float] = {}
        for m in metrics:
            if m["metric"] == "pr_auc" and m["round"] >= args.since:
                key = (m["client"], m["test_set"])
                best[key] = min(best.get(key, 1.0), m["value"])
        for m in metrics:
            if m["round"] == last:
                rows.append((path.parent.name, m["client"], m["test_set"], m["metric"], m["value"]))
        for (client, test), v in sorted(best.items()):
            rows.append((path.parent.name, client, test, f"min_pr_auc_from_{args.since}", v))
    if not rows:
        print(f"no metrics.csv under {args.run_dir}", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variant", "client", "test_set", "metric", "value"))
            w.writerows(rows)
    for variant, client, test, metric, value in rows:
        print(f"{variant:<24} {client:<10} {test:<10} {metric:<22} {value:.4f}")
    return 0


def cmd_preset(args) -> int:
    text = json.dumps(preset(args.name, seed=args.seed or 0), indent=1, sort_keys=True)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="celest", description=__doc__.split("\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    def experiment_flags(p, variants=True):
        p.add_argument("--preset", choices=PRESETS)
        if variants:
            p.add_argument("--variants", help="comma-separated subset of variant names")

    p = add("synth", cmd_synth, "generate a synthetic scenario on disk")
    experiment_flags(p, variants=False)
    p.add_argument("--format", choices=FORMATS, default="tsv")

    for name, func, help_ in (
        ("tokenize", cmd_tokenize, "tokenize log files into JSONL sentences"),
        ("embed-train", cmd_embed_train, "train token embeddings, one corpus per log file"),
        ("featurize", cmd_featurize, "featurize log files into an .npz matrix"),
    ):
        p = add(name, func, help_)
        p.add_argument("logs", nargs="+", type=Path)
        p.add_argument("--format", choices=FORMATS, default="tsv")
        if name == "embed-train":
            p.add_argument("--mode", choices=("whole_token", "ngram_hashed"), default="whole_token")
            p.add_argument("--dim", type=int, default=32)
            p.add_argument("--rounds", type=int, default=2)
            p.add_argument("--min-count", type=int, default=2)
            p.add_argument("--centralized", action="store_true", help="pool corpora instead of sequential rounds")
        if name == "featurize":
            p.add_argument("--embedding", type=Path, required=True)
            p.add_argument("--layout", type=Path, required=True)
            p.add_argument("--fit-layout", action="store_true", help="fit the layout on these logs and save it")

    p = add("train", cmd_train, "run the unpoisoned local or federated variants of a config")
    p.add_argument("mode", choices=("local", "federated"))
    experiment_flags(p)

    p = add("attack", cmd_attack, "run the poisoned variants of a config")
    experiment_flags(p)

    p = add("run", cmd_run, "run every variant of a config")
    experiment_flags(p)

    p = add("evaluate", cmd_evaluate, "score a featurized set with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("report", cmd_report, "summarize metrics.csv files of a run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--since", type=int, default=1, help="first round for the minimum PR-AUC column")

    p = add("preset", cmd_preset, "print a preset config as JSON")
    p.add_argument("name", choices=PRESETS)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except CelestError as exc:
        print(f"celest {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
