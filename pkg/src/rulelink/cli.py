"""Command-line pipeline: featurize, train, link, eval, transfer, ablate,
inspect, fetch.

Feature generation and training are separate stages so features can be
cached between runs. Outputs are written atomically (temp file + rename);
no subcommand mutates its inputs. Exit codes: 0 success, 1 validation
error (bad flags, missing files), 2 runtime error. Set ELR_LOG to a level
name (DEBUG, INFO, ...) to control verbosity.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile

from . import evaluation
from .corpus import DEFAULT_DENYLIST, fetch_candidates, load_dataset
from .errors import (
    CompileError,
    DatasetError,
    FeatureError,
    FetchError,
    ParseError,
    TrainingDivergence,
)
from .ruledsl import ast_leaves, builtin_templates, compile, find_root, parse
from .simfeatures import FeatureTable, build_feature_table, default_catalog
from .training import TrainConfig, load_config, load_model, train

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Flag or input validation failure; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".rulelink-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    return path


def _load_rules(spec: str):
    """A rules flag is either ``builtin:<name>`` or a .elr file path."""
    if spec.startswith("builtin:"):
        return [builtin_templates()[spec.split(":", 1)[1]]]
    with open(_require_file(spec), "r", encoding="utf-8") as fh:
        return parse(fh.read())


def _config_from_args(args) -> TrainConfig:
    config = load_config(_require_file(args.config)) if args.config else TrainConfig()
    overrides = {}
    for key, attr in (
        ("epochs", "epochs"),
        ("learning_rate", "lr"),
        ("mu", "mu"),
        ("alpha", "alpha"),
        ("penalty_lambda", "penalty_lambda"),
        ("seed", "seed"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    from dataclasses import replace

    return replace(config, **overrides) if overrides else config


def _cmd_featurize(args) -> int:
    ds = load_dataset(_require_file(args.data))
    if args.embeddings:
        from .boxgeom import attach_embeddings

        ds = attach_embeddings(ds, _require_file(args.embeddings))
    rules = _load_rules(args.rules)
    leaves = ast_leaves(find_root(rules), rules)
    box_params = None
    if args.box_params:
        from .boxgeom import load_box_params

        box_params = load_box_params(_require_file(args.box_params))
    catalog = default_catalog(box_params=box_params).restricted(leaves)
    table = build_feature_table(ds, catalog, jobs=args.jobs)
    buf = io.StringIO()
    buf.write(",".join(["mention_id", "candidate_id"] + table.feature_names) + "\n")
    for (mid, cid), values in table.rows.items():
        buf.write(",".join([mid, cid] + [repr(values[n]) for n in table.feature_names]) + "\n")
    _atomic_write(args.out, buf.getvalue())
    logger.info("wrote %d feature rows to %s", len(table.rows), args.out)
    return 0


def _cmd_train(args) -> int:
    ds = load_dataset(_require_file(args.data))
    table = FeatureTable.from_csv(_require_file(args.features))
    rules = _load_rules(args.rules)
    config = _config_from_args(args)
    leaves = ast_leaves(find_root(rules), rules)
    catalog = default_catalog().restricted(leaves)
    graph = compile(rules, catalog, mode=args.mode, alpha=config.alpha)
    model = train(ds, table, graph, config, catalog=catalog)
    _atomic_write(
        args.out,
        json.dumps(model.to_json(), sort_keys=True, separators=(",", ":")),
    )
    final = model.training_log[-1] if model.training_log else {"loss": None, "violation": None}
    logger.info("model written to %s (final loss %s)", args.out, final["loss"])
    return 0


def _cmd_link(args) -> int:
    model = load_model(_require_file(args.model))
    ds = load_dataset(_require_file(args.data))
    table = FeatureTable.from_csv(_require_file(args.features))
    preds = evaluation.link(model, ds, table)
    payload = [
        {"mention_id": p.mention_id, "ranked": [[cid, score] for cid, score in p.ranked]}
        for p in preds
    ]
    _atomic_write(args.out, json.dumps(payload, sort_keys=True, separators=(",", ":")))
    logger.info("wrote %d predictions to %s", len(preds), args.out)
    return 0


def _cmd_eval(args, transfer: bool = False) -> int:
    model = load_model(_require_file(args.model))
    ds = load_dataset(_require_file(args.data))
    table = FeatureTable.from_csv(_require_file(args.features))
    ks = [int(k) for k in args.ks.split(",")] if args.ks else (5, 10, 64)
    runner = evaluation.transfer_eval if transfer else evaluation.evaluate
    report = runner(model, ds, table, ks=ks)
    if args.out:
        _atomic_write(args.out, evaluation.report_to_json_bytes(report).decode())
    print(
        f"precision={report.precision:.4f} recall={report.recall:.4f} f1={report.f1:.4f} "
        + " ".join(f"R@{k}={v:.4f}" for k, v in sorted(report.recall_at.items()))
    )
    return 0


def _cmd_ablate(args) -> int:
    ds = load_dataset(_require_file(args.data))
    table = FeatureTable.from_csv(_require_file(args.features))
    subsets = [part.split("+") for part in args.templates.split(",")]
    config = _config_from_args(args)
    catalog = default_catalog().restricted(table.feature_names)
    rows = evaluation.ablation(ds, table, subsets, config, catalog=catalog)
    text = evaluation.ablation_csv(rows) if args.format == "csv" else evaluation.ablation_markdown(rows)
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text, end="")
    return 0


def _cmd_inspect(args) -> int:
    model = load_model(_require_file(args.model))
    doc = evaluation.export_weights(model)
    if args.json:
        _atomic_write(args.json, json.dumps(doc, sort_keys=True, indent=2))
    if args.dot:
        _atomic_write(args.dot, evaluation.weights_to_dot(doc))
    if not args.json and not args.dot:
        print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def _cmd_fetch(args) -> int:
    denylist = tuple(args.denylist.split(",")) if args.denylist else DEFAULT_DENYLIST
    candidates = fetch_candidates(args.endpoint, args.surface, k=args.k, denylist=denylist)
    payload = [
        {"id": c.id, "name": c.name, "domains": sorted(c.domains)} for c in candidates
    ]
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text)
    return 0


def _add_train_flags(sub) -> None:
    sub.add_argument("--config", help="key=value config file (TrainConfig keys)")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--mu", type=float)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--penalty-lambda", dest="penalty_lambda", type=float)
    sub.add_argument("--seed", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="rulelink", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("featurize", help="generate the feature CSV for a rule file")
    p.add_argument("--data", required=True)
    p.add_argument("--rules", required=True, help=".elr file or builtin:<template>")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--embeddings", help="entity embedding JSONL for box features")
    p.add_argument("--box-params", dest="box_params", help="trained box parameter JSON")
    p.set_defaults(func=_cmd_featurize)

    p = subs.add_parser("train", help="fit rule parameters on a featurized dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--mode", choices=("lnn", "tnorm", "manual"), default="lnn")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("link", help="rank candidates with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_link)

    for name, transfer in (("eval", False), ("transfer", True)):
        p = subs.add_parser(name, help="evaluate a trained model")
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--features", required=True)
        p.add_argument("--ks", help="comma-separated recall@k cutoffs")
        p.add_argument("--out")
        p.set_defaults(func=lambda a, t=transfer: _cmd_eval(a, transfer=t))

    p = subs.add_parser("ablate", help="train and score template subsets")
    p.add_argument("--data", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--templates", required=True, help="e.g. Name,Name+Context")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = subs.add_parser("inspect", help="export learned weights as JSON/DOT")
    p.add_argument("--model", required=True)
    p.add_argument("--json")
    p.add_argument("--dot")
    p.set_defaults(func=_cmd_inspect)

    p = subs.add_parser("fetch", help="query a lookup endpoint for candidates")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--surface", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--denylist", help="comma-separated IRI prefixes to prune")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_fetch)

    return parser


def run(argv=None) -> int:
    level = os.environ.get("ELR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"rulelink: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, FeatureError, ParseError, CompileError, FileNotFoundError, ValueError) as exc:
        print(f"rulelink: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergence, FetchError, OSError) as exc:
        print(f"rulelink: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
