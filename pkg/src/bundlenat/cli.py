"""Command-line entry point: one subcommand per pipeline stage.

Files on disk are the only contract between stages, so every stage can be
rerun from its inputs alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .compat_graph import graph_from_bundles, load_graph, save_graph
from .data import (
    GenerationInstance,
    build_instances,
    bundles_from_instances,
    dataset_fingerprint,
    load_table_dir,
    read_instances,
    split_80_20,
    synth_planted,
    write_instances,
    write_tables,
)
from .evaluation import (
    PRECISION_MODES,
    BPRBaseline,
    EvalReport,
    PopularityBaseline,
    emit_report,
    latency_account,
    method_result,
)
from .exceptions import BundleNATError, ConfigError, DataFormatError, DimensionError, TrainingDivergedError
from .pretrain import MFBPR, export_embeddings, import_embeddings, leave_one_out_split
from .training import BundleNAT, default_grid, grid_search

logger = logging.getLogger("bundlenat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (env BUNDLENAT_THREADS)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="directory holding train.inst/test.inst")
    p.add_argument("--pretrain", type=Path, help="preference embeddings checkpoint")
    p.add_argument("--graph", type=Path, help="co-occurrence graph checkpoint")
    p.add_argument("--dim", type=int, default=64, help="preference embedding width; model width is twice this")
    p.add_argument("--gnn-layers", type=int, default=2)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=1, help="instances per Adam step")
    p.add_argument("--layernorm", action="store_true")
    p.add_argument("--init", choices=("glorot", "identity"), default="glorot")
    p.add_argument("--projection-init", choices=("glorot", "preference"), default="glorot")
    p.add_argument("--output-bias", choices=("zero", "prior"), default="zero")
    p.add_argument("--early-stopping", action="store_true", help="keep the best epoch on a held-out slice")
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=3, help="epochs without improvement before stopping")
    p.add_argument("--no-preference", action="store_true", help="drop the preference signal")
    p.add_argument("--no-compat", action="store_true", help="drop the compatibility signal")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bundlenat", description="One-shot bundle generation pipeline.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-cluster dataset (tables and instances)")
    _common(p, "output directory")
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--bundles-per-user", type=int, default=5)
    p.add_argument("--bundle-size", type=int, default=5)
    p.add_argument("--candidates", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("prepare", help="build and split generation instances from interaction tables")
    _common(p, "output directory")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--bundle-size", type=int, default=5)
    p.add_argument("--candidates", type=int, default=100)

    p = sub.add_parser("pretrain", help="fit MF-BPR preference embeddings")
    _common(p, "embeddings checkpoint path")
    p.add_argument("--tables", type=Path, required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--weight-decay", type=float, default=1e-4)

    p = sub.add_parser("build-graph", help="co-occurrence graph from training bundles")
    _common(p, "graph checkpoint path")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train", help="train BundleNAT; writes a checkpoint and an epoch,loss log")
    _common(p, "model checkpoint path")
    _model_flags(p)
    p.add_argument("--log", type=Path, help="loss log path (default: <out>.loss.csv)")

    p = sub.add_parser("gridsearch", help="hyperparameter search on a held-out tenth of train")
    _common(p, "result table path")
    _model_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--grid", type=str, help='JSON object, e.g. \'{"lr": [0.001, 0.01]}\'')

    p = sub.add_parser("eval", help="score a trained model and baselines on the test split")
    _common(p, "report path")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--pretrain", type=Path)
    p.add_argument("--graph", type=Path)
    p.add_argument("--baselines", type=str, default="pop,bpr")
    p.add_argument("--precision-mode", choices=PRECISION_MODES, default="first-match")
    p.add_argument("--latency-k", type=_csv_ints, default=[1, 5, 20])
    p.add_argument("--per-instance", action="store_true")

    p = sub.add_parser("infer", help="generate one bundle for an inline instance")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--pretrain", type=Path)
    p.add_argument("--graph", type=Path)
    p.add_argument("--instance", type=str, required=True, help="u=<user>|c=<ids>|b=<ids>")
    p.add_argument("--k", type=int, help="bundle size (default: length of b=)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    return parser


# ---------------------------------------------------------------------------
# stages


def cmd_synth(args) -> None:
    tables, cluster_of = synth_planted(
        args.users, args.items, args.clusters, args.bundles_per_user, args.bundle_size, args.candidates, args.noise, args.seed
    )
    write_tables(tables, args.out)
    with open(args.out / "clusters.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# item\tcluster\n")
        for item, c in enumerate(cluster_of):
            fh.write(f"{item}\t{int(c)}\n")
    _prepare(tables, args.bundle_size, args.candidates, args.seed, args.out)


def _prepare(tables, k, m, seed, out):
    instances = build_instances(tables, k, m, seed)
    split = split_80_20(instances, seed, tables.n_users, tables.n_items, tables.n_bundles)
    write_instances(split, out)
    print(f"{len(split.train)} train / {len(split.test)} test instances -> {out}")


def cmd_prepare(args) -> None:
    _prepare(load_table_dir(args.tables), args.bundle_size, args.candidates, args.seed, args.out)


def cmd_pretrain(args) -> None:
    tables = load_table_dir(args.tables)
    train_pairs, held_out = leave_one_out_split(tables.user_item, args.seed)
    model = MFBPR(d_e=args.dim, epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay, seed=args.seed)
    model.fit(train_pairs, n_users=tables.n_users, n_items=tables.n_items)
    auc = model.score(held_out, seed=args.seed, exclude=tables.user_item)
    export_embeddings(model.embeddings_, args.out, {"seed": args.seed, "epochs": args.epochs, "auc": auc})
    print(f"held-out AUC {auc:.4f} -> {args.out}")


def cmd_build_graph(args) -> None:
    split = read_instances(args.data)
    graph = graph_from_bundles(bundles_from_instances(split.train), split.n_items)
    save_graph(graph, args.out, {"source": "train bundles", "n_bundles": len(split.train)})
    print(f"graph over {graph.n_items} items -> {args.out}")


def _inputs(args, d_e=None):
    preference = None if args.pretrain is None else import_embeddings(args.pretrain, d_e)
    graph = None if args.graph is None else load_graph(args.graph)
    return preference, graph


def _estimator(args) -> BundleNAT:
    return BundleNAT(
        d_c=2 * args.dim,
        n_heads=args.heads,
        depth=args.depth,
        gnn_layers=args.gnn_layers,
        dropout=args.dropout,
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch,
        use_preference=not args.no_preference,
        use_compatibility=not args.no_compat,
        layernorm=args.layernorm,
        init=args.init,
        projection_init=args.projection_init,
        output_bias=args.output_bias,
        early_stopping=args.early_stopping,
        validation_fraction=args.validation_fraction,
        n_iter_no_change=args.patience,
        seed=args.seed,
    )


def _model_inputs(args):
    model = _estimator(args)
    preference, graph = _inputs(args, args.dim)
    if not model.use_preference:
        preference = None
    if not model.use_compatibility:
        graph = None
    return model, preference, graph


def cmd_train(args) -> None:
    split = read_instances(args.data)
    model, preference, graph = _model_inputs(args)
    model.fit(split.train, preference=preference, graph=graph, n_items=split.n_items)
    model.save(args.out, {"seed": args.seed, "fingerprint": dataset_fingerprint(split)})
    log = args.log or args.out.with_suffix(".loss.csv")
    with open(log, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(model.loss_history_):
            fh.write(f"{epoch},{loss!r}\n")
    final = model.loss_history_[-1] if model.loss_history_ else float("nan")
    print(f"trained {len(model.loss_history_)} epochs, final loss {final:.6f}")
    if model.best_epoch_ is not None:
        print(f"kept epoch {model.best_epoch_} (validation Recall@K {max(model.validation_scores_):.4f})")


def cmd_gridsearch(args) -> None:
    split = read_instances(args.data)
    base, preference, graph = _model_inputs(args)
    grid = default_grid() if args.grid is None else json.loads(args.grid)
    if not isinstance(grid, dict):
        raise ConfigError("--grid must be a JSON object mapping parameter names to lists")
    best, table = grid_search(split.train, grid, preference, graph, base=base, n_items=split.n_items, seed=args.seed, jobs=args.jobs)
    keys = list(grid)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys + ["recall"]) + "\n")
        for row in table:
            fh.write("\t".join(repr(row[key]) for key in keys + ["recall"]) + "\n")
    print("best " + json.dumps(best, sort_keys=True))


def _load_model(args) -> BundleNAT:
    preference, graph = _inputs(args)
    return BundleNAT.load(args.model, preference=preference, graph=graph)


def cmd_eval(args) -> None:
    split = read_instances(args.data)
    if not split.test:
        raise ConfigError("test split is empty")
    model = _load_model(args)
    wanted = [b.strip().lower() for b in args.baselines.split(",") if b.strip()]
    unknown = set(wanted) - {"pop", "bpr"}
    if unknown:
        raise ConfigError(f"unknown baselines {sorted(unknown)}; choose from pop, bpr")
    methods = []
    predictions = {}
    if "pop" in wanted:
        predictions["POP"] = PopularityBaseline().fit(split.train, n_items=split.n_items).predict(split.test)
    if "bpr" in wanted:
        if model.preference_ is None:
            raise ConfigError("the BPR baseline needs --pretrain")
        predictions["BPR"] = BPRBaseline(model.preference_).fit().predict(split.test)
    predictions["BundleNAT"] = model.predict(split.test)
    for name, pred in predictions.items():
        passes = 1.0 if name == "BundleNAT" else None
        methods.append(method_result(name, pred, split.test, args.precision_mode, passes))
    k_values = [k for k in args.latency_k if k <= split.m]
    pass_counts = latency_account(model, split.test[:5], k_values) if k_values else []
    per_instance = None
    if args.per_instance:
        per_instance = [
            {"line": inst.to_line(), "predicted": pred}
            for inst, pred in zip(split.test, predictions["BundleNAT"])
        ]
    report = EvalReport(
        methods,
        dataset_fingerprint(split),
        config=model.get_params(),
        precision_mode=args.precision_mode,
        pass_counts=pass_counts,
        instances=per_instance,
    )
    emit_report(report, args.out)
    print(report.table())


def cmd_infer(args) -> None:
    inst = GenerationInstance.from_line(args.instance)
    model = _load_model(args)
    k = inst.k if args.k is None else args.k
    print(" ".join(map(str, model.decode_instance(inst, k).bundle)))


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "gridsearch": cmd_gridsearch,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bundlenat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or int(os.environ.get("BUNDLENAT_THREADS", "0") or 0) or None
    try:
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"bundlenat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, DimensionError, OSError) as exc:
        print(f"bundlenat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, BundleNATError) as exc:
        print(f"bundlenat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"bundlenat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
