"""Command-line pipeline: generate -> train -> embed -> cluster / retrieve / plot.

Every stage reads one YAML experiment config (plus ``--set key=value``
overrides), writes its artifacts under the configured paths, and stamps each
machine-readable artifact with the config hash. Exit codes: 0 success,
1 usage or config error, 2 runtime failure (including missing upstream
artifacts, which are reported with the stage that produces them).
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .latent import (
    EmbeddingTable,
    embed_dataset,
    hierarchical_cluster,
    majority_vote_assign,
    nearest_neighbors,
    read_table,
    table_from_model,
    voted_v_measure,
    write_assignment,
    write_table,
)
from .scenarios import read_scenarios
from .synthetic import generate_dataset
from .training import (
    load_checkpoint,
    save_checkpoint,
    train_grid_ae,
    train_seqdspn,
    train_val_split,
)

_FLOAT_FMT = "%.9g"


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 (argparse defaults to 2, which we reserve for
    # runtime failures)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class StageError(RuntimeError):
    """Runtime failure; message names the missing upstream stage if any."""


def _require(path: Path, producing_stage: str) -> Path:
    if not path.exists():
        raise StageError(
            f"required artifact {path} not found; run the {producing_stage!r} stage first"
        )
    return path


def _load_dataset(path: Path, producing_stage: str = "generate"):
    return read_scenarios(_require(path, producing_stage))


def _model_paths(config: ExperimentConfig, model: str) -> tuple[Path, Path]:
    if model == "grid":
        return config.paths.resolve("grid_checkpoint"), config.paths.resolve("grid_table")
    return config.paths.resolve("seqdspn_checkpoint"), config.paths.resolve("seqdspn_table")


def _write_meta(artifact: Path, payload: dict) -> None:
    meta = artifact.with_name(artifact.name + ".meta.json")
    meta.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(config: ExperimentConfig, args) -> int:
    out = Path(args.out) if args.out else config.paths.resolve("dataset")
    summary = generate_dataset(config.generator, config.dataset_count, out)
    _write_meta(out, {
        "config_hash": config_hash(config),
        "stage": "generate",
        **summary,
    })
    print(f"wrote {summary['count']} scenarios to {out}")
    for name, count in sorted(summary["per_class"].items()):
        print(f"  {name}: {count}")
    return 0


def _split_scenarios(config: ExperimentConfig, scenarios):
    train_idx, val_idx = train_val_split(len(scenarios), config.val_fraction, config.split_seed)
    return [scenarios[i] for i in train_idx], [scenarios[i] for i in val_idx]


def cmd_train(config: ExperimentConfig, args) -> int:
    scenarios = _load_dataset(config.paths.resolve("dataset"))
    train_set, val_set = _split_scenarios(config, scenarios)
    if args.model == "grid":
        model, log = train_grid_ae(train_set, val_set, config.train_grid, config.grid)
        checkpoint_path = config.paths.resolve("grid_checkpoint")
    else:
        model, log = train_seqdspn(train_set, val_set, config.train_seqdspn, config.dspn)
        checkpoint_path = config.paths.resolve("seqdspn_checkpoint")
    log.meta["config_hash"] = config_hash(config)
    save_checkpoint(checkpoint_path, model, log, config_hash(config))
    log.save(checkpoint_path.with_suffix(".log.json"))
    first, last = log.epoch(0), log.entries[-1]
    print(
        f"trained {args.model} for {last['epoch']} epochs: "
        f"val loss {first['val_loss']:.4f} -> {last['val_loss']:.4f} "
        f"(best epoch {log.best_epoch})"
    )
    return 0


def cmd_embed(config: ExperimentConfig, args) -> int:
    checkpoint_path, table_path = _model_paths(config, args.model)
    if args.out:
        table_path = Path(args.out)
    dataset_path = Path(args.dataset) if args.dataset else config.paths.resolve("dataset")
    scenarios = _load_dataset(dataset_path)
    payload = load_checkpoint(_require(checkpoint_path, f"train-{args.model}"))
    table = embed_dataset(payload, scenarios)
    table = EmbeddingTable(
        table.records,
        [
            ("model", payload["kind"]),
            ("config_hash", config_hash(config)),
            ("dataset", dataset_path.name),
        ],
    )
    write_table(table_path, table)
    print(f"embedded {len(table)} scenarios -> {table_path}")
    return 0


def _table_for(config: ExperimentConfig, args):
    if args.table:
        return read_table(_require(Path(args.table), "embed"))
    _, table_path = _model_paths(config, args.model)
    return read_table(_require(table_path, "embed"))


def cmd_cluster(config: ExperimentConfig, args) -> int:
    table = _table_for(config, args)
    k = args.k if args.k is not None else config.cluster_k
    assignment = hierarchical_cluster(table, k)
    provenance = [("config_hash", config_hash(config)), ("model", args.model)]
    write_assignment(config.paths.resolve("assignment"), assignment, provenance)
    linkage_path = config.paths.resolve("linkage")
    np.savetxt(linkage_path, assignment.linkage_matrix, fmt=_FLOAT_FMT,
               header=f"config_hash={config_hash(config)}")
    report: dict = {
        "config_hash": config_hash(config),
        "stage": "cluster",
        "model": args.model,
        "k": k,
        "cluster_sizes": {
            str(c): sum(1 for v in assignment.assignment.values() if v == c)
            for c in range(k)
        },
    }
    labeled = [r for r in table.records if r.label is not None]
    if labeled:
        vote = majority_vote_assign(assignment, table)
        score = voted_v_measure(table, assignment)
        report["majority_labels"] = {str(c): lab.value for c, lab in sorted(vote.items())}
        report["v_measure"] = score
        print(f"clustered {len(table)} embeddings into {k} clusters; v-measure {score:.4f}")
    else:
        print(f"clustered {len(table)} embeddings into {k} clusters (no labels to score)")
    report_path = config.paths.resolve("report")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"assignment -> {config.paths.resolve('assignment')}, report -> {report_path}")
    return 0


def cmd_retrieve(config: ExperimentConfig, args) -> int:
    table = _table_for(config, args)
    k = args.k if args.k is not None else config.retrieval_k
    try:
        neighbors = nearest_neighbors(args.query_id, table, k)
    except KeyError as exc:
        raise StageError(f"query scenario {args.query_id!r} not present in the table") from exc
    query = table.record(args.query_id)
    print(f"query {args.query_id}" + (f" [{query.label.value}]" if query.label else ""))
    for rank, (scenario_id, dist) in enumerate(neighbors, 1):
        label = table.record(scenario_id).label
        suffix = f" [{label.value}]" if label else ""
        print(f"  {rank}. {scenario_id} distance {dist:.6f}{suffix}")
    return 0


def cmd_plot(config: ExperimentConfig, args) -> int:
    from . import plots  # deferred: pulls in matplotlib

    plot_dir = config.paths.resolve("plots")
    made = []
    if args.scenario_id:
        scenarios = {s.scenario_id: s for s in _load_dataset(
            Path(args.dataset) if args.dataset else config.paths.resolve("dataset"))}
        if args.scenario_id not in scenarios:
            raise StageError(f"scenario {args.scenario_id!r} not found in the dataset")
        made.append(plots.plot_scenario(
            scenarios[args.scenario_id], plot_dir / f"{args.scenario_id}.png"))
    else:
        table = _table_for(config, args)
        if args.color_by == "cluster":
            assignment = hierarchical_cluster(table, config.cluster_k)
            made.append(plots.plot_latent_scatter(
                table, plot_dir / f"latent_{args.model}_clusters.png",
                assignment=assignment, color_by="cluster"))
        else:
            made.append(plots.plot_latent_scatter(
                table, plot_dir / f"latent_{args.model}_labels.png", color_by="label"))
    for p in made:
        print(f"plot -> {p}")
    return 0


def cmd_evaluate(config: ExperimentConfig, args) -> int:
    """Multi-seed protocol: train, embed the held-out test set, cluster,
    score; reports mean and standard deviation of the V-measure."""
    scenarios = _load_dataset(config.paths.resolve("dataset"))
    test_set = _load_dataset(config.paths.resolve("test_dataset"), "generate (test dataset)")
    train_set, val_set = _split_scenarios(config, scenarios)
    models = ["grid", "seqdspn"] if args.model == "both" else [args.model]
    seeds = list(range(args.seed_base, args.seed_base + args.runs))
    results: dict[str, list[float]] = {}
    eval_dir = config.paths.resolve("plots").parent / "evaluate"
    for model_name in models:
        scores = []
        for seed in seeds:
            if model_name == "grid":
                hp = replace(config.train_grid, seed=seed)
                model, log = train_grid_ae(train_set, val_set, hp, config.grid)
            else:
                hp = replace(config.train_seqdspn, seed=seed)
                model, log = train_seqdspn(train_set, val_set, hp, config.dspn)
            table = table_from_model(model, test_set, [
                ("model", model_name), ("seed", str(seed)),
                ("config_hash", config_hash(config)),
            ])
            assignment = hierarchical_cluster(table, config.cluster_k)
            score = voted_v_measure(table, assignment)
            scores.append(score)
            save_checkpoint(eval_dir / f"{model_name}_seed{seed}.pt", model, log,
                            config_hash(config))
            write_table(eval_dir / f"{model_name}_seed{seed}_embeddings.txt", table)
            print(f"{model_name} seed {seed}: v-measure {score:.4f}")
        results[model_name] = scores
    print("\nModel          V-measure (mean over seeds)")
    report = {"config_hash": config_hash(config), "stage": "evaluate",
              "seeds": seeds, "results": {}}
    for model_name, scores in results.items():
        mean = statistics.fmean(scores)
        sd = statistics.stdev(scores) if len(scores) > 1 else 0.0
        print(f"{model_name:<14} {mean:.2f} +- {sd:.2f}  (n={len(scores)})")
        report["results"][model_name] = {"scores": scores, "mean": mean, "std": sd}
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="scenelatent",
                     description="Latent-space toolkit for multi-vehicle traffic scenes")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults used if omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", help="output path (default: configured dataset path)")

    for name in ("train-grid", "train-seqdspn"):
        p = sub.add_parser(name, parents=[common], help=f"train the {name.split('-')[1]} model")
        p.set_defaults(model=name.split("-")[1])

    p = sub.add_parser("embed", parents=[common], help="embed a dataset with a checkpoint")
    p.add_argument("--model", choices=("grid", "seqdspn"), required=True)
    p.add_argument("--dataset", help="scenario file (default: configured dataset)")
    p.add_argument("--out", help="output table path (default per model)")

    p = sub.add_parser("cluster", parents=[common], help="cluster an embedding table")
    p.add_argument("--model", choices=("grid", "seqdspn"), default="grid")
    p.add_argument("--table", help="embedding table (default per model)")
    p.add_argument("--k", type=int, help="cluster count (default: config cluster_k)")

    p = sub.add_parser("retrieve", parents=[common], help="nearest neighbors of a scenario")
    p.add_argument("--model", choices=("grid", "seqdspn"), default="grid")
    p.add_argument("--table", help="embedding table (default per model)")
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, help="neighbor count (default: config retrieval_k)")

    p = sub.add_parser("plot", parents=[common], help="latent scatter or scenario view")
    p.add_argument("--model", choices=("grid", "seqdspn"), default="grid")
    p.add_argument("--table", help="embedding table (default per model)")
    p.add_argument("--color-by", choices=("cluster", "label"), default="cluster")
    p.add_argument("--scenario-id", help="plot this scenario's trajectories instead")
    p.add_argument("--dataset", help="scenario file for --scenario-id")

    p = sub.add_parser("evaluate", parents=[common],
                       help="multi-seed train/embed/cluster protocol with mean +- std report")
    p.add_argument("--model", choices=("grid", "seqdspn", "both"), default="both")
    p.add_argument("--runs", type=int, default=6)
    p.add_argument("--seed-base", type=int, default=0)
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "train-grid": cmd_train,
    "train-seqdspn": cmd_train,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "retrieve": cmd_retrieve,
    "plot": cmd_plot,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    # single-threaded keeps every artifact byte-reproducible across runs
    torch.set_num_threads(1)
    try:
        config = load_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](config, args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
