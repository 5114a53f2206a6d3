"""
Command-line entry point: generate, train, evaluate, sweep, ablate, report.

Every stage writes into <output_dir>/<stage>/ (train, evaluate and sweep
add a _centralized suffix in centralized mode) and refuses to overwrite a
non-empty stage directory unless --force is given. Every configuration key
is also a flag, e.g. --fed.rounds 3 --rule.tau 0.6.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import pandas as pd

from src.gridsentinel import artifacts
from src.gridsentinel.config import config_keys, load_config
from src.gridsentinel.encoder import InputDims, param_shapes, temporal_context
from src.gridsentinel.errors import GridSentinelError, PreconditionError, ReportError
from src.gridsentinel.evaluation import (
    MetricsReport,
    check_sweep_monotonicity,
    compare_reports,
    compute_metrics,
    plot_client_scores,
    plot_comparison,
    plot_confusion,
    plot_sweep,
    predict,
    read_sweep_csv,
    sweep,
    write_sweep_csv,
)
from src.gridsentinel.features import SPLITS, build_clients, feature_table, input_dims
from src.gridsentinel.fedtrain import run_rounds
from src.gridsentinel.telemetry import attack_coverage, simulate
from src.gridsentinel.topology import default_topology

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

logger = logging.getLogger("gridsentinel.cli")

COMMANDS = ("generate", "train", "evaluate", "sweep", "ablate", "report")

ABLATION_VARIANTS = {
    "all_inputs": {},
    "no_metadata": {"metadata": False},
    "no_derived": {"derived": False},
    "no_neighbor": {"neighbor": False},
}


MODE_STAGES = ("train", "evaluate", "sweep")


def _stage_name(config, stage):
    """Centralized runs of train, evaluate and sweep get their own directories."""
    if stage in MODE_STAGES and config.fed.mode == "centralized":
        return f"{stage}_centralized"
    return stage


def _stage_dir(config, stage):
    return os.path.join(config.output_dir, _stage_name(config, stage))


def _dataset_dir(config, override=None):
    return override or os.path.join(_stage_dir(config, "generate"), "dataset")


def _checkpoint_dir(config, override=None):
    return override or os.path.join(_stage_dir(config, "train"), "checkpoint")


def _load_clients(config, dataset_dir, features=None):
    manifest = artifacts.read_dataset_manifest(dataset_dir)
    artifacts.check_dataset_matches(manifest, config)
    dataset = artifacts.load_dataset(dataset_dir)
    return dataset, manifest, build_clients(dataset, features or config.features, config.split)


def _expected_manifest(config, features=None):
    dims = InputDims(*input_dims(features or config.features))
    return list(param_shapes(config.model, dims).items())


def _check_split(split):
    if split not in SPLITS:
        raise PreconditionError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")


# ---------- stages ----------

def cmd_generate(config):
    stage = artifacts.prepare_stage_dir(_stage_dir(config, "generate"), config.force)
    topology = default_topology()
    artifacts.write_run_manifest(stage, "generate", config, {"topology": topology.to_records()})
    dataset = simulate(topology, config.gen, config.split)
    manifest = artifacts.write_dataset(dataset, os.path.join(stage, "dataset"))
    print(f"generated {len(dataset.frames)} nodes x {dataset.timesteps} timesteps, "
          f"attack coverage {attack_coverage(dataset.schedule, dataset.timesteps):.3f}")
    print(f"dataset checksum {manifest['checksum']}")
    return manifest


def _train_variant(config, clients, out_dir, dataset_checksum):
    round_log = os.path.join(out_dir, "round_log.jsonl")
    result = run_rounds(clients, config, on_round=lambda record: artifacts.append_round_log(round_log, record.to_dict()))
    artifacts.save_checkpoint(
        result.best_params,
        os.path.join(out_dir, "checkpoint"),
        hyperparameters=config.to_flat(),
        extra={"best_round": result.best_round, "best_val_seq_accuracy": result.best_accuracy,
               "dataset_checksum": dataset_checksum, "optimizer_state": "reset each round"},
    )
    return result


def cmd_train(config, dataset_dir=None):
    dataset_dir = _dataset_dir(config, dataset_dir)
    dataset, manifest, clients = _load_clients(config, dataset_dir)
    stage = artifacts.prepare_stage_dir(_stage_dir(config, "train"), config.force)
    artifacts.write_run_manifest(stage, "train", config, {"dataset": dataset_dir,
                                                          "dataset_checksum": manifest["checksum"]})
    if config.features.export:
        tables = {(node, split): feature_table(dataset, node, split, config.features, config.split)
                  for node in clients for split in SPLITS}
        artifacts.export_feature_tables(tables, os.path.join(stage, "features"))
    result = _train_variant(config, clients, stage, manifest["checksum"])
    print(f"trained {config.fed.rounds} rounds; best round {result.best_round} "
          f"with validation sequence accuracy {result.best_accuracy:.4f}")
    return result


def cmd_evaluate(config, dataset_dir=None, checkpoint_dir=None, split="test"):
    _check_split(split)
    _, manifest, clients = _load_clients(config, _dataset_dir(config, dataset_dir))
    params, _ = artifacts.load_checkpoint(_checkpoint_dir(config, checkpoint_dir), _expected_manifest(config))
    stage = artifacts.prepare_stage_dir(_stage_dir(config, "evaluate"), config.force)
    artifacts.write_run_manifest(stage, "evaluate", config, {"split": split, "dataset_checksum": manifest["checksum"]})
    report = compute_metrics(predict(params, clients, split, config.model), config.rule)
    with open(os.path.join(stage, f"metrics_{split}.txt"), "w", newline="\n") as f:
        f.write(report.to_text())
    with open(os.path.join(stage, f"metrics_{split}_table.txt"), "w", newline="\n") as f:
        f.write(report.render_table())
    plot_confusion(report, stage, split)
    plot_client_scores(report, stage, split)
    comparison = _load_comparison(config, split)
    if comparison is not None:
        comparison.to_csv(os.path.join(stage, f"compare_{split}.csv"), index=False, float_format="%.17g",
                          lineterminator="\n")
        plot_comparison(comparison, stage, split)
    print(report.render_table(), end="")
    return report


def cmd_sweep(config, dataset_dir=None, checkpoint_dir=None, split="val"):
    _check_split(split)
    _, manifest, clients = _load_clients(config, _dataset_dir(config, dataset_dir))
    params, _ = artifacts.load_checkpoint(_checkpoint_dir(config, checkpoint_dir), _expected_manifest(config))
    stage = artifacts.prepare_stage_dir(_stage_dir(config, "sweep"), config.force)
    artifacts.write_run_manifest(stage, "sweep", config, {"split": split, "dataset_checksum": manifest["checksum"]})
    table = sweep(predict(params, clients, split, config.model), config.sweep.taus, config.sweep.ms, config.rule.mode)
    write_sweep_csv(table, os.path.join(stage, "sweep.csv"))
    for axis, tau, m in check_sweep_monotonicity(table):
        logger.error("Seq-FPR increases along %s at tau=%g, m=%d", axis, tau, m)
    plot_sweep(table, stage)
    best = table.loc[table["seq_f1"].idxmax()]
    print(f"swept {len(table)} operating points on {split}; best Seq-F1 {best['seq_f1']:.4f} "
          f"at tau={best['tau']:g}, m={int(best['m'])}")
    return table


def ablation_configs(config):
    """Variant name -> config; input variants first, then any extra architectures.

    gcn_only has no recurrence, so its windows behave as W = 1 whatever
    features.window says; its variant name carries a _w1 suffix.
    """
    variants = {name: replace(config, features=replace(config.features, **flags))
                for name, flags in ABLATION_VARIANTS.items()}
    for arch in config.ablate.include_arch:
        model = replace(config.model, arch=arch)
        suffix = "_w1" if temporal_context(model, config.features.window) == 1 else ""
        variants[f"arch_{arch}{suffix}"] = replace(config, model=model)
    return variants


def _read_report(path):
    if not os.path.exists(path):
        return None
    with open(path, "r") as f:
        return MetricsReport.from_text(f.read())


def _load_comparison(config, split):
    """Federated-vs-centralized table when both evaluate outputs exist for split."""
    name = f"metrics_{split}.txt"
    federated = _read_report(os.path.join(config.output_dir, "evaluate", name))
    centralized = _read_report(os.path.join(config.output_dir, "evaluate_centralized", name))
    if federated is None or centralized is None:
        return None
    try:
        return compare_reports(federated, centralized)
    except ReportError as e:
        logger.warning("skipping federated vs centralized comparison on %s: %s", split, e)
        return None


def cmd_ablate(config, dataset_dir=None, split="test"):
    _check_split(split)
    dataset_dir = _dataset_dir(config, dataset_dir)
    manifest = artifacts.read_dataset_manifest(dataset_dir)
    artifacts.check_dataset_matches(manifest, config)
    dataset = artifacts.load_dataset(dataset_dir)
    stage = artifacts.prepare_stage_dir(_stage_dir(config, "ablate"), config.force)
    artifacts.write_run_manifest(stage, "ablate", config, {"split": split, "dataset_checksum": manifest["checksum"]})

    rows = []
    for name, variant in ablation_configs(config).items():
        logger.info("ablation variant %s", name)
        out_dir = os.path.join(stage, name)
        os.makedirs(out_dir)
        clients = build_clients(dataset, variant.features, variant.split)
        result = _train_variant(variant, clients, out_dir, manifest["checksum"])
        report = compute_metrics(predict(result.best_params, clients, split, variant.model), variant.rule)
        with open(os.path.join(out_dir, f"metrics_{split}.txt"), "w", newline="\n") as f:
            f.write(report.to_text())
        rows.append({"variant": name, "arch": variant.model.arch, "features": variant.features.variant,
                     "temporal_context": temporal_context(variant.model, variant.features.window),
                     "best_round": result.best_round, **report.summary()})

    table = pd.DataFrame(rows)
    table.to_csv(os.path.join(stage, "ablation.csv"), index=False, float_format="%.17g", lineterminator="\n")
    print(table[["variant", "seq_f1", "seq_fpr", "ts_f1", "exact_match"]].to_string(index=False))
    return table


def cmd_report(config):
    """Render whatever stage outputs a run directory holds."""
    found = False
    for stage, label in (("evaluate", ""), ("evaluate_centralized", " (centralized)")):
        evaluate_dir = os.path.join(config.output_dir, stage)
        if not os.path.isdir(evaluate_dir):
            continue
        for name in sorted(os.listdir(evaluate_dir)):
            if name.startswith("metrics_") and name.endswith(".txt") and not name.endswith("_table.txt"):
                report = _read_report(os.path.join(evaluate_dir, name))
                print(f"== {name}{label}")
                print(report.render_table())
                found = True

    for split in SPLITS:
        comparison = _load_comparison(config, split)
        if comparison is not None:
            print(f"== federated vs centralized ({split})")
            print(comparison[["scope", "fed_ts_f1", "cen_ts_f1", "delta_ts_f1", "fed_seq_fpr", "cen_seq_fpr"]]
                  .to_string(index=False))

    for stage, label in (("sweep", ""), ("sweep_centralized", " (centralized)")):
        sweep_dir = os.path.join(config.output_dir, stage)
        sweep_csv = os.path.join(sweep_dir, "sweep.csv")
        if not os.path.exists(sweep_csv):
            continue
        table = read_sweep_csv(sweep_csv)
        print(f"== sweep{label}")
        print(table[["tau", "m", "seq_f1", "seq_fpr"]].to_string(index=False))
        if not os.path.exists(os.path.join(sweep_dir, "sweep_curves.png")):
            plot_sweep(table, sweep_dir)
        found = True

    ablation_csv = os.path.join(_stage_dir(config, "ablate"), "ablation.csv")
    if os.path.exists(ablation_csv):
        print("== ablation")
        print(pd.read_csv(ablation_csv).to_string(index=False))
        found = True

    if not found:
        raise PreconditionError(f"{config.output_dir} holds no evaluate, sweep or ablate results")


# ---------- argument parsing ----------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat-key JSON config file (default: $GRIDSENTINEL_CONFIG or etc/run_config.json)")
    for key in config_keys():
        if key == "force":
            common.add_argument("--force", action="store_const", const="true", default=None,
                                help="overwrite an existing stage directory")
        else:
            common.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")

    parser = argparse.ArgumentParser(prog="gridsentinel", description="Federated passive-eavesdropping detection")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a telemetry dataset")
    train = sub.add_parser("train", parents=[common], help="federated training")
    train.add_argument("--dataset", help="dataset directory (default: <output_dir>/generate/dataset)")
    for name, default in (("evaluate", "test"), ("sweep", "val")):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--dataset")
        p.add_argument("--checkpoint", help="checkpoint directory (default: <output_dir>/train/checkpoint, train_centralized/ in centralized mode)")
        p.add_argument("--split", default=default, choices=SPLITS)
    ablate = sub.add_parser("ablate", parents=[common], help="retrain input variants")
    ablate.add_argument("--dataset")
    ablate.add_argument("--split", default="test", choices=SPLITS)
    sub.add_parser("report", parents=[common], help="render stored results")
    return parser


def overrides_from_args(args):
    return {key: getattr(args, key) for key in config_keys() if getattr(args, key, None) is not None}


def main(argv=None):
    logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, overrides_from_args(args))
        match args.command:
            case "generate":
                cmd_generate(config)
            case "train":
                cmd_train(config, args.dataset)
            case "evaluate":
                cmd_evaluate(config, args.dataset, args.checkpoint, args.split)
            case "sweep":
                cmd_sweep(config, args.dataset, args.checkpoint, args.split)
            case "ablate":
                cmd_ablate(config, args.dataset, args.split)
            case "report":
                cmd_report(config)
    except GridSentinelError as e:
        logger.error("%s failed: %s", args.command, e, exc_info=LOG_LEVEL == "DEBUG")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error("%s failed unexpectedly: %s", args.command, e, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
