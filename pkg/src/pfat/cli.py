"""Batch runner: ``pfat {partition,phase1,phase2,evaluate,report} --config PATH``.

Exit codes: 0 ok, 2 config error, 3 runtime error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import checkpoint, pipeline
from .artifacts import (
    RunLayout, read_json, stamp, write_json, write_jsonl, write_manifest,
)
from .config import ConfigError, ExperimentConfig, load_config
from .data import class_counts, load_csv, write_csv
from .federated import run_phase1
from .gating import run_phase2
from .model import ClientModel

log = logging.getLogger("pfat")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


def _attack_record(cfg: ExperimentConfig) -> dict:
    a = cfg.evaluation_attack()
    return {"epsilon": a.epsilon, "step_size": a.step, "iterations": a.iterations,
            "random_start": a.random_start}


def _load_shards(cfg: ExperimentConfig, layout: RunLayout):
    c = cfg.dataset.num_classes
    return [(load_csv(layout.require(layout.shard(i, "train"), "partition"), num_classes=c),
             load_csv(layout.require(layout.shard(i, "test"), "partition"), num_classes=c))
            for i in range(cfg.partition.num_clients)]


def _malicious(cfg: ExperimentConfig, layout: RunLayout) -> list[int]:
    if layout.phase1_summary().exists():
        return read_json(layout.phase1_summary())["malicious"]
    return sorted(cfg.byzantine_spec().malicious_ids)


# -- subcommands ---------------------------------------------------------------

def cmd_partition(cfg: ExperimentConfig, layout: RunLayout) -> None:
    prep = pipeline.prepare(cfg)
    stage = layout.stage("partition")
    stage.mkdir(parents=True, exist_ok=True)
    checkpoint.save(prep.pretrained, layout.pretrained())
    for i, (train, test) in enumerate(prep.shards):
        write_csv(train, layout.shard(i, "train"))
        write_csv(test, layout.shard(i, "test"))
    counts = {"clients": {}, "train": {}, "test": {}}
    for i, (train, test) in enumerate(prep.shards):
        counts["train"][str(i)] = class_counts(train).tolist()
        counts["test"][str(i)] = class_counts(test).tolist()
        counts["clients"][str(i)] = (class_counts(train) + class_counts(test)).tolist()
    write_json(layout.partition_record(), stamp("partition", {
        "num_clients": len(prep.shards), "num_classes": cfg.dataset.num_classes, **counts}))
    log.info("partition: %d clients written to %s", len(prep.shards), stage)


def cmd_phase1(cfg: ExperimentConfig, layout: RunLayout) -> None:
    pretrained = checkpoint.load(layout.require(layout.pretrained(), "partition"))
    shards = _load_shards(cfg, layout)
    p1 = cfg.phase1_config()
    result = run_phase1(p1, shards, pretrained)
    write_jsonl(layout.rounds(), (stamp("round_report", r.to_record()) for r in result.reports))
    for c in result.clients:
        checkpoint.save(c.model, layout.phase1_checkpoint(c.client_id))
    write_json(layout.phase1_summary(), stamp("phase1_summary", {
        "rounds": p1.rounds, "aggregator": p1.aggregator, "sharing": p1.sharing,
        "malicious": sorted(p1.byzantine.malicious_ids), "byzantine_mode": p1.byzantine.mode,
        "global": result.global_update.values.tolist(), "zeta": p1.zeta,
    }))
    log.info("phase1: %d rounds, %d clients", len(result.reports), len(result.clients))


def cmd_phase2(cfg: ExperimentConfig, layout: RunLayout) -> None:
    shards = _load_shards(cfg, layout)
    p2 = cfg.phase2_config()
    records = []
    for i, (train, _) in enumerate(shards):
        model = checkpoint.load(layout.require(layout.phase1_checkpoint(i), "phase1"))
        if not isinstance(model, ClientModel):
            raise checkpoint.CheckpointError(f"{layout.phase1_checkpoint(i)} is not an adapter checkpoint")
        final, _, report = run_phase2(model, train, p2)
        checkpoint.save(final, layout.phase2_checkpoint(i))
        records.append(stamp("gate_report", report.to_record()))
    write_jsonl(layout.gates(), records)
    log.info("phase2: %d clients fine-tuned", len(records))


def _latest_models(cfg: ExperimentConfig, layout: RunLayout):
    n = cfg.partition.num_clients
    if all(layout.phase2_checkpoint(i).exists() for i in range(n)):
        return "phase2", [checkpoint.load(layout.phase2_checkpoint(i)) for i in range(n)]
    if all(layout.phase1_checkpoint(i).exists() for i in range(n)):
        return "phase1", [checkpoint.load(layout.phase1_checkpoint(i)) for i in range(n)]
    pretrained = checkpoint.load(layout.require(layout.pretrained(), "partition"))
    return "pretrained", [pretrained] * n


def cmd_evaluate(cfg: ExperimentConfig, layout: RunLayout) -> None:
    shards = _load_shards(cfg, layout)
    stage, models = _latest_models(cfg, layout)
    metrics = pipeline.evaluate_models(cfg, models, [t for _, t in shards])
    malicious = _malicious(cfg, layout)
    honest = [i for i in metrics if i not in malicious] or list(metrics)
    record = stamp("metrics", {
        "stage": stage, "attack": _attack_record(cfg),
        "clients": {str(i): m for i, m in metrics.items()},
        "mean": pipeline.mean_metrics(metrics), "honest_mean": pipeline.mean_metrics(metrics, honest),
        "malicious": malicious,
    })
    write_jsonl(layout.metrics(), [record])
    log.info("evaluate (%s): BA %.4f AR %.4f", stage, record["mean"]["BA"], record["mean"]["AR"])


def cmd_report(cfg: ExperimentConfig, layout: RunLayout, runs: list[str]) -> None:
    from .report import build_report

    run_dirs = [Path(r) for r in runs] or [layout.root]
    written = build_report(run_dirs, layout.stage("report"))
    log.info("report: %d tables written", len(written))


COMMANDS = {
    "partition": cmd_partition,
    "phase1": cmd_phase1,
    "phase2": cmd_phase2,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="run directory (overrides output.dir)")
        p.add_argument("--threads", type=int, default=None, help="client worker threads")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to tabulate (default: --out)")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.threads)
    except (ConfigError, ValidationError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except OSError as e:
        log.error("cannot read config: %s", e)
        return EXIT_IO
    layout = RunLayout(cfg.output.dir)
    try:
        layout.root.mkdir(parents=True, exist_ok=True)
        layout.config_copy.write_text(cfg.to_yaml(), encoding="utf-8")
        if args.command == "report":
            cmd_report(cfg, layout, args.runs)
        else:
            COMMANDS[args.command](cfg, layout)
        write_manifest(layout.stage(args.command), args.command, cfg.digest(), cfg.seed)
    except (OSError, checkpoint.CheckpointError) as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except Exception as e:  # anything else is a failed computation
        log.error("runtime error: %s: %s", type(e).__name__, e)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
