"""Command line entry point: ``aprnet {stats,synth,train,eval,sweep,ablate,scale}``.

Every command takes the same flags, reads an optional flat ``key = value``
config, and writes ``run.json`` with the fully resolved configuration next to
its outputs. Result files do not depend on ``--threads``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import PATH_KEYS, ConfigError, RunConfig
from .dataset import Dataset, attribute_distribution, attribute_correlation, load_dataset, synth_dataset
from .evaluation import (ablate_attributes, ablation_csv, attribute_accuracy, camera_pair_eval, distractor_scaling,
                         dumps, evaluate_reid, scaling_csv)
from .model import load_checkpoint, save_checkpoint
from .trainer import sweep_lambda, train

COMMANDS = ("stats", "synth", "train", "eval", "sweep", "ablate", "scale")


def _load(cfg: RunConfig) -> Dataset:
    cfg.require_paths(*PATH_KEYS)
    return load_dataset(*(cfg[k] for k in PATH_KEYS))


def _model_config(cfg: RunConfig, ds: Dataset):
    return cfg.model_config(len(ds.train_identities()), ds.schema.class_counts, ds.embeddings.dim)


def _checkpoint(cfg: RunConfig):
    path = cfg["eval.checkpoint"]
    if not path:
        return None, None
    if not Path(path).exists():
        raise ConfigError(f"eval.checkpoint: {path} does not exist")
    return load_checkpoint(path)


def cmd_stats(cfg: RunConfig, out: Path, threads: int) -> None:
    ds = _load(cfg)
    dist = attribute_distribution(ds.annotations, ds.schema)
    lines = ["attribute,class,identities"]
    for att, counts in zip(ds.schema.attributes, dist):
        lines += [f"{att.name},{c},{n}" for c, n in counts.items()]
    (out / "distribution.csv").write_text("\n".join(lines) + "\n")
    names, corr = attribute_correlation(ds.annotations, ds.schema)
    rows = [",".join(["indicator", *names])]
    rows += [",".join([n, *(f"{v:.6f}" for v in row)]) for n, row in zip(names, corr)]
    (out / "correlation.csv").write_text("\n".join(rows) + "\n")
    splits = {}
    for s in ds.samples:
        splits[s.split] = splits.get(s.split, 0) + 1
    (out / "stats.json").write_text(dumps({
        "correlation_measure": "phi (binary attributes: first-class indicator; multi-class: one-vs-rest per class)",
        "num_identities_annotated": len(ds.annotations),
        "num_samples": len(ds.samples),
        "samples_per_split": splits,
        "embedding_dim": ds.embeddings.dim,
    }))


def cmd_synth(cfg: RunConfig, out: Path, threads: int) -> None:
    synth_dataset(cfg.synth_config(), cfg.sub_seed("synth")).save(out)


def cmd_train(cfg: RunConfig, out: Path, threads: int) -> None:
    ds = _load(cfg)
    mc = _model_config(cfg, ds)
    every = cfg["train.checkpoint_every"]

    def on_epoch(epoch, params):
        if every and (epoch + 1) % every == 0 and epoch + 1 < cfg["train.epochs"]:
            save_checkpoint(out / f"model_epoch{epoch + 1:04d}.ckpt", mc, params)

    params, log = train(mc, cfg.train_config(), ds, on_epoch=on_epoch)
    save_checkpoint(out / "model.ckpt", mc, params)
    (out / "train_log.csv").write_text(log.to_csv(include_time=cfg["train.record_time"]))


def cmd_eval(cfg: RunConfig, out: Path, threads: int) -> None:
    ds = _load(cfg)
    mc, params = _checkpoint(cfg)
    report = evaluate_reid(ds, cfg["eval.query_split"], cfg["eval.gallery_split"], params=params,
                           threads=threads, max_rank=cfg["eval.max_rank"], tile=cfg["eval.tile"])
    report.mode = "raw-features" if mc is None else mc.mode
    if mc is not None:
        report.notes.append(f"lambda={mc.lam!r} attribute_heads={mc.num_attributes}")
    if cfg["eval.camera_pairs"]:
        report.camera_pairs = camera_pair_eval(ds, params, cfg["eval.query_split"], cfg["eval.gallery_split"],
                                               threads=threads)
    if cfg["eval.attributes"] and mc is not None and mc.num_attributes:
        if list(mc.attribute_class_counts) == ds.schema.class_counts:
            report.attribute_accuracy, report.mean_attribute_accuracy = attribute_accuracy(
                params, ds, cfg["eval.gallery_split"])
        else:
            report.notes.append("attribute heads do not match the schema; attribute accuracy skipped")
    ranks = cfg["eval.ranks"]
    (out / "report.json").write_text(report.to_json(ranks))
    (out / "summary.csv").write_text(report.summary_csv(ranks))
    (out / "cmc.csv").write_text(report.cmc_csv())


def cmd_sweep(cfg: RunConfig, out: Path, threads: int) -> None:
    ds = _load(cfg)
    res = sweep_lambda(_model_config(cfg, ds), cfg.train_config(), ds, cfg["sweep.lambdas"], threads=threads)
    (out / "sweep.csv").write_text(res.to_csv())
    (out / "sweep.json").write_text(dumps({
        "best_lambda": res.best_lambda,
        "criterion": "validation rank-1, ties to the smaller lambda",
        "validation_query_ids": res.query_ids,
    }))


def cmd_ablate(cfg: RunConfig, out: Path, threads: int) -> None:
    ds = _load(cfg)
    rows = ablate_attributes(_model_config(cfg, ds), cfg.train_config(), ds, threads=threads,
                             attributes=cfg["ablate.attributes"] or None)
    (out / "ablation.csv").write_text(ablation_csv(rows))


def cmd_scale(cfg: RunConfig, out: Path, threads: int) -> None:
    ds = _load(cfg)
    _, params = _checkpoint(cfg)
    rows = distractor_scaling(ds, cfg["scale.sizes"], params=params, seed=cfg.sub_seed("distractors"),
                              threads=threads, query_split=cfg["eval.query_split"],
                              gallery_split=cfg["eval.gallery_split"])
    (out / "scaling.csv").write_text(scaling_csv(rows))


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aprnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--checkpoint", help="shorthand for --set eval.checkpoint=PATH")
        p.add_argument("--checkpoint-every", type=int, help="shorthand for --set train.checkpoint_every=K")
        p.add_argument("--record-time", action="store_true", help="fill the seconds column of train_log.csv")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.checkpoint:
        overrides.append(f"eval.checkpoint={args.checkpoint}")
    if args.checkpoint_every is not None:
        overrides.append(f"train.checkpoint_every={args.checkpoint_every}")
    if args.record_time:
        overrides.append("train.record_time=true")
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = RunConfig.load(args.config, overrides, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # BLAS stays single threaded so results never depend on the thread count
    with threadpool_limits(limits=1):
        HANDLERS[args.command](cfg, out, args.threads)
    (out / "run.json").write_text(cfg.to_json(args.command))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"aprnet: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
