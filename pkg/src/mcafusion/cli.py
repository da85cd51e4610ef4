"""Train, embed, evaluate and sweep multimodal fusion models from the command line.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from . import experiment, formats
from .config import ExperimentConfig, desk_config
from .errors import DataLoadError, InvalidConfigError, InvalidInputError, InvalidSchemaError, NumericFailure

logger = logging.getLogger("mcafusion")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset == "full":
        cfg = ExperimentConfig()
    else:
        cfg = desk_config()
    if getattr(args, "mode", None) or getattr(args, "sparsity", None) is not None:
        cfg = cfg.with_run(mode=args.mode, sparsity=args.sparsity)
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, epochs=args.epochs))
    if getattr(args, "manifest", None):
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, synthetic=None, manifest=args.manifest))
    return cfg


def cmd_generate_data(args) -> int:
    cfg = load_config(args)
    if cfg.data.synthetic is None:
        raise InvalidConfigError("generate-data needs a synthetic data config")
    ds = data_mod.synthetic_multimodal(cfg.data.synthetic, cfg.data.seed)
    ds = data_mod.split(ds, cfg.split.test_fraction, cfg.split.seed, cfg.split.test_size)
    path = data_mod.save_manifest(ds, args.out)
    print(json.dumps({"manifest": str(path), "samples": len(ds)}))
    return EXIT_OK


def cmd_sparsify(args) -> int:
    ds = data_mod.load_manifest(args.manifest)
    out = data_mod.drop_modalities(ds, args.sparsity, args.seed)
    path = data_mod.save_manifest(out, args.out)
    print(json.dumps({
        "manifest": str(path),
        "samples": len(out),
        "removed": out.provenance["removed_samples"],
        "pre_removal_sparsity": out.provenance["pre_removal_sparsity"],
        "measured_sparsity": data_mod.measured_sparsity(out),
    }))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    result = experiment.train(cfg, out)
    print(json.dumps({
        "selected_epoch": result.selected_epoch,
        "test_losses": result.test_losses,
        "checkpoint": str(out / "selected.mfcp"),
        "seconds": round(result.seconds, 2),
    }))
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = load_config(args)
    emb = experiment.embed_to_file(cfg, args.checkpoint, args.split, args.out)
    print(json.dumps({"file": args.out, "samples": int(emb.vectors.shape[0]), "channels": len(emb.channels)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    ds = experiment.prepare_data(cfg)
    train_emb, _ = formats.read_embeddings(args.train_embeddings)
    test_emb, _ = formats.read_embeddings(args.test_embeddings)
    records = experiment.evaluate(cfg, train_emb, test_emb, ds)
    if args.out:
        experiment.write_records(args.out, records)
    else:
        for r in records:
            print(r.to_json())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    sparsities = [float(s) for s in args.sparsities.split(",")] if args.sparsities else None
    modes = args.modes.split(",") if args.modes else None
    grid = experiment.sweep(cfg, args.out, modes, sparsities)
    print(json.dumps({"completed": len(grid["completed"]), "missing": grid["missing"]}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import report

    summary = report(args.sweep, args.out)
    for t in summary["trend"]:
        print(f"{'PASS' if t['pass'] else 'FAIL'} trend {t['metric']} {t['mode']} inversions={t['inversions']}")
    print(json.dumps({"figures": summary["figures"], "missing": summary["missing"]}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcafusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--preset", choices=("desk", "full"), default="desk",
                        help="defaults when no --config is given")
        return sp

    sp = with_config(sub.add_parser("generate-data", help="write a synthetic dataset as a manifest"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("sparsify", help="drop modalities from a manifest dataset")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--sparsity", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sparsify)

    sp = with_config(sub.add_parser("train", help="train one model"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("MCA", "Zorro", "EAO"))
    sp.add_argument("--sparsity", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--manifest", help="train on a manifest dataset instead of the config's data")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("embed", help="export embeddings of one split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("MCA", "Zorro", "EAO"))
    sp.add_argument("--sparsity", type=float)
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_embed)

    sp = with_config(sub.add_parser("evaluate", help="metrics and probes from embedding files"))
    sp.add_argument("--train-embeddings", required=True)
    sp.add_argument("--test-embeddings", required=True)
    sp.add_argument("--out", help="JSON-lines output (stdout if omitted)")
    sp.add_argument("--mode", choices=("MCA", "Zorro", "EAO"))
    sp.add_argument("--sparsity", type=float)
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("sweep", help="train/evaluate over modes x sparsities"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--modes", help="comma separated, default from config")
    sp.add_argument("--sparsities", help="comma separated, default from config")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="figures, TSV summary and trend check for a sweep")
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidConfigError, InvalidSchemaError, InvalidInputError, DataLoadError,
            formats.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
