"""matrec command line: ingest, split, train, eval, predict, bench.

Exit codes: 0 success, 1 domain error, 2 usage error. All randomness
flows from explicit seeds in flags or the run config; the train config is
archived next to its outputs so results stay traceable.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .augment import AugmentConfig
from .backbone import load_backbone, toy_backbone
from .bench import time_single_image
from .catalog import EXPECTED_COUNTS, ClassCatalog, default_catalog
from .dataset import (DatasetManifest, SplitManifest, attach_outliers,
                      make_splits, scan_dataset, verify_counts)
from .evaluation import emit_report, evaluate, illumination_eval
from .inference import TtaConfig, predict_file
from .jsonio import file_sha256, read_json, write_canonical_json
from .train import (TrainConfig, load_checkpoint, partition_samples,
                    save_checkpoint, train_head)

log = logging.getLogger("matrec")


class CliError(ValueError):
    pass


def _load_catalog(path, with_outlier=False) -> ClassCatalog:
    if path:
        return ClassCatalog.load(path)
    return default_catalog(with_outlier=with_outlier)


def _resolve_backbone(args, header=None):
    """Backbone handle from flags, falling back to checkpoint metadata."""
    graph = getattr(args, "graph", None)
    manifest = getattr(args, "backbone_manifest", None)
    if graph:
        if not manifest:
            manifest = str(Path(graph).with_suffix("")) + ".manifest.json"
        return load_backbone(graph, manifest)
    meta = (header or {}).get("extra", {}).get("backbone", {})
    if meta.get("kind") == "toy":
        return toy_backbone(seed=meta["seed"], channels=meta["channels"])
    toy_seed = getattr(args, "toy_seed", None)
    if toy_seed is not None:
        return toy_backbone(seed=toy_seed,
                            channels=getattr(args, "toy_channels", 16))
    raise CliError("no backbone: pass --graph/--backbone-manifest or --toy-seed")


def _add_backbone_flags(p):
    p.add_argument("--graph", help="serialized backbone graph (.onnx)")
    p.add_argument("--backbone-manifest",
                   help="backbone manifest JSON (default: <graph>.manifest.json)")
    p.add_argument("--toy-seed", type=int, help="use the built-in toy backbone")
    p.add_argument("--toy-channels", type=int, default=16)


def cmd_ingest(args) -> int:
    catalog = _load_catalog(args.catalog)
    manifest = scan_dataset(args.root, catalog, workers=args.workers)
    out = args.out or "manifest.json"
    manifest.save(out)
    counts = manifest.per_class_counts
    print(f"scanned {len(manifest.records)} images "
          f"({len(manifest.skipped)} skipped) -> {out}")
    for name in catalog.materials:
        print(f"  {name}: {counts[name]}")
    if args.verify:
        report = verify_counts(manifest, EXPECTED_COUNTS)
        status = "PASS" if report["passed"] else "FAIL"
        print(f"count verification vs published dataset: {status}")
        if not report["passed"]:
            for row in report["per_class"]:
                if row["delta"]:
                    print(f"  {row['class']}: expected {row['expected']}, "
                          f"found {row['found']}")
            return 1
    return 0


def cmd_split(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    splits = make_splits(manifest, fractions=fractions, seed=args.seed)
    if args.outlier_dir:
        catalog = ClassCatalog(materials=manifest.catalog.materials,
                               has_outlier=True)
        splits = attach_outliers(splits, args.outlier_dir, catalog,
                                 workers=args.workers)
    out = args.out or "splits.json"
    splits.save(out)
    print(f"train {len(splits.train)} / val {len(splits.val)} / "
          f"test {len(splits.test)} -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = read_json(args.config)
    manifest = DatasetManifest.load(cfg["manifest"])
    splits = SplitManifest.load(cfg["splits"])
    with_outlier = bool(splits.outlier_records)
    catalog = ClassCatalog(materials=manifest.catalog.materials,
                           has_outlier=with_outlier)

    bcfg = cfg["backbone"]
    if bcfg.get("kind", "toy") == "toy":
        backbone = toy_backbone(seed=bcfg.get("seed", 0),
                                channels=bcfg.get("channels", 16))
        backbone_meta = {"kind": "toy", "seed": bcfg.get("seed", 0),
                         "channels": bcfg.get("channels", 16)}
    else:
        backbone = load_backbone(bcfg["graph"], bcfg["manifest"])
        backbone_meta = {"kind": "onnx", "graph": bcfg["graph"],
                         "manifest": bcfg["manifest"]}

    from .head import canonical_head_spec
    hcfg = cfg.get("head", {})
    head_spec = canonical_head_spec(
        hcfg.get("name", "resnet152"),
        out_classes=catalog.total_classes,
        hidden=hcfg.get("hidden", 1024),
        flatten_in=backbone.spec.feature_dim,
    )
    train_cfg = TrainConfig.from_dict({**cfg.get("train", {}),
                                       **({"seed": args.seed} if args.seed is not None else {}),
                                       **({"workers": args.workers} if args.workers else {})})
    augment_cfg = AugmentConfig.from_dict(cfg.get("augment", {}))
    augment_on = not args.no_augment and cfg.get("augment_on", True)

    head, history = train_head(
        head_spec, backbone, manifest, splits, augment_cfg, train_cfg,
        augment_on=augment_on,
        log=lambda e: log.info(
            "epoch %d: train_loss %.4f train_acc %.4f val_acc %.4f",
            e["epoch"], e["train_loss"], e["train_acc"], e["val_acc"]))

    out = args.out or "head.ckpt"
    save_checkpoint(head, catalog, out, backbone_spec=backbone.spec,
                    extra={"backbone": backbone_meta,
                           "train_config": train_cfg.to_dict(),
                           "history": history.to_dict()})
    out_dir = Path(out).parent
    write_canonical_json(out_dir / "run_config.json",
                         {**cfg, "train": train_cfg.to_dict(),
                          "augment": augment_cfg.to_dict(),
                          "augment_on": augment_on})
    best = history.epochs[history.best_epoch - 1] if history.epochs else None
    print(f"trained {head_spec.name} head: best epoch {history.best_epoch}"
          + (f", val_acc {best['val_acc']:.4f}" if best else "")
          + f" -> {out}")
    if history.diverged:
        print("warning: training diverged (non-finite loss)", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    head, header = load_checkpoint(args.ckpt)
    catalog = ClassCatalog.from_dict(header["catalog"])
    backbone = _resolve_backbone(args, header)
    manifest = DatasetManifest.load(args.manifest)
    splits = SplitManifest.load(args.splits)
    samples = partition_samples(manifest, splits, args.partition)
    tta = TtaConfig(enabled=args.tta)
    ckpt_digest = file_sha256(args.ckpt)
    if args.illum_seed is not None:
        report = illumination_eval(samples, backbone, head, catalog, tta=tta,
                                   seed=args.illum_seed,
                                   checkpoint_digest=ckpt_digest,
                                   warn=log.warning)
    else:
        report = evaluate(samples, backbone, head, catalog, tta=tta,
                          checkpoint_digest=ckpt_digest, warn=log.warning)
    out_dir = args.out or "eval_out"
    paths = emit_report(report, out_dir)
    print(f"accuracy {report.accuracy_percent:.4f}% over "
          f"{report.confusion.total} samples -> "
          + ", ".join(str(p) for p in paths))
    return 0


def cmd_predict(args) -> int:
    head, header = load_checkpoint(args.ckpt)
    catalog = ClassCatalog.from_dict(header["catalog"])
    backbone = _resolve_backbone(args, header)
    pred = predict_file(args.image, backbone, head, catalog,
                        TtaConfig(enabled=args.tta))
    print(json.dumps({
        "probs": list(pred.probs),
        "label": catalog.name_of(pred.predicted_index),
        "label_index": pred.predicted_index,
        "tta_used": pred.tta_used,
    }, indent=2))
    return 0


def cmd_bench(args) -> int:
    head, header = load_checkpoint(args.ckpt)
    catalog = ClassCatalog.from_dict(header["catalog"])
    backbone = _resolve_backbone(args, header)
    stats = time_single_image(
        backbone, head, catalog, args.image, runs=args.runs,
        warmup=args.warmup, tta=TtaConfig(enabled=args.tta),
        hardware_note=args.hardware_note)
    print(json.dumps(stats.to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matrec",
        description="Construction-material recognition pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--workers", type=int, default=1,
                        help="worker pool bound; never affects results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a dataset root into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--catalog", help="catalog JSON (default: built-in classes)")
    p.add_argument("--out")
    p.add_argument("--verify", action="store_true",
                   help="check counts against the published dataset")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="deterministic stratified splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fractions", default="0.70,0.15,0.15")
    p.add_argument("--outlier-dir",
                   help="attach outlier images to the training partition")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a classifier head")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a partition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--partition", default="test", choices=["val", "test"])
    p.add_argument("--tta", action="store_true")
    p.add_argument("--illum-seed", type=int,
                   help="one-shot illumination perturbation seed")
    p.add_argument("--out")
    _add_backbone_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tta", action="store_true")
    _add_backbone_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="single-image latency benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--hardware-note", default="")
    _add_backbone_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MATREC_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
