"""``cxrlab`` command line: synth, pretrain, train, eval, ablate, interpret.

Exit codes: 0 success, 2 usage or config error, 3 artifact or checkpoint
compatibility error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import ConfigKeyError, ExperimentConfig, config_hash, dump_config, load_config
from .dataset import (
    CLASS_NAMES,
    ClassLabel,
    ManifestError,
    boxes_to_mask,
    generate_phantom_dataset,
    load_manifest,
    make_kfolds,
    make_split,
    write_image,
    write_manifest,
)
from .evaluation import PAIRS, ablation_rows, kfold_summary, pairwise_ablation
from .interpret import LayerError, box_dim_stats, export_embeddings, feature_maps, grad_cam, save_feature_maps
from .models import CheckpointError, ConfigError
from .training import (
    DivergenceError,
    RecordDataset,
    evaluate,
    finetune,
    model_from_checkpoint,
    predict_dataset,
    train_baseline,
    train_inpaint,
    train_moco,
    train_multitask,
)
from .transforms import MOCO_VARIANTS, preprocess

logger = logging.getLogger("cxrlab")

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def stamp(path: str | Path, cfg_hash: str) -> Path:
    """Sidecar ``<file>.meta.json`` with the config hash and the file digest."""
    path = Path(path)
    side = path.with_name(path.name + ".meta.json")
    side.write_text(json.dumps({"config_hash": cfg_hash, "sha256": _sha256(path)}, sort_keys=True) + "\n")
    return side


def write_json(path: Path, payload: dict, cfg_hash: str) -> Path:
    with open(path, "w") as fh:
        json.dump({**payload, "config_hash": cfg_hash}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def stamped_hash(path: Path) -> str:
    """Config hash recorded for an artifact, wherever its format keeps it."""
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    side = path.with_name(path.name + ".meta.json")
    if side.is_file():
        meta = json.loads(side.read_text())
        if meta.get("sha256") != _sha256(path):
            raise ArtifactError(f"{path} was modified after it was written")
        return meta["config_hash"]
    if path.suffix == ".pt":
        side = path.with_suffix(".json")
        if side.is_file():
            return json.loads(side.read_text())["config_hash"]
    elif path.suffix == ".json":
        data = json.loads(path.read_text())
        if "config_hash" in data:
            return data["config_hash"]
    elif path.suffix == ".jsonl":
        hashes = {json.loads(line)["config_hash"] for line in path.read_text().splitlines() if line.strip()}
        if len(hashes) == 1:
            return hashes.pop()
    raise ArtifactError(f"{path} carries no config hash")


def _out_dir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def load_records(cfg: ExperimentConfig, manifest: str | None = None):
    manifest = manifest or cfg.data.manifest
    if manifest:
        return load_manifest(manifest)
    d = cfg.data
    return generate_phantom_dataset(d.n, (d.image_size, d.image_size), d.seed, lesion_contrast=d.lesion_contrast)


def split_records(cfg: ExperimentConfig, records):
    split = make_split(records, cfg.data.test_fraction, cfg.data.seed)
    return split.select(records)


def _save_report(report, out: Path, cfg_hash: str, name: str = "metrics", **extra) -> None:
    write_json(out / f"{name}.json", {**report.to_dict(), **extra}, cfg_hash)
    report.confusion.to_csv(out / f"{name}_confusion.csv")
    stamp(out / f"{name}_confusion.csv", cfg_hash)
    report.confusion.to_csv(out / f"{name}_confusion_normalized.csv", normalized=True)
    stamp(out / f"{name}_confusion_normalized.csv", cfg_hash)


# --------------------------------------------------------------------------- commands


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    if args.n < 4:
        raise UsageError(f"--n must be >= 4, got {args.n}")
    if args.size < 32:
        raise UsageError(f"--size must be >= 32, got {args.size}")
    out = _out_dir(args.out)
    records = generate_phantom_dataset(args.n, (args.size, args.size), args.seed,
                                       lesion_contrast=args.lesion_contrast)
    (out / "images").mkdir(exist_ok=True)
    paths = {}
    for r in records:
        rel = f"images/{r.id}.png"
        write_image(out / rel, r.pixels)
        paths[r.id] = rel
    write_manifest(out / "manifest.csv", records, paths)
    counts = Counter(ClassLabel(r.label).display for r in records)
    for name in CLASS_NAMES:
        print(f"{name}: {counts.get(name, 0)}")
    print(f"wrote {len(records)} images and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    if args.variant:
        cfg.pretext.moco_variant = args.variant
    if args.mask_mode:
        cfg.pretext.mask_mode = args.mask_mode
    dump_config(cfg, out / "config.json")
    train_recs, _ = split_records(cfg, load_records(cfg, args.data))
    if args.method == "moco":
        result = train_moco(cfg, train_recs, cfg.pretext.moco_variant, out)
    else:
        result = train_inpaint(cfg, train_recs, cfg.pretext.mask_mode, out)
    last = result.log[-1]
    print(json.dumps({k: v for k, v in last.items() if k != "stage"}, sort_keys=True))
    print(f"checkpoint: {result.checkpoint.path}")
    return EXIT_OK


def _train_once(args, cfg, train_recs, out: Path):
    if args.init_from:
        return finetune(cfg, args.init_from, train_recs, out)
    if args.mode == "multitask":
        return train_multitask(cfg, train_recs, out)
    return train_baseline(cfg, train_recs, out)


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    if args.skip_stage1:
        cfg.train.multitask.skip_stage1 = True
    if args.init_from and not Path(args.init_from).is_file():
        raise ArtifactError(f"checkpoint not found: {args.init_from}")
    dump_config(cfg, out / "config.json")
    h = config_hash(cfg)
    records = load_records(cfg, args.data)
    if args.kfold:
        reports = []
        for split in make_kfolds(records, args.kfold, cfg.data.seed):
            fold_out = _out_dir(out / f"fold{split.fold_index}")
            tr, te = split.select(records)
            result = _train_once(args, cfg, tr, fold_out)
            report = evaluate(result.model, te, cfg)
            _save_report(report, fold_out, h, fold=split.fold_index)
            reports.append(report)
            print(f"fold {split.fold_index}: f1_macro {report.f1_macro:.4f} accuracy {report.accuracy:.2f}")
        summary = kfold_summary(reports)
        write_json(out / "kfold_summary.json", summary.to_dict(), h)
        print(f"F1 {summary.f1_text}  accuracy {summary.acc_text}")
        return EXIT_OK
    tr, te = split_records(cfg, records)
    result = _train_once(args, cfg, tr, out)
    report = evaluate(result.model, te, cfg)
    _save_report(report, out, h, checkpoint=Path(result.checkpoint.path).name)
    print(f"f1_macro {report.f1_macro:.4f} accuracy {report.accuracy:.2f}")
    return EXIT_OK


def _load_model(args, cfg):
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise ArtifactError(f"checkpoint not found: {args.checkpoint}")
    return model_from_checkpoint(args.checkpoint, cfg)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model, meta = _load_model(args, cfg)
    out = _out_dir(args.out)
    _, te = split_records(cfg, load_records(cfg, args.data))
    report = evaluate(model, te, cfg, num_classes=meta.get("num_classes"))
    _save_report(report, out, config_hash(cfg), name="eval", checkpoint=str(args.checkpoint))
    print(f"f1_macro {report.f1_macro:.4f} accuracy {report.accuracy:.2f}")
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    pairs = list(PAIRS) if args.pairs == "all" else [p.strip() for p in args.pairs.split(",")]
    unknown = [p for p in pairs if p not in PAIRS]
    if unknown:
        raise UsageError(f"unknown pair(s) {unknown}; expected 'all' or any of {list(PAIRS)}")
    tr, te = split_records(cfg, load_records(cfg, args.data))

    def train_fn(records, labels, num_classes):
        model = train_baseline(cfg, records, labels=labels, num_classes=num_classes).model

        def predict(test_records):
            ds = RecordDataset(test_records, cfg, [0] * len(test_records))
            return predict_dataset(model, ds)[0].tolist()
        return predict

    table = pairwise_ablation(train_fn, tr, te, pairs)
    rows = ablation_rows(table)
    h = config_hash(cfg)
    write_json(out / "ablation.json", {"rows": rows, "reports": {k: v.to_dict() for k, v in table.items()}}, h)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pair", "f1", "f1_macro", "accuracy"])
        w.writeheader()
        w.writerows(rows)
    stamp(out / "ablation.csv", h)
    for row in rows:
        print(f"{row['pair']:<24} F1 {row['f1']:.4f}  accuracy {row['accuracy']:.2f}")
    return EXIT_OK


def cmd_interpret(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    h = config_hash(cfg)
    records = load_records(cfg, args.data)
    if args.what == "boxstats":
        stats = box_dim_stats(records)
        stats.to_csv(out / "box_dims_hist.csv", cfg.interpret.box_bins)
        stats.rows_to_csv(out / "box_dims.csv")
        for name in ("box_dims_hist.csv", "box_dims.csv"):
            stamp(out / name, h)
        for cls in CLASS_NAMES:
            print(f"{cls}: n={len(stats.dims[cls])} mean={stats.mean(cls):.2f}")
        return EXIT_OK

    model, _ = _load_model(args, cfg)
    _, te = split_records(cfg, records)
    layer = args.layer or cfg.interpret.layer
    limit = args.limit if args.limit is not None else cfg.interpret.limit
    if args.what == "embeddings":
        images = [preprocess(r.pixels, cfg.preproc) for r in te]
        dump = export_embeddings(model, images, [r.id for r in te], [int(r.label) for r in te], layer,
                                 meta={"checkpoint": str(args.checkpoint)})
        dump.to_csv(out / "embeddings.csv")
        stamp(out / "embeddings.csv", h)
        print(f"wrote {len(dump.ids)} x {dump.features.shape[1]} embeddings ({dump.meta['layer']})")
        return EXIT_OK

    chosen = te[:limit] if limit else te
    target = args.target_class or cfg.interpret.target_class
    for r in chosen:
        img = preprocess(r.pixels, cfg.preproc)
        if args.what == "gradcam":
            hm = grad_cam(model, img, target, layer)
            png, npy = hm.save(out / f"gradcam_{r.id}", img)
            mask = boxes_to_mask(r, img.shape)
            if mask.any() and (~mask.astype(bool)).any():
                inside, outside = hm.inside_outside(mask)
                print(f"{r.id} ({ClassLabel(r.label).display}): inside {inside:.3f} outside {outside:.3f}")
        else:
            png, npy = save_feature_maps(feature_maps(model, img, layer), out / f"features_{r.id}")
        stamp(png, h)
        stamp(npy, h)
    print(f"wrote {len(chosen)} {args.what} outputs to {out}")
    return EXIT_OK


def cmd_verify(path: str, cfg: ExperimentConfig) -> int:
    want = config_hash(cfg)
    got = stamped_hash(Path(path))
    if got != want:
        print(f"MISMATCH {path}: artifact {got}, config {want}", file=sys.stderr)
        return EXIT_ARTIFACT
    print(f"OK {path}: {got}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxrlab", description="Chest X-ray classification experiments.")
    p.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
    p.add_argument("--verify", metavar="ARTIFACT", help="check that ARTIFACT was produced with --config")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="write a phantom dataset and manifest")
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lesion-contrast", type=float, default=2.0)
    s.add_argument("--out", required=True)

    def data_args(sp, out_default):
        sp.add_argument("--data", help="manifest CSV (overrides data.manifest; phantoms when neither is set)")
        sp.add_argument("--out", default=out_default)

    s = sub.add_parser("pretrain", help="self-supervised encoder pre-training")
    s.add_argument("--method", required=True, choices=["moco", "inpaint"])
    s.add_argument("--variant", choices=MOCO_VARIANTS)
    s.add_argument("--mask-mode", choices=["center", "targetedCxr"])
    data_args(s, "runs/pretrain")

    s = sub.add_parser("train", help="train and evaluate on the held-out split")
    s.add_argument("--mode", choices=["baseline", "multitask"], default="baseline")
    s.add_argument("--init-from", help="pre-trained checkpoint; fine-tunes its encoder")
    s.add_argument("--skip-stage1", action="store_true", help="multitask without classification pre-training")
    s.add_argument("--kfold", type=int, default=0, help="k-fold cross-validation instead of one split")
    data_args(s, "runs/train")

    s = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    s.add_argument("--checkpoint", required=True)
    data_args(s, "runs/eval")

    s = sub.add_parser("ablate", help="pairwise binary classification table")
    s.add_argument("--pairs", default="all", help="'all' or a comma list of " + ", ".join(PAIRS))
    data_args(s, "runs/ablate")

    s = sub.add_parser("interpret", help="heatmaps, feature maps, embeddings or box statistics")
    s.add_argument("what", choices=["gradcam", "features", "embeddings", "boxstats"])
    s.add_argument("--checkpoint")
    s.add_argument("--class", dest="target_class", help="target class for gradcam")
    s.add_argument("--layer", help="module name, e.g. encoder.block3")
    s.add_argument("--limit", type=int)
    data_args(s, "runs/interpret")
    return p


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "ablate": cmd_ablate, "interpret": cmd_interpret,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None and not args.verify:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.verify:
            return cmd_verify(args.verify, cfg)
        return COMMANDS[args.command](args, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, ArtifactError, LayerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (UsageError, ConfigKeyError, ConfigError, ManifestError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
