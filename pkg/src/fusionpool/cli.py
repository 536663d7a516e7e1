"""Command-line pipeline: ingest -> extract -> fuse -> train -> eval -> explain.

One job per subcommand, composable in shell.  Every run that writes
artifacts also writes a provenance record (command, arguments, seed,
library versions) so reruns are byte-for-byte reproducible and auditable.
All randomness flows from --seed; there is no unseeded entropy.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .errors import FusionPoolError, MissingInputError, ValidationError
from .evaluation import evaluate
from .explain import TsneConfig, embedding_to_csv, grad_cam, render_heatmap, render_scatter, tsne
from .extraction import BackboneSpec, load_backbone, spec_from_model
from .fusion_pool import LabelSpace, add_task, build_pool, load_pool, merge_pools, save_pool
from .heads import HEAD_KINDS, HeadConfig, load_head, predict, save_head, train
from .ingest import decode_image, fnv1a64, load_manifest, media_frame_paths, preprocess_frame


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness in this run")
    parser.add_argument("--config", help="key=value config file with [section] headers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionpool",
        description="Deep feature fusion pools with multi-task classifier heads",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and plan frame sampling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--interval", type=int, help="override the manifest sampling interval")
    p.add_argument("--out", help="write the frame plan TSV here")
    _add_common(p)

    p = sub.add_parser("extract", help="extract and fuse features into a pool file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", action="append", default=[],
                   metavar="NAME=MODELPATH", help="repeatable; MODELPATH may be synthetic:<seed>")
    p.add_argument("--synthetic", type=int, action="append", default=[],
                   metavar="SEED", help="repeatable; add a synthetic extractor")
    p.add_argument("--out", required=True)
    p.add_argument("--interval", type=int)
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("fuse", help="merge pool files into one multi-task pool")
    p.add_argument("--pool", action="append", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("add-task", help="append a new task's pool without touching existing records")
    p.add_argument("--pool", action="append", required=True,
                   help="base pool first, then the new task pool")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train one classifier head on a pool")
    p.add_argument("--pool", action="append", required=True)
    p.add_argument("--kind", required=True, choices=HEAD_KINDS)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a head on a pool")
    p.add_argument("--head", required=True)
    p.add_argument("--pool", action="append", required=True)
    p.add_argument("--out", help="directory for metrics.csv / confusion.csv / report.txt")
    _add_common(p)

    p = sub.add_parser("report", help="evaluate and render figures next to the CSV output")
    p.add_argument("--head", required=True)
    p.add_argument("--pool", action="append", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("embed", help="t-SNE embedding of a pool, as CSV and scatter plot")
    p.add_argument("--pool", action="append", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("explain", help="Grad-CAM heatmaps for frames under a linear head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", action="append", default=[], metavar="NAME=MODELPATH")
    p.add_argument("--synthetic", type=int, action="append", default=[], metavar="SEED")
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--interval", type=int)
    _add_common(p)
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    """Fill unset options from the config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    if not os.path.isfile(args.config):
        raise MissingInputError(f"config file not found: {args.config}")
    parser = configparser.ConfigParser()
    parser.read(args.config, encoding="utf-8")
    pipeline = parser["pipeline"] if parser.has_section("pipeline") else {}
    for key in ("seed", "interval", "jobs"):
        if key in pipeline and getattr(args, key, None) in (None, 0) and key != "seed":
            setattr(args, key, int(pipeline[key]))
    if "seed" in pipeline and args.seed == 0:
        args.seed = int(pipeline["seed"])
    if parser.has_section("backbones") and hasattr(args, "backbone") and not args.backbone:
        args.backbone = [f"{name}={source}" for name, source in parser.items("backbones")]
    args._head_overrides = dict(parser.items("head")) if parser.has_section("head") else {}
    args._tsne_overrides = dict(parser.items("tsne")) if parser.has_section("tsne") else {}


def _provenance(path: str, command: str, args: argparse.Namespace) -> None:
    skip = {"config", "command", "_head_overrides", "_tsne_overrides", "func"}
    lines = [f"command: {command}", f"fusionpool: {__version__}", f"numpy: {np.__version__}"]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        lines.append(f"{key}: {getattr(args, key)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_backbones(args: argparse.Namespace) -> list[BackboneSpec]:
    specs: list[BackboneSpec] = []
    for item in args.backbone:
        name, sep, source = item.partition("=")
        if not sep or not name or not source:
            raise ValidationError(f"--backbone expects NAME=MODELPATH, got {item!r}")
        if source.startswith("synthetic:"):
            seed = int(source.split(":", 1)[1])
            specs.append(BackboneSpec.synthetic(seed, name=name))
        else:
            specs.append(spec_from_model(name, source))
    for seed in args.synthetic:
        specs.append(BackboneSpec.synthetic(seed))
    if not specs:
        raise ValidationError("extract needs at least one --backbone or --synthetic")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate backbone names: {names}")
    return specs


def _extract_pool(args: argparse.Namespace):
    manifest = load_manifest(args.manifest)
    if args.interval:
        manifest.sampling_interval = args.interval
    specs = _parse_backbones(args)
    handles = [(spec, load_backbone(spec)) for spec in specs]

    frames_meta = []  # (sample_id, image_path, class_name)
    for media_path, class_name in manifest.entries:
        for frame_idx, image_path in media_frame_paths(
                media_path, manifest.sampling_interval, manifest.exclusions):
            sample_id = fnv1a64(manifest.dataset_name, media_path, frame_idx)
            frames_meta.append((sample_id, image_path, class_name))

    extracted = {}
    jobs = max(1, getattr(args, "jobs", 1))
    for spec, handle in handles:
        tensors = [
            preprocess_frame(decode_image(image_path), spec, source_id=sample_id)
            for sample_id, image_path, _ in frames_meta
        ]
        if jobs == 1 or len(tensors) < 2 * jobs:
            maps = handle.extract(tensors)
        else:
            chunks = np.array_split(np.arange(len(tensors)), jobs)
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(
                    lambda idx: handle.extract([tensors[i] for i in idx]), chunks))
            maps = [m for part in parts for m in part]
        extracted[spec.name] = maps

    space = LabelSpace()
    space.register_task(manifest.task_id, manifest.class_names)
    labels = [class_name for _, _, class_name in frames_meta]
    return build_pool(extracted, labels, manifest.task_id, space,
                      dataset_name=manifest.dataset_name), manifest, frames_meta


def cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.interval:
        manifest.sampling_interval = args.interval
    rows = []
    for media_path, class_name in manifest.entries:
        for frame_idx, image_path in media_frame_paths(
                media_path, manifest.sampling_interval, manifest.exclusions):
            rows.append((media_path, frame_idx, image_path, class_name, manifest.task_id))
    print(f"dataset {manifest.dataset_name}: {len(manifest.entries)} entries, "
          f"{len(manifest.class_names)} classes, interval {manifest.sampling_interval}, "
          f"{len(rows)} frames planned")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write("\t".join(str(v) for v in row) + "\n")
        _provenance(args.out + ".provenance", "ingest", args)
    return 0


def cmd_extract(args) -> int:
    pool, manifest, frames_meta = _extract_pool(args)
    save_pool(pool, args.out)
    _provenance(args.out + ".provenance", "extract", args)
    print(f"extracted {len(pool)} records (D={pool.feature_dim}) from "
          f"{manifest.dataset_name} into {args.out}")
    return 0


def cmd_fuse(args) -> int:
    if len(args.pool) < 2:
        raise ValidationError("fuse needs at least two --pool files")
    merged = load_pool(args.pool[0])
    for path in args.pool[1:]:
        merged = merge_pools(merged, load_pool(path))
    save_pool(merged, args.out)
    _provenance(args.out + ".provenance", "fuse", args)
    print(f"merged {len(args.pool)} pools -> {len(merged)} records, "
          f"{merged.label_space.class_count} classes")
    return 0


def cmd_add_task(args) -> int:
    if len(args.pool) != 2:
        raise ValidationError("add-task needs exactly two --pool files: base, new task")
    base = load_pool(args.pool[0])
    new_task = load_pool(args.pool[1])
    grown = add_task(base, new_task)
    save_pool(grown, args.out)
    _provenance(args.out + ".provenance", "add-task", args)
    print(f"added tasks {sorted(new_task.tasks)} -> {len(grown)} records, "
          f"{grown.label_space.class_count} classes")
    return 0


def _load_pools(paths: list[str]):
    pool = load_pool(paths[0])
    for path in paths[1:]:
        pool = merge_pools(pool, load_pool(path))
    return pool


def cmd_train(args) -> int:
    pool = _load_pools(args.pool)
    overrides = getattr(args, "_head_overrides", {})
    config = HeadConfig(
        kind=args.kind,
        seed=args.seed,
        k=int(overrides.get("k", 5)),
        learning_rate=float(overrides.get("learning_rate", 0.1)),
        l2=float(overrides.get("l2", 1e-4)),
        epochs=int(overrides.get("epochs", 500)),
        rounds=int(overrides.get("rounds", 100)),
    )
    head = train(pool, config)
    save_head(head, args.out)
    _provenance(args.out + ".provenance", "train", args)
    if head.warning:
        print(f"warning: {head.warning}", file=sys.stderr)
    print(f"trained {args.kind} on {len(pool)} records -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    head = load_head(args.head)
    pool = _load_pools(args.pool)
    report, cm = evaluate(head, pool)
    print(report.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(args.out, "confusion.csv"), "w", encoding="utf-8") as fh:
            fh.write(cm.to_csv())
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(report.to_text() + "\n")
        _provenance(os.path.join(args.out, "provenance.txt"), "eval", args)
    return 0


def cmd_report(args) -> int:
    import matplotlib.pyplot as plt

    head = load_head(args.head)
    pool = _load_pools(args.pool)
    report, cm = evaluate(head, pool)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(args.out, "confusion.csv"), "w", encoding="utf-8") as fh:
        fh.write(cm.to_csv())
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")

    names = head.class_names
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    image = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    fontsize=8,
                    color="white" if cm.counts[i, j] > cm.counts.max() / 2 else "black")
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "confusion.png"), dpi=150,
                metadata={"Software": "fusionpool"})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    x = np.arange(len(report.per_class))
    width = 0.27
    ax.bar(x - width, [m.recall for m in report.per_class], width, label="recall")
    ax.bar(x, [m.precision for m in report.per_class], width, label="precision")
    ax.bar(x + width, [m.f1 for m in report.per_class], width, label="f1")
    ax.set_xticks(x, [m.name for m in report.per_class], rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    ax.set_title(f"per-class metrics (accuracy {report.accuracy:.2f})")
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "per_class.png"), dpi=150,
                metadata={"Software": "fusionpool"})
    plt.close(fig)

    _provenance(os.path.join(args.out, "provenance.txt"), "report", args)
    print(report.to_text())
    print(f"report written to {args.out}")
    return 0


def cmd_embed(args) -> int:
    pool = _load_pools(args.pool)
    overrides = getattr(args, "_tsne_overrides", {})
    config = TsneConfig(
        perplexity=float(overrides.get("perplexity", 30.0)),
        iterations=int(overrides.get("iterations", 1000)),
        seed=args.seed,
    )
    embedding = tsne(pool.feature_matrix(), config, labels=pool.class_vector())
    os.makedirs(args.out, exist_ok=True)
    sample_ids = [rec.sample_id for rec in pool.records]
    embedding_to_csv(embedding, sample_ids, pool.label_space.global_classes,
                     os.path.join(args.out, "embedding.csv"))
    render_scatter(embedding, os.path.join(args.out, "embedding.png"),
                   class_names=pool.label_space.global_classes)
    _provenance(os.path.join(args.out, "provenance.txt"), "embed", args)
    print(f"embedded {len(pool)} records; final KL {embedding.final_kl:.4f}")
    return 0


def cmd_explain(args) -> int:
    head = load_head(args.head)
    args.jobs = 1
    pool_args = argparse.Namespace(**vars(args))
    pool, manifest, frames_meta = _extract_pool(pool_args)
    specs = _parse_backbones(args)
    handles = {spec.name: load_backbone(spec) for spec in specs}
    os.makedirs(args.out, exist_ok=True)
    schema = pool.schema

    fused = pool.feature_matrix()
    predicted = predict(head, fused)
    count = 0
    for i, (sample_id, image_path, _class_name) in enumerate(frames_meta):
        raw = decode_image(image_path)
        for spec in specs:
            tensor = preprocess_frame(raw, spec, source_id=sample_id)
            maps = handles[spec.name].extract([tensor])[0]
            heatmap = grad_cam(maps, head, int(predicted[i]), spec.name, schema)
            base = np.clip((tensor.values + 1.0) * 127.5, 0, 255).astype(np.uint8) \
                if spec.normalization == "scale_pm1" else raw
            out_path = os.path.join(args.out, f"{sample_id:016x}_{spec.name}.png")
            render_heatmap(heatmap, base, out_path)
            count += 1
    _provenance(os.path.join(args.out, "provenance.txt"), "explain", args)
    print(f"wrote {count} heatmaps to {args.out}")
    return 0


_HANDLERS = {
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "fuse": cmd_fuse,
    "add-task": cmd_add_task,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "embed": cmd_embed,
    "explain": cmd_explain,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args)
    return _HANDLERS[args.command](args)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except FusionPoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 9


if __name__ == "__main__":
    sys.exit(main())
