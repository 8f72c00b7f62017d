"""Command-line entry points."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .checkpoint import load_checkpoint, restore_model
from .config import parse_override, resolve_config
from .const import Branch, Domain, Split
from .data.manifest import AttributeSchema, load_manifest, select
from .data.synthetic import generate_synthetic_dataset
from .data.transforms import RecordTransform, resolve_fill
from .diagnostics import report_model_stats
from .exceptions import ArgumentError, MMFLError
from .log import setup_console
from .network.model import build_model
from .retrieval.attributes import attribute_metrics, predict_attributes
from .retrieval.embeddings import EmbeddingStore, extract_embeddings
from .retrieval.index import RetrievalIndex, build_index, query_index
from .retrieval.protocol import EvalSettings, evaluate_model
from .trainer import fit

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .config import Config
    from .data.manifest import ImageRecord

_LOGGER = logging.getLogger(__name__)

DEFAULT_STATS_CLASSES = 1000


def _print_json(data: Any) -> None:
    """Write a JSON document to standard output."""
    sys.stdout.write(json.dumps(data, indent=2) + "\n")


def _overrides(items: Sequence[str]) -> dict[str, Any]:
    """Parse `key=value` arguments into a dotted mapping."""
    return dict(parse_override(item) for item in items)


def _image_root(config: Config, manifest: Path, image_root: str | None) -> Path:
    """Resolve the directory manifest image paths are relative to."""
    if image_root:
        return Path(image_root)
    configured = config.get("data.image_root")
    return Path(configured) if configured else manifest.parent


def _eval_transform(
    config: Config, records: Sequence[ImageRecord], root: Path
) -> RecordTransform:
    """Build the unaugmented transform a checkpoint was trained with."""
    fill = resolve_fill(config.get("data.fill"), records, root)
    return RecordTransform(root, config.get("data.image_size"), fill)


def _load_records(
    config: Config, manifest: str
) -> tuple[AttributeSchema, list[ImageRecord]]:
    """Load a manifest under the checkpoint's attribute schema."""
    schema = AttributeSchema.from_config(config.get("data.attributes"))
    return schema, load_manifest(Path(manifest), schema)


def cmd_train(args: argparse.Namespace) -> int:
    """Train and write a run directory."""
    config = resolve_config(args.config, args.overrides)
    result = fit(config, args.out, resume=args.resume)
    _LOGGER.info(
        "Run directory %s: %d epochs, best mAP %.4f",
        args.out,
        result.checkpoint.epoch,
        result.best_map,
    )
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    """Embed one split of a manifest into a store file."""
    model, config = restore_model(load_checkpoint(args.checkpoint))
    _, records = _load_records(config, args.manifest)
    records = select(
        records, Split(args.split), Domain(args.domain) if args.domain else None
    )
    root = _image_root(config, Path(args.manifest), args.image_root)
    store = extract_embeddings(
        model,
        records,
        _eval_transform(config, records, root),
        args.batch_size or config.get("eval.batch_size"),
        branch=Branch(args.branch) if args.branch else None,
    )
    store.save(args.out)
    _LOGGER.info(
        "Wrote %d embeddings of width %d to %s", len(store), store.dim, args.out
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint consumer-to-shop and print the summary."""
    model, config = restore_model(load_checkpoint(args.checkpoint))
    overrides = _overrides(args.overrides)
    if args.rerank:
        overrides["eval.rerank"] = True
    if overrides:
        config = config.with_overrides(overrides)
    _, records = _load_records(config, args.manifest)
    root = _image_root(config, Path(args.manifest), args.image_root)
    result = evaluate_model(
        model,
        records,
        _eval_transform(config, records, root),
        EvalSettings.from_config(config.section("eval")),
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result.write(out / "eval.json")
    _print_json(result.as_json() if args.full else result.summary())
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    """Cluster a store file into a searchable index directory."""
    config = resolve_config(args.config, args.overrides)
    store = EmbeddingStore.load(args.store)
    flags = {"eval.n_clusters": args.clusters, "eval.probe": args.probe}
    config = config.with_overrides(
        {key: value for key, value in flags.items() if value is not None}
    )
    index = build_index(
        store,
        config.get("eval.n_clusters"),
        seed=config.get("seed") if args.seed is None else args.seed,
        probe_clusters=config.get("eval.probe"),
    )
    index.save(args.out)
    _LOGGER.info(
        "Indexed %d rows into %d clusters in %s", len(store), index.n_clusters, args.out
    )
    return 0


def _query_embedding(args: argparse.Namespace, index: RetrievalIndex) -> np.ndarray:
    """Return the query vector from a store row or an embedded image."""
    if args.row is not None:
        if not 0 <= args.row < len(index.store):
            raise ArgumentError(
                f"Row {args.row} is outside the store of {len(index.store)}"
            )
        return index.store.matrix[args.row]
    if not args.checkpoint:
        raise ArgumentError("--image needs --checkpoint to embed the image")
    model, config = restore_model(load_checkpoint(args.checkpoint))
    try:
        with Image.open(args.image) as image:
            pil = image.convert("RGB")
    except (OSError, UnidentifiedImageError) as err:
        raise ArgumentError(f"Cannot read image {args.image}: {err}") from err
    transform = _eval_transform(config, [], Path(args.image).parent)
    embedding: torch.Tensor = model.embed(transform.image(pil).unsqueeze(0))
    return embedding[0].numpy()


def cmd_query(args: argparse.Namespace) -> int:
    """Print the ranked gallery rows of one query."""
    index = RetrievalIndex.load(args.index)
    hits = query_index(index, _query_embedding(args, index), args.topk, args.probe)
    _print_json(
        [
            {
                "rank": rank,
                "row": hit.row,
                "pid": hit.pid,
                "distance": hit.distance,
                "path": index.store.paths[hit.row],
            }
            for rank, hit in enumerate(hits, start=1)
        ]
    )
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Render a synthetic consumer/shop dataset."""
    dataset = generate_synthetic_dataset(
        args.out,
        num_pids=args.pids,
        imgs_per_domain=args.images,
        image_size=args.size,
        seed=args.seed,
        holdout_pids=args.holdout,
    )
    _LOGGER.info("Wrote %d records to %s", len(dataset.records), dataset.manifest)
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    """Print parameter, multiply-add and timing figures of a configuration."""
    config = resolve_config(args.config, args.overrides)
    schema = AttributeSchema.from_config(config.get("data.attributes"))
    torch.manual_seed(config.get("seed"))
    model = build_model(config.section("model"), args.classes, schema.value_counts)
    stats = report_model_stats(
        model,
        config.get("data.image_size"),
        batch_size=args.batch_size,
        runs=args.runs,
        seed=config.get("seed"),
    )
    _print_json(stats.as_json() | {"embedding_dim": model.embedding_dim})
    return 0


def cmd_metrics_attr(args: argparse.Namespace) -> int:
    """Score attribute predictions of a checkpoint on one split."""
    model, config = restore_model(load_checkpoint(args.checkpoint))
    schema, records = _load_records(config, args.manifest)
    records = select(records, Split(args.split))
    root = _image_root(config, Path(args.manifest), args.image_root)
    scores, targets = predict_attributes(
        model, records, _eval_transform(config, records, root), schema
    )
    reports = [
        report.as_json() for report in attribute_metrics(scores, targets, schema)
    ]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "attributes.json").write_text(
            json.dumps(reports, indent=2) + "\n", encoding="utf-8"
        )
    _print_json(reports)
    return 0


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subcommand per workflow."""
    parser = argparse.ArgumentParser(prog="mmfl_net", description=__doc__)
    parser.add_argument("--log-level", default="INFO", help="console log level")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model")
    train.add_argument("--config", help="JSON config file or preset name")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("overrides", nargs="*", help="dotted key=value overrides")
    train.set_defaults(handler=cmd_train)

    extract = commands.add_parser("extract", help="embed a manifest split")
    extract.add_argument("--checkpoint", required=True)
    extract.add_argument("--manifest", required=True)
    extract.add_argument(
        "--split", required=True, choices=[split.value for split in Split]
    )
    extract.add_argument("--domain", choices=[domain.value for domain in Domain])
    extract.add_argument("--branch", choices=[branch.value for branch in Branch])
    extract.add_argument("--image-root")
    extract.add_argument("--batch-size", type=int)
    extract.add_argument("--out", required=True, help="store file")
    extract.set_defaults(handler=cmd_extract)

    evaluate = commands.add_parser(
        "eval", help="evaluate consumer-to-shop retrieval"
    )
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--rerank", action="store_true")
    evaluate.add_argument("--image-root")
    evaluate.add_argument(
        "--full", action="store_true", help="print the whole CMC curve"
    )
    evaluate.add_argument("--out", help="directory for eval.json")
    evaluate.add_argument("overrides", nargs="*", help="dotted key=value overrides")
    evaluate.set_defaults(handler=cmd_eval)

    index = commands.add_parser("index", help="cluster a store into an index")
    index.add_argument("--store", required=True)
    index.add_argument("--config", help="JSON config file or preset name")
    index.add_argument("--clusters", type=int, help="defaults to eval.n_clusters")
    index.add_argument("--probe", type=int, help="defaults to eval.probe")
    index.add_argument("--seed", type=int, help="defaults to the config seed")
    index.add_argument("--out", required=True, help="index directory")
    index.add_argument("overrides", nargs="*", help="dotted key=value overrides")
    index.set_defaults(handler=cmd_index)

    query = commands.add_parser("query", help="search an index")
    query.add_argument("--index", required=True)
    source = query.add_mutually_exclusive_group(required=True)
    source.add_argument("--image")
    source.add_argument("--row", type=int)
    query.add_argument("--checkpoint", help="needed with --image")
    query.add_argument("--topk", type=int, default=10)
    query.add_argument("--probe", type=int)
    query.set_defaults(handler=cmd_query)

    gen_data = commands.add_parser("gen-data", help="render a synthetic dataset")
    gen_data.add_argument("--out", required=True)
    gen_data.add_argument("--pids", type=int, default=20)
    gen_data.add_argument("--images", type=int, default=4, help="images per domain")
    gen_data.add_argument("--size", type=int, default=64)
    gen_data.add_argument("--holdout", type=int, default=0)
    gen_data.add_argument("--seed", type=int, default=0)
    gen_data.set_defaults(handler=cmd_gen_data)

    stats = commands.add_parser("stats", help="report model size and speed")
    stats.add_argument("--config", help="JSON config file or preset name")
    stats.add_argument("--classes", type=int, default=DEFAULT_STATS_CLASSES)
    stats.add_argument("--batch-size", type=int, default=8)
    stats.add_argument("--runs", type=int, default=50)
    stats.add_argument("overrides", nargs="*", help="dotted key=value overrides")
    stats.set_defaults(handler=cmd_stats)

    metrics_attr = commands.add_parser(
        "metrics-attr", help="score attribute predictions"
    )
    metrics_attr.add_argument("--checkpoint", required=True)
    metrics_attr.add_argument("--manifest", required=True)
    metrics_attr.add_argument(
        "--split", default=Split.TRAIN.value, choices=[split.value for split in Split]
    )
    metrics_attr.add_argument("--image-root")
    metrics_attr.add_argument("--out", help="directory for attributes.json")
    metrics_attr.set_defaults(handler=cmd_metrics_attr)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run a command; errors of the package exit with status 1."""
    args = build_parser().parse_args(argv)
    setup_console(args.log_level)
    try:
        return int(args.handler(args))
    except MMFLError as err:
        _LOGGER.error("%s: %s", args.command, err)
        return 1
