"""Command-line front end.

Subcommands: ingest, synth, preprocess, augment, train, eval, run, report.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import dataset, protocol
from .dataset import class_distribution, parse_manifest, write_manifest


def _add_ingest(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("ingest", help="validate a manifest and print its class distribution")
    p.add_argument("--in", dest="manifest", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write the normalized manifest here")


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="synthesize an occluded copy of a database")
    p.add_argument("--kind", required=True, choices=["mask", "glass", "random"])
    p.add_argument("--ratio", type=float, help="occluded fraction, random blocks only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--assets", type=Path, help="asset directory (mask/glass)")
    p.add_argument("--landmarks", type=Path, help="landmark directory (mask/glass)")
    p.add_argument("--in", dest="manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)


def _add_preprocess(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("preprocess", help="compute and cache onset->apex region stacks")
    p.add_argument("--in", dest="manifest", required=True, type=Path)
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--size", type=int, default=224, help="region side length S")


def _add_augment(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("augment", help="compute and cache the augmented training stacks")
    p.add_argument("--in", dest="manifest", required=True, type=Path)
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--size", type=int, default=224)


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path, help="training manifest")
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--test-manifest", type=Path, help="held-out database manifest")
    group.add_argument("--holdout-subject", help="hold out one subject of --manifest")


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write the fold report JSON here")


def _add_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="full experiment: preprocess, train, evaluate, report")
    p.add_argument("--task", required=True, choices=["hde", "cde"])
    p.add_argument(
        "--occlusion",
        default="none",
        help="none | mask | glass | random_05 .. random_50",
    )
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--casme2", type=Path)
    p.add_argument("--samm", type=Path)
    p.add_argument("--composite", type=Path)
    p.add_argument("--assets", type=Path)
    p.add_argument("--landmarks", type=Path)
    p.add_argument("--quiet", action="store_true")


def _add_report(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("report", help="recompute a report's aggregate from its fold matrices")
    p.add_argument("--in", dest="report", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write the recomputed report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rrrn",
        description="Occlusion-robust micro-expression recognition pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (
        _add_ingest,
        _add_synth,
        _add_preprocess,
        _add_augment,
        _add_train,
        _add_eval,
        _add_run,
        _add_report,
    ):
        add(sub)
    return parser


# ---------------------------------------------------------------------------
# handlers


def _cmd_ingest(args) -> int:
    manifest = parse_manifest(args.manifest)
    dist = class_distribution(manifest)
    for cls, count in dist.counts.items():
        print(f"class {cls.name}: {count}")
    print(f"total: {dist.total}")
    print(f"subjects: {dist.subject_count}")
    if args.out:
        write_manifest(manifest, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_synth(args) -> int:
    from . import occlusion as occ

    manifest = parse_manifest(args.manifest)
    if args.kind == "random":
        if args.ratio is None:
            print("error: --ratio is required for random occlusion", file=sys.stderr)
            return 2
        spec = occ.OcclusionSpec(
            kind=occ.OcclusionKind.RANDOM, ratio=args.ratio, seed=args.seed
        )
        assets = None
        landmark_source = None
    else:
        if args.assets is None or args.landmarks is None:
            print("error: --assets and --landmarks are required", file=sys.stderr)
            return 2
        kind = occ.OcclusionKind.MASK if args.kind == "mask" else occ.OcclusionKind.GLASS
        asset_kind = occ.AssetKind.MASK if args.kind == "mask" else occ.AssetKind.GLASSES
        spec = occ.OcclusionSpec(kind=kind, seed=args.seed)
        assets = occ.load_assets(args.assets, asset_kind)
        landmark_source = occ.DirectoryLandmarkSource(args.landmarks)

    out_manifest = occ.synthesize_database(
        manifest, spec, args.out, landmark_source, assets
    )
    manifest_path = Path(args.out) / "manifest.tsv"
    write_manifest(out_manifest, manifest_path)
    print(f"wrote {len(out_manifest)} occluded samples under {args.out}")
    print(f"manifest: {manifest_path}")
    return 0


def _preprocess_common(args, augmented: bool) -> int:
    from .flow import RegionCropSpec

    manifest = parse_manifest(args.manifest)
    cache = protocol.StackCache(args.cache)
    spec = RegionCropSpec(output_size=args.size)
    done = 0

    def tick(_msg: str) -> None:
        nonlocal done
        done += 1

    protocol.preprocess_manifest(
        manifest, cache, spec, augmented=augmented, progress=tick
    )
    word = "augmented" if augmented else "base"
    print(f"cached {word} stacks for {done} samples in {args.cache}")
    return 0


def _cmd_preprocess(args) -> int:
    return _preprocess_common(args, augmented=False)


def _cmd_augment(args) -> int:
    return _preprocess_common(args, augmented=True)


def _cmd_train(args) -> int:
    cfg = protocol.load_config(args.config)
    manifest = parse_manifest(args.manifest)
    cache = protocol.StackCache(args.cache)

    if args.test_manifest:
        test_manifest = parse_manifest(args.test_manifest)
        fold = protocol.hde_folds(manifest, test_manifest)[0]
        full = dataset.merge_manifests(manifest, test_manifest)
    elif args.holdout_subject:
        folds = protocol.loso_folds(manifest)
        wanted = [f for f in folds if f.name.endswith(f"_{args.holdout_subject}")]
        if not wanted:
            print(f"error: no subject {args.holdout_subject!r}", file=sys.stderr)
            return 1
        fold = wanted[0]
        full = manifest
    else:
        ids = tuple(r.sample_id for r in manifest.mapped_records())
        fold = protocol.Fold(name="all_train", train_ids=ids, test_ids=())
        full = manifest

    ckpt = protocol.train(fold, cfg, cache, full, args.out)
    print(f"final checkpoint: {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    manifest = parse_manifest(args.manifest)
    cache = protocol.StackCache(args.cache)
    ids = tuple(r.sample_id for r in manifest.mapped_records())
    fold = protocol.Fold(name="eval", train_ids=(), test_ids=ids)
    predictor = protocol.make_predictor(args.checkpoint)
    result = protocol.evaluate(predictor, fold, manifest, cache)
    for key, value in result.metrics.as_dict().items():
        print(f"{key}: {value:.4f}")
    if args.out:
        protocol.write_report(result.to_dict(), args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = protocol.load_config(args.config)
    casme2 = parse_manifest(args.casme2) if args.casme2 else None
    samm = parse_manifest(args.samm) if args.samm else None
    composite = parse_manifest(args.composite) if args.composite else None
    progress = None if args.quiet else lambda msg: print(msg)
    report = protocol.run_experiment(
        task=args.task,
        occlusion=args.occlusion,
        cfg=cfg,
        out_dir=args.out,
        casme2=casme2,
        samm=samm,
        composite=composite,
        assets_dir=args.assets,
        landmarks_dir=args.landmarks,
        progress=progress,
    )
    agg = report["aggregate"]
    summary = " ".join(f"{k}={v:.4f}" for k, v in agg.items() if isinstance(v, float))
    print(f"aggregate ({agg['rule']}): {summary}")
    print(f"report: {Path(args.out) / 'report.json'}")
    return 0


def _cmd_report(args) -> int:
    import json

    report = json.loads(Path(args.report).read_text())
    report["aggregate"] = protocol.recompute_aggregate(report)
    for key, value in report["aggregate"].items():
        if isinstance(value, float):
            print(f"{key}: {value:.4f}")
    if args.out:
        protocol.write_report(report, args.out)
        print(f"wrote {args.out}")
    return 0


_HANDLERS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failure -> structured message, exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
