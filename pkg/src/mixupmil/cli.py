"""Command-line entry point: ``mixupmil <command> ...``.

``train`` and ``experiment`` read an optional ``key=value`` config file
(``--config``); every config key can be overridden with a same-named flag,
e.g. ``--augment.mode intra-multilinear``. Relative default outputs go to the
directory named by ``$MIXUPMIL_OUTPUT_DIR`` (current directory otherwise).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from mixupmil import analysis, tilemask
from mixupmil.augment import AugmentConfig, build_epoch_bags
from mixupmil.bagstore import (
    BagDataset,
    FeatureBag,
    SyntheticSpec,
    generate_synthetic,
    import_csv,
    load_dataset,
    save_dataset,
)
from mixupmil.harness import (
    CONFIG_KEYS,
    ExperimentConfig,
    default_output_dir,
    parse_config_text,
    run_experiment,
    run_repeat,
    write_results_csv,
)
from mixupmil.mil_models import save_checkpoint
from mixupmil.rng import RngStream

log = logging.getLogger("mixupmil")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for key in CONFIG_KEYS:
        p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values: dict[str, str] = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for key in CONFIG_KEYS:
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    return ExperimentConfig.from_mapping(values)


def _output_path(cfg: ExperimentConfig, default_name: str) -> Path:
    return Path(cfg.output) if cfg.output else default_output_dir() / default_name


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        bags_per_class=args.bags_per_class,
        patches_per_bag=args.patches,
        dim=args.dim,
        signal_fraction=args.signal_fraction,
        class_separation=args.separation,
        patch_noise=args.noise,
        bag_offset_scale=args.offset_scale,
        classes=args.classes,
    )
    ds = generate_synthetic(spec, RngStream(args.seed))
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} bags ({spec.patches_per_bag} x {spec.dim}) to {out}")
    return 0


def cmd_import_csv(args: argparse.Namespace) -> int:
    names = args.classes.split(",") if args.classes else None
    ds = import_csv(args.csv, names)
    out = save_dataset(ds, args.out)
    print(f"imported {len(ds)} bags with D={ds.descriptor_dim} to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    ds = load_dataset(cfg.dataset)
    outcome = run_repeat(ds, cfg, args.repeat)
    path = _output_path(cfg, "model.mmlp")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outcome.train.model, path)
    row = outcome.row
    print(f"repeat {row.repeat} seed {row.seed}: final loss {outcome.train.losses[-1]:.6f}, "
          f"test accuracy {row.accuracy:.4f} ({row.train_size} train / {row.test_size} test)")
    print(f"checkpoint written to {path}")
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    result = run_experiment(cfg, workers=args.workers)
    path = write_results_csv(result, cfg, _output_path(cfg, "results.csv"))
    print(f"{len(result.rows)} repeats: accuracy {result.mean:.4f} +- {result.std:.4f}")
    print(f"results written to {path}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    cfg = AugmentConfig(args.mode, args.beta)
    bags = build_epoch_bags(ds, cfg, RngStream(args.seed))
    # slot prefix keeps ids unique when a parent is drawn twice
    renamed = [FeatureBag(f"e{k:05d}:{b.id}", b.label, b.features, b.origin) for k, b in enumerate(bags)]
    out = save_dataset(BagDataset(tuple(renamed), ds.class_names, ds.descriptor_dim), args.out)
    print(f"wrote {len(renamed)} {cfg.mode} bags to {out}")
    return 0


def cmd_distances(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cats = args.categories.split(",") if args.categories else analysis.CATEGORIES
    dists = analysis.distance_study(ds, args.pairs, RngStream(args.seed), cats)
    summaries = {}
    for cat, values in dists.items():
        np.savetxt(out / f"distances_{cat}.csv", values, fmt="%.17g", header="cosine_distance", comments="")
        summaries[cat] = analysis.summarize_distances(values)
        s = summaries[cat]
        print(f"{cat} ({analysis.CATEGORY_LABELS[cat]}): median {s.median:.4f}, IQR {s.iqr:.4f}, "
              f"{s.outlier_count} outliers")
    (out / "distance_summary.csv").write_text(analysis.summary_csv(summaries), encoding="utf-8")
    return 0


def cmd_mask(args: argparse.Namespace) -> int:
    img = tilemask.read_ppm(args.image)
    if args.downscale > 1:
        img = tilemask.downscale(img, args.downscale)
    mask = tilemask.tissue_mask(img, args.green_threshold)
    ent = tilemask.entropy_map(img, min(args.entropy_window, img.width, img.height)) if args.entropy_min > 0 else None
    grid = tilemask.informative_grid(mask, ent, args.patch, args.coverage, args.entropy_min)
    coords = tilemask.sample_coords(grid, args.n, RngStream(args.seed))
    full = tilemask.to_full_resolution(coords, args.scale)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{prefix}_coords.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_downscaled", "y_downscaled", "x_full", "y_full"])
        w.writerows(np.concatenate([coords, full], axis=1).tolist())
    tilemask.write_ppm(tilemask.mask_image(mask), f"{prefix}_mask.ppm")
    print(f"{len(grid)} informative cells; sampled {len(coords)} coordinates to {prefix}_coords.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixupmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bag dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bags-per-class", type=int, default=50)
    p.add_argument("--patches", type=int, default=64)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--signal-fraction", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--offset-scale", type=float, default=0.0)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-csv", help="convert a per-patch CSV into an MBAG dataset")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="comma-separated class names, in index order")
    p.set_defaults(func=cmd_import_csv)

    p = sub.add_parser("train", help="run one repeat and write a checkpoint")
    _add_config_flags(p)
    p.add_argument("--repeat", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run the full repeated protocol and write a results CSV")
    _add_config_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("augment", help="materialize one epoch of augmented bags")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--augment.mode", dest="mode", default="none")
    p.add_argument("--augment.beta", dest="beta", type=float, default=AugmentConfig.beta)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("distances", help="sample descriptor cosine distances per pair category")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--pairs", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", help="comma-separated subset of a,b,c,d,e")
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("mask", help="informative-area grid and patch coordinates for a PPM image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=None, help="output prefix")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--coverage", type=float, default=tilemask.DEFAULT_COVERAGE)
    p.add_argument("--green-threshold", type=int, default=tilemask.DEFAULT_GREEN_THRESHOLD)
    p.add_argument("--entropy-min", type=float, default=0.0)
    p.add_argument("--entropy-window", type=int, default=tilemask.DEFAULT_ENTROPY_WINDOW)
    p.add_argument("--downscale", type=int, default=1, help="box-filter factor applied before masking")
    p.add_argument("--scale", type=int, default=tilemask.DOWNSCALE, help="factor to full-resolution coordinates")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mask)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "out", "") is None:
        args.out = str(default_output_dir() / ("distances" if args.command == "distances" else "mask"))
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"mixupmil {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
