"""Command-line front end: render, dataset, train, reconstruct, evaluate,
retrieve, refine, and the all-in-one pipeline.

Exit codes: 0 success, 2 I/O or malformed input, 3 domain error (empty
category, degenerate geometry, undefined metric), 64 usage. VOXFORGE_SEED
overrides any configured seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import rgan, shapes
from .grasp_rl import PpoConfig, refine_grasp
from .retrieval import (
    CATEGORIES,
    DegenerateInputError,
    EmptyCategoryError,
    GraspStrategy,
    KnowledgeBaseFormatError,
    UnknownCategoryError,
    chamfer,
    kb_load,
    retrieve,
    transfer_strategy,
)
from .scan import NonEnclosingBoundsError, load_mesh, save_dpt1
from .voxel import (
    FrameMismatchError,
    PointCloud,
    UndefinedMetricError,
    devoxelize,
    load_ply,
    load_vxg1,
    metric_report,
    save_ply,
    save_vxg1,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_DOMAIN = 3
EXIT_USAGE = 64

_DOMAIN_ERRORS = (
    EmptyCategoryError,
    DegenerateInputError,
    UndefinedMetricError,
    FrameMismatchError,
    NonEnclosingBoundsError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_override(seed: int) -> int:
    env = os.environ.get("VOXFORGE_SEED")
    return int(env) if env else seed


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in fieldnames])


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# -- commands ---------------------------------------------------------------


def cmd_render(args) -> int:
    mesh = load_mesh(args.mesh)
    out_dir = Path(args.out_dir)
    radius = args.radius
    fov = args.fov if args.fov else ds.auto_fov(mesh, radius)
    _, _, _, target = ds.frame_for_mesh(mesh, 16)
    from .scan import hemisphere_views, render_depth

    cams = hemisphere_views(args.views, radius, target, vertical_fov=fov, width=args.size, height=args.size)
    images = [render_depth(mesh, cam) for cam in cams]  # render fully before touching disk
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_dpt1(img, out_dir / f"view_{i:03d}.dpt")
    _write_json(out_dir / "cameras.json", [c.to_dict() for c in cams])
    print(f"rendered {len(images)} views to {out_dir}")
    return EXIT_OK


def _dataset_meshes(args):
    named = []
    for spec_str in args.mesh or []:
        if "=" in spec_str:
            name, path = spec_str.split("=", 1)
        else:
            path = spec_str
            name = Path(path).stem
        named.append((name, name, load_mesh(path)))
    if args.toy:
        for shape_name in shapes.SHAPE_NAMES:
            named.append((shape_name, shape_name, shapes.make_shape(shape_name)))
    if not named:
        raise DegenerateInputError("no meshes given: pass --mesh and/or --toy")
    return named


def cmd_dataset(args) -> int:
    out_root = Path(args.out_dir)
    for object_id, category, mesh in _dataset_meshes(args):
        images, cams, _, truth = ds.scan_views(
            mesh, args.views, args.m, radius=args.radius, image_size=args.size
        )
        ds.save_bundle(out_root / object_id, object_id, category, images, cams, truth)
        print(f"bundle {object_id}: {len(images)} views, {truth.count()} truth voxels")
    return EXIT_OK


def _rgan_config(args, m: int) -> rgan.RganConfig:
    cfg = rgan.RganConfig(
        grid_dim=m,
        encoder_channels=(4, 8, 16, 16, 16) if args.preset == "fast" else (8, 16, 32, 64, 64),
        latent=64 if args.preset == "fast" else 256,
        lstm_hidden=64 if args.preset == "fast" else 256,
        decoder_channels=(16, 16, 16, 8, 4) if args.preset == "fast" else (64, 64, 32, 16, 8),
        disc_channels=(4, 8, 8, 16, 16, 1) if args.preset == "fast" else (8, 16, 32, 64, 64, 1),
        lambda_adv=args.lambda_adv,
        lr=args.lr,
        batch=args.batch,
        epochs=args.epochs,
        seed=_seed_override(args.seed),
        stop_iou=args.stop_iou,
    )
    return cfg


def cmd_train(args) -> int:
    items = ds.load_bundles(args.data_dir, max_views=args.views)
    truth = items[0].truth
    m = truth.dims[0]
    cfg = _rgan_config(args, m)
    pairs = ds.as_training_pairs(items)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen, dis, log = rgan.train(pairs, cfg, checkpoint_dir=out_dir)
    rgan.save_checkpoint(gen, dis, cfg, log[-1]["epoch"], out_dir / "final")
    rgan.write_training_log(log, out_dir / "log.csv")
    print(
        f"trained {log[-1]['epoch']} epochs; final mean IoU {log[-1]['mean_train_iou']:.3f}; "
        f"checkpoint at {out_dir / 'final'}"
    )
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    gen, _, cfg, _ = rgan.load_checkpoint(args.checkpoint)
    item = ds.load_bundle(args.bundle_dir, max_views=args.views)
    grid = rgan.reconstruct(item.views, gen, threshold=args.threshold)
    save_vxg1(grid, args.out_grid)
    if args.ply:
        save_ply(devoxelize(grid), args.ply)
    print(f"reconstructed {grid.count()} voxels -> {args.out_grid}")
    return EXIT_OK


def _metric_rows(items, recon_dir):
    rows = []
    for item in items:
        recon = load_vxg1(Path(recon_dir) / f"{item.object_id}.vxg")
        rep = metric_report(recon, item.truth)
        rows.append(
            {
                "object_id": item.object_id,
                "category": item.category,
                "iou": rep.iou,
                "hit_rate": rep.hit_rate,
                "accuracy": rep.accuracy,
            }
        )
    return rows


def cmd_evaluate(args) -> int:
    items = ds.load_bundles(args.data_dir, max_views=1)  # views not needed for metrics
    rows = _metric_rows(sorted(items, key=lambda it: it.object_id), args.recon_dir)
    out_rows = list(rows)
    cats = sorted({r["category"] for r in rows})
    if len(cats) > 1:
        for cat in cats:
            sub = [r for r in rows if r["category"] == cat]
            out_rows.append(
                {
                    "object_id": "mean",
                    "category": cat,
                    "iou": float(np.mean([r["iou"] for r in sub])),
                    "hit_rate": float(np.mean([r["hit_rate"] for r in sub])),
                    "accuracy": float(np.mean([r["accuracy"] for r in sub])),
                }
            )
    out_rows.append(
        {
            "object_id": "mean",
            "category": "all",
            "iou": float(np.mean([r["iou"] for r in rows])),
            "hit_rate": float(np.mean([r["hit_rate"] for r in rows])),
            "accuracy": float(np.mean([r["accuracy"] for r in rows])),
        }
    )
    _write_csv(args.out_csv, ["object_id", "category", "iou", "hit_rate", "accuracy"], out_rows)
    print(f"evaluated {len(rows)} objects -> {args.out_csv}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cloud = load_ply(args.recon_ply)
    kb = kb_load(args.kb)
    entry, d_prime = retrieve(cloud, args.category, kb)
    strategy = transfer_strategy(entry, cloud)
    size_norm = d_prime / (len(cloud) + len(entry.cloud))  # non-paper convenience figure
    payload = {
        "entry_id": entry.id,
        "category": args.category,
        "d_prime": d_prime,
        "d_prime_normalized": size_norm,
        "transferred_strategy": strategy.to_dict(),
    }
    _write_json(args.out_json, payload)
    print(f"retrieved {entry.id} (d'={d_prime:.6g}) -> {args.out_json}")
    return EXIT_OK


def cmd_refine(args) -> int:
    grid = load_vxg1(args.recon_grid)
    with open(args.retrieval_json) as f:
        retrieval_out = json.load(f)
    strategy = GraspStrategy.from_dict(retrieval_out["transferred_strategy"])
    cloud = load_ply(args.cloud) if args.cloud else devoxelize(grid)
    cfg = PpoConfig(seed=_seed_override(args.seed), episodes=args.episodes)
    result = refine_grasp(cloud, grid, strategy, cfg)
    row = {
        "task": retrieval_out["category"],
        "object_id": args.object_id,
        "episodes": result.episodes,
        "train_success_rate": result.train_success_rate,
        "eval_success_rate": result.eval_success_rate,
        "chamfer_d_prime": float(retrieval_out["d_prime"]),
    }
    _write_csv(
        args.out_csv,
        ["task", "object_id", "episodes", "train_success_rate", "eval_success_rate", "chamfer_d_prime"],
        [row],
    )
    print(
        f"refined grasp for {args.object_id}: eval success {result.eval_success_rate:.2f} "
        f"-> {args.out_csv}"
    )
    return EXIT_OK


# -- pipeline ----------------------------------------------------------------

_PIPELINE_SCHEMA = {
    "scan": {"views", "radius", "image_size"},
    "grid": {"m"},
    "train": {
        "views",
        "preset",
        "epochs",
        "lr",
        "batch",
        "lambda_adv",
        "stop_iou",
    },
    "retrieve": {"kb_path", "category"},
    "refine": {"episodes", "batch_episodes", "lr", "entropy_coef", "init_log_std"},
    "io": {"mesh", "out_dir", "seed"},
}


def _load_pipeline_config(path) -> dict:
    path = Path(path)
    with open(path) as f:
        raw = json.load(f)
    unknown_sections = set(raw) - set(_PIPELINE_SCHEMA)
    if unknown_sections:
        raise KnowledgeBaseFormatError(f"{path}: unknown config sections {sorted(unknown_sections)}")
    for section, keys in raw.items():
        bad = set(keys) - _PIPELINE_SCHEMA[section]
        if bad:
            raise KnowledgeBaseFormatError(f"{path}: unknown keys {sorted(bad)} in section {section!r}")
    cfg = {s: dict(raw.get(s, {})) for s in _PIPELINE_SCHEMA}
    base = path.parent
    for key in ("mesh", "out_dir"):
        if key in cfg["io"]:
            cfg["io"][key] = str((base / cfg["io"][key]).resolve())
    if "kb_path" in cfg["retrieve"]:
        cfg["retrieve"]["kb_path"] = str((base / cfg["retrieve"]["kb_path"]).resolve())
    return cfg


def cmd_pipeline(args) -> int:
    cfg = _load_pipeline_config(args.config)
    io_cfg = cfg["io"]
    for key in ("mesh", "out_dir"):
        if key not in io_cfg:
            raise KnowledgeBaseFormatError(f"pipeline config must set io.{key}")
    if "kb_path" not in cfg["retrieve"] or "category" not in cfg["retrieve"]:
        raise KnowledgeBaseFormatError("pipeline config must set retrieve.kb_path and retrieve.category")
    seed = _seed_override(int(io_cfg.get("seed", 0)))
    out = Path(io_cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = Path(io_cfg["mesh"])
    object_id = mesh_path.stem
    mesh = load_mesh(mesh_path)

    scan_cfg = cfg["scan"]
    n_views = int(scan_cfg.get("views", ds.FULL_VIEW_COUNT))
    radius = float(scan_cfg.get("radius", ds.SCAN_RADIUS))
    image_size = int(scan_cfg.get("image_size", 64))
    m = int(cfg["grid"].get("m", 32))

    # render + dataset bundle
    images, cams, _, truth = ds.scan_views(mesh, n_views, m, radius=radius, image_size=image_size)
    bundle_dir = out / "dataset" / object_id
    ds.save_bundle(bundle_dir, object_id, cfg["retrieve"]["category"], images, cams, truth)

    # train
    t = cfg["train"]
    train_views = int(t.get("views", 3))
    item = ds.load_bundle(bundle_dir, max_views=train_views)
    rcfg = rgan.RganConfig(
        grid_dim=m,
        encoder_channels=(4, 8, 16, 16, 16) if t.get("preset", "fast") == "fast" else (8, 16, 32, 64, 64),
        latent=64 if t.get("preset", "fast") == "fast" else 256,
        lstm_hidden=64 if t.get("preset", "fast") == "fast" else 256,
        decoder_channels=(16, 16, 16, 8, 4) if t.get("preset", "fast") == "fast" else (64, 64, 32, 16, 8),
        disc_channels=(4, 8, 8, 16, 16, 1) if t.get("preset", "fast") == "fast" else (8, 16, 32, 64, 64, 1),
        lambda_adv=float(t.get("lambda_adv", 0.1)),
        lr=float(t.get("lr", 2e-3)),
        batch=int(t.get("batch", 1)),
        epochs=int(t.get("epochs", 200)),
        seed=seed,
        stop_iou=float(t.get("stop_iou", 0.0)),
    )
    train_dir = out / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    gen, dis, log = rgan.train([(item.views, item.truth)], rcfg)
    rgan.save_checkpoint(gen, dis, rcfg, log[-1]["epoch"], train_dir / "final")
    rgan.write_training_log(log, train_dir / "log.csv")

    # reconstruct
    recon_dir = out / "recon"
    recon_dir.mkdir(parents=True, exist_ok=True)
    grid = rgan.reconstruct(item.views, gen)
    save_vxg1(grid, recon_dir / f"{object_id}.vxg")
    cloud = devoxelize(grid)
    if len(cloud) == 0:
        raise DegenerateInputError("reconstruction produced an empty grid")
    save_ply(cloud, recon_dir / f"{object_id}.ply")

    # evaluate
    rep = metric_report(grid, item.truth)
    rows = [
        {
            "object_id": object_id,
            "category": cfg["retrieve"]["category"],
            "iou": rep.iou,
            "hit_rate": rep.hit_rate,
            "accuracy": rep.accuracy,
        },
        {
            "object_id": "mean",
            "category": "all",
            "iou": rep.iou,
            "hit_rate": rep.hit_rate,
            "accuracy": rep.accuracy,
        },
    ]
    _write_csv(out / "evaluate.csv", ["object_id", "category", "iou", "hit_rate", "accuracy"], rows)

    # retrieve
    kb = kb_load(cfg["retrieve"]["kb_path"])
    entry, d_prime = retrieve(cloud, cfg["retrieve"]["category"], kb)
    strategy = transfer_strategy(entry, cloud)
    _write_json(
        out / "retrieval.json",
        {
            "entry_id": entry.id,
            "category": cfg["retrieve"]["category"],
            "d_prime": d_prime,
            "d_prime_normalized": d_prime / (len(cloud) + len(entry.cloud)),
            "transferred_strategy": strategy.to_dict(),
        },
    )

    # refine
    r = cfg["refine"]
    pcfg = PpoConfig(
        seed=seed,
        episodes=int(r.get("episodes", 1000)),
        batch_episodes=int(r.get("batch_episodes", 20)),
        lr=float(r.get("lr", 3e-4)),
        entropy_coef=float(r.get("entropy_coef", 0.01)),
        init_log_std=float(r.get("init_log_std", -0.3)),
    )
    result = refine_grasp(cloud, grid, strategy, pcfg)
    _write_csv(
        out / "refine.csv",
        ["task", "object_id", "episodes", "train_success_rate", "eval_success_rate", "chamfer_d_prime"],
        [
            {
                "task": cfg["retrieve"]["category"],
                "object_id": object_id,
                "episodes": result.episodes,
                "train_success_rate": result.train_success_rate,
                "eval_success_rate": result.eval_success_rate,
                "chamfer_d_prime": d_prime,
            }
        ],
    )
    print(
        f"pipeline done: recon IoU {rep.iou:.3f}, retrieved {entry.id}, "
        f"refine eval success {result.eval_success_rate:.2f} -> {out}"
    )
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="voxforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="ray-cast hemisphere depth scans of a mesh")
    p.add_argument("mesh")
    p.add_argument("out_dir")
    p.add_argument("--views", type=int, default=ds.FULL_VIEW_COUNT)
    p.add_argument("--radius", type=float, default=ds.SCAN_RADIUS)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--fov", type=float, default=0.0, help="vertical FOV in radians (default: auto-frame)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("dataset", help="build training bundles (views + solid truth)")
    p.add_argument("out_dir")
    p.add_argument("--mesh", action="append", help="NAME=PATH or PATH; repeatable")
    p.add_argument("--toy", action="store_true", help="include the five procedural shapes")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--radius", type=float, default=ds.SCAN_RADIUS)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--m", type=int, default=32)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the reconstruction model on a dataset directory")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--preset", choices=("fast", "full"), default="fast")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=5)
    p.add_argument("--lambda-adv", type=float, default=0.1, dest="lambda_adv")
    p.add_argument("--stop-iou", type=float, default=0.0, dest="stop_iou")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a bundle with a trained checkpoint")
    p.add_argument("checkpoint", help="checkpoint prefix (as written by train: .../final)")
    p.add_argument("bundle_dir")
    p.add_argument("out_grid")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--ply", help="also write occupied-voxel centers as PLY")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="IoU/hit-rate/accuracy table for reconstructions")
    p.add_argument("data_dir", help="dataset directory with truth grids")
    p.add_argument("recon_dir", help="directory of <object_id>.vxg reconstructions")
    p.add_argument("out_csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve", help="retrieve the most volume-similar grasp entry")
    p.add_argument("recon_ply")
    p.add_argument("out_json")
    p.add_argument("--category", required=True, choices=CATEGORIES)
    p.add_argument("--kb", required=True, help="knowledge-base manifest JSON")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("refine", help="PPO-refine a retrieved grasp strategy")
    p.add_argument("recon_grid", help="reconstruction VXG1 grid")
    p.add_argument("retrieval_json", help="output of the retrieve command")
    p.add_argument("out_csv")
    p.add_argument("--cloud", help="reconstruction PLY (default: voxel centers of the grid)")
    p.add_argument("--object-id", default="object", dest="object_id")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("pipeline", help="render -> train -> reconstruct -> evaluate -> retrieve -> refine")
    p.add_argument("config", help="pipeline config JSON")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DOMAIN_ERRORS as e:
        print(f"voxforge: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, KnowledgeBaseFormatError, ValueError, json.JSONDecodeError, KeyError) as e:
        print(f"voxforge: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
