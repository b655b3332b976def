"""Command-line entry points: train, render, eval, bench-tiling.

Exit codes: 0 ok (including a budget-stop), 1 usage/config problems,
2 runtime failures (divergence, schema errors).
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import binning, ingest, synthetic, trainer
from .trainer import TrainConfig


@dataclass
class BenchResult:
    strategy: str  # aabb | snug_seq | snug_lb
    splats: int
    pairs: int
    millis: float
    checksum: str


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tilesplat", description=__doc__)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker deterministic execution")
    p.add_argument("--threads", type=int, default=1, help="worker pool size")
    p.add_argument("--seed", type=int, default=None, help="override RNG seed")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train from a JSON config")
    tr.add_argument("--config", required=True)

    rd = sub.add_parser("render", help="render every camera of a COLMAP model")
    rd.add_argument("ply")
    rd.add_argument("colmap_dir")
    rd.add_argument("out_dir")

    ev = sub.add_parser("eval", help="mean PSNR of a PLY against GT images")
    ev.add_argument("ply")
    ev.add_argument("colmap_dir")
    ev.add_argument("images_dir")

    bt = sub.add_parser("bench-tiling", help="compare binning strategies")
    bt.add_argument("--n-splats", type=int, default=10000)
    bt.add_argument("--anisotropy", type=float, default=10.0)
    bt.add_argument("--width", type=int, default=640)
    bt.add_argument("--height", type=int, default=480)
    bt.add_argument("--out", default=None, help="CSV output path")
    return p


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        print(f"config not found: {config_path}", file=sys.stderr)
        return 1
    try:
        cfg = TrainConfig.from_json(config_path)
    except (ValueError, KeyError, TypeError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
        cfg.threads = 1
    else:
        cfg.threads = args.threads
    if not cfg.colmap_dir or not cfg.images_dir:
        print("config must set colmap_dir and images_dir", file=sys.stderr)
        return 1

    out_dir = Path(cfg.output_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        scene = ingest.load_scene(
            cfg.colmap_dir, cfg.images_dir, cfg.depth_dir,
            depth_samples_per_view=cfg.depth_samples_per_view, seed=cfg.seed)
        for warning in scene.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        result = trainer.train(
            scene, cfg,
            ply_path=out_dir / "point_cloud.ply",
            metrics_path=out_dir / "metrics.csv",
            decisions_path=out_dir / "decisions.csv")
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 1
    except trainer.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except (ingest.ColmapParseError, ingest.PlySchemaError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    cfg.to_json(out_dir / "config_used.json")
    final_psnr = next((m["psnr"] for m in reversed(result.metrics)
                       if not np.isnan(m["psnr"])), float("nan"))
    print(f"{result.stop_reason} after {result.iterations} iterations "
          f"({result.elapsed:.1f}s), {len(result.gset)} splats, "
          f"PSNR {final_psnr:.2f} dB")
    return 0


def cmd_render(args) -> int:
    for p in (args.ply, args.colmap_dir):
        if not Path(p).exists():
            print(f"missing input: {p}", file=sys.stderr)
            return 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        gset = ingest.read_ply(args.ply)
        recon = ingest.parse_colmap(args.colmap_dir)
        cfg = TrainConfig(deterministic=args.deterministic)

        def render_one(item):
            i, cam = item
            vr = trainer.render_view(gset, cam, cfg, checkpoints=False)
            stem = Path(cam.name).stem if cam.name else f"view_{i:04d}"
            ingest.write_png(out_dir / f"{stem}.png", np.clip(vr.buffers.color, 0, 1))
            ingest.write_pfm(out_dir / f"{stem}.pfm", vr.buffers.normalized_depth())

        n_workers = 1 if args.deterministic else max(1, args.threads)
        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                list(pool.map(render_one, enumerate(recon.cameras)))
        else:
            for item in enumerate(recon.cameras):
                render_one(item)
    except (ingest.ColmapParseError, ingest.PlySchemaError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    print(f"rendered {len(recon.cameras)} views to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    for p in (args.ply, args.colmap_dir, args.images_dir):
        if not Path(p).exists():
            print(f"missing input: {p}", file=sys.stderr)
            return 1
    try:
        gset = ingest.read_ply(args.ply)
        scene = ingest.load_scene(args.colmap_dir, args.images_dir)
        value = trainer.evaluate(gset, scene.cameras)
    except (ingest.ColmapParseError, ingest.PlySchemaError, FileNotFoundError,
            ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    print(f"mean PSNR: {value:.4f} dB over {len(scene.cameras)} views")
    return 0


def run_bench_tiling(n_splats: int, anisotropy: float, seed: int,
                     width: int = 640, height: int = 480) -> list[BenchResult]:
    batch = synthetic.random_splat_batch(n_splats, anisotropy, seed,
                                         width=width, height=height)
    binning.compute_snugboxes(batch)
    results = []
    for name, fn in (("aabb", binning.bin_aabb),
                     ("snug_seq", binning.bin_sequential),
                     ("snug_lb", binning.bin_load_balanced)):
        t0 = time.perf_counter()
        index = fn(batch)
        millis = (time.perf_counter() - t0) * 1e3
        results.append(BenchResult(name, n_splats, index.n_pairs, millis,
                                   index.checksum()))
    return results


def cmd_bench_tiling(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_bench_tiling(args.n_splats, args.anisotropy, seed,
                               args.width, args.height)
    by_name = {r.strategy: r for r in results}
    if by_name["snug_seq"].checksum != by_name["snug_lb"].checksum:
        print("checksum mismatch between snug_seq and snug_lb", file=sys.stderr)
        return 2
    lines = ["strategy,splats,pairs,millis"]
    lines += [f"{r.strategy},{r.splats},{r.pairs},{r.millis:.3f}" for r in results]
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv)
    print(csv, end="")
    print(f"# snug checksums: {by_name['snug_seq'].checksum} (seq == lb)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval,
                "bench-tiling": cmd_bench_tiling}
    try:
        return handlers[args.command](args)
    except Exception as exc:  # any unhandled failure is a runtime error
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
