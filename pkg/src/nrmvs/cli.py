"""Command-line entry point: ``nrmvs {synth,reconstruct,interpolate,evaluate}``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 bootstrap
failure, 3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .defgraph import DeformationGraph, deform_normals, deform_points, interpolate
from .errors import BootstrapError, NRMVSError, ParseError, ResolutionMismatchError
from .io import (
    atomic_write,
    camera_record,
    decode_ply,
    encode_matches,
    encode_ply,
    load_cameras,
    load_matches,
    read_graph,
    read_pfm,
    read_ply,
    write_graph,
    write_json,
    write_pfm,
    write_ply,
    write_png16,
)

logger = logging.getLogger("nrmvs")

EXIT_OK, EXIT_USAGE, EXIT_BOOTSTRAP, EXIT_IO = 0, 1, 2, 3


def set_threads(threads: int | None) -> int:
    """Cap numba's worker count; ``None`` falls back to NRMVS_THREADS, then all cores."""
    import numba

    if threads is None:
        env = os.environ.get("NRMVS_THREADS")
        threads = int(env) if env else numba.config.NUMBA_NUM_THREADS
    if threads < 1:
        raise ValueError("--threads must be >= 1")
    threads = min(threads, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(threads)
    return threads


def _tag(v: int) -> str:
    return f"{v:02d}"


def deform_cloud(cloud: dict, graph: DeformationGraph) -> dict:
    """Apply ``graph`` to a cloud as returned by :func:`read_ply`."""
    if graph.is_identity():
        return dict(cloud)
    return {
        "points": deform_points(cloud["points"], graph),
        "normals": deform_normals(cloud["normals"], cloud["points"], graph),
        "colors": cloud["colors"],
    }


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .syntheval import ground_truth_graph, make_scene, render, synth_matches

    scene = make_scene(
        n_views=args.views, width=args.width, height=args.height, seed=args.seed, static=args.static,
    )
    out = Path(args.out)
    records = []
    for v in range(scene.n_views):
        frame = scene.view_frames[v]
        image, depth, _, _ = render(scene, frame, v)
        name = f"image_{_tag(v)}.png"
        write_png16(out / name, image)
        write_pfm(out / f"gt_depth_{_tag(v)}.pfm", depth)
        records.append(camera_record(scene.camera(v, image), name))
        if not args.no_graphs:
            write_graph(out / f"gt_graph_{_tag(v)}.json", ground_truth_graph(scene, frame))
    write_json(out / "cameras.json", records)
    pairwise, _, _ = synth_matches(scene)
    write_json(out / "matches.json", encode_matches(pairwise))
    write_json(
        out / "scene.json",
        {"seed": args.seed, "views": scene.n_views, "view_frames": list(map(int, scene.view_frames)),
         "canonical_pair": list(map(int, scene.canonical_pair))},
    )
    print(f"wrote {scene.n_views} views to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reconstruct
# --------------------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    return cfg.merged(overrides)


def cmd_reconstruct(args) -> int:
    from .pipeline import ingest_tracks, run
    from .syntheval import evaluate

    try:
        cfg = _config_from_args(args)
    except ValueError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    data = Path(args.data)
    cameras = Path(args.cameras) if args.cameras else data / "cameras.json"
    matches = Path(args.matches) if args.matches else data / "matches.json"
    for p in (cameras, matches):
        if not p.is_file():
            print(f"error: cannot read {p}: no such file", file=sys.stderr)
            return EXIT_IO
    views = load_cameras(cameras, levels=cfg.pyramid_levels)
    tracks = ingest_tracks(load_matches(matches))
    result = run(views, tracks, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    canonical_bytes = encode_ply(
        result.canonical_cloud.points, result.canonical_cloud.normals, result.canonical_cloud.colors,
    )
    atomic_write(out / "canonical.ply", canonical_bytes)
    # derived clouds start from the stored canonical cloud, as interpolate does
    canonical = decode_ply(canonical_bytes)
    report = dict(result.report)
    metrics = {}
    for v in sorted(result.maps):
        t = _tag(v)
        m = result.maps[v]
        depth = np.where(m.valid, m.depth, 0.0)
        write_pfm(out / f"depth_{t}.pfm", depth)
        write_pfm(out / f"normal_{t}.pfm", np.where(m.valid[..., None], m.normal, 0.0))
        raw = result.raw_maps[v]
        write_pfm(out / f"raw_depth_{t}.pfm", np.where(raw.valid, raw.depth, 0.0))
        c = result.view_clouds[v]
        write_ply(out / f"cloud_{t}.ply", c.points, c.normals, c.colors)
        graph = result.graph(v)
        write_graph(out / f"graph_{t}.json", graph)
        d = deform_cloud(canonical, graph)
        write_ply(out / f"deformed_{t}.ply", d["points"], d["normals"], d["colors"])
        gt = data / f"gt_depth_{t}.pfm"
        if gt.is_file():
            ev = evaluate(m, read_pfm(gt), unfiltered_depth=raw)
            metrics[str(v)] = ev.to_dict()
    if metrics:
        report["metrics"] = metrics
    report["config"] = cfg.to_dict()
    write_json(out / "report.json", report)
    print(f"reconstructed {len(result.maps)} of {len(views)} views into {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# interpolate
# --------------------------------------------------------------------------


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        print("error: --steps must be >= 2", file=sys.stderr)
        return EXIT_USAGE
    cloud = read_ply(args.canonical)
    ga, gb = read_graph(args.graph_a), read_graph(args.graph_b)
    out = Path(args.out)
    for s in range(args.steps):
        alpha = s / (args.steps - 1)
        graph = interpolate(ga, gb, alpha)
        d = deform_cloud(cloud, graph)
        write_ply(out / f"interp_{s:03d}.ply", d["points"], d["normals"], d["colors"])
    print(f"wrote {args.steps} clouds to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    from .plotting import save_error_map
    from .syntheval import evaluate, evaluate_many

    recon, truth_dir = Path(args.recon), Path(args.truth)
    out = Path(args.out) if args.out else recon
    views = sorted(int(p.stem.split("_")[1]) for p in recon.glob("depth_*.pfm"))
    if not views:
        print(f"error: no depth maps in {recon}", file=sys.stderr)
        return EXIT_IO
    rows, depths, truths, raws = [], [], [], []
    for v in views:
        t = _tag(v)
        gt_path = truth_dir / f"gt_depth_{t}.pfm"
        if not gt_path.is_file():
            logger.warning("no ground truth for view %d", v)
            continue
        depth, gt = read_pfm(recon / f"depth_{t}.pfm"), read_pfm(gt_path)
        raw_path = recon / f"raw_depth_{t}.pfm"
        raw = read_pfm(raw_path) if raw_path.is_file() else None
        ev = evaluate(depth, gt, unfiltered_depth=raw)
        rows.append([str(v), ev.mre, ev.completeness, ev.mre_unfiltered])
        depths.append(depth)
        truths.append(gt)
        raws.append(raw)
        save_error_map(out / f"error_{t}.png", depth, gt, title=f"view {v}: MRE {ev.mre:.2f}%")
    if not rows:
        print(f"error: no ground truth matching {recon} in {truth_dir}", file=sys.stderr)
        return EXIT_IO
    pooled = evaluate_many(depths, truths, unfiltered=raws if all(r is not None for r in raws) else None)
    rows.append(["all", pooled.mre, pooled.completeness, pooled.mre_unfiltered])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["view", "mre_percent", "completeness_percent", "mre_unfiltered_percent"])
    for r in rows:
        w.writerow([r[0]] + [f"{x:.6f}" for x in r[1:]])
    atomic_write(out / "metrics.csv", buf.getvalue().encode())
    print(buf.getvalue(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nrmvs", description="Non-rigid multi-view stereo.")
    p.add_argument("--version", action="version", version=f"nrmvs {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: NRMVS_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic deforming-plane dataset")
    s.add_argument("out")
    s.add_argument("--views", type=int, default=6)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--static", action="store_true", help="no deformation in any view")
    s.add_argument("--no-graphs", action="store_true", help="skip ground-truth graph fitting")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="reconstruct a dataset directory")
    r.add_argument("data", help="directory with cameras.json, matches.json and images")
    r.add_argument("out")
    r.add_argument("--cameras", help="camera file (default: DATA/cameras.json)")
    r.add_argument("--matches", help="matches file (default: DATA/matches.json)")
    r.add_argument("--config", help="JSON config; flags below override it")
    for f in fields(RunConfig):
        kind = int if f.type in ("int", int) else float
        r.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)
    r.set_defaults(func=cmd_reconstruct)

    i = sub.add_parser("interpolate", help="blend two deformations of the canonical cloud")
    i.add_argument("canonical", help="canonical.ply from reconstruct")
    i.add_argument("graph_a")
    i.add_argument("graph_b")
    i.add_argument("out")
    i.add_argument("--steps", type=int, default=10)
    i.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("evaluate", help="score depth maps against ground truth")
    e.add_argument("recon", help="reconstruct output directory")
    e.add_argument("truth", help="directory with gt_depth_XX.pfm")
    e.add_argument("--out", help="where to write metrics.csv and error maps (default: RECON)")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except BootstrapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BOOTSTRAP
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ResolutionMismatchError, NRMVSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
