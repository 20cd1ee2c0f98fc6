"""Batch command-line interface.

Subcommands:

- ``gen-scene``  — generate a synthetic facade dataset on disk.
- ``replay``     — run a recorded capture sequence headlessly through
  the pipeline (``--ba standard|multiscale``, ``--rows
  near|middle|far|all``) and write ``report.json``.
- ``calibrate``  — exhaustive-focal calibration from rendered planar
  marker views plus a marker layout table.
- ``evaluate``   — compare a reconstructed point cloud against a
  ground-truth surface sampling.
- ``serve``      — start the HTTP session service.

Every command exits nonzero on error and prints a single
machine-readable JSON object to stderr: ``{"error": <type>, "detail":
<message>}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, SkysweepError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # machine-readable usage errors
        print(json.dumps({"error": "UsageError", "detail": message}), file=sys.stderr)
        raise SystemExit(2)


def _fail(exc: BaseException, code: int = 1) -> int:
    print(
        json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
        file=sys.stderr,
    )
    return code


def _parse_rows(specs: list[str]):
    from .scenesim import RowPlan

    rows = []
    for spec in specs:
        parts = spec.split(":")
        if len(parts) != 3:
            raise InvalidConfig(f"row spec {spec!r} is not distance:height:count")
        rows.append(RowPlan(float(parts[0]), float(parts[1]), int(parts[2])))
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args) -> int:
    from .scenesim import (
        CameraNetworkPlan,
        NoiseConfig,
        SceneConfig,
        build_scene,
        export_dataset,
    )

    rows = _parse_rows(args.rows) if args.rows else None
    cfg = SceneConfig(
        plan=CameraNetworkPlan(rows=rows) if rows else SceneConfig().plan,
        noise=NoiseConfig(
            sigma_px=args.sigma_px,
            outlier_rate=args.outlier_rate,
            drift_px=args.drift_px,
        ),
        n_gcps=args.n_gcps,
        seed=args.seed,
    )
    dataset = build_scene(cfg)
    out = Path(args.out)
    export_dataset(dataset, out)
    (out / "scene.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    print(json.dumps({"out": str(out), "n_images": dataset.n_images, "seed": args.seed}))
    return 0


def _row_selection(dataset, name: str) -> list[int]:
    """Image ids for a named row subset (near/middle/far/all), with
    row names assigned by mean camera standoff distance."""
    n = dataset.n_images
    if name == "all":
        return list(range(n))
    labels = sorted(set(int(r) for r in dataset.row_index))
    dist = {
        lab: float(
            np.mean(
                [abs(dataset.poses[i].center[1]) for i in range(n) if dataset.row_index[i] == lab]
            )
        )
        for lab in labels
    }
    ordered = sorted(labels, key=lambda lab: dist[lab])
    named: dict[str, list[int]] = {"near": [ordered[0]], "far": [ordered[-1]]}
    if len(ordered) >= 3:
        named["middle"] = ordered[1:-1]
    if name not in named:
        raise InvalidConfig(f"dataset has no {name!r} row (rows present: {sorted(named)})")
    wanted = set(named[name])
    return [i for i in range(n) if int(dataset.row_index[i]) in wanted]


def cmd_replay(args) -> int:
    from .bundle import BundleConfig
    from .markers import GroundControlPoint, georegister
    from .pipeline import PipelineConfig, run_sequence
    from .quality import completeness, gcp_error, hausdorff_one_way
    from .scenesim import import_dataset, read_ply_points

    dataset = import_dataset(args.dataset)
    img_ids = _row_selection(dataset, args.rows)
    if len(img_ids) < 2:
        raise InvalidConfig("selected row subset has fewer than 2 images")
    mode = {"standard": "standard", "multiscale": "multi-scale"}[args.ba]
    cfg = PipelineConfig(ba=BundleConfig(mode=mode, max_iters=15))
    features = [dataset.features[i] for i in img_ids]
    session = run_sequence(dataset.intrinsics, features, cfg)

    gcps = [GroundControlPoint(int(m), np.asarray(p), float(s)) for m, p, s in dataset.gcps]
    marker_obs = {i: dataset.marker_obs[i] for i in img_ids if i in dataset.marker_obs}
    report = {
        "schema": 1,
        "ba": args.ba,
        "rows": args.rows,
        "n_images": len(img_ids),
        "localized": sum(r.status == "Localized" for r in session.reports) + 2,
        "n_points": session.rmap.n_points,
        "map_hash": session.map_hash(),
        "median_integrate_ms": float(
            np.median([r.timings_ms["total"] for r in session.reports])
        )
        if session.reports
        else None,
    }
    geo = None
    try:
        geo = georegister(session.rmap, marker_obs, gcps)
        mean_mm, per_id = gcp_error(session.rmap, marker_obs, gcps)
        report["gcp_mean_error_mm"] = mean_mm
        report["gcp_per_id_mm"] = {str(k): v for k, v in sorted(per_id.items())}
    except SkysweepError as exc:
        report["gcp_mean_error_mm"] = None
        report["gcp_error_detail"] = f"{type(exc).__name__}: {exc}"

    gt_path = Path(args.dataset) / "gt_surface.ply"
    if gt_path.exists() and "gcp_mean_error_mm" in report and report["gcp_mean_error_mm"] is not None:
        gt_pts = read_ply_points(gt_path)
        pts = session.points_array()
        report["hausdorff"] = hausdorff_one_way(pts, gt_pts, tau_m=args.tau_m)
        mesh = session.mesh()
        # the surface complex keeps insertion-time (local-frame)
        # positions; bring the mesh into the registered frame
        verts = geo.transform.apply(mesh.vertices) if geo is not None else mesh.vertices
        report["completeness"] = (
            completeness(verts, mesh.faces, gt_pts, tau_m=args.tau_m) if mesh.n_faces else 0.0
        )
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({"out": args.out, "localized": report["localized"], "ba": args.ba}))
    return 0


def cmd_calibrate(args) -> int:
    import csv

    from .markers import (
        calibrate_focal,
        default_spec,
        detect_markers,
        read_pgm,
        save_calibration_report,
    )

    layout: dict[int, tuple[float, float]] = {}
    with open(args.layout, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:3]] != ["id", "x", "y"]:
            raise InvalidConfig("layout header must be id,x,y")
        for row in reader:
            layout[int(row[0])] = (float(row[1]), float(row[2]))

    spec = default_spec()
    views = []
    per_image = []
    for path in args.images:
        raster = read_pgm(path)
        detections = detect_markers(raster, spec)
        plane, pixels = [], []
        for det in detections:
            if det.marker_id in layout:
                plane.append(layout[det.marker_id])
                pixels.append(det.center)
        per_image.append({"image": str(path), "n_detections": len(detections), "n_used": len(plane)})
        if len(plane) >= 4:
            views.append((np.asarray(plane, float), np.asarray(pixels, float)))
    if len(views) < 3:
        raise InvalidConfig(f"need >=3 usable views, got {len(views)}")
    intr, rep = calibrate_focal(views, width=args.width, height=args.height)
    rep["views"] = per_image
    rep["f_px"] = intr.f_px
    save_calibration_report(args.out, rep)
    print(json.dumps({"f_px": intr.f_px, "out": args.out}))
    return 0


def cmd_evaluate(args) -> int:
    from .quality import EvalReport, hausdorff_one_way
    from .scenesim import read_ply_points

    model_pts = read_ply_points(args.model)
    gt_pts = read_ply_points(args.reference)
    from scipy.spatial import cKDTree

    hd = hausdorff_one_way(model_pts, gt_pts, tau_m=args.tau_m)
    comp = float(np.mean(cKDTree(model_pts).query(gt_pts)[0] <= args.tau_m))
    report = EvalReport(
        gcp_mean_error_mm=None,
        gcp_per_id_mm={},
        hausdorff=hd,
        completeness=comp,
    )
    report.save(args.out)
    print(json.dumps({"out": args.out, "completeness": comp}))
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(port=args.port, log_dir=args.log_dir, resume=args.resume, host=args.host)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="skysweep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", nargs="*", help="row specs distance:height:count", default=None)
    p.add_argument("--sigma-px", type=float, default=0.5)
    p.add_argument("--outlier-rate", type=float, default=0.1)
    p.add_argument("--drift-px", type=float, default=0.0)
    p.add_argument("--n-gcps", type=int, default=17)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("replay", help="headless replay of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ba", choices=["standard", "multiscale"], default="standard")
    p.add_argument("--rows", choices=["near", "middle", "far", "all"], default="all")
    p.add_argument("--tau-m", type=float, default=0.01)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("calibrate", help="focal calibration from marker views")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--layout", required=True, help="CSV id,x,y of marker centers on the plane")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", default="calibration.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="compare a model cloud to ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--tau-m", type=float, default=0.01)
    p.add_argument("--out", default="evaluation.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="start the session service")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--log-dir", default=None)
    p.add_argument("--resume", default=None, help="session log file or directory to replay")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SkysweepError as exc:
        return _fail(exc)
    except (OSError, KeyError, ValueError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
