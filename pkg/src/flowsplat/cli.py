"""Command-line interface.

Subcommands: ``synth`` (generate a scene bundle), ``run`` (full pipeline),
``eval`` (metrics between trajectories / image sets), ``ablate`` (variant
table), ``render`` (novel view of a saved map). Exit codes: 0 success,
1 input error, 2 solver stall.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


def _build_parser():
    p = argparse.ArgumentParser(prog="flowsplat")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("--output", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--size", default="64x64", help="WIDTHxHEIGHT")
    s.add_argument("--noise", type=float, default=0.0, help="flow noise sigma (px)")
    s.add_argument("--outliers", type=float, default=0.0, help="outlier flow fraction")
    s.add_argument("--uniform-weights", action="store_true",
                   help="uniform confidence weights instead of oracle weights")

    r = sub.add_parser("run", help="run the full pipeline")
    r.add_argument("--config", default=None, help="key-value config file")
    r.add_argument("--input", required=True,
                   help="scene bundle directory, or 'synthetic'")
    r.add_argument("--output", required=True)
    r.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="metrics between trajectories/image sets")
    e.add_argument("--est-traj", default=None)
    e.add_argument("--gt-traj", default=None)
    e.add_argument("--rendered", default=None, help="directory of rendered images")
    e.add_argument("--target", default=None, help="directory of target images")

    a = sub.add_parser("ablate", help="run the five-variant ablation")
    a.add_argument("--output", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--frames", type=int, default=12)
    a.add_argument("--size", default="64x64")

    v = sub.add_parser("render", help="render a saved map from a pose")
    v.add_argument("--map", required=True)
    v.add_argument("--pose", required=True,
                   help="'tx ty tz qx qy qz qw' (world-from-camera)")
    v.add_argument("--output", required=True)
    v.add_argument("--meta", required=True,
                   help="bundle meta.cfg with the camera intrinsics")
    v.add_argument("--background", default="0,0,0")
    return p


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ValueError(f"bad --size {text!r}, expected WIDTHxHEIGHT") from None


def _cmd_synth(args):
    from .pipeline import write_scene_bundle

    w, h = _parse_size(args.size)
    out = write_scene_bundle(
        args.output, width=w, height=h, n_frames=args.frames, seed=args.seed,
        noise_sigma=args.noise, outlier_frac=args.outliers,
        oracle_weights=not args.uniform_weights,
    )
    print(f"wrote scene bundle to {out}")
    return 0


def _cmd_run(args):
    from .fileio import load_config_text
    from .pipeline import DirectoryInput, PipelineConfig, SyntheticInput, run_pipeline

    if args.config:
        config = PipelineConfig.from_dict(load_config_text(args.config))
    else:
        config = PipelineConfig()
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    if args.input == "synthetic":
        source = SyntheticInput(seed=config.seed)
    else:
        source = DirectoryInput(args.input)
    metrics = run_pipeline(config, source, output_dir=args.output)
    sys.stdout.write(metrics.report_text())
    return 0


def _cmd_eval(args):
    from .fileio import load_image, load_tum_trajectory
    from .metrics import ate_rmse, image_metrics

    printed = False
    if args.est_traj and args.gt_traj:
        est = load_tum_trajectory(args.est_traj)
        gt = load_tum_trajectory(args.gt_traj)
        gt_by_ts = {round(ts, 6): pose for ts, pose in gt}
        pairs = [(pose.t, gt_by_ts[round(ts, 6)].t)
                 for ts, pose in est if round(ts, 6) in gt_by_ts]
        if len(pairs) < 3:
            raise ValueError("fewer than 3 associated poses between trajectories")
        est_p = np.array([a for a, _ in pairs])
        gt_p = np.array([b for _, b in pairs])
        rmse, std = ate_rmse(est_p, gt_p)
        print(f"ate_rmse {rmse:.12g}")
        print(f"ate_std {std:.12g}")
        printed = True
    if args.rendered and args.target:
        rdir = sorted(Path(args.rendered).iterdir())
        tdir = sorted(Path(args.target).iterdir())
        if len(rdir) != len(tdir) or not rdir:
            raise ValueError("rendered/target image counts differ or are empty")
        ps, ss, ms = [], [], []
        for rf, tf in zip(rdir, tdir):
            p, s, m = image_metrics(load_image(rf), load_image(tf))
            ps.append(p)
            ss.append(s)
            ms.append(m)
        print(f"psnr {np.mean(ps):.12g}")
        print(f"ssim {np.mean(ss):.12g}")
        print(f"ms_ssim {np.mean(ms):.12g}")
        printed = True
    if not printed:
        raise ValueError("eval needs --est-traj/--gt-traj and/or --rendered/--target")
    return 0


def _cmd_ablate(args):
    from .pipeline import SyntheticInput, ablation_bench_config, run_ablation

    w, h = _parse_size(args.size)
    cfg = ablation_bench_config(seed=args.seed)
    factory = lambda: SyntheticInput(w, h, n_frames=args.frames, seed=args.seed)
    _, table, ok = run_ablation(cfg, factory, output_dir=args.output)
    sys.stdout.write(table)
    return 0 if ok else 1


def _cmd_render(args):
    from .fileio import import_map, load_config_text, save_image
    from .geometry import Intrinsics, Pose
    from .rasterizer import render

    meta = load_config_text(args.meta)
    K = Intrinsics(
        fx=float(meta["fx"]), fy=float(meta["fy"]),
        cx=float(meta["cx"]), cy=float(meta["cy"]),
        width=int(meta["width"]), height=int(meta["height"]),
    )
    vals = [float(x) for x in args.pose.split()]
    if len(vals) != 7:
        raise ValueError("--pose needs 7 numbers: tx ty tz qx qy qz qw")
    tx, ty, tz, qx, qy, qz, qw = vals
    world_from_cam = Pose((qw, qx, qy, qz), (tx, ty, tz))
    bg = tuple(float(x) for x in args.background.split(","))
    arrays = import_map(args.map)
    out = render(arrays, world_from_cam.inverse(), K, background=bg)
    save_image(args.output, out.color, bits=16 if args.output.endswith(".ppm") else 8)
    print(f"wrote {args.output}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "run": _cmd_run,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "render": _cmd_render,
    }
    from .fileio import FileFormatError
    from .losses import LossInputError
    from .metrics import MetricInputError
    from .tracking import SolverStallError

    try:
        return handlers[args.command](args)
    except SolverStallError as e:
        print(f"solver stall: {e}", file=sys.stderr)
        return 2
    except (FileFormatError, LossInputError, MetricInputError, ValueError,
            FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
