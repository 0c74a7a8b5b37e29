"""Command line entry point.

    scenediff --reference ref.ply --rescan rescan.ply --poses poses.txt \
              [--gt gt/] [--config cfg.toml] [--mode full] [--out-dir out/]
    scenediff synth single_move out/
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .exceptions import SceneDiffError
from .pipeline import MODES, PipelineConfig, run, write_poses

log = logging.getLogger("scenediff")

# (label, evaluation key, scale, format)
_COLUMNS = [
    ("IoU%", "mean_iou", 100.0, "{:8.2f}"),
    ("Recall%", "voxel_recall", 100.0, "{:8.2f}"),
    ("Acc%", "accuracy", 100.0, "{:8.2f}"),
    ("Comp%", "completeness", 100.0, "{:8.2f}"),
    ("R@10", "transform_recall_10", 100.0, "{:8.2f}"),
    ("R@20", "transform_recall_20", 100.0, "{:8.2f}"),
    ("MRE", "mre_deg", 1.0, "{:8.3f}"),
    ("MTE", "mte_m", 1.0, "{:8.4f}"),
]


def format_table(report) -> str:
    """Fixed-width metrics table; missing values print as n/a."""
    ev = report.evaluation
    lines = []
    if ev is not None:
        lines.append(f"{'mode':<16}" + "".join(f"{c[0]:>8}" for c in _COLUMNS))
        row = f"{report.config['mode']:<16}"
        for _, key, scale, fmt in _COLUMNS:
            v = ev.get(key)
            row += f"{'n/a':>8}" if v is None else fmt.format(v * scale)
        lines.append(row)
        lines.append(f"discovered {ev['discovered_count']}/{ev['gt_object_count']} gt objects")
    lines.append(f"{len(report.objects)} objects, {len(report.hypotheses)} motion hypotheses")
    for i, obj in enumerate(report.objects):
        t = obj.get("transform_id")
        lines.append(f"  object {i:3d}  voxels {obj['voxel_count']:6d}  "
                     f"transform {'-' if t is None else t}")
    return "\n".join(lines)


def _run_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scenediff",
        description="Discover changed objects between two aligned scans. "
                    "Use 'scenediff synth NAME OUT_DIR' to write a synthetic scene.")
    p.add_argument("--reference", required=True, help="reference scan mesh (PLY)")
    p.add_argument("--rescan", required=True, help="rescan mesh (PLY)")
    p.add_argument("--poses", required=True, help="pose file for the rendering viewpoints")
    p.add_argument("--gt", help="ground-truth directory (gt_changed.ply, gt_transforms.json)")
    p.add_argument("--config", help="TOML file of key = value settings")
    p.add_argument("--mode", choices=MODES, help="override the configured mode")
    p.add_argument("--out-dir", help="write report.json, timings.json and changed.ply here")
    p.add_argument("--seed", type=int, help="RANSAC seed")
    p.add_argument("--dump-debug", action="store_true",
                   help="also write depth maps, masks and supervoxel PLYs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _synth_parser() -> argparse.ArgumentParser:
    from .synth import SCENES

    p = argparse.ArgumentParser(prog="scenediff synth",
                                description="Write a synthetic scan pair in the input layout.")
    p.add_argument("scene", choices=sorted(SCENES))
    p.add_argument("out_dir")
    p.add_argument("--viewpoints", type=int, default=12)
    p.add_argument("--density", type=float, default=400.0, help="samples per square meter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--misalign-deg", type=float, default=0.0,
                   help="rotate the rescan by this much about a random axis")
    p.add_argument("--misalign-m", type=float, default=0.0,
                   help="shift the rescan by this much in a random direction")
    return p


def synth_main(argv) -> int:
    from . import synth
    from .ply import write_mesh

    args = _synth_parser().parse_args(argv)
    spec = synth.SCENES[args.scene](seed=args.seed)
    if args.misalign_deg or args.misalign_m:
        spec = synth.with_misalignment(spec, args.misalign_deg, args.misalign_m)
    ref, res, poses, gt = synth.generate(spec, args.density, args.viewpoints)
    os.makedirs(args.out_dir, exist_ok=True)
    write_mesh(os.path.join(args.out_dir, "reference.ply"), ref)
    write_mesh(os.path.join(args.out_dir, "rescan.ply"), res)
    write_poses(os.path.join(args.out_dir, "poses.txt"), poses)
    synth.write_ground_truth(gt, os.path.join(args.out_dir, "gt"))
    print(f"wrote {args.scene} scene to {args.out_dir}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if argv and argv[0] == "synth":
            return synth_main(argv[1:])
        args = _run_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        overrides = {}
        if args.mode:
            overrides["mode"] = args.mode
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            config = config.replace(**overrides)
        report = run(args.reference, args.rescan, args.poses, config, gt=args.gt,
                     out_dir=args.out_dir, dump_debug=args.dump_debug)
        log.info("timings: %s", {k: round(v, 2) for k, v in report.timings.items()})
    except (SceneDiffError, OSError, ValueError) as exc:
        print(f"scenediff: error: {exc}", file=sys.stderr)
        return 2
    print(format_table(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
