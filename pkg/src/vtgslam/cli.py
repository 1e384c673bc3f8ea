"""Command-line interface: ``vtgslam {run,eval,synth,render,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 tracking diverged on at least one frame, 4 gradient check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .config import DatasetConfig, load_config, write_config
from .core import CameraIntrinsics, ConfigurationError, DataError, InvalidInputError, Pose

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 4

log = logging.getLogger("vtgslam")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run(sub):
    p = sub.add_parser("run", help="run SLAM on a dataset")
    p.add_argument("--dataset", required=True, help="dataset root directory")
    p.add_argument("--layout", choices=["tum", "replica_like", "synthetic"], default=None)
    p.add_argument("--config", help="config file (INI); defaults to the preset")
    p.add_argument("--preset", help="hyperparameter preset (replica, tum, scannet, scannetpp, synthetic)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--no-eval", action="store_true", help="skip the evaluation report")


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layout", choices=["tum", "replica_like", "synthetic"], default=None)
    p.add_argument("--every", type=int, default=None)


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic RGB-D sequence in TUM layout")
    p.add_argument("--output", required=True)
    p.add_argument("--trajectory", choices=["orbit", "loop", "corridor"], default="orbit")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--seed", type=int, default=0, help="texture seed")
    p.add_argument("--noise-fraction", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)


def _add_render(sub):
    p = sub.add_parser("render", help="render stored sections from a pose and write PNGs")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--section", type=int, action="append", required=True, help="section id (repeatable)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--frame", type=int, help="render from this frame's estimated pose")
    g.add_argument("--pose", nargs=7, type=float, metavar=("TX", "TY", "TZ", "QX", "QY", "QZ", "QW"))
    p.add_argument("--output", required=True, help="output path prefix")


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtgslam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for add in (_add_run, _add_eval, _add_synth, _add_render, _add_gradcheck):
        add(sub)
    return parser


# ---------------------------------------------------------------------------
# Run directory helpers


def _write_intrinsics(path: Path, intr: CameraIntrinsics) -> None:
    path.write_text(
        f"fx={float(intr.fx)!r}\nfy={float(intr.fy)!r}\ncx={float(intr.cx)!r}\ncy={float(intr.cy)!r}\n"
        f"width={intr.width}\nheight={intr.height}\ndepth_scale={float(intr.depth_scale)!r}\n"
    )


def _read_intrinsics(path: Path) -> CameraIntrinsics:
    from .datasets import _read_intrinsics_file

    if not path.exists():
        raise DataError(f"{path} not found")
    v = _read_intrinsics_file(path)
    try:
        return CameraIntrinsics(v["fx"], v["fy"], v["cx"], v["cy"], int(v["width"]), int(v["height"]),
                                v.get("depth_scale", 5000.0))
    except KeyError as exc:
        raise DataError(f"{path}: missing {exc}") from None


def _open_dataset(root: str, layout: Optional[str], ds_cfg: DatasetConfig):
    from .datasets import load_dataset

    layout = layout or ds_cfg.layout
    overrides = {k: getattr(ds_cfg, k) for k in ("fx", "fy", "cx", "cy", "width", "height")
                 if getattr(ds_cfg, k) is not None}
    return load_dataset(root, layout, overrides or None, ds_cfg.depth_scale)


def _load_run(run_dir: Path):
    """Config, intrinsics, estimated poses and section index of a finished run."""
    from .datasets import parse_trajectory
    from .storage import read_section

    cfg, ds_cfg = load_config(run_dir / "config.ini")
    intr = _read_intrinsics(run_dir / "intrinsics.txt")
    stamps, poses = parse_trajectory(run_dir / "trajectory.txt")
    sections = {}
    for f in sorted((run_dir / "sections").glob("section_*.vtgs")):
        s = read_section(f)
        sections[s.id] = s
    if not sections:
        raise DataError(f"no sections stored in {run_dir / 'sections'}")
    return cfg, ds_cfg, intr, stamps, poses, sections


# ---------------------------------------------------------------------------
# Commands


def cmd_run(args) -> int:
    from .evaluation import evaluate_system, per_frame_table, write_report
    from .pipeline import SlamSystem, write_trajectory
    from .config import config_items

    cfg, ds_cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.layout:
        ds_cfg.layout = args.layout
    dataset = _open_dataset(args.dataset, args.layout, ds_cfg)
    limit = args.max_frames or ds_cfg.max_frames
    if limit:
        dataset = dataset.truncated(limit)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.ini", ds_cfg)
    _write_intrinsics(out / "intrinsics.txt", dataset.intr)

    t0 = time.perf_counter()
    system = SlamSystem(dataset.intr, cfg, offload_dir=out / "offload", log_path=out / "run.log")
    try:
        for frame in dataset.frames():
            rec = system.process_frame(frame)
            log.info("frame %d (%s, section %d) coverage %.3f", rec.index, rec.kind, rec.section_id, rec.coverage)
        system.finish()
        write_trajectory(out / "trajectory.txt", system.timestamps, system.poses)
        system.save_sections(out / "sections")
        if not args.no_eval:
            report = evaluate_system(system, dataset.frames(), dataset.ground_truth)
            write_report(report, out / "report.txt", config_items(cfg), out / "timing.txt")
            (out / "per_frame.tsv").write_text(per_frame_table(report.frames))
            print(f"ATE {report.ate_rmse_cm:.3f} cm  PSNR {report.psnr_db:.2f} dB  "
                  f"frames {system.n_frames}  time {time.perf_counter() - t0:.1f} s")
    finally:
        system.registry.close()
    if system.diverged_frames:
        print(f"tracking diverged on frames {system.diverged_frames}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import config_items
    from .evaluation import ate_rmse, evaluate_frames, per_frame_table, summarize, UNDEFINED, write_report

    run_dir = Path(args.run_dir)
    cfg, ds_cfg, intr, _, poses, sections = _load_run(run_dir)
    dataset = _open_dataset(args.dataset, args.layout, ds_cfg).truncated(len(poses))
    if len(dataset) != len(poses):
        raise DataError(f"run has {len(poses)} poses but the dataset {len(dataset)} frames")
    n = cfg.section_length
    every = args.every or cfg.eval_every
    per_frame = evaluate_frames(dataset.frames(), poses, lambda i: sections[i // n], sections.__getitem__,
                                intr, every)
    gt = dataset.ground_truth
    ate = ate_rmse(poses, gt) if gt is not None and len(poses) >= 2 else UNDEFINED
    total = sum(len(s.gaussians) for s in sections.values())
    peak = _peak_from_log(run_dir)
    report = summarize(per_frame, ate, total, peak)
    write_report(report, run_dir / "report.txt", config_items(cfg))
    (run_dir / "per_frame.tsv").write_text(per_frame_table(per_frame))
    print((run_dir / "report.txt").read_text(), end="")
    return EXIT_OK


def _peak_from_log(run_dir: Path) -> int:
    """Peak resident count recorded by ``run``; 0 when the run kept no report."""
    from .evaluation import read_report

    f = run_dir / "report.txt"
    if f.exists():
        value = read_report(f).get("max_resident_gaussians")
        if value is not None and value.isdigit():
            return int(value)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import preset_sequence, write_synthetic

    spec = preset_sequence(args.trajectory, args.frames, args.size, args.seed)
    spec.noise_fraction = args.noise_fraction
    spec.noise_sigma = args.noise_sigma
    frames, _, intr = write_synthetic(args.output, spec)
    print(f"wrote {len(frames)} frames of {intr.width}x{intr.height} to {args.output}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .renderer import render_view, save_render_png

    run_dir = Path(args.run_dir)
    _, _, intr, _, poses, sections = _load_run(run_dir)
    missing = [s for s in args.section if s not in sections]
    if missing:
        raise DataError(f"sections {missing} not found in {run_dir}")
    if args.frame is not None:
        if not 0 <= args.frame < len(poses):
            raise InvalidInputError(f"frame {args.frame} outside the trajectory (0..{len(poses) - 1})")
        pose = poses[args.frame]
    else:
        pose = Pose.from_tum(*args.pose)
    out, _, _ = render_view([sections[s].gaussians for s in args.section], poses, pose, intr)
    for p in save_render_png(out, args.output, intr):
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradients import run_gradcheck

    t0 = time.perf_counter()
    res = run_gradcheck(args.scenes, args.seed)
    print(f"checked {sum(res.checked.values())} parameters over {args.scenes} scenes, skipped {res.skipped} at boundaries")
    for family, err in sorted(res.max_rel_error.items()):
        print(f"  {family:8s} max relative error {err:.3e}")
    print(f"time {time.perf_counter() - t0:.1f} s")
    if not res.ok:
        for f in res.failures[:20]:
            print("  FAIL", f)
        return EXIT_CHECK_FAILED
    return EXIT_OK


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "synth": cmd_synth, "render": cmd_render, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
