"""Command-line interface: ``ostvam <command> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import fileio
from .remap import OpticalConfig

SHAPE_NAMES = ("cylinder", "gyroid", "bunny", "benchy")


class UsageError(Exception):
    pass


def _config_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("optical configuration")
    g.add_argument("--config", type=Path, help="OpticalConfig JSON file")
    g.add_argument("--preset", choices=["bpagda", "dudma"], help="built-in resin preset")
    for f in fields(OpticalConfig):
        g.add_argument(_config_flag(f.name), dest=f"cfg_{f.name}", type=float, metavar="X",
                       help=f"override {f.name}")
    p.add_argument("--force", action="store_true", help="accept inputs made with a different config")


def load_config(args) -> OpticalConfig:
    if args.config is not None:
        cfg = OpticalConfig.from_json(args.config)
    elif args.preset:
        cfg = OpticalConfig.preset(args.preset)
    else:
        cfg = OpticalConfig()
    changes = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(OpticalConfig)
               if getattr(args, f"cfg_{f.name}") is not None}
    return cfg.replace(**changes) if changes else cfg


def _load_mesh(args):
    from .mesh import shape_mesh

    if args.stl is not None:
        return fileio.read_stl(args.stl)
    m = shape_mesh(args.shape)
    lo, hi = m.bounds()
    return m.transformed(offset=-(lo + hi) / 2)


def _add_mesh_source(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--stl", type=Path, help="input mesh")
    src.add_argument("--shape", choices=SHAPE_NAMES, help="built-in test part, centred")


def _pattern_options(args):
    from .projgen import PatternOptions

    return PatternOptions(dims=tuple(args.dims), spacing_mm=args.spacing, background=args.background,
                          iterations=args.iterations, angle_step_deg=args.angle_step, clip=args.clip,
                          absorption=not args.no_absorption)


def _add_pattern_args(p):
    p.add_argument("--dims", type=int, nargs=3, default=(128, 128, 96), metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, default=0.155, help="voxel pitch (mm)")
    p.add_argument("--background", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--angle-step", type=float, default=1.0)
    p.add_argument("--clip", choices=["background", "zero"], default="background")
    p.add_argument("--no-absorption", action="store_true")


# commands ---------------------------------------------------------------------


def cmd_slice(args) -> int:
    from .projgen import slice_grid_for, slice_mesh
    from .remap import vertical_magnifications

    cfg = load_config(args)
    opts = _pattern_options(args)
    stretch = vertical_magnifications(cfg)[0] if args.stretch is None else args.stretch
    vol = slice_mesh(_load_mesh(args), slice_grid_for(opts), stretch)
    fileio.write_volume_with_manifest(args.out, vol, config_hash=cfg.config_hash(), vertical_stretch=stretch)
    return 0


def cmd_projections(args) -> int:
    from .projgen import compute_patterns

    cfg = load_config(args)
    pats = compute_patterns(_load_mesh(args), cfg, _pattern_options(args))
    fileio.write_frames(args.out, pats.frames, cfg.config_hash())
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in pats.meta.items()}
    fileio.write_json(Path(args.out) / "patterns.json", {
        "angle_step_deg": pats.angle_step_deg, "vertical_prestretch": pats.vertical_prestretch, **meta,
        "row_z0_mm": pats.frames.meta["row_z0_mm"], "config": cfg.to_dict()})
    return 0


def _read_patterns(directory, cfg, force):
    from .grids import ImageStack
    from .projgen import PatternStack

    st = fileio.read_frames(directory)
    fileio.check_config_hash(st.meta.get("config_hash"), cfg.config_hash(), "pattern set", force)
    info = fileio.read_json(Path(directory) / "patterns.json")
    st = ImageStack(st.frames, st.angles_deg, st.pixel_mm, st.row_pitch_mm,
                    meta={"config_hash": st.meta.get("config_hash"), "row_z0_mm": info["row_z0_mm"]})
    meta = {"dims": tuple(info["dims"]), "spacing_mm": info["spacing_mm"]}
    return PatternStack(st, info["angle_step_deg"], info["vertical_prestretch"], meta)


def cmd_simulate(args) -> int:
    from .printsim import Schedule, SessionOptions, run_session

    cfg = load_config(args)
    mesh = _load_mesh(args)
    sched = Schedule(rotations=args.rotations, stop_rotation=args.stop_rotation)
    opts = SessionOptions(patterns=_pattern_options(args), schedule=sched, d_gel=args.d_gel,
                          ramp_width_frac=args.ramp_width, render=args.render, noise_scale=args.noise,
                          seed=args.seed)
    pats = _read_patterns(args.patterns, cfg, args.force) if args.patterns else None
    s = run_session(mesh, cfg, opts, patterns=pats)
    out = Path(args.out)
    fileio.write_frames(out / "frames", s.frames, cfg.config_hash())
    h = cfg.config_hash()
    fileio.write_volume_with_manifest(out / "dose_final.vgrd", s.dose_snapshots[-1], config_hash=h)
    fileio.write_volume_with_manifest(out / "truth_gel.vgrd",
                                      s.truth_gel[-1].with_values(s.truth_gel[-1].values.astype(np.float32)),
                                      config_hash=h)
    fileio.write_stl(out / "truth.stl", s.truth_mesh())
    fileio.write_json(out / "session.json", {
        "config": cfg.to_dict(), "config_hash": h, "d_gel": s.d_gel,
        "schedule": {"rotation_speed_deg_s": sched.rotation_speed_deg_s, "projector_fps": sched.projector_fps,
                     "camera_fps": sched.camera_fps, "rotations": sched.rotations,
                     "stop_rotation": sched.stop_rotation},
        "gel_voxels_per_rotation": [int(g.values.sum()) for g in s.truth_gel],
        "render": args.render, "seed": args.seed,
    })
    return 0


def cmd_reconstruct(args) -> int:
    from .ostrecon import reconstruct_rotations, reconstruct_volume

    cfg = load_config(args)
    frames = fileio.read_frames(args.frames)
    fileio.check_config_hash(frames.meta.get("config_hash"), cfg.config_hash(), "frame stack", args.force)
    frames.meta["config_hash"] = cfg.config_hash()
    if args.per_rotation:
        out = Path(args.out)
        for v in reconstruct_rotations(frames, cfg):
            fileio.write_volume_with_manifest(out / f"rotation_{v.rotation:03d}.vgrd", v.grid,
                                              config_hash=cfg.config_hash(), rotation=v.rotation)
        return 0
    v = reconstruct_volume(frames, cfg)
    fileio.write_volume_with_manifest(args.out, v.grid, config_hash=cfg.config_hash())
    return 0


class _SessionView:
    def __init__(self, dose, d_gel):
        self.dose_snapshots = [dose]
        self.d_gel = d_gel


def _read_recon(path, cfg, force):
    from .ostrecon import OstVolume

    info = fileio.read_volume_manifest(path)
    fileio.check_config_hash(info.get("config_hash"), cfg.config_hash(), f"volume {path}", force)
    return OstVolume(fileio.read_volume(path))


def cmd_calibrate(args) -> int:
    from .metrology import calibrate_ip

    cfg = load_config(args)
    sdir = Path(args.session)
    info = fileio.read_json(sdir / "session.json")
    fileio.check_config_hash(info.get("config_hash"), cfg.config_hash(), "session", args.force)
    session = _SessionView(fileio.read_volume(sdir / "dose_final.vgrd"), info["d_gel"])
    cal = calibrate_ip(session, _read_recon(args.volume, cfg, args.force))
    report = cal.to_dict()
    if args.out:
        fileio.write_json(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return 0


def _ip_value(args) -> float:
    if args.ip is not None:
        return args.ip
    if args.ip_file is not None:
        return float(fileio.read_json(args.ip_file)["ip_value"])
    raise UsageError("--ip or --ip-file is required")


def cmd_isosurface(args) -> int:
    from .ostrecon import extract_isosurface

    cfg = load_config(args)
    mesh = extract_isosurface(_read_recon(args.volume, cfg, args.force), _ip_value(args))
    fileio.write_stl(args.out, mesh)
    return 0


def cmd_compare(args) -> int:
    from .metrology import sdf_compare

    test = fileio.read_stl(args.mesh)
    ref = fileio.read_stl(args.against)
    rep = sdf_compare(test, ref, args.resolution)
    if args.out:
        rep.write(args.out)
    print(json.dumps(rep.summary(), sort_keys=True))
    return 0


def cmd_project_overhead(args) -> int:
    from .ostrecon import overhead_projection

    cfg = load_config(args)
    vol = _read_recon(args.volume, cfg, args.force)
    ip = _ip_value(args) if args.mode == "thresholded_sum" else None
    img = overhead_projection(vol, args.mode, ip, args.plane)
    u16, top = fileio.to_uint16(img)
    fileio.write_pgm(args.out, u16)
    fileio.write_json(Path(str(args.out) + ".json"), {"full_scale": top, "mode": args.mode, "plane": args.plane,
                                                      "ip": ip})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ostvam", description="Tomographic volumetric printing with "
                                     "optical scattering tomography feedback (simulation toolkit).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slice", help="rasterize a mesh into a binary target volume")
    _add_mesh_source(p)
    _add_pattern_args(p)
    p.add_argument("--stretch", type=float, help="vertical prestretch (default: projector magnification)")
    p.add_argument("--out", type=Path, required=True)
    add_config_args(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("projections", help="compute projector patterns")
    _add_mesh_source(p)
    _add_pattern_args(p)
    p.add_argument("--out", type=Path, required=True, help="output pattern directory")
    add_config_args(p)
    p.set_defaults(func=cmd_projections)

    p = sub.add_parser("simulate", help="simulate a print and its scatter camera")
    _add_mesh_source(p)
    _add_pattern_args(p)
    p.add_argument("--patterns", type=Path, help="use a saved pattern directory")
    p.add_argument("--rotations", type=int, default=20)
    p.add_argument("--stop-rotation", type=int, help="turn the projector off after this many rotations")
    p.add_argument("--d-gel", type=float, help="gel dose threshold (default: calibrated to the design)")
    p.add_argument("--ramp-width", type=float, default=0.05)
    p.add_argument("--render", choices=["all", "last"], default="all")
    p.add_argument("--noise", type=float, help="scaled-Poisson noise scale (default off)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="session directory")
    add_config_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="OST reconstruction from camera frames")
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--per-rotation", action="store_true", help="one volume per rotation into the --out directory")
    p.add_argument("--out", type=Path, required=True)
    add_config_args(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("calibrate", help="gelation threshold I_p from a cylinder session")
    p.add_argument("--session", type=Path, required=True)
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--out", type=Path)
    add_config_args(p)
    p.set_defaults(func=cmd_calibrate)

    for name, func, hlp in (("isosurface", cmd_isosurface, "mesh the reconstruction at I_p"),
                            ("project-overhead", cmd_project_overhead, "sum projection image")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--volume", type=Path, required=True)
        p.add_argument("--ip", type=float)
        p.add_argument("--ip-file", type=Path)
        p.add_argument("--out", type=Path, required=True)
        if name == "project-overhead":
            p.add_argument("--mode", choices=["sum", "thresholded_sum"], default="sum")
            p.add_argument("--plane", choices=["xy", "xz", "yz"], default="xy")
        add_config_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="signed distance report between two meshes")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--against", type=Path, required=True)
    p.add_argument("--resolution", type=float, default=0.155)
    p.add_argument("--out", type=Path, help="report directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except (UsageError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ostvam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"ostvam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
