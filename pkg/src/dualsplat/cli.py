"""Command-line entry point: ``dualsplat <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .core import Camera
from .data import SceneSpec, make_dataset, standard_scene_spec
from .errors import ConfigError, ContractViolation, SplatError
from .loss import normalize_uncertainty_for_viz, uncertainty_map
from .metrics import EvalReport, ab_report, cloud_fingerprint, evaluate, fingerprint
from .render import render
from .train import TrainConfig, fit, init_models, select_output_model

log = logging.getLogger("dualsplat")

MODE_FLAGS = {"dual": "dual", "baseline": "single_baseline", "learnable": "learnable_variance",
              "ensemble-k": "ensemble_k"}
RUN_FILE = "run.json"
METRICS_FILE = "metrics.jsonl"
RENDER_ORBIT_AMPLITUDE = 30.0


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


def _emit_table(header, rows) -> None:
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in r])


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    if args.scene:
        try:
            spec = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        except OSError as e:
            raise UsageError(f"--scene: {e}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"--scene: invalid JSON ({e})") from None
        except (ContractViolation, TypeError) as e:
            raise UsageError(f"--scene: {e}") from None
    else:
        spec = standard_scene_spec()
    ds = make_dataset(spec, geometry_jitter=args.jitter, color_jitter=args.color_jitter, seed=args.seed,
                      scene_seed=args.scene_seed, width=args.width, height=args.height,
                      frames_per_orbit=args.frames_per_orbit, n_heldout=args.heldout)
    fileio.save_dataset(args.out, ds)
    _emit_table(["key", "value"], [
        ("frames", len(ds)), ("heldout", len(ds.heldout)), ("points", len(ds.scene)),
        ("consistent", ds.inconsistency.consistent), ("out", str(args.out)),
    ])
    return 0


# ---------------------------------------------------------------- train

# config fields exposed as flags: flag name -> field
TRAIN_FLAGS = {
    "iters": "total_iters", "lam": "lam", "lam-s": "lam_s", "lam-l": "lam_l", "seed1": "seed1",
    "seed2": "seed2", "init-points": "init_points", "ensemble-k": "ensemble_k",
    "checkpoint-interval": "checkpoint_interval", "max-points": "max_points",
}


def effective_config(args) -> TrainConfig:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    if args.config:
        try:
            values.update(fileio.load_config(args.config, known))
        except OSError as e:
            raise UsageError(f"--config: {e}") from None
    for flag, name in TRAIN_FLAGS.items():
        v = getattr(args, flag.replace("-", "_"))
        if v is not None:
            values[name] = v
    if args.mode is not None:
        values["ablation_mode"] = MODE_FLAGS[args.mode]
    if args.no_random_bg:
        values["random_background"] = False
    return TrainConfig.from_dict(values)


def _write_outputs(out: Path, state, ds, last_u) -> None:
    k, _ = select_output_model(state, ds)
    names = []
    for i in range(state.n_models):
        name = f"model{i + 1}.ply"
        fileio.save_cloud(out / name, state.cloud(i))
        names.append(name)
    (out / "selected.json").write_text(json.dumps({"selected": names[k], "index": k}) + "\n")
    if last_u is not None:
        fileio.save_image(out / "uncertainty_final.png", normalize_uncertainty_for_viz(last_u))


def cmd_train(args) -> int:
    out = Path(args.out)
    ds = fileio.load_dataset(args.data)
    if args.resume:
        its = fileio.list_checkpoints(out)
        if not its:
            raise SplatError(f"--resume: no checkpoints in {out / 'checkpoints'}")
        state, cfg_dict = fileio.load_checkpoint(fileio.checkpoint_path(out, its[-1]))
        config = TrainConfig.from_dict(cfg_dict)
        fileio.truncate_metrics(out / METRICS_FILE, state.iteration)
        log.info("resuming from iteration %d", state.iteration)
    else:
        config = effective_config(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_FILE).unlink(missing_ok=True)
        state = init_models(config, ds)
    fileio.save_config(out / "config.txt", config.to_dict())
    (out / RUN_FILE).write_text(json.dumps({"data": str(Path(args.data).resolve()),
                                            "mode": config.ablation_mode}) + "\n")
    last = {"u": None}
    metrics_path = out / METRICS_FILE

    def on_step(rec, res):
        fileio.append_metrics(metrics_path, rec)
        last["u"] = res.uncertainty
        if args.verbose and rec.iteration % 100 == 0:
            log.info("iter %d loss %.5f points %s", rec.iteration, rec.loss["total"], rec.points)

    def on_checkpoint(st):
        fileio.save_checkpoint(out, st, config.to_dict())

    if state.iteration == 0:
        on_checkpoint(state)
    fit(state, ds, config, on_step=on_step, on_checkpoint=on_checkpoint)
    if state.iteration % config.checkpoint_interval:
        on_checkpoint(state)
    _write_outputs(out, state, ds, last["u"])
    records = fileio.read_metrics(metrics_path)
    if records:
        from .plotting import plot_training
        plot_training(records, out / "training.png")
    final = records[-1] if records else {"loss": {}, "points": state.point_counts()}
    _emit_table(["key", "value"], [
        ("iterations", state.iteration), ("mode", config.ablation_mode),
        ("final_loss", float(final["loss"].get("total", math.nan))),
        ("points", " ".join(str(p) for p in state.point_counts())), ("out", str(out)),
    ])
    return 0


# ---------------------------------------------------------------- render

def cmd_render(args) -> int:
    try:
        cloud = fileio.load_cloud(args.model)
    except OSError as e:
        raise SplatError(f"cannot read model: {e}") from None
    bg = tuple(args.background)
    mk = dict(radius=args.radius, fov_y=args.fov, width=args.width, height=args.height)
    out = Path(args.out)
    if args.orbit:
        cams = [Camera(360.0 * k / args.orbit,
                       RENDER_ORBIT_AMPLITUDE * math.sin(math.radians(360.0 * k / args.orbit)), **mk)
                for k in range(args.orbit)]
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for k, cam in enumerate(cams):
            path = out / f"frame_{k:03d}.png"
            fileio.save_image(path, render(cloud, cam, bg).image)
            rows.append((k, cam.azimuth, cam.elevation, str(path)))
    else:
        cam = Camera(args.azimuth, args.elevation, **mk)
        if out.suffix.lower() != ".png":
            out = out / "view.png"
        fileio.save_image(out, render(cloud, cam, bg).image)
        rows = [(0, cam.azimuth, cam.elevation, str(out))]
    _emit_table(["frame", "azimuth", "elevation", "path"], rows)
    return 0


# ---------------------------------------------------------------- eval / ab

def _report_paths(out: Path) -> tuple[Path, Path]:
    out.parent.mkdir(parents=True, exist_ok=True)
    return out, out.with_suffix(".png")


def _write_report(path: Path, report) -> None:
    path.unlink(missing_ok=True)
    fileio.append_metrics(path, report)


def _eval_model(model_path, data_dir) -> EvalReport:
    try:
        model = fileio.load_cloud(model_path)
    except OSError as e:
        raise SplatError(f"cannot read model: {e}") from None
    ds = fileio.load_dataset(data_dir)
    if ds.scene is None:
        raise SplatError(f"{data_dir}: dataset has no ground-truth scene")
    if not ds.heldout:
        raise SplatError(f"{data_dir}: dataset has no held-out cameras")
    manifest = json.loads((Path(data_dir) / fileio.MANIFEST).read_text())
    return evaluate(model, ds.scene, ds.heldout, config_fingerprint=cloud_fingerprint(model),
                    dataset_fingerprint=fingerprint(manifest))


def cmd_eval(args) -> int:
    report = _eval_model(args.model, args.data)
    path, fig = _report_paths(Path(args.out))
    _write_report(path, report)
    from .plotting import plot_eval
    plot_eval(report, fig)
    rows = [(i, c["azimuth"], c["elevation"], p, s)
            for i, (c, p, s) in enumerate(zip(report.cameras, report.psnr, report.ssim))]
    rows.append(("mean", "", "", report.psnr_mean, report.ssim_mean))
    rows.append(("std", "", "", report.psnr_std, report.ssim_std))
    _emit_table(["view", "azimuth", "elevation", "psnr", "ssim"], rows)
    return 0


def _run_report(run_dir) -> EvalReport:
    run = Path(run_dir)
    try:
        meta = json.loads((run / RUN_FILE).read_text())
        sel = json.loads((run / "selected.json").read_text())["selected"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise SplatError(f"{run}: not a finished training run ({e})") from None
    return _eval_model(run / sel, meta["data"])


def cmd_ab(args) -> int:
    if len(args.run_a) != len(args.run_b):
        raise UsageError("--run-a and --run-b need the same number of runs")
    ra = [_run_report(r) for r in args.run_a]
    rb = [_run_report(r) for r in args.run_b]
    try:
        ab = ab_report(ra, rb)
    except ContractViolation as e:
        raise UsageError(str(e)) from None
    path, fig = _report_paths(Path(args.out))
    _write_report(path, ab)
    from .plotting import plot_ab
    plot_ab(ab, fig)
    _emit_table(["metric", "a", "b", "delta"], [
        ("ssim", ab.mean_ssim_a, ab.mean_ssim_b, ab.mean_ssim_delta),
        ("psnr", float(np.mean([r.psnr_mean for r in ra])), float(np.mean([r.psnr_mean for r in rb])),
         ab.mean_psnr_delta),
    ])
    _emit_table(["wins", "losses", "ties", "p_value"], [(ab.wins, ab.losses, ab.ties, ab.p_value)])
    return 0


# ---------------------------------------------------------------- uncert-viz

def _training_camera(run: Path, view: int) -> Camera:
    try:
        meta = json.loads((run / RUN_FILE).read_text())
        manifest = json.loads((Path(meta["data"]) / fileio.MANIFEST).read_text())
        entries = manifest["frames"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise SplatError(f"{run}: cannot locate the training dataset ({e})") from None
    if not 0 <= view < len(entries):
        raise UsageError(f"--view must be in [0, {len(entries)})")
    return Camera(**entries[view]["camera"])


def cmd_uncert_viz(args) -> int:
    run = Path(args.run)
    its = fileio.list_checkpoints(run)
    if args.iter not in its:
        if not its:
            raise SplatError(f"no checkpoints in {run / 'checkpoints'}")
        nearest = min(its, key=lambda i: (abs(i - args.iter), i))
        raise SplatError(f"no checkpoint at iteration {args.iter}; nearest available is {nearest}")
    state, _ = fileio.load_checkpoint(fileio.checkpoint_path(run, args.iter))
    if state.n_models < 2:
        raise SplatError("uncertainty maps need a run with at least two models")
    cam = _training_camera(run, args.view)
    white = (1.0, 1.0, 1.0)
    u = uncertainty_map(render(state.cloud(0), cam, white).image, render(state.cloud(1), cam, white).image)
    norm = normalize_uncertainty_for_viz(u)
    fileio.save_image(args.out, norm)
    _emit_table(["key", "value"], [("iteration", args.iter), ("view", args.view),
                                   ("u_max", float(u.max())), ("u_mean", float(u.mean())),
                                   ("out", str(args.out))])
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="dualsplat", description="Dual-model uncertainty-aware Gaussian splatting.",
                                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="<command>")

    g = sub.add_parser("gen-data", help="synthesize a pseudo-label dataset", formatter_class=fmt)
    g.add_argument("--scene", help="scene spec JSON (built-in sphere + box when omitted)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--jitter", type=float, default=0.02, help="per-view Gaussian position noise std")
    g.add_argument("--color-jitter", type=float, default=0.0, help="per-view Gaussian color noise std")
    g.add_argument("--seed", type=int, default=0, help="perturbation seed")
    g.add_argument("--scene-seed", type=int, default=0, help="scene sampling seed")
    g.add_argument("--frames-per-orbit", type=int, default=21, help="frames in each of the three orbits")
    g.add_argument("--width", type=int, default=64, help="image width")
    g.add_argument("--height", type=int, default=64, help="image height")
    g.add_argument("--heldout", type=int, default=36, help="held-out evaluation views")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset", formatter_class=argparse.HelpFormatter)
    d = TrainConfig()
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="key = value config file (flags override it)")
    t.add_argument("--mode", choices=list(MODE_FLAGS), default=None,
                   help="training mode (default: dual)")
    t.add_argument("--no-random-bg", action="store_true", help="train on a white background (default: off)")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for flag, name in TRAIN_FLAGS.items():
        typ = int if "int" in str(types[name]) else float
        t.add_argument(f"--{flag}", type=typ, default=None,
                       help=f"override {name} (default: {getattr(d, name)})")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a trained cloud", formatter_class=fmt)
    r.add_argument("--model", required=True, help="PLY file")
    r.add_argument("--azimuth", type=float, default=0.0, help="degrees")
    r.add_argument("--elevation", type=float, default=0.0, help="degrees")
    r.add_argument("--orbit", type=int, default=0,
                   help="render N frames with 30 degree sinusoidal elevation instead of one view")
    r.add_argument("--out", required=True, help="PNG path (single view) or directory (orbit)")
    r.add_argument("--radius", type=float, default=4.0, help="camera distance")
    r.add_argument("--fov", type=float, default=33.8, help="vertical field of view, degrees")
    r.add_argument("--width", type=int, default=64, help="image width")
    r.add_argument("--height", type=int, default=64, help="image height")
    r.add_argument("--background", type=float, nargs=3, default=[1.0, 1.0, 1.0], help="RGB in [0, 1]")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a cloud on held-out views", formatter_class=fmt)
    e.add_argument("--model", required=True, help="PLY file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", required=True, help="report path (JSON lines); a .png figure is written beside it")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ab", help="compare two sets of training runs", formatter_class=fmt)
    a.add_argument("--run-a", nargs="+", required=True, help="run directories (e.g. one per seed)")
    a.add_argument("--run-b", nargs="+", required=True, help="paired run directories")
    a.add_argument("--out", required=True, help="report path (JSON lines); a .png figure is written beside it")
    a.set_defaults(func=cmd_ab)

    u = sub.add_parser("uncert-viz", help="uncertainty map from a checkpoint", formatter_class=fmt)
    u.add_argument("--run", required=True, help="run directory")
    u.add_argument("--iter", type=int, required=True, help="checkpoint iteration")
    u.add_argument("--view", type=int, default=0, help="training view index")
    u.add_argument("--out", required=True, help="grayscale PNG path")
    u.set_defaults(func=cmd_uncert_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractViolation) as e:
        print(f"dualsplat {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (SplatError, OSError) as e:
        print(f"dualsplat {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
