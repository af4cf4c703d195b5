"""Command-line entry point: synth, train, render-normals, eval, bench-grad, validate."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, plots
from .field import SdfField, load_checkpoint, save_checkpoint
from .grad import GradMode
from .mesh_eval import TriMesh, evaluate_scene, marching_cubes, mean_angular_error
from .render import render_full_view
from .scene_io import Scene, SceneError, SceneMeta, load_scene, validate_scene, write_pfm, write_scene
from .scene_synth import SHAPES, SynthSpec, make_shape, synth_views
from .train import METRIC_COLUMNS, PRESETS, TrainConfig, TrainingDiverged, train

log = logging.getLogger("normalfusion")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class InputError(Exception):
    """Bad flags or unusable input files (exit code 2)."""


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return Path(path)


def write_manifest(out: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> Path:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"command": command, "version": __version__, "args": resolved}
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise InputError(f"cannot write to {out}: {e}") from None
    return out


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("resolution must look like 128x128") from None
    if h < 3 or w < 3:
        raise argparse.ArgumentTypeError("resolution must be at least 3x3")
    return h, w


def _load(scene_dir) -> Scene:
    try:
        return load_scene(scene_dir)
    except SceneError as e:
        findings = validate_scene(scene_dir)
        for f in findings:
            log.error("%s", f)
        raise InputError(f"invalid scene {scene_dir}: {e}") from None


# ----------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    if args.shape not in SHAPES:
        raise InputError(f"unknown shape {args.shape!r}; choose from {', '.join(SHAPES)}")
    out = _out_dir(args.out)
    h, w = args.res
    try:
        spec = SynthSpec(shape=make_shape(args.shape), n_views=args.views, height=h, width=w,
                         orbit_radius=args.orbit, elevation_deg=args.elevation, second_ring_deg=args.second_ring,
                         focal=args.focal * w / 128.0, noise_deg=args.noise_deg, seed=args.seed,
                         gt_mesh_resolution=args.mc_res)
    except ValueError as e:
        raise InputError(str(e)) from None
    scene = synth_views(spec)
    meta = SceneMeta(spec.bound, analytic=spec.shape.to_dict(), extra={"synthetic": True})
    write_scene(out, scene.views, meta, scene.gt_mesh)
    findings = validate_scene(out)
    for f in findings:
        log.warning("%s", f)
    write_manifest(out, "synth", args, {"findings": [str(f) for f in findings]})
    print(f"wrote {len(scene.views)} views to {out} ({len(findings)} validation findings)")
    return EXIT_OK


# ----------------------------------------------------------------------------- train


def _train_config(args) -> TrainConfig:
    base = PRESETS[args.preset]
    over = {}
    for flag, key in (("batches", "batches"), ("patches", "patches_per_batch"), ("patch", "patch_size"),
                      ("lr", "lr"), ("step_start", "step_start"), ("step_end", "step_end"), ("seed", "seed"),
                      ("center_pool", "center_pool"), ("normal_domain", "normal_domain"),
                      ("sharpness_lr_scale", "sharpness_lr_scale")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    over["deterministic"] = bool(getattr(args, "deterministic", False))
    if getattr(args, "table_log2", None) is not None or getattr(args, "finest_res", None) is not None:
        g = base.grid
        over["grid"] = replace(g, table_size_log2=args.table_log2 or g.table_size_log2,
                               finest_resolution=args.finest_res or g.finest_resolution)
    try:
        return replace(base, **over)
    except ValueError as e:
        raise InputError(str(e)) from None


def _reference(scene):
    if scene.analytic is not None:
        return scene.analytic
    return scene.gt_mesh


def _train_once(scene, cfg: TrainConfig, mode: GradMode, tag: str = ""):
    progress_every = max(cfg.batches // 10, 1)

    def sink(row):
        if row["batch"] % progress_every == 0:
            log.info("%sbatch %d loss %.5f step %.2e", tag, row["batch"], row["loss_total"], row["step_size"])

    return train(scene.views, cfg, mode, sink)


def _metric_rows(result, deterministic: bool):
    out = []
    for r in result.rows:
        r = dict(r)
        if deterministic:  # wall times vary run to run; they go to timing.csv instead
            r["fwd_ms"] = r["bwd_ms"] = ""
        out.append(r)
    return out


def cmd_train(args) -> int:
    scene = _load(args.scene)
    out = _out_dir(args.out)
    cfg = _train_config(args)
    mode = GradMode.parse(args.grad_mode)
    write_manifest(out, "train", args, {"config": cfg.to_dict()})
    try:
        result = _train_once(scene, cfg, mode)
    except TrainingDiverged as e:
        log.error("%s", e)
        if e.last_good_state is not None:
            field = SdfField(cfg.grid, cfg.hidden, cfg.init_radius, cfg.init_sharpness, cfg.seed, cfg.torch_dtype)
            field.load_state_dict(e.last_good_state)
            save_checkpoint(field, out / "last_good.nfsdf", {"train": cfg.to_dict(), "mode": mode.short})
        return EXIT_DIVERGED
    write_csv(out / "metrics.csv", _metric_rows(result, cfg.deterministic), METRIC_COLUMNS)
    write_csv(out / "timing.csv", result.rows, ["batch", "fwd_ms", "bwd_ms", "samples"])
    save_checkpoint(result.field, out / "checkpoint.nfsdf", {"train": cfg.to_dict(), "mode": mode.short})
    plots.loss_curves(result.rows, out / "loss.png", f"{mode.short} training")
    mesh = marching_cubes(result.field, args.mc_res, scene.meta.bound_radius, hierarchical=True)
    mesh.write_obj(out / "mesh.obj")
    summary = {"batches": cfg.batches, "mode": mode.short, "triangles": int(len(mesh.triangles)),
               "sdf_evals": result.counter.forward_sdf_evals, "fwd_s": result.fwd_s, "bwd_s": result.bwd_s,
               "final_sharpness": float(result.field.sharpness.detach())}
    ref = _reference(scene)
    if ref is not None and not mesh.is_empty:
        rep = evaluate_scene(mesh, ref, scene.views, args.tau, bound=scene.meta.bound_radius,
                             unit_scale=scene.meta.unit_scale)
        (out / "eval.json").write_text(rep.to_json() + "\n")
        summary.update(chamfer_l2=rep.chamfer_l2, f_score=rep.f_score)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------------- render-normals


RENDER_MODES = ("vr-dfd", "vr-ad", "vr-fd", "sr-ad")


def _parse_views(text: str | None, n: int) -> list[int]:
    if not text:
        return list(range(n))
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    bad = [v for v in out if not 0 <= v < n]
    if bad:
        raise InputError(f"view indices {bad} out of range 0..{n - 1}")
    return out


def cmd_render(args) -> int:
    if args.mode not in RENDER_MODES:
        raise InputError(f"unknown mode {args.mode!r}; choose from {', '.join(RENDER_MODES)}")
    scene = _load(args.scene)
    try:
        field = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read checkpoint: {e}") from None
    out = _out_dir(args.out)
    write_manifest(out, "render-normals", args)
    rows = []
    for k in _parse_views(args.views, len(scene.views)):
        view = scene.views[k]
        rv = render_full_view(field, view.camera, args.mode, step=args.step, bound=scene.meta.bound_radius)
        write_pfm(out / f"normal_{k:03d}.pfm", rv.normal)
        write_pfm(out / f"opacity_{k:03d}.pfm", rv.opacity)
        err = mean_angular_error(rv.normal, view.normals, view.mask)
        rows.append({"view": k, "mode": args.mode, "mean_angular_error_deg": err.mean_deg,
                     "zero_length": err.zero_length, "sdf_evals": rv.counter.forward_sdf_evals})
        plots.normal_map(rv.normal, view.mask, out / f"normal_{k:03d}.png", err.per_pixel)
    write_csv(out / "angular_error.csv", rows, list(rows[0]) if rows else ["view"])
    if rows:
        print(f"mean angular error over {len(rows)} views: "
              f"{np.mean([r['mean_angular_error_deg'] for r in rows]):.3f} deg")
    return EXIT_OK


# ----------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    scene = _load(args.scene)
    try:
        mesh = TriMesh.read(args.mesh)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read mesh: {e}") from None
    if args.gt_mesh:
        gt = TriMesh.read(args.gt_mesh)
    else:
        gt = scene.analytic
        if gt is None:
            gt = scene.gt_mesh
        if gt is None:
            raise InputError("no ground truth: pass --gt-mesh or use a scene with an analytic shape or gt_mesh.obj")
    if mesh.is_empty:
        raise InputError("mesh is empty")
    rep = evaluate_scene(mesh, gt, scene.views, args.tau, args.squared, scene.meta.bound_radius,
                         scene.meta.unit_scale)
    text = rep.to_json()
    if args.out:
        out = _out_dir(args.out)
        (out / "eval.json").write_text(text + "\n")
        write_manifest(out, "eval", args)
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------------- bench-grad


BENCH_COLUMNS = ["mode", "batches", "forward_evals", "backward_ops", "wall_ms", "fwd_ms", "bwd_ms",
                 "mean_angular_err_vs_analytic", "rendering_evals", "gradient_evals", "culled", "chamfer_l2", "f_score"]


def backward_ops(counter, mode: GradMode) -> int:
    """Per-sample backward passes through the network.

    Finite-difference modes backpropagate one first-order tape per forward
    evaluation; the analytic mode adds a second-order pass per rendering sample.
    """
    if mode.kind == "analytic":
        return 2 * counter.rendering
    return counter.forward_sdf_evals


def _mean_angular_error(field, scene, mode: GradMode, step: float, n_views: int) -> float:
    errs = []
    for view in scene.views[:n_views]:
        rv = render_full_view(field, view.camera, f"vr-{mode.short}", step=step, bound=scene.meta.bound_radius)
        errs.append(mean_angular_error(rv.normal, view.normals, view.mask).mean_deg)
    return float(np.mean(errs))


def cmd_bench(args) -> int:
    scene = _load(args.scene)
    out = _out_dir(args.out)
    cfg = _train_config(args)
    try:
        modes = [GradMode.parse(m) for m in args.modes.split(",")]
    except ValueError as e:
        raise InputError(str(e)) from None
    write_manifest(out, "bench-grad", args, {"config": cfg.to_dict()})
    ref = _reference(scene)
    summary = []
    for mode in modes:
        log.info("benchmarking %s", mode.short)
        result = _train_once(scene, cfg, mode, f"[{mode.short}] ")
        write_csv(out / f"metrics_{mode.short}.csv", _metric_rows(result, cfg.deterministic), METRIC_COLUMNS)
        mesh = marching_cubes(result.field, args.mc_res, scene.meta.bound_radius, hierarchical=True)
        mesh.write_obj(out / f"mesh_{mode.short}.obj")
        c = result.counter
        row = {"mode": mode.short, "batches": cfg.batches, "forward_evals": c.forward_sdf_evals,
               "backward_ops": backward_ops(c, mode), "wall_ms": 1e3 * (result.fwd_s + result.bwd_s),
               "fwd_ms": 1e3 * result.fwd_s, "bwd_ms": 1e3 * result.bwd_s, "mean_angular_err_vs_analytic": "",
               "rendering_evals": c.rendering, "gradient_evals": c.gradient_extra, "culled": c.culled,
               "chamfer_l2": "", "f_score": ""}
        if args.err_views > 0:
            row["mean_angular_err_vs_analytic"] = _mean_angular_error(result.field, scene, mode, cfg.step_end,
                                                                       args.err_views)
        if ref is not None and not mesh.is_empty:
            rep = evaluate_scene(mesh, ref, scene.views, args.tau, bound=scene.meta.bound_radius)
            row.update(chamfer_l2=rep.chamfer_l2, f_score=rep.f_score)
        summary.append(row)
    write_csv(out / "bench.csv", summary, BENCH_COLUMNS)
    plots.bench_bars(summary, out / "bench.png")
    for r in summary:
        print(", ".join(f"{c}={_fmt(r[c])}" for c in BENCH_COLUMNS))
    return EXIT_OK


# ----------------------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    findings = validate_scene(args.scene)
    for f in findings:
        print(f)
    if not findings:
        print("scene is valid")
    return EXIT_INPUT if any(f.severity == "error" for f in findings) else EXIT_OK


# ----------------------------------------------------------------------------- parser


def _add_train_flags(p, batches_default=None):
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="base configuration (default: desk)")
    p.add_argument("--batches", type=int, default=batches_default, help="override the preset batch count")
    p.add_argument("--patches", type=int, help="patches per batch")
    p.add_argument("--patch", type=int, help="patch side length in pixels")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--step-start", type=float, help="initial marching step")
    p.add_argument("--step-end", type=float, help="final marching step")
    p.add_argument("--table-log2", type=int, help="hash table size exponent")
    p.add_argument("--finest-res", type=int, help="finest hash-grid resolution")
    p.add_argument("--center-pool", choices=["all", "touching", "foreground"],
                   help="pixels eligible as patch centres (default: all)")
    p.add_argument("--normal-domain", choices=["all", "foreground"], help="pixels covered by the normal term")
    p.add_argument("--sharpness-lr-scale", type=float, help="learning-rate multiplier for the sharpness s")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, byte-reproducible outputs")
    p.add_argument("--mc-res", type=int, default=256, help="marching-cubes cells per axis")
    p.add_argument("--tau", type=float, default=5e-3, help="F-score threshold in scene units")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="normalfusion", description="Multi-view normal integration with neural SDFs.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic turntable scene")
    p.add_argument("--shape", default="sphere", help=f"one of {', '.join(SHAPES)}")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--res", type=_parse_res, default=(128, 128), help="HxW")
    p.add_argument("--noise-deg", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--orbit", type=float, default=3.0, help="camera distance from the origin")
    p.add_argument("--elevation", type=float, default=20.0, help="ring elevation in degrees")
    p.add_argument("--second-ring", type=float, default=None, help="elevation of an optional second ring")
    p.add_argument("--focal", type=float, default=320.0, help="focal length in pixels at width 128")
    p.add_argument("--mc-res", type=int, default=256, help="ground-truth mesh resolution")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimise an SDF against a scene")
    _add_train_flags(p)
    p.add_argument("--grad-mode", default="dfd", choices=["dfd", "fd", "ad"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render-normals", help="render normal maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--mode", default="vr-dfd", help=f"one of {', '.join(RENDER_MODES)}")
    p.add_argument("--views", default=None, help="e.g. 0,3,5-7 (default: all)")
    p.add_argument("--step", type=float, default=1e-3, help="marching step for volume rendering")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="visible-point Chamfer and F-score of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--gt-mesh", default=None)
    p.add_argument("--tau", type=float, default=5e-3)
    p.add_argument("--squared", action="store_true", help="average squared distances")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-grad", help="train once per gradient mode and compare")
    _add_train_flags(p)
    p.add_argument("--modes", default="dfd,fd,ad")
    p.add_argument("--err-views", type=int, default=2, help="views rendered for the angular-error column (0 skips)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="check a scene directory")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, SceneError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
