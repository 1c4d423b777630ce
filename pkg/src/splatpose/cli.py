"""Command-line entry point: render, refine, gradcheck, synth, eval.

Conventions shared by every subcommand:

  * exit 0 on success, 1 on domain errors (unreadable or unparsable inputs,
    empty masks, missing depth), 2 on usage errors (unknown flags, bad
    values); domain error messages always name the offending path;
  * structured outputs are JSON with sorted keys, written atomically
    (temp file in the target directory, then rename), so identical inputs
    and seeds reproduce byte-identical files and partial files are never
    observed;
  * images are 8-bit RGB PNG; depth maps are 16-bit grayscale PNG in
    millimeters with 0 marking invalid pixels (--depth-scale adjusts the
    meters-per-scene-unit convention);
  * wall-clock fields are withheld from reports unless --timings is given,
    keeping default outputs a pure function of the inputs.
"""

from __future__ import annotations

import io
import json
import os
import sys
import tempfile
from importlib import metadata

import click
import numpy as np
from PIL import Image

from .errors import SplatPoseError
from .gradcheck import run_gradcheck
from .harness import SceneSpec, make_scene_camera, make_synthetic_cloud, run_recovery_experiment
from .lie import Pose
from .model import GaussianCloud, load_ply, save_ply
from .refine import RefineConfig, refine
from .render import CameraIntrinsics, render

try:
    VERSION = metadata.version("splatpose")
except metadata.PackageNotFoundError:  # running from a source tree
    VERSION = "0.0.0+unpackaged"

MM_PER_UNIT = 1000.0  # default: scene units are meters
DEPTH_MAX = 65535


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _verbose(ctx, message):
    if ctx.obj.get("verbose"):
        click.echo(message, err=True)


def _write_atomic(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _write_atomic(path, text.encode())


def _write_color_png(path, image):
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    _write_atomic(path, buf.getvalue())


def _write_depth_png(path, depth_units, depth_scale):
    mm = np.round(np.clip(depth_units, 0.0, None) * MM_PER_UNIT * depth_scale)
    arr = np.ascontiguousarray(np.clip(mm, 0, DEPTH_MAX).astype("<u2"))
    h, w = arr.shape
    buf = io.BytesIO()
    Image.frombytes("I;16", (w, h), arr.tobytes()).save(buf, format="PNG")
    _write_atomic(path, buf.getvalue())


def _load(kind, path, loader):
    """Read one input file, translating failures into named domain errors."""
    try:
        return loader(path)
    except FileNotFoundError:
        _fail(f"{kind} file not found: {path}")
    except IsADirectoryError:
        _fail(f"{kind} path is a directory: {path}")
    except json.JSONDecodeError as exc:
        _fail(f"cannot parse {kind} file {path}: {exc}")
    except (SplatPoseError, ValueError, KeyError, OSError) as exc:
        _fail(f"cannot read {kind} file {path}: {exc}")


def _read_model(path) -> GaussianCloud:
    return _load("model", path, load_ply)


def _read_image(path):
    def loader(p):
        with Image.open(p) as img:
            return np.asarray(img.convert("RGB"), dtype=float) / 255.0

    return _load("image", path, loader)


def _read_mask(path):
    def loader(p):
        with Image.open(p) as img:
            return np.asarray(img.convert("L")) > 0

    return _load("mask", path, loader)


def _read_depth(path, depth_scale):
    def loader(p):
        with Image.open(p) as img:
            raw = np.asarray(img, dtype=float)
        if raw.ndim != 2:
            raise ValueError("depth PNG must be single-channel")
        return raw / (MM_PER_UNIT * depth_scale)

    return _load("depth", path, loader)


@click.group()
@click.option("--seed", type=int, default=None,
              help="Override the seed carried by input files.")
@click.option("--jobs", type=int, default=None,
              help="Default worker count for batch commands.")
@click.option("--verbose", is_flag=True, help="Progress notes on stderr.")
@click.option("--version", is_flag=True, is_eager=True, expose_value=False,
              callback=lambda ctx, param, value: (
                  click.echo(VERSION), ctx.exit(0)) if value else None,
              help="Print the version string and exit.")
@click.pass_context
def main(ctx, seed, jobs, verbose):
    """Pose refinement against Gaussian-splat models."""
    ctx.obj = {"seed": seed, "jobs": jobs, "verbose": verbose}


@main.command("render")
@click.option("--model", "model_path", required=True, help="Gaussian PLY model.")
@click.option("--pose", "pose_path", required=True, help="Pose JSON.")
@click.option("--intrinsics", "intr_path", required=True, help="Camera JSON.")
@click.option("--out", "out_path", required=True, help="Output color PNG.")
@click.option("--depth-out", "depth_path", default=None,
              help="Optional 16-bit depth PNG.")
@click.option("--depth-scale", type=float, default=1.0, show_default=True,
              help="Meters per scene unit for depth encoding.")
@click.pass_context
def cmd_render(ctx, model_path, pose_path, intr_path, out_path, depth_path,
               depth_scale):
    """Rasterize a model at a fixed pose."""
    cloud = _read_model(model_path)
    pose = _load("pose", pose_path, Pose.load_json)
    intr = _load("intrinsics", intr_path, CameraIntrinsics.load_json)
    _verbose(ctx, f"rendering {cloud.positions.shape[0]} splats "
                  f"at {intr.width}x{intr.height}")
    try:
        out = render(cloud, pose, intr)
    except SplatPoseError as exc:
        _fail(str(exc))
    _write_color_png(out_path, out.color)
    if depth_path is not None:
        _write_depth_png(depth_path, out.depth, depth_scale)


@main.command("refine")
@click.option("--model", "model_path", required=True, help="Gaussian PLY model.")
@click.option("--image", "image_path", required=True, help="Observed RGB PNG.")
@click.option("--mask", "mask_path", required=True,
              help="Segmentation PNG; nonzero marks object pixels.")
@click.option("--depth", "depth_path", default=None,
              help="Observed 16-bit depth PNG (millimeters, 0 invalid).")
@click.option("--init-pose", "init_pose_path", required=True,
              help="Starting pose JSON.")
@click.option("--intrinsics", "intr_path", required=True, help="Camera JSON.")
@click.option("--config", "config_path", default=None,
              help="RefineConfig JSON; defaults apply when omitted.")
@click.option("--out", "out_path", required=True, help="Refinement report JSON.")
@click.option("--out-pose", "out_pose_path", default=None,
              help="Refined pose JSON.")
@click.option("--out-render", "out_render_path", default=None,
              help="Render at the refined pose, PNG.")
@click.option("--depth-scale", type=float, default=1.0, show_default=True,
              help="Meters per scene unit for depth decoding.")
@click.option("--timings", is_flag=True,
              help="Include wall-clock fields in the report.")
@click.pass_context
def cmd_refine(ctx, model_path, image_path, mask_path, depth_path,
               init_pose_path, intr_path, config_path, out_path,
               out_pose_path, out_render_path, depth_scale, timings):
    """Refine a coarse pose against one observed image."""
    cloud = _read_model(model_path)
    image = _read_image(image_path)
    mask = _read_mask(mask_path)
    pose = _load("init-pose", init_pose_path, Pose.load_json)
    intr = _load("intrinsics", intr_path, CameraIntrinsics.load_json)
    cfg = RefineConfig()
    if config_path is not None:
        cfg = _load("config", config_path, RefineConfig.load_json)
    depth = None
    if depth_path is not None:
        depth = _read_depth(depth_path, depth_scale)
    try:
        report = refine(cloud, pose, image, mask, intr,
                        observed_depth=depth, cfg=cfg)
    except SplatPoseError as exc:
        _fail(str(exc))
    _verbose(ctx, f"final loss {report.final_loss:.6g} "
                  f"after {report.iterations_used} iterations")
    _write_json(out_path, report.to_json_dict(include_timings=timings))
    if out_pose_path is not None:
        _write_json(out_pose_path, report.final_pose.to_json_dict())
    if out_render_path is not None:
        shown = report.adapted_cloud if report.adapted_cloud is not None else cloud
        _write_color_png(out_render_path,
                         render(shown, report.final_pose, intr).color)


@main.command("gradcheck")
@click.option("--model", "model_path", default=None,
              help="Optional PLY model; synthetic scenes when omitted.")
@click.option("--seed", type=int, default=None, help="Scene generator seed.")
@click.option("--scenes", type=int, default=20, show_default=True,
              help="Number of synthetic scenes.")
@click.option("--tolerance", type=float, default=0.02, show_default=True,
              help="Relative tolerance against finite differences.")
@click.pass_context
def cmd_gradcheck(ctx, model_path, seed, scenes, tolerance):
    """Check every analytic gradient against finite differences."""
    if tolerance < 0.0:
        raise click.BadParameter("tolerance must be >= 0")
    if seed is None:
        seed = ctx.obj.get("seed")
    if seed is None:
        seed = 0
    cloud = intr = pose = None
    if model_path is not None:
        cloud = _read_model(model_path)
        extent = float(max(cloud.bounding_radius(), 1e-6))
        pose, intr = make_scene_camera(SceneSpec(extent=extent, image_size=128))
    report = run_gradcheck(
        seed=seed,
        n_scenes=scenes,
        tol_rel=tolerance,
        tol_abs=min(1e-6, tolerance),
        cloud=cloud,
        intr=intr,
        pose=pose,
    )
    for line in report.lines():
        click.echo(line)
    if not report.passed:
        sys.exit(1)


@main.command("synth")
@click.option("--spec", "spec_path", required=True, help="SceneSpec JSON.")
@click.option("--out", "out_path", required=True, help="Output PLY model.")
@click.pass_context
def cmd_synth(ctx, spec_path, out_path):
    """Materialize the synthetic cloud a SceneSpec describes."""
    spec = _load("spec", spec_path, SceneSpec.load_json)
    if ctx.obj.get("seed") is not None:
        spec.seed = ctx.obj["seed"]
    cloud = make_synthetic_cloud(spec)
    _verbose(ctx, f"built {spec.n_gaussians} splats (seed {spec.seed})")
    directory = os.path.dirname(os.path.abspath(out_path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-")
    os.close(fd)
    try:
        save_ply(cloud, tmp)
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@main.command("eval")
@click.option("--spec", "spec_path", required=True, help="SceneSpec JSON.")
@click.option("--config", "config_path", default=None,
              help="RefineConfig JSON; defaults apply when omitted.")
@click.option("--trials", type=int, default=50, show_default=True)
@click.option("--max-rot-deg", type=float, default=10.0, show_default=True)
@click.option("--max-trans-frac", type=float, default=0.1, show_default=True)
@click.option("--diameter-frac", type=float, default=0.1, show_default=True,
              help="ADD success threshold as a fraction of object diameter.")
@click.option("--corruption",
              type=click.Choice(["none", "gain", "noise", "occlusion", "blur"]),
              default="none", show_default=True)
@click.option("--with-depth", is_flag=True,
              help="Provide rendered ground-truth depth to the refiner.")
@click.option("--jobs", type=int, default=None, help="Parallel trial workers.")
@click.option("--out", "out_path", required=True, help="Experiment report JSON.")
@click.option("--timings", is_flag=True,
              help="Include wall-clock fields in the report.")
@click.pass_context
def cmd_eval(ctx, spec_path, config_path, trials, max_rot_deg, max_trans_frac,
             diameter_frac, corruption, with_depth, jobs, out_path, timings):
    """Batch perturb-and-refine recovery experiment."""
    if trials < 1:
        raise click.BadParameter("trials must be >= 1", param_hint="--trials")
    spec = _load("spec", spec_path, SceneSpec.load_json)
    if ctx.obj.get("seed") is not None:
        spec.seed = ctx.obj["seed"]
    cfg = RefineConfig()
    if config_path is not None:
        cfg = _load("config", config_path, RefineConfig.load_json)
    if jobs is None:
        jobs = ctx.obj.get("jobs") or 1
    _verbose(ctx, f"{trials} trials, bounds {max_rot_deg} deg / "
                  f"{max_trans_frac:.0%} extent, jobs {jobs}")
    try:
        report = run_recovery_experiment(
            spec,
            max_rot_deg=max_rot_deg,
            max_trans_frac=max_trans_frac,
            cfg=cfg,
            trials=trials,
            diameter_frac=diameter_frac,
            corruption=corruption,
            with_depth=with_depth,
            jobs=jobs,
            include_timings=timings,
        )
    except (SplatPoseError, ValueError) as exc:
        _fail(str(exc))
    _write_json(out_path, report)


if __name__ == "__main__":
    main()
