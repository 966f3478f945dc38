"""Command-line surface: scene generation, fitting, rendering, eval, service."""

from __future__ import annotations

import json
import os
import sys
import time

import click
import numpy as np
from PIL import Image

from .camera import Camera, DepthPlaneMap, FrustumGrid
from .optim import fit_scene, load_checkpoint, save_checkpoint, save_trace_csv
from .pipeline import RenderConfig, render_frame
from .scene import (
    generate_scene,
    load_dataset,
    oracle_render,
    psnr,
    render_dataset,
    ring_rig,
    save_dataset,
    ssim,
    voxelize_scene_density,
)
from .visibility import alpha_volume, build_view_visibility, visibility_volume
from .volume import save_volume

PRESETS = {
    "plane": {
        "primitives": [
            {
                "kind": "slab",
                "lo": [-0.12, -1.4, -1.4],
                "hi": [0.0, 1.4, 1.4],
                "density": 400.0,
                "softness": 0.01,
                "texture": {
                    "kind": "sinusoid",
                    "freq": [0.0, 1.8, 1.4],
                    "colors": [[0.9, 0.25, 0.1], [0.1, 0.45, 0.9]],
                },
            }
        ],
        "rig": {"kind": "arc", "count": 6, "radius": 4.0, "span_deg": 40.0, "fov_deg": 40.0},
        "t_near": 2.8,
        "t_far": 5.2,
    },
    "two-slab": {
        "primitives": [
            {
                "kind": "slab",
                "lo": [-0.55, -0.55, -0.55],
                "hi": [0.55, 0.55, 0.55],
                "density": 300.0,
                "softness": 0.02,
                "texture": {"kind": "checker", "colors": [[0.95, 0.85, 0.2], [0.15, 0.25, 0.7]], "scale": 3.0},
            },
            {
                "kind": "slab",
                "lo": [1.2744, 0.1291, -0.45],
                "hi": [1.5144, 1.0291, 0.45],
                "density": 300.0,
                "softness": 0.02,
                "texture": {"kind": "solid", "color": [0.9, 0.15, 0.15]},
            },
        ],
        "rig": {"kind": "ring", "count": 8, "radius": 4.0, "elevation_deg": 10.0, "fov_deg": 40.0},
        "t_near": 2.3,
        "t_far": 5.8,
    },
    "blobs": {
        "random_spheres": 3,
        "density": 6.0,
        "softness": 0.15,
        "bounds": {"center": [0.0, 0.0, 0.0], "extent": 0.8},
        "rig": {"kind": "ring", "count": 8, "radius": 4.0, "elevation_deg": 12.0, "fov_deg": 40.0},
        "t_near": 2.5,
        "t_far": 5.5,
    },
}


def _build_rig(rig_spec, width, height):
    kind = rig_spec.get("kind", "ring")
    if kind == "ring":
        return ring_rig(
            rig_spec.get("count", 8),
            rig_spec.get("radius", 4.0),
            rig_spec.get("elevation_deg", 10.0),
            rig_spec.get("target", [0.0, 0.0, 0.0]),
            rig_spec.get("fov_deg", 40.0),
            width,
            height,
        )
    if kind == "arc":
        from math import cos, radians, sin

        target = np.asarray(rig_spec.get("target", [0.0, 0.0, 0.0]), dtype=np.float64)
        count = rig_spec.get("count", 6)
        span = rig_spec.get("span_deg", 40.0)
        radius = rig_spec.get("radius", 4.0)
        elev = radians(rig_spec.get("elevation_deg", 8.0))
        from .scene import look_at_camera

        cams = []
        for k in range(count):
            a = radians(-span / 2 + span * k / max(count - 1, 1))
            pos = target + radius * np.array([cos(elev) * cos(a), cos(elev) * sin(a), sin(elev)])
            cams.append(look_at_camera(pos, target, rig_spec.get("fov_deg", 40.0), width, height))
        return cams
    raise click.ClickException(f"unknown rig kind {kind!r}")


def _config_from_flags(**kw):
    return RenderConfig(
        n_uniform=kw.get("nu", 128),
        n_hier=kw.get("nh", 8),
        n_views=kw.get("views", 3),
        upsample=kw.get("upsample", 4),
        geo_scale=kw.get("geo_scale", 16),
        planes=kw.get("planes", 96),
        c_geo=kw.get("c_geo", 32),
        c_tex=kw.get("c_tex", 16),
        aggregation=kw.get("aggregation", "visibility"),
        deterministic=kw.get("deterministic", True),
        seed=kw.get("seed", 0),
    )


def _save_png(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_scene_state(checkpoint, dataset_path):
    params, config, meta = load_checkpoint(checkpoint)
    ds_path = dataset_path or meta.get("dataset")
    if not ds_path:
        raise click.ClickException("no dataset recorded in checkpoint; pass --dataset")
    dataset = load_dataset(ds_path)
    return dataset, params, config, meta


@click.group()
def main():
    """Occlusion-aware differentiable volume renderer."""


@main.command("make-scene")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None, help="Built-in scene spec.")
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None, help="Scene spec JSON file.")
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=128, show_default=True, help="Image side length in pixels.")
@click.option("--step", default=0.02, show_default=True, help="Oracle ray-march step.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--float-sidecar", is_flag=True, help="Also store lossless float images.")
def make_scene_cmd(preset, spec_path, seed, size, step, out_dir, float_sidecar):
    """Generate a synthetic multi-view dataset from a scene spec."""
    if (preset is None) == (spec_path is None):
        raise click.UsageError("pass exactly one of --preset / --spec")
    spec = PRESETS[preset] if preset else json.load(open(spec_path))
    scene = generate_scene(spec, seed=seed)
    cams = _build_rig(spec.get("rig", {}), size, size)
    ds = render_dataset(scene, cams, spec.get("t_near", 2.5), spec.get("t_far", 5.5), step=step)
    ds.meta["spec"] = spec
    ds.meta["seed"] = seed
    save_dataset(out_dir, ds, float_sidecar=float_sidecar)
    click.echo(f"wrote {len(cams)} views to {out_dir}")


@main.command("fit")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--iters", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr", default=5e-4, show_default=True)
@click.option("--views", default=3, show_default=True, help="Input views per render.")
@click.option("--nu", default=128, show_default=True, help="Uniform samples per ray.")
@click.option("--nh", default=8, show_default=True, help="Hierarchical samples per ray.")
@click.option("--upsample", default=4, show_default=True)
@click.option("--geo-scale", default=16, show_default=True)
@click.option("--planes", default=96, show_default=True)
@click.option("--c-geo", default=32, show_default=True)
@click.option("--c-tex", default=16, show_default=True)
@click.option("--aggregation", type=click.Choice(["visibility", "average"]), default="visibility", show_default=True)
@click.option("--offset-resolution", default=32, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--trace", "trace_path", type=click.Path(), default=None, help="Loss trace CSV.")
@click.option("--quiet", is_flag=True)
def fit_cmd(dataset_path, iters, seed, lr, views, nu, nh, upsample, geo_scale, planes,
            c_geo, c_tex, aggregation, offset_resolution, out_dir, trace_path, quiet):
    """Fit scene parameters to a dataset by gradient descent."""
    dataset = load_dataset(dataset_path)
    config = _config_from_flags(nu=nu, nh=nh, views=views, upsample=upsample, geo_scale=geo_scale,
                                planes=planes, c_geo=c_geo, c_tex=c_tex, aggregation=aggregation, seed=seed)
    last = {"t": time.time()}

    def progress(rec):
        if not quiet and (rec["iter"] % 50 == 0 or time.time() - last["t"] > 10):
            last["t"] = time.time()
            click.echo(f"iter {rec['iter']:5d}  loss {rec['loss_total']:.5f}")

    result = fit_scene(dataset, config, iterations=iters, seed=seed, lr=lr,
                       offset_resolution=offset_resolution, callback=progress)
    save_checkpoint(out_dir, result.params, config, meta={"dataset": os.path.abspath(dataset_path)})
    if trace_path:
        save_trace_csv(trace_path, result.trace)
    final = result.trace[-1]["loss_total"] if result.trace else float("nan")
    click.echo(f"fitted {iters} iterations, final loss {final:.5f}; checkpoint at {out_dir}")


@main.command("render")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--view", "view_index", type=int, default=None, help="Render a dataset camera pose.")
@click.option("--camera", "camera_path", type=click.Path(exists=True), default=None, help="Camera JSON file.")
@click.option("--deterministic/--stratified", default=True, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def render_cmd(checkpoint, dataset_path, view_index, camera_path, deterministic, workers, out_path):
    """Render a novel view from a fitted checkpoint to PNG."""
    dataset, params, config, _ = _load_scene_state(checkpoint, dataset_path)
    if (view_index is None) == (camera_path is None):
        raise click.UsageError("pass exactly one of --view / --camera")
    if view_index is not None:
        cam = dataset.cameras[view_index]
    else:
        cam = Camera.from_json(open(camera_path).read())
    config.deterministic = deterministic
    out, _ = render_frame(cam, dataset, params, config, workers=workers)
    _save_png(out_path, out.i_hr)
    click.echo(f"wrote {out_path}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--views", "view_list", default=None, help="Comma-separated view indices (default: all).")
@click.option("--exclude-self/--include-self", default=True, show_default=True,
              help="Drop the evaluated view from the input pool.")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None, help="CSV output path.")
def eval_cmd(checkpoint, dataset_path, view_list, exclude_self, workers, out_path):
    """PSNR/SSIM table over dataset views."""
    dataset, params, config, _ = _load_scene_state(checkpoint, dataset_path)
    indices = list(range(len(dataset.cameras)))
    if view_list:
        indices = [int(x) for x in view_list.split(",")]
    rows = []
    for v in indices:
        out, _ = render_frame(
            dataset.cameras[v], dataset, params, config,
            workers=workers, exclude_view=v if exclude_self else None,
        )
        img = np.clip(out.i_hr, 0.0, 1.0)
        rows.append((v, psnr(img, dataset.images[v]), ssim(img, dataset.images[v])))
    lines = ["view,psnr_db,ssim"] + [f"{v},{p:.4f},{s:.6f}" for v, p, s in rows]
    text = "\n".join(lines)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    click.echo(text)
    mean_p = np.mean([r[1] for r in rows])
    click.echo(f"# mean PSNR {mean_p:.3f} dB over {len(rows)} views")


@main.command("dump-volume")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--view", "view_index", default=0, show_default=True, help="Novel-view camera index.")
@click.option("--kind", type=click.Choice(["density", "alpha", "visibility"]), default="density", show_default=True)
@click.option("--input-view", default=None, type=int,
              help="Input view whose alpha/visibility volume to dump (default: first selected).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--slice", "slice_index", type=int, default=None, help="Also write a PNG heatmap of one depth plane.")
def dump_volume_cmd(checkpoint, dataset_path, view_index, kind, input_view, out_path, slice_index):
    """Write a VGRD volume (and optionally a depth-slice heatmap PNG)."""
    from .pipeline import prepare_frame

    dataset, params, config, _ = _load_scene_state(checkpoint, dataset_path)
    ctx = prepare_frame(dataset.cameras[view_index], dataset, params, config, exclude_view=None)
    if kind == "density":
        vol = ctx.density
    else:
        if config.aggregation != "visibility" or not ctx.views:
            raise click.ClickException("alpha/visibility volumes need visibility aggregation")
        pick = 0
        if input_view is not None:
            matches = [i for i, v in enumerate(ctx.views) if v.view_index == input_view]
            if not matches:
                raise click.ClickException(f"view {input_view} is not among selected inputs {ctx.selected}")
            pick = matches[0]
        vol = ctx.views[pick].alpha if kind == "alpha" else ctx.views[pick].visibility
    save_volume(out_path, vol)
    click.echo(f"wrote {kind} volume {vol.data.shape} to {out_path}")
    if slice_index is not None:
        D = vol.data.shape[2]
        if not (0 <= slice_index < D):
            raise click.ClickException(f"slice must be in [0, {D})")
        plane = vol.data[:, :, slice_index, 0].astype(np.float64)
        hi = plane.max()
        norm = plane / hi if hi > 0 else plane
        # simple black -> orange -> white ramp
        heat = np.stack([
            np.clip(norm * 2.0, 0, 1),
            np.clip(norm * 1.4 - 0.2, 0, 1),
            np.clip(norm * 2.0 - 1.0, 0, 1),
        ], axis=-1)
        png_path = os.path.splitext(out_path)[0] + f"_slice{slice_index}.png"
        _save_png(png_path, heat)
        click.echo(f"wrote {png_path}")


@main.command("bench")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--view", "view_index", default=0, show_default=True)
@click.option("--frames", default=3, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit machine-readable JSON.")
def bench_cmd(checkpoint, dataset_path, view_index, frames, workers, as_json):
    """Per-stage timing decomposition of a frame render."""
    dataset, params, config, _ = _load_scene_state(checkpoint, dataset_path)
    cam = dataset.cameras[view_index]
    render_frame(cam, dataset, params, config, workers=workers)  # warm-up
    stage_keys = ["encoder", "geometry", "visibility", "ray_integration", "render_head"]
    acc = {k: 0.0 for k in stage_keys}
    total = 0.0
    for _ in range(frames):
        t0 = time.perf_counter()
        out, _ = render_frame(cam, dataset, params, config, workers=workers)
        total += (time.perf_counter() - t0) * 1e3
        for k in stage_keys:
            acc[k] += out.stage_ms.get(k, 0.0)
    report = {
        "frames": frames,
        "workers": workers,
        "width": cam.width,
        "height": cam.height,
        "stage_ms": {k: acc[k] / frames for k in stage_keys},
        "stage_sum_ms": sum(acc.values()) / frames,
        "total_ms": total / frames,
    }
    if as_json:
        click.echo(json.dumps(report, indent=1))
        return
    click.echo(f"render {cam.width}x{cam.height}, {workers} worker(s), mean of {frames} frames:")
    for k in stage_keys:
        click.echo(f"  {k:16s} {report['stage_ms'][k]:9.2f} ms")
    click.echo(f"  {'stage sum':16s} {report['stage_sum_ms']:9.2f} ms")
    click.echo(f"  {'total wall':16s} {report['total_ms']:9.2f} ms")


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8707, show_default=True)
@click.option("--workers", default=1, show_default=True, help="Render workers per frame.")
def serve_cmd(checkpoint, dataset_path, host, port, workers):
    """Start the live render service (HTTP + WebSocket)."""
    import uvicorn

    from .service import create_app

    dataset, params, config, _ = _load_scene_state(checkpoint, dataset_path)
    app = create_app(dataset, params, config, render_workers=workers)
    click.echo(f"serving on http://{host}:{port}  (GET /scene, POST /render, WS /stream)")
    uvicorn.run(app, host=host, port=port, log_level="warning")


def cli_main(argv=None) -> int:
    """Programmatic entry point returning an exit code."""
    try:
        main.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 2
    except click.ClickException as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 1
    except (IOError, ValueError, FloatingPointError) as e:
        click.echo(f"error: {e}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
