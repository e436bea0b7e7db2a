"""Command-line pipeline: views -> volume -> fields -> refine -> mesh -> eval.

Exit codes: 0 success, 1 numerical abort, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .binio import FormatError, atomic_path, atomic_write, load_weights
from .camera import (
    CameraError,
    Intrinsics,
    PoseDistribution,
    SamplingConfigError,
    SamplingMode,
    SamplingStrategy,
    SphericalPose,
    dump_cameras_json,
    look_at_pose,
    sample_source_poses,
)
from .costvolume import Conv3DStack, GridSpec, VolumeError, aggregate_variance, apply_conv3d, load_volume, save_volume
from .features import ConvLayerPlan, ExtractorKind, FeatureExtractor, ViewSetError, extract_features, load_view_set, write_png
from .fields import FieldSet, load_fieldset, save_fieldset
from .mesh import (
    MeshError,
    MeshFinetuneConfig,
    TriMesh,
    init_tetgrid,
    marching_tetrahedra,
    mesh_finetune,
    read_mesh,
)
from .mesh.io import obj_text, ply_bytes
from .metrics import (
    ExternalEmbedding,
    MetricError,
    Modality,
    ToyEmbedding,
    eval_circle,
    evaluate,
)
from .refine import (
    AnalyticGaussianScore,
    DiffusionSchedule,
    ExternalScoreProvider,
    LRSchedule,
    NumericalAbort,
    Parameterization,
    RefineConfig,
    TrainableScoreNet,
    refine_loop,
    write_trace_csv,
)
from .render import RenderConfig, render_image, render_normal_png, write_pfm

log = logging.getLogger("geoprior")

EXIT_OK, EXIT_ABORT, EXIT_USAGE = 0, 1, 2
_INPUT_ERRORS = (
    cfgmod.ConfigError,
    ViewSetError,
    FormatError,
    SamplingConfigError,
    CameraError,
    VolumeError,
    MeshError,
    MetricError,
    FileNotFoundError,
    ValueError,
)


class UsageError(Exception):
    pass


# --- shared helpers -----------------------------------------------------------


def _setup_logging() -> None:
    level = os.environ.get("GD_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"GD_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    # own handler on the package logger; the root logger is left alone
    for h in list(log.handlers):
        log.removeHandler(h)
    log.addHandler(handler)
    log.setLevel(levels[level])


def _load_config(args) -> cfgmod.PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_bytes(path: Path, data: bytes) -> None:
    with atomic_write(path) as f:
        f.write(data)


def _write_text(path: Path, text: str) -> None:
    _write_bytes(path, text.encode("utf-8"))


def _schedule(cfg) -> DiffusionSchedule:
    p = cfg.providers
    return DiffusionSchedule.scaled_linear(steps=p.steps, parameterization=Parameterization(p.parameterization))


def _score_provider(kind: str, command, cfg, schedule, seed: int, channels: int = 3):
    p = cfg.providers
    if kind == "ANALYTIC_GAUSSIAN":
        return AnalyticGaussianScore(p.target_mean, p.target_variance, schedule)
    if kind == "TRAINABLE_SMALL_NET":
        return TrainableScoreNet(
            channels=channels,
            side=p.net_side,
            hidden=p.net_hidden,
            steps=p.steps,
            parameterization=Parameterization(p.parameterization),
            seed=seed,
        )
    if kind == "EXTERNAL":
        if not command:
            raise UsageError("EXTERNAL provider needs a command")
        return ExternalScoreProvider(list(command), parameterization=Parameterization(p.parameterization))
    raise UsageError(f"unknown score provider {kind!r}")


def _providers(cfg, schedule):
    p = cfg.providers
    pre = _score_provider(p.pretrained, p.pretrained_command, cfg, schedule, cfg.seed)
    lora = _score_provider(p.lora, p.lora_command, cfg, schedule, cfg.seed + 1)
    return pre, lora


def _close(*providers) -> None:
    for p in providers:
        close = getattr(p, "close", None)
        if close is not None:
            close()


def _render_config(cfg) -> RenderConfig:
    r = cfg.render
    return RenderConfig(
        samples_per_ray=r.samples_per_ray,
        sharpness=r.sharpness,
        near=r.near,
        far=r.far,
        resolution=r.resolution,
        stratified=r.stratified,
        seed=cfg.seed,
    )


def _refine_poses(cfg) -> PoseDistribution:
    r = cfg.refine
    dist = PoseDistribution(
        azimuth_range=r.azimuth_range,
        elevation_range=r.elevation_range,
        radius_range=r.radius_range,
        intrinsics=Intrinsics(r.focal, r.resolution, r.resolution),
    )
    dist.validate()
    return dist


def _lr(cfg) -> LRSchedule:
    r = cfg.refine
    return LRSchedule(r.volume_lr_lo, r.volume_lr_hi, r.ramp_fraction, r.texture_lr_hi, r.texture_lr_lo)


def _extractor(cfg) -> FeatureExtractor:
    v = cfg.volume
    kind = ExtractorKind(v.extractor)
    if kind is ExtractorKind.CONV_STACK:
        if not v.extractor_weights:
            raise UsageError("CONV_STACK extractor needs volume.extractor_weights")
        tensors = load_weights(v.extractor_weights)
        plan = [ConvLayerPlan(t.shape[1], t.shape[0], i < len(tensors) // 2 - 1) for i, t in enumerate(tensors[::2])]
        return FeatureExtractor.from_weight_file(v.extractor_weights, plan)
    return FeatureExtractor(kind)


def _f3d(cfg, channels: int) -> Conv3DStack:
    path = cfg.volume.f3d_weights
    if not path:
        return Conv3DStack.identity(channels)
    tensors = load_weights(path)
    n = len(tensors) // 2
    return Conv3DStack.from_tensors(tensors, [i < n - 1 for i in range(n)])


def _build_fieldset(cfg, volume_path) -> FieldSet:
    f = cfg.fields
    vol = load_volume(volume_path)
    return FieldSet.build(
        vol,
        seed=cfg.seed,
        pe_levels=f.pe_levels,
        geometry_hidden=f.geometry_hidden,
        texture_hidden=f.texture_hidden,
        hash_config=dict(
            levels=f.hash_levels,
            table_size=f.hash_table_size,
            features_per_level=f.hash_features,
            base_resolution=f.hash_base_resolution,
            growth_factor=f.hash_growth,
        ),
        init_radius=f.init_radius,
    )


def _colored_mesh(mesh: TriMesh, fieldset: FieldSet) -> TriMesh:
    if mesh.is_empty:
        return mesh
    with torch.no_grad():
        colors = fieldset.color(torch.as_tensor(mesh.vertices)).numpy()
    return TriMesh(mesh.vertices, mesh.faces, np.clip(colors, 0.0, 1.0))


def _write_mesh(out: Path, stem: str, mesh: TriMesh) -> None:
    _write_text(out / f"{stem}.obj", obj_text(mesh))
    _write_bytes(out / f"{stem}.ply", ply_bytes(mesh))
    log.info("mesh %s: %d vertices, %d faces, watertight=%s", stem, len(mesh.vertices), len(mesh.faces), mesh.is_watertight())


# --- subcommands --------------------------------------------------------------


def cmd_sample_views(args, cfg) -> int:
    v = cfg.views
    mode = args.mode or v.mode
    try:
        mode = SamplingMode(mode)
    except ValueError:
        raise UsageError(f"invalid sampling mode {mode!r}; choose from {[m.value for m in SamplingMode]}")
    strategy = SamplingStrategy(
        mode=mode,
        count=v.count,
        rng_seed=cfg.seed,
        azimuth_limit=v.azimuth_limit,
        elevation_limit=v.elevation_limit,
        radius=v.radius,
        reference_elevation=v.reference_elevation,
        intrinsics=Intrinsics(v.focal, v.resolution, v.resolution),
    )
    views = sample_source_poses(strategy)
    out = _out_dir(args)
    with atomic_path(out / "cameras.json") as tmp:
        dump_cameras_json(views, tmp)
    log.info("wrote %d poses (%s) to %s", len(views), mode.value, out / "cameras.json")
    return EXIT_OK


def cmd_build_volume(args, cfg) -> int:
    if not args.views:
        raise UsageError("build-volume needs --views DIR")
    views = load_view_set(args.views)
    extractor = _extractor(cfg)
    maps = [extract_features(img, extractor) for img in views.images]
    spec = GridSpec.from_bounds(cfg.volume.bounds[0], cfg.volume.bounds[1], tuple(cfg.volume.dims))
    raw = aggregate_variance(maps, views.cameras, spec, chunk=cfg.volume.chunk)
    vol = apply_conv3d(raw, _f3d(cfg, raw.channels))
    out = _out_dir(args)
    save_volume(vol, out / "volume.gdvol")
    log.info("volume %s: %d channels, valid-voxel fraction %.6f", "x".join(map(str, spec.dims)), vol.channels, vol.valid_fraction())
    return EXIT_OK


def cmd_refine(args, cfg) -> int:
    if args.checkpoint:
        fs = load_fieldset(args.checkpoint)
    elif args.volume:
        fs = _build_fieldset(cfg, args.volume)
    else:
        raise UsageError("refine needs --checkpoint or --volume")
    schedule = _schedule(cfg)
    pre, lora = _providers(cfg, schedule)
    r = cfg.refine
    rc = RefineConfig(
        iterations=r.iterations,
        batch=r.batch,
        lr=_lr(cfg),
        lr_texture_mlp=r.lr_texture_mlp,
        lr_lora=r.lr_lora,
        seed=cfg.seed,
        condition=cfg.providers.condition,
        grad_clip=r.grad_clip,
    )
    try:
        fs, trace = refine_loop(fs, pre, lora, _refine_poses(cfg), schedule, rc, _render_config(cfg))
    finally:
        _close(pre, lora)
    out = _out_dir(args)
    save_fieldset(fs, out / "fieldset.gdfld")
    with atomic_path(out / "trace.csv") as tmp:
        write_trace_csv(trace, tmp)
    log.info("refined %d iterations; checkpoint %s", len(trace), out / "fieldset.gdfld")
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    if not args.checkpoint:
        raise UsageError("render needs --checkpoint")
    fs = load_fieldset(args.checkpoint)
    r = cfg.render
    cam = look_at_pose(SphericalPose.wrapped(r.azimuth, r.elevation, r.radius), intrinsics=Intrinsics(r.focal, r.width, r.height))
    with torch.no_grad():
        out_img = render_image(fs, cam, _render_config(cfg), with_normals=True).numpy()
    out = _out_dir(args)
    for name, img in (("color.png", out_img["color"]), ("normal.png", render_normal_png(out_img["normal"]))):
        with atomic_path(out / name) as tmp:
            write_png(tmp, img)
    with atomic_path(out / "depth.pfm") as tmp:
        write_pfm(tmp, out_img["depth"])
    log.info("rendered %dx%d view to %s", cam.width, cam.height, out)
    return EXIT_OK


def cmd_extract_mesh(args, cfg) -> int:
    if not args.checkpoint:
        raise UsageError("extract-mesh needs --checkpoint")
    fs = load_fieldset(args.checkpoint)
    grid = init_tetgrid(cfg.mesh.resolution, cfg.mesh.bounds, fs)
    mesh = _colored_mesh(marching_tetrahedra(grid), fs)
    _write_mesh(_out_dir(args), "mesh", mesh)
    return EXIT_OK


def cmd_finetune_mesh(args, cfg) -> int:
    if not args.checkpoint:
        raise UsageError("finetune-mesh needs --checkpoint")
    fs = load_fieldset(args.checkpoint)
    grid = init_tetgrid(cfg.mesh.resolution, cfg.mesh.bounds, fs)
    schedule = _schedule(cfg)
    pre, lora = _providers(cfg, schedule)
    m = cfg.mesh
    mc = MeshFinetuneConfig(
        geometry_iterations=m.geometry_iterations,
        texture_iterations=m.texture_iterations,
        resolution=m.render_resolution or None,
        lr_sdf=m.lr_sdf,
        lr_deformation=m.lr_deformation,
        lr=_lr(cfg),
        lr_texture_mlp=cfg.refine.lr_texture_mlp,
        lr_lora=cfg.refine.lr_lora,
        seed=cfg.seed,
        condition=cfg.providers.condition,
        batch=cfg.refine.batch,
        grad_clip=cfg.refine.grad_clip,
    )
    try:
        result = mesh_finetune(grid, fs, pre, lora, _refine_poses(cfg), schedule, mc)
    finally:
        _close(pre, lora)
    out = _out_dir(args)
    _write_mesh(out, "mesh_finetuned", _colored_mesh(result.mesh, fs))
    save_fieldset(fs, out / "fieldset_finetuned.gdfld")
    return EXIT_OK


def _embedding(modality: Modality, command, cfg):
    m = cfg.metrics
    if m.embedding == "TOY_DETERMINISTIC":
        return ToyEmbedding(modality, m.embedding_dim, seed=cfg.seed)
    if m.embedding == "EXTERNAL":
        if not command:
            raise UsageError(f"EXTERNAL {modality.value} embedding needs a command")
        return ExternalEmbedding(modality, m.embedding_dim, list(command))
    raise UsageError(f"unknown embedding provider {m.embedding!r}")


def cmd_eval(args, cfg) -> int:
    m = cfg.metrics
    mesh = read_mesh(args.mesh) if args.mesh else None
    if args.checkpoint:
        subject = load_fieldset(args.checkpoint)
    elif mesh is not None:
        subject = mesh
    else:
        raise UsageError("eval needs --checkpoint or --mesh")
    frames = eval_circle(subject, m.count, m.elevation, m.radius, m.resolution, render_config=_render_config(cfg))
    refs = load_view_set(args.views).images if args.views else None
    img = _embedding(Modality.IMAGE, m.image_command, cfg)
    txt = _embedding(Modality.TEXT, m.text_command, cfg)
    pts = _embedding(Modality.POINTCLOUD, m.pointcloud_command, cfg) if mesh is not None else None
    try:
        report = evaluate(frames, list(m.captions), m.correct_index, img, txt, refs, mesh, pts)
    finally:
        _close(img, txt, pts)
    out = _out_dir(args)
    _write_text(out / "report.json", report.to_json())
    if args.csv:
        with atomic_path(out / "report.csv") as tmp:
            report.write_csv(tmp)
    log.info("eval over %d views: r_score %.4f", len(frames), report.r_score)
    return EXIT_OK


COMMANDS = {
    "sample-views": cmd_sample_views,
    "build-volume": cmd_build_volume,
    "refine": cmd_refine,
    "render": cmd_render,
    "extract-mesh": cmd_extract_mesh,
    "finetune-mesh": cmd_finetune_mesh,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="pipeline TOML (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads; 1 is the bit-exact reference")
    common.add_argument("--out", metavar="DIR", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="geoprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sample-views", parents=[common], help="write cameras.json for the source views")
    p.add_argument("--mode", help="SD_FRONT or MVDREAM_FOUR (overrides the config)")
    p = sub.add_parser("build-volume", parents=[common], help="aggregate a view set into a cost volume")
    p.add_argument("--views", metavar="DIR", required=True)
    p = sub.add_parser("refine", parents=[common], help="distill priors into the field set")
    p.add_argument("--volume", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    for name, helptext in (
        ("render", "render color, normal and depth from a checkpoint"),
        ("extract-mesh", "extract a colored mesh from a checkpoint"),
        ("finetune-mesh", "fine-tune geometry and texture on the extracted mesh"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", metavar="PATH", required=True)
    p = sub.add_parser("eval", parents=[common], help="circular renders and metric report")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--mesh", metavar="PATH", help="OBJ or PLY mesh for the 3D score")
    p.add_argument("--views", metavar="DIR", help="reference view set for the Frechet distance")
    p.add_argument("--csv", action="store_true", help="also write report.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        _setup_logging()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = _load_config(args)
        log.info("command %s: config hash %s, seed %d, threads %d", args.command, cfg.hash(), cfg.seed, args.threads)
        return COMMANDS[args.command](args, cfg)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_ABORT
    except UsageError as exc:
        print(f"geoprior: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _INPUT_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
