"""Command line entry point.

Subcommands: dataset, train, reconstruct, generate, evaluate, export.
Settings resolve as ``--set`` flags > ``--config`` file > preset defaults.
Outputs default to ``$COMPACTVAE_HOME`` (or ``./compactvae_runs``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, export_raw
from .config import PRESETS, Config, load_config
from .errors import ConfigError, DataError, NumericError
from .geometry import ProceduralShape, make_dataset, read_obj, sample_surface_points, write_obj

HOME_ENV = "COMPACTVAE_HOME"
MANIFEST = "manifest.json"


def output_root() -> Path:
    return Path(os.environ.get(HOME_ENV, "compactvae_runs"))


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except ValueError:
            out[key] = value
    return out


def _config(args, base: dict | None = None) -> Config:
    """Flags over file over preset (or over a checkpoint's stored config)."""
    start = Config.from_dict(base) if base is not None else None
    return load_config(args.config, _overrides(args.set), args.preset, base=start)


# -- datasets ---------------------------------------------------------------------

def write_dataset(out: Path, count: int, seed: int, force: bool = False) -> dict:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    entries = make_dataset(count, seed)
    manifest = {"count": count, "seed": seed, "shapes": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    shape_dir = out / "shapes"
    shape_dir.mkdir(exist_ok=True)
    for e in entries:
        (shape_dir / f"{e['id']:05d}.json").write_text(json.dumps(e, sort_keys=True))
    return manifest


def read_dataset(path) -> dict[int, ProceduralShape]:
    path = Path(path)
    mf = path / MANIFEST if path.is_dir() else path
    try:
        manifest = json.loads(mf.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset manifest {mf}: {exc}") from exc
    return {int(e["id"]): ProceduralShape.from_dict(e) for e in manifest["shapes"]}


def _shapes(args, cfg: Config) -> list[ProceduralShape]:
    if getattr(args, "dataset", None):
        return list(read_dataset(args.dataset).values())
    return [ProceduralShape.from_dict(e) for e in make_dataset(cfg.geometry.count, cfg.geometry.seed)]


def _shape_by_id(args, cfg: Config) -> ProceduralShape:
    shapes = read_dataset(args.dataset) if args.dataset else {
        int(e["id"]): ProceduralShape.from_dict(e) for e in make_dataset(cfg.geometry.count, cfg.geometry.seed)}
    if args.shape_id not in shapes:
        raise DataError(f"shape id {args.shape_id} not found in dataset")
    return shapes[args.shape_id]


def _load_cloud(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".npy":
            pts = np.load(path)
        elif path.suffix == ".obj":
            pts = read_obj(path).vertices
        else:
            pts = np.loadtxt(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise DataError("point cloud contains NaN or Inf")
    return pts


# -- subcommands ------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cfg = _config(args)
    count = cfg.geometry.count if args.count is None else args.count
    seed = cfg.geometry.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else output_root() / "dataset"
    write_dataset(out, count, seed, args.force)
    print(f"wrote {count} shapes to {out}")
    return 0


def cmd_train(args) -> int:
    from .diffusion import encode_latents, train_diffusion
    from .training import model_from_checkpoint, train

    out = Path(args.out) if args.out else output_root() / "run"
    init = Checkpoint.load(args.resume or args.init) if (args.resume or args.init) else None
    stage = args.stage
    if stage == "vae":
        if init is None or init.stage not in ("ae", "vae"):
            raise ConfigError("stage 'vae' needs a stage-1 checkpoint: run `compactvae train ae` "
                              "and pass it with --init")
    if stage == "diffusion":
        if init is None or init.stage != "vae":
            raise ConfigError("stage 'diffusion' needs a stage-2 checkpoint: run `compactvae train vae` "
                              "and pass it with --init")
    if stage == "ae" and init is not None and init.stage != "ae":
        raise ConfigError(f"cannot resume stage 'ae' from a {init.stage!r} checkpoint")
    cfg = _config(args, init.config if init is not None else None)
    shapes = _shapes(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "diffusion":
        vae = model_from_checkpoint(init)
        latents = encode_latents(vae, shapes, cfg.training.seed)
        model = train_diffusion(cfg, latents, steps=args.steps, vae_hash=init.content_hash())
        ckpt = model.to_checkpoint(len(model.history))
        ckpt.save(out / "diffusion.ckpt")
        with open(out / "diffusion_log.jsonl", "a") as log:
            for rec in model.history[:: max(1, cfg.training.log_every)]:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"diffusion checkpoint: {out / 'diffusion.ckpt'}")
        return 0
    result = train(cfg, stage, shapes, init=init, steps=args.steps, out_dir=out,
                   log_path=out / f"{stage}_log.jsonl")
    if result.history:
        last = result.history[-1]
        print(f"{stage}: step {last['step'] + 1} loss {last['loss']:.5f}")
    print(f"{stage} checkpoint: {out / (stage + '.ckpt')}")
    return 0


def _vae_from(path):
    from .training import model_from_checkpoint

    ckpt = Checkpoint.load(path)
    if ckpt.meta.get("kind") != "vae":
        raise ConfigError(f"{path} is not an autoencoder checkpoint")
    return ckpt, model_from_checkpoint(ckpt)


def _grid(model, planes, grid_r: int, multires: bool):
    from .fields import dense_grid_eval, multires_grid_eval

    fc = model.cfg.fields
    field = model.field(planes)
    if multires:
        if grid_r % 2:
            raise ConfigError("--multires needs an even --grid")
        return multires_grid_eval(field, grid_r // 2, grid_r, fc.dilation, fc.threshold, fc.chunk)
    return dense_grid_eval(field, grid_r, fc.chunk)


def _reconstruct_planes(args, model, ckpt):
    cfg = model.cfg
    shape = None
    if args.cloud:
        cloud = _load_cloud(args.cloud)
    else:
        if args.shape_id is None:
            raise ConfigError("give --shape-id or --cloud")
        shape = _shape_by_id(args, cfg)
        cloud = sample_surface_points(shape, cfg.encoder.n_points, args.seed)
    if len(cloud) < cfg.encoder.n_patches:
        raise DataError(f"point cloud has {len(cloud)} points, checkpoint needs >= {cfg.encoder.n_patches}")
    variational = ckpt.stage == "vae" and not args.ae
    noise = None
    if variational and args.sample_noise:
        gen = torch.Generator().manual_seed(args.seed)
        noise = torch.randn(1, cfg.encoder.n_latents, cfg.encoder.latent_dim, generator=gen)
    planes = model.reconstruct_planes(cloud, variational, seed=args.seed, noise=noise)[0]
    return planes, shape


def cmd_reconstruct(args) -> int:
    from .fields import extract_mesh
    from .metrics import chamfer_distance, f_score, iou_volumetric

    ckpt, model = _vae_from(args.checkpoint)
    planes, shape = _reconstruct_planes(args, model, ckpt)
    grid = _grid(model, planes, args.grid, args.multires)
    mesh = extract_mesh(grid, model.cfg.fields.threshold)
    out = Path(args.out) if args.out else output_root() / "reconstruction.obj"
    write_obj(out, mesh)
    print(f"mesh: {out} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    if shape is not None:
        m = model.cfg.metrics
        report = {"iou": iou_volumetric(model.field(planes), shape, m.iou_queries, args.seed)}
        if not mesh.is_empty:
            from .geometry import sample_mesh_surface

            a = sample_mesh_surface(mesh, m.surface_points, args.seed)
            b = sample_surface_points(shape, m.surface_points, args.seed)
            report["cd"] = chamfer_distance(a, b)
            report["f1"] = f_score(a, b, m.fscore_tau)
        print(json.dumps(report, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    from .diffusion import DiffusionModel, check_compatible, generate

    diff = DiffusionModel.from_checkpoint(Checkpoint.load(args.checkpoint))
    vae_ckpt, vae = _vae_from(args.vae)
    check_compatible(diff, vae_ckpt, args.force)
    try:
        res = generate(diff, vae, args.n, args.steps, args.class_id, args.seed, args.grid, args.multires)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else output_root() / "samples"
    out.mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(res.meshes):
        write_obj(out / f"sample_{i:04d}.obj", mesh)
    (out / "timings.json").write_text(json.dumps(res.timings, sort_keys=True, indent=1))
    print(json.dumps({k: round(v, 4) for k, v in res.timings.items()}, sort_keys=True))
    print(f"wrote {len(res.meshes)} meshes to {out}")
    return 0


def _shape_set(path: Path, n_points: int, seed: int) -> list[np.ndarray]:
    from .geometry import sample_mesh_surface

    if (path / MANIFEST).exists():
        shapes = read_dataset(path)
        return [sample_surface_points(s, n_points, seed + i) for i, s in enumerate(shapes.values())]
    objs = sorted(path.glob("*.obj"))
    if not objs:
        raise DataError(f"no OBJ meshes or dataset manifest in {path}")
    out = []
    for i, p in enumerate(objs):
        mesh = read_obj(p)
        if mesh.is_empty:
            raise DataError(f"mesh {p} is empty")
        out.append(sample_mesh_surface(mesh, n_points, seed + i))
    return out


def cmd_evaluate(args) -> int:
    from .metrics import format_table, set_metrics

    cfg = _config(args)
    n = cfg.metrics.set_points
    gen = _shape_set(Path(args.gen), n, args.seed)
    ref = _shape_set(Path(args.ref), n, args.seed + 100_003)
    if args.limit:
        gen, ref = gen[: args.limit], ref[: args.limit]
    try:
        result = set_metrics(gen, ref, n, args.seed, with_nna=len(gen) == len(ref))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(format_table({Path(args.gen).name or "gen": result}, list(result)))
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=1))
    return 0


def cmd_export(args) -> int:
    from .fields import extract_mesh

    ckpt, model = _vae_from(args.checkpoint)
    planes, _ = _reconstruct_planes(args, model, ckpt)
    out = Path(args.out) if args.out else output_root() / f"export.{args.what}"
    if args.what == "triplane":
        export_raw(out, planes.numpy(), layout="plane,channel,row,col", planes=["xy", "yz", "xz"])
    elif args.what == "grid":
        grid = _grid(model, planes, args.grid, args.multires)
        export_raw(out, grid.values, layout="x,y,z", lattice="linspace(-1,1,r)",
                   evaluated=int(grid.evaluated_mask.sum()))
    else:
        grid = _grid(model, planes, args.grid, args.multires)
        write_obj(out, extract_mesh(grid, model.cfg.fields.threshold))
    print(f"exported {args.what} to {out}")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", help="output path")
    # None lets `dataset` fall back to the configured seed; other commands use 0
    common.add_argument("--seed", type=int)

    p = argparse.ArgumentParser(prog="compactvae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", parents=[common], help="generate a procedural shape dataset")
    d.add_argument("--count", type=int)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", parents=[common], help="train a stage")
    t.add_argument("stage", choices=["ae", "vae", "diffusion"])
    t.add_argument("--dataset", help="dataset directory (default: generated from config)")
    t.add_argument("--init", help="checkpoint of the previous stage")
    t.add_argument("--resume", help="checkpoint of this stage to continue from")
    t.add_argument("--steps", type=int, help="total number of optimizer steps")
    t.set_defaults(func=cmd_train)

    def shape_input(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--shape-id", type=int)
        sp.add_argument("--dataset")
        sp.add_argument("--cloud", help="point cloud (.npy, .xyz or .obj)")
        sp.add_argument("--grid", type=int, default=128)
        sp.add_argument("--multires", action="store_true", help="coarse-to-fine grid (r/2 -> r)")
        sp.add_argument("--ae", action="store_true", help="bypass the KL block")
        sp.add_argument("--sample-noise", action="store_true",
                        help="sample z from the posterior instead of using its mean")

    r = sub.add_parser("reconstruct", parents=[common], help="encode and re-mesh a shape")
    shape_input(r)
    r.set_defaults(func=cmd_reconstruct)

    g = sub.add_parser("generate", parents=[common], help="sample shapes from a diffusion checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--vae", required=True)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--steps", type=int)
    g.add_argument("--class-id", type=int)
    g.add_argument("--grid", type=int, default=128)
    g.add_argument("--multires", action="store_true")
    g.add_argument("--force", action="store_true", help="ignore a VAE hash mismatch")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", parents=[common], help="MMD / COV / 1-NNA between two shape sets")
    e.add_argument("--gen", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--limit", type=int)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export", parents=[common], help="export a triplane, grid or mesh")
    shape_input(x)
    x.add_argument("--what", choices=["triplane", "grid", "mesh"], default="triplane")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command != "dataset":
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, DataError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
