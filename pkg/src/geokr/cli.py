"""Command-line entry point: ``geokr <subcommand> ...``.

Every subcommand prints its effective configuration to stderr as JSON.
Machine-readable results go to ``--out`` (or stdout for the small ones).
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analyze, geoknow, ingest, nnet, synth, trainer
from .errors import GeoKRError
from .raster import GeoTransform, read_raster

log = logging.getLogger("geokr")


class UsageError(Exception):
    pass


def _load_config(path: Optional[str], section: str) -> dict:
    """JSON config; a file may hold several sections keyed by name."""
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"--config {path}: expected a JSON object")
    if any(k in data for k in ("synth", "ingest", "train")):
        data = data.get(section, {})
    return data


def _build(cls, values: dict):
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _overrides(args, mapping: dict) -> dict:
    """Flag values that were actually given, renamed to config keys."""
    return {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}


def _echo_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True, default=str), file=sys.stderr)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# subcommands


def cmd_synth(args) -> int:
    values = {**_load_config(args.config, "synth"), **_overrides(args, {"noise_rate": "label_noise_rate", "tiles_per_class": "tiles_per_class", "tile_size": "tile_size"})}
    cfg = _build(synth.SynthConfig, values)
    seed = args.seed if args.seed is not None else 0
    _echo_config("synth", {**cfg.to_dict(), "seed": seed})
    res = synth.synth_generate(cfg, seed, _out_dir(args))
    log.info("wrote %d scenes, perturbed fraction %.4f", len(res.scenes), res.perturbed_fraction)
    return 0


def _image_geotransform(args) -> tuple[GeoTransform, int]:
    if args.image:
        grid = read_raster(args.image)
        if grid.width != grid.height:
            raise UsageError(f"{args.image}: image is {grid.width}x{grid.height}, expected square")
        return grid.geotransform, grid.width
    if args.geotransform and args.size:
        try:
            return GeoTransform.from_sequence(args.geotransform), args.size
        except ValueError as exc:
            raise UsageError(f"--geotransform: {exc}") from exc
    raise UsageError("supervise needs --image, or --geotransform with --size")


def cmd_supervise(args) -> int:
    gt, size = _image_geotransform(args)
    _echo_config("supervise", {"areas": args.areas, "geotransform": gt.to_list(), "size": size})
    index = geoknow.AreaIndex.from_manifest(args.areas)
    sup = geoknow.supervise(index, gt, size)
    result = {
        "area_id": sup.area_id,
        "representation": sup.representation.tolist(),
        "label": sup.label,
        "class": geoknow.ACTIVE_CLASSES[sup.label].name,
    }
    print(json.dumps(result))
    if args.out:
        _write_json(_out_dir(args) / "supervision.json", result)
    return 0


def cmd_ingest(args) -> int:
    values = {**_load_config(args.config, "ingest"), **_overrides(args, {"tile_size": "tile_size", "overlap": "overlap_rate"})}
    cfg = _build(ingest.IngestConfig, values)
    workers = args.workers or 1
    _echo_config("ingest", {**asdict(cfg), "workers": workers, "areas": args.areas, "scenes": args.scenes})
    out = _out_dir(args)
    scenes = ingest.find_scenes(args.scenes)
    if not scenes:
        raise UsageError("no scenes found")
    summary = ingest.build_manifest(scenes, args.areas, cfg, out / "manifest.jsonl", workers=workers)
    log.info("kept %d tiles, discarded %s", summary["kept"], summary["discarded"])
    return 0 if not summary["failed_scenes"] or summary["kept"] else 1


def cmd_pretrain(args) -> int:
    values = {
        **_load_config(args.config, "train"),
        **_overrides(args, {"seed": "seed", "precision": "precision", "mode": "mode", "epochs": "epochs", "lr": "learning_rate", "export": "export"}),
    }
    cfg = _build(trainer.TrainConfig, values)
    out = _out_dir(args)
    manifest = args.manifest
    if manifest is None:
        if not args.synth:
            raise UsageError("pretrain needs --manifest or --synth")
        scfg = _build(synth.SynthConfig, _load_config(args.config, "synth"))
        icfg = _build(ingest.IngestConfig, {"tile_size": scfg.tile_size, **_load_config(args.config, "ingest")})
        _echo_config("pretrain", {"train": cfg.to_dict(), "synth": scfg.to_dict(), "ingest": asdict(icfg)})
        res = synth.synth_generate(scfg, cfg.seed, out / "data")
        manifest = out / "data" / "ingest" / "manifest.jsonl"
        ingest.build_manifest(res.scenes, res.areas, icfg, manifest, workers=args.workers or 1)
    else:
        _echo_config("pretrain", {"train": cfg.to_dict(), "manifest": manifest})
    dataset = trainer.TileDataset.from_manifest(manifest)
    result = trainer.run_pretraining(dataset, cfg, out)
    log.info("finished at step %d; export %s", result.state.global_step, result.export_path)
    return 0


def _manifest_proportions(path) -> list[float]:
    """Pixel-weighted class proportions over a manifest's tiles."""
    reps = np.array([r.representation for r in ingest.read_manifest(path)])
    if len(reps) == 0:
        raise GeoKRError(f"{path}: manifest is empty")
    return reps.mean(axis=0).tolist()


def cmd_analyze_change(args) -> int:
    if args.builtin_globeland30:
        old, new = analyze.GLOBELAND30_PROPORTIONS[2010], analyze.GLOBELAND30_PROPORTIONS[2020]
        source = "GlobeLand30 2010 -> 2020"
    elif args.old and args.new:
        source = f"{args.old} -> {args.new}"
        manifests = str(args.old).endswith(".jsonl") and str(args.new).endswith(".jsonl")
        if manifests:
            old, new = _manifest_proportions(args.old), _manifest_proportions(args.new)
        else:
            old, new = analyze.load_proportions(args.old), analyze.load_proportions(args.new)
    else:
        raise UsageError("analyze-change needs --old and --new, or --builtin-globeland30")
    _echo_config("analyze-change", {"source": source, "format": args.format})
    report = analyze.product_change_stats(old, new)
    if args.old and args.new and str(args.old).endswith(".jsonl") and str(args.new).endswith(".jsonl"):
        report.category_change_rate = analyze.category_change_rate(args.old, args.new)
    if args.out:
        _write_json(_out_dir(args) / "change_report.json", report.to_dict())
    print(report.to_text() if args.format == "text" else json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    if args.checkpoint:
        params, enc, _ = nnet.load_checkpoint(args.checkpoint)
        source = str(args.checkpoint)
    elif args.random_init:
        params = enc = None
        source = "random"
    else:
        raise UsageError("probe needs --checkpoint or --random-init")
    seeds = args.seeds or [0, 1, 2]
    _echo_config("probe", {"source": source, "manifest": args.manifest, "seeds": seeds, "epochs": args.epochs, "lr": args.lr})
    data = trainer.TileDataset.from_manifest(args.manifest)
    if params is None:
        h, w = data.tile_shape
        enc = trainer.TrainConfig().encoder(h, w)
        params = nnet.init_params(enc, np.random.default_rng(args.seed or 0), nnet.DTYPES[args.precision or "f32"])
    result = analyze.linear_probe(params, enc, data.tiles, data.labels, seeds=seeds, epochs=args.epochs, lr=args.lr, source=source)
    print(json.dumps(result.to_dict(), sort_keys=True))
    if args.out:
        _write_json(_out_dir(args) / "probe.json", result.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    if args.precision not in (None, "f64"):
        raise UsageError("gradcheck runs in double precision only")
    seed = args.seed if args.seed is not None else 0
    cfg = nnet.EncoderConfig(height=args.size, width=args.size)
    _echo_config("gradcheck", {"encoder": cfg.to_dict(), "samples": args.samples, "batch": args.batch, "seed": seed, "mutation": args.mutation})
    rng = np.random.default_rng(seed)
    params = nnet.init_params(cfg, rng, np.float64)
    batch = rng.standard_normal((args.batch, 3, args.size, args.size))
    targets = rng.dirichlet(np.ones(cfg.output_dim), size=args.batch)
    res = nnet.finite_diff_check(params, cfg, batch, targets, n_samples=args.samples, seed=seed, mutation=args.mutation)
    res["passed"] = res["max_rel_error"] < args.tolerance
    print(json.dumps(res, default=str))
    if args.out:
        _write_json(_out_dir(args) / "gradcheck.json", json.loads(json.dumps(res, default=str)))
    return 0 if res["passed"] or args.mutation else 1


# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--precision", choices=sorted(nnet.DTYPES))

    parser = argparse.ArgumentParser(prog="geokr", description="Geographic-knowledge supervised pre-training pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes and land-cover products")
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--tiles-per-class", type=int)
    p.add_argument("--tile-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("supervise", parents=[common], help="knowledge representation for one image")
    p.add_argument("--areas", required=True, help="area index JSON")
    p.add_argument("--image", help="image raster (.rhdr)")
    p.add_argument("--geotransform", type=float, nargs=6, metavar="GT")
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_supervise)

    p = sub.add_parser("ingest", parents=[common], help="tile, filter and supervise scenes into a manifest")
    p.add_argument("--areas", required=True)
    p.add_argument("--scenes", required=True, nargs="+", help="scene headers or directories")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--overlap", type=float)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", parents=[common], help="train student/teacher networks")
    p.add_argument("--manifest")
    p.add_argument("--synth", action="store_true", help="generate and ingest synthetic data first")
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--export", choices=trainer.EXPORTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("analyze-change", parents=[common], help="per-class change between two products")
    p.add_argument("--old", help="proportions JSON or manifest (.jsonl)")
    p.add_argument("--new", help="proportions JSON or manifest (.jsonl)")
    p.add_argument("--builtin-globeland30", action="store_true", help="use the built-in 2010/2020 GlobeLand30 proportions")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_analyze_change)

    p = sub.add_parser("probe", parents=[common], help="linear probe on a frozen encoder")
    p.add_argument("--manifest", required=True, help="labelled tiles (ingest manifest)")
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of backward")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--mutation", choices=("relu_mask",))
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("GEOKR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geokr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (GeoKRError, OSError) as exc:
        print(f"geokr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
