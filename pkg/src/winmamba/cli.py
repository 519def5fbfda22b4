"""Command-line entry point: ``winmamba <subcommand> [options]``.

Every subcommand prints one JSON document (or writes it to ``--out``) that
embeds the fully resolved configuration, so a run can be repeated from its
own output.  Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numeric failure (non-finite values, divergence, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import PAPER_WINDOWS, BackboneConfig, StageConfig, backbone_forward, init_backbone
from .numerics import NumericError, Tensor, grad_check, linear, no_grad, sum_all
from .serialize import EmptySequenceError, WindowSpec, locality_report, morton_seq_gap
from .ssm import SsmConfig
from .toytask import TABLE4_PARTS, ToyConfig, ablate, format_table, gen_scene, train_toy
from .voxelgrid import EmptySceneError, PointFormatError, SparseVoxelSet, bin_points, read_points

THREADS_ENV = "WINMAMBA_THREADS"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace("x", ",").split(",") if v.strip())


def _triple(s: str) -> tuple[int, int, int]:
    t = _ints(s)
    if len(t) == 1:
        t = t * 3
    if len(t) != 3:
        raise ValueError(f"expected 1 or 3 integers, got {s!r}")
    return t  # type: ignore[return-value]


def _floats3(s: str) -> tuple[float, float, float]:
    t = tuple(float(v) for v in s.split(","))
    if len(t) == 1:
        t = t * 3
    if len(t) != 3:
        raise ValueError(f"expected 1 or 3 numbers, got {s!r}")
    return t  # type: ignore[return-value]


def _windows(s: str) -> tuple[tuple[int, int, int], ...]:
    return tuple(_triple(part) for part in s.split(";") if part.strip())


def _bounds(s: str):
    v = [float(x) for x in s.split(",")]
    if len(v) != 6:
        raise ValueError("bounds need six numbers: xmin,ymin,zmin,xmax,ymax,zmax")
    return (tuple(v[:3]), tuple(v[3:]))


def _optional(parse):
    def inner(s: str):
        return None if s.strip().lower() in ("", "none", "auto") else parse(s)
    return inner


# key -> parser; values in a config file / --set use these textual forms
CONFIG_KEYS = {
    "stages": int,
    "channels": int,
    "windows": _windows,
    "factor": int,
    "wsf": _bool,
    "awf_parts": lambda s: "" if s.strip() in ("-", "none") else s.strip().upper(),
    "shift": _optional(_triple),
    "bidirectional": _bool,
    "seed": int,
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "scenes": int,
    "val_scenes": int,
    "objects": int,
    "points_per_object": int,
    "noise_points": int,
    "boundary": _bool,
    "bounds": _bounds,
    "cell": _floats3,
    "target_accuracy": _optional(float),
}

_TOY = ToyConfig()
DEFAULTS = {
    "stages": 4, "channels": 64, "windows": PAPER_WINDOWS, "factor": 2, "wsf": True,
    "awf_parts": "ABC", "shift": None, "bidirectional": False, "seed": 0, "lr": _TOY.lr,
    "epochs": _TOY.epochs, "batch_size": _TOY.batch_size, "scenes": _TOY.n_scenes,
    "val_scenes": _TOY.n_val, "objects": _TOY.n_objects, "points_per_object": _TOY.points_per_object,
    "noise_points": _TOY.noise_points, "boundary": False,
    "bounds": ((0.0, 0.0, 0.0), (10.4, 10.4, 6.4)), "cell": (0.2, 0.2, 0.2), "target_accuracy": None,
}
# per-subcommand defaults layered over DEFAULTS
COMMAND_DEFAULTS = {
    "train-toy": {"stages": _TOY.n_stages, "channels": _TOY.channels, "bounds": _TOY.bounds,
                  "target_accuracy": 0.95},
    "ablate": {"stages": _TOY.n_stages, "channels": _TOY.channels, "bounds": _TOY.bounds,
               "boundary": True, "epochs": 20},
    "grad-check": {"stages": 2, "channels": 8, "windows": ((4, 4, 4), (4, 4, 2))},
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(key, value, f"{origin}:{lineno}")
    return out


def _parse_value(key: str, value: str, where: str):
    key = key.replace("-", "_")
    if key not in CONFIG_KEYS:
        raise UsageError(f"{where}: unknown config key {key!r} (known: {', '.join(sorted(CONFIG_KEYS))})")
    try:
        return CONFIG_KEYS[key](value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from None


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg.update({k.replace("-", "_"): v for k, v in parse_config_text(path.read_text(), str(path)).items()})
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip().replace("-", "_")] = _parse_value(k.strip(), v.strip(), "--set")
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if len(cfg["windows"]) < cfg["stages"]:
        raise UsageError(f"{cfg['stages']} stages need {cfg['stages']} windows, got {len(cfg['windows'])}")
    return cfg


def backbone_config(cfg: dict) -> BackboneConfig:
    stages = [StageConfig(window=cfg["windows"][k], factor=cfg["factor"], channels=cfg["channels"],
                          wsf=cfg["wsf"], awf_parts=cfg["awf_parts"], shift=cfg["shift"])
              for k in range(cfg["stages"])]
    return BackboneConfig(stages=stages, seed=cfg["seed"], cell=cfg["cell"], bounds=cfg["bounds"],
                          ssm=SsmConfig(bidirectional=cfg["bidirectional"]))


def toy_config(cfg: dict) -> ToyConfig:
    return ToyConfig(n_stages=cfg["stages"], channels=cfg["channels"], windows=cfg["windows"],
                     factor=cfg["factor"], wsf=cfg["wsf"], awf_parts=cfg["awf_parts"], shift=cfg["shift"],
                     bidirectional=cfg["bidirectional"], seed=cfg["seed"], lr=cfg["lr"],
                     epochs=cfg["epochs"], batch_size=cfg["batch_size"], n_scenes=cfg["scenes"],
                     n_val=cfg["val_scenes"], n_objects=cfg["objects"],
                     points_per_object=cfg["points_per_object"], noise_points=cfg["noise_points"],
                     boundary=cfg["boundary"], bounds=cfg["bounds"], cell=cfg["cell"],
                     target_accuracy=cfg["target_accuracy"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# -------------------------------------------------------------- subcommands

def _load_cloud(args, cfg):
    if args.input:
        path = Path(args.input)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        return read_points(path, cfg["bounds"])
    scene = gen_scene(cfg["seed"], cfg["objects"], cfg["points_per_object"], cfg["noise_points"],
                      cfg["bounds"], cfg["boundary"], cfg["cell"])
    return scene.cloud


def cmd_voxelize(args, cfg) -> dict:
    cloud = _load_cloud(args, cfg)
    raw = bin_points(cloud, cfg["cell"])
    return {"points": len(cloud), "dropped": int(np.sum(raw.point_voxel < 0)), "voxels": len(raw.coords),
            "extent": list(raw.extent), "raw_channels": int(raw.raw.shape[1]),
            "max_points_per_voxel": int(raw.counts.max()),
            "coords": raw.coords.tolist() if args.coords else None}


def cmd_forward(args, cfg) -> dict:
    cloud = _load_cloud(args, cfg)
    bcfg = backbone_config(cfg)
    params = init_backbone(bcfg, 3 + cloud.n_extra, np.random.default_rng(cfg["seed"]))
    params.training = False
    t0 = time.perf_counter()
    raw = bin_points(cloud, cfg["cell"])
    with no_grad():
        out = backbone_forward(cloud, bcfg, params)
    return {"input_voxels": len(raw.coords), "input_extent": list(raw.extent), "stages": out.trace(),
            "windows": [list(s.window) for s in bcfg.stages], "bev_shape": list(out.bev.shape),
            "bev_nonzero_cells": int(np.count_nonzero(np.any(out.bev.data != 0, axis=2))),
            "parameters": params.count(), "seconds": time.perf_counter() - t0}


def cmd_train_toy(args, cfg) -> dict:
    tcfg = toy_config(cfg)
    log = (lambda m: print(json.dumps(_jsonable(m)), file=sys.stderr)) if args.verbose else None
    rep = train_toy(tcfg, log)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return rep.to_dict()


def cmd_ablate(args, cfg) -> dict:
    base = toy_config(cfg)
    parts = TABLE4_PARTS if args.parts == "table" else tuple(
        "" if p in ("-", "none") else p.upper() for p in args.parts.split(","))
    wsf_values = {"both": (False, True), "on": (True,), "off": (False,)}[args.wsf_grid]
    log = (lambda m: print(json.dumps(_jsonable(m)), file=sys.stderr)) if args.verbose else None
    res = ablate(base, wsf_values, parts, tuple(range(cfg["seed"], cfg["seed"] + args.seeds)), log)
    res["table"] = format_table(res)
    print(res["table"], file=sys.stderr)
    return res


def cmd_bench_serialize(args, cfg) -> dict:
    if args.input:
        raw = bin_points(_load_cloud(args, cfg), cfg["cell"])
        coords, extent = raw.coords, raw.extent
    else:
        g = args.grid
        extent = (g, g, g)
        rng = np.random.default_rng(cfg["seed"])
        n = int(round(args.density * g ** 3))
        flat = np.sort(rng.choice(g ** 3, size=n, replace=False)) if args.density < 1 else np.arange(g ** 3)
        coords = np.stack(np.unravel_index(flat, extent), 1)
    if len(coords) == 0:
        raise EmptySequenceError("no voxels to serialize")
    window = args.window
    shift = args.shift if args.shift is not None else tuple(w // 2 for w in window)
    specs = [WindowSpec(window, args.axis, shift)]
    rows = [m.to_dict() for m in locality_report(coords, specs, extent, args.neighborhood)]
    return {"voxels": len(coords), "extent": list(extent), "neighborhood": args.neighborhood,
            "reports": rows, "morton_mean_seq_gap": morton_seq_gap(coords, args.neighborhood)}


def grad_check_instance(cfg: dict, n_voxels: int, seed: int):
    """Closure ``f`` and parameters for an end-to-end backbone gradient check."""
    bcfg = backbone_config(replace_seed(cfg, seed))
    params = init_backbone(bcfg, 4, np.random.default_rng(seed))
    rng = np.random.default_rng(10_000 + seed)
    extent = (8, 8, 8)
    flat = rng.choice(int(np.prod(extent)), size=n_voxels, replace=False)
    coords = np.stack(np.unravel_index(flat, extent), 1)
    raw = Tensor(rng.normal(size=(n_voxels, 4)))

    def features():
        vset = SparseVoxelSet(coords, linear(raw, params["vfe.w"], params["vfe.b"]), (1, 1, 1), extent)
        return backbone_forward(vset, bcfg, params).bev

    with no_grad():
        shape = features().shape
    w = Tensor(rng.normal(size=shape))
    return (lambda: sum_all(features() * w)), params


def replace_seed(cfg: dict, seed: int) -> dict:
    out = dict(cfg)
    out["seed"] = seed
    return out


def cmd_grad_check(args, cfg) -> dict:
    reports = []
    for k in range(args.repeats):
        seed = cfg["seed"] + k
        f, params = grad_check_instance(cfg, args.voxels, seed)
        rep = grad_check(f, params, h=args.h, tol=args.tol, max_entries=args.entries,
                         rng=np.random.default_rng(seed))
        reports.append({"seed": seed, **rep.to_dict()})
    worst = max(r["worst"] for r in reports)
    return {"voxels": args.voxels, "h": args.h, "tol": args.tol, "max_rel_err": worst,
            "passed": all(r["passed"] for r in reports), "runs": reports}


COMMANDS = {
    "voxelize": cmd_voxelize,
    "forward": cmd_forward,
    "train-toy": cmd_train_toy,
    "ablate": cmd_ablate,
    "bench-serialize": cmd_bench_serialize,
    "grad-check": cmd_grad_check,
}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    g.add_argument("--out", help="write the JSON report here instead of stdout")
    g.add_argument("--threads", type=int, default=None,
                   help=f"bound BLAS/OpenMP threads (default: ${THREADS_ENV} or library default)")
    g.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    g.add_argument("--seed", type=int)

    model = _Parser(add_help=False)
    m = model.add_argument_group("model options")
    m.add_argument("--stages", type=int)
    m.add_argument("--channels", type=int)
    m.add_argument("--windows", type=_windows, help="e.g. '13,13,32;13,13,16'")
    m.add_argument("--factor", type=int)
    m.add_argument("--wsf", dest="wsf", action="store_const", const=True)
    m.add_argument("--no-wsf", dest="wsf", action="store_const", const=False)
    m.add_argument("--awf-parts", dest="awf_parts", type=CONFIG_KEYS["awf_parts"], help="subset of ABCD, '-' for none")
    m.add_argument("--shift", type=_triple)
    m.add_argument("--bidirectional", action="store_const", const=True)
    m.add_argument("--cell", type=_floats3)
    m.add_argument("--bounds", type=_bounds)

    data = _Parser(add_help=False)
    d = data.add_argument_group("scene options")
    d.add_argument("--scenes", type=int)
    d.add_argument("--val-scenes", dest="val_scenes", type=int)
    d.add_argument("--objects", type=int)
    d.add_argument("--points-per-object", dest="points_per_object", type=int)
    d.add_argument("--noise-points", dest="noise_points", type=int)
    d.add_argument("--boundary", action="store_const", const=True)
    d.add_argument("--no-boundary", dest="boundary", action="store_const", const=False)

    train = _Parser(add_help=False)
    t = train.add_argument_group("training options")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--target-accuracy", dest="target_accuracy", type=_optional(float))

    p = _Parser(prog="winmamba", description="Window-serialized Mamba backbone toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("voxelize", parents=[common, model, data], help="bin a point file into voxels")
    sp.add_argument("input", nargs="?", help="text or PCB1 point file (default: a synthetic scene)")
    sp.add_argument("--coords", action="store_true", help="include voxel coordinates in the report")

    sp = sub.add_parser("forward", parents=[common, model, data], help="run the backbone and print the shape trace")
    sp.add_argument("input", nargs="?", help="text or PCB1 point file (default: a synthetic scene)")

    sp = sub.add_parser("train-toy", parents=[common, model, data, train], help="train on synthetic scenes")
    sp.add_argument("--csv", help="also write the per-epoch trace as CSV")

    sp = sub.add_parser("ablate", parents=[common, model, data, train], help="WSF x AWF-parts grid")
    sp.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    sp.add_argument("--parts", default="ABC", help="comma list of part subsets, or 'table' for -,B,AB,ABC,ABCD")
    sp.add_argument("--wsf-grid", dest="wsf_grid", choices=("both", "on", "off"), default="both")

    sp = sub.add_parser("bench-serialize", parents=[common, model], help="window locality and sort throughput")
    sp.add_argument("input", nargs="?", help="point file to voxelize (default: random grid)")
    sp.add_argument("--grid", type=int, default=16)
    sp.add_argument("--density", type=float, default=1.0)
    sp.add_argument("--window", type=_triple, default=(4, 4, 4))
    sp.add_argument("--axis", choices=("x", "y"), default="x")
    sp.add_argument("--neighborhood", type=int, choices=(6, 26), default=6)
    sp.add_argument("--objects", type=int)
    sp.add_argument("--points-per-object", dest="points_per_object", type=int)
    sp.add_argument("--noise-points", dest="noise_points", type=int)
    sp.add_argument("--boundary", action="store_const", const=True)
    sp.add_argument("--no-boundary", dest="boundary", action="store_const", const=False)

    sp = sub.add_parser("grad-check", parents=[common, model], help="finite-difference gradient check")
    sp.add_argument("--voxels", type=int, default=30)
    sp.add_argument("--repeats", type=int, default=1, help="seeds to check, starting at --seed")
    sp.add_argument("--entries", type=int, default=2, help="sampled entries per parameter tensor")
    sp.add_argument("--h", type=float, default=1e-6)
    sp.add_argument("--tol", type=float, default=1e-4)
    return p


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(_jsonable(report), indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _run(args) -> int:
    cfg = resolve_config(args.command, args)
    report = COMMANDS[args.command](args, cfg)
    report = {"command": args.command, "config": cfg, **report}
    _emit(report, args.out)
    if args.command == "grad-check" and not report["passed"]:
        print(f"gradient check failed: max rel err {report['max_rel_err']:.3g} >= {report['tol']}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            print(f"{THREADS_ENV} must be an integer", file=sys.stderr)
            return EXIT_USAGE
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=max(1, threads)):
                return _run(args)
        return _run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (EmptySceneError, PointFormatError, EmptySequenceError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
