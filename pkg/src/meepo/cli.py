"""``meepo`` command line: data generation, training, evaluation, ablations and accounting."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, MeepoError, NumericError, ParameterError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=Path, help="key = value config file applied before flags")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-size", type=float, help="voxel edge length in metres")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--paper-scale", action="store_true", help="full widths and the indoor optimizer recipe")
    p.add_argument("--full-width", action="store_true", help="channel multiplier 1.0")
    p.add_argument("--no-d-skip", action="store_true", help="drop the D skip term of the SSM")
    p.add_argument("--block-type", help="block type for every stage")


def build_parser() -> _Parser:
    parser = _Parser(prog="meepo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic scenes as MPC1 files")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-scenes", type=int, default=4)
    p.add_argument("--num-points", type=int, default=4096)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    _model_flags(p)
    p.add_argument("--out", type=Path, default=Path("model.mpk"))
    p.add_argument("--num-train", type=int, default=32)
    p.add_argument("--num-val", type=int, default=8)
    p.add_argument("--log", type=Path, help="write per-evaluation reports as CSV")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, nargs="*", help="MPC1 scenes (default: synthetic validation scenes)")
    p.add_argument("--num-val", type=int, default=8)
    p.add_argument("--grid-size", type=float)

    p = sub.add_parser("ablate", help="train a grid of configurations over several seeds")
    _common(p)
    _model_flags(p)
    p.add_argument("--ablation-axis", required=True, choices=("block_type", "conv_mode", "directions", "stride"))
    p.add_argument("--grid", nargs="+", help="axis values (default: the standard grid for the axis)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--probe", action="store_true", help="also run the successor probe on causality axes")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("bench-scaling", help="time a kernel over sequence lengths and fit the log-log slope")
    _common(p)
    p.add_argument("--arch", choices=("mamba", "attention", "sparse_conv"), required=True)
    p.add_argument("--lengths", type=int, nargs="+", default=[2**12, 2**13, 2**14, 2**15])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--C", type=int)
    p.add_argument("--csv", type=Path)
    p.add_argument("--plot", type=Path)

    p = sub.add_parser("flops", help="analytic operation count")
    _common(p)
    p.add_argument("--arch", choices=("mamba", "attention", "sparse_conv"), required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--C", type=int, default=64)
    p.add_argument("--C-in", type=int)
    p.add_argument("--C-out", type=int)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--E", type=int, default=2)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--directions", type=int, default=1, help="multiply the mamba count by this many scan orders")

    p = sub.add_parser("inspect", help="print a scene's serialization order and stage voxel counts")
    _common(p)
    p.add_argument("input", type=Path, nargs="?", help="MPC1 file (default: synthetic scene for --seed)")
    p.add_argument("--grid-size", type=float)
    p.add_argument("--limit", type=int, default=20, help="voxels listed (0 = all)")

    p = sub.add_parser("describe", help="per-block parameter and operation accounting")
    _common(p)
    _model_flags(p)
    p.add_argument("--voxels", type=int, default=100_000, help="input voxel count assumed for FLOPs")
    return parser


# --- config assembly ----------------------------------------------------------------


def _configs(args):
    from .config import load_config
    from .model import ModelConfig
    from .train import TrainConfig

    model, train = ModelConfig(), TrainConfig()
    if getattr(args, "paper_scale", False):
        model = dataclasses.replace(model, channel_multiplier=1.0)
        train = TrainConfig.paper_scale()
    if args.config is not None:
        model, train = load_config(args.config, model, train)
    if getattr(args, "full_width", False):
        model = dataclasses.replace(model, channel_multiplier=1.0)
    if getattr(args, "grid_size", None) is not None:
        model = dataclasses.replace(model, grid_size=args.grid_size)
    if getattr(args, "no_d_skip", False):
        model = dataclasses.replace(model, ssm=dataclasses.replace(model.ssm, d_skip=False))
    if getattr(args, "block_type", None):
        model = dataclasses.replace(model, block_types=(args.block_type,) * model.num_stages)
    kw = {"seed": args.seed}
    if getattr(args, "steps", None) is not None:
        kw["steps"] = args.steps
    return model, dataclasses.replace(train, **kw)


def _echo(model=None, train=None, **extra) -> str:
    from .config import format_config

    lines = [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + ("\n" if lines else "") + format_config(model, train)


def _commented(text: str) -> str:
    return "".join(f"# {line}\n" for line in text.splitlines())


# --- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .pointcloud import SceneSpec, generate_scene, write_cloud

    spec = SceneSpec(num_points=args.num_points)
    spec.validate()
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = [_commented(f"seed = {args.seed}\nnum_scenes = {args.num_scenes}\nscene = {spec}")]
    for i in range(args.num_scenes):
        seed = args.seed * 1000 + i
        path = args.out / f"scene_{seed:06d}.mpc"
        write_cloud(generate_scene(seed, spec), path)
        manifest.append(f"{path.name} seed={seed}\n")
        print(path)
    (args.out / "MANIFEST.txt").write_text("".join(manifest))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import DatasetSpec, train_loop

    model, train = _configs(args)
    data = DatasetSpec(grid_size=model.grid_size, num_train=args.num_train, num_val=args.num_val, seed=args.seed)
    print(_commented(_echo(model, train)), end="")
    res = train_loop(model, train, data, checkpoint_path=args.out)
    for rep in res.reports:
        print(rep.summary())
    if args.log:
        rows = ["step,loss,miou," + ",".join(f"iou_{c}" for c in range(model.num_classes))]
        for rep in res.reports:
            rows.append(f"{rep.step},{rep.loss:.6f},{rep.miou:.6f}," + ",".join(f"{v:.6f}" for v in rep.per_class_iou))
        args.log.write_text(_commented(res.config_text) + "\n".join(rows) + "\n")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pointcloud import read_cloud, voxelize
    from .train import DatasetSpec, evaluate, restore_model

    model, train, store = restore_model(args.checkpoint)
    if args.grid_size is not None:
        model = dataclasses.replace(model, grid_size=args.grid_size)
    if args.data:
        scenes = [voxelize(read_cloud(p), model.grid_size) for p in args.data]
        for p, v in zip(args.data, scenes):
            if v.labels is None:
                raise DataError(f"{p} carries no labels")
    else:
        _, scenes = DatasetSpec(grid_size=model.grid_size, num_train=0, num_val=args.num_val, seed=args.seed).load()
    print(_commented(_echo(model, train, checkpoint=args.checkpoint)), end="")
    print(evaluate(store, model, scenes).summary())
    return EXIT_OK


DEFAULT_GRIDS = {
    "block_type": ["cnn_only", "mamba_only", "cnn_mamba"],
    "conv_mode": ["causal", "symmetric"],
    "directions": ["standard", "bidirectional", "bidirectional_strided"],
    "stride": ["2", "4", "8", "16"],
}


def cmd_ablate(args) -> int:
    from .train import DatasetSpec, ProbeConfig, ablation_suite

    model, train = _configs(args)
    grid = args.grid or DEFAULT_GRIDS[args.ablation_axis]
    seeds = args.seeds or [0, 1, 2]
    data = DatasetSpec(grid_size=model.grid_size)
    table = ablation_suite(args.ablation_axis, grid, seeds, model, train, data,
                           probe=ProbeConfig() if args.probe else None)
    text = _commented(_echo(model, train, axis=args.ablation_axis, grid=",".join(grid))) + table.format() + "\n"
    if args.ablation_axis == "block_type" and {"cnn_only", "cnn_mamba"} <= set(grid):
        order = ["cnn_only"] + [g for g in grid if g != "cnn_only"]
        text += "\n" + table.format_additive(order) + "\n"
    print(text, end="")
    if args.out:
        args.out.write_text(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .analysis import default_bench_params, scaling_bench

    params = default_bench_params(args.arch)
    if args.C:
        params = dataclasses.replace(params, C=args.C)
    rep = scaling_bench(args.arch, args.lengths, args.reps, params, args.seed)
    header = f"arch = {args.arch}\nseed = {args.seed}\nreps = {args.reps}\nparams = {params}"
    csv = rep.to_csv(header)
    print(csv, end="")
    print(f"slope {rep.slope:.3f} (analytic exponent {rep.analytic_exponent:g})")
    if args.csv:
        args.csv.write_text(csv)
    if args.plot:
        args.plot.write_text(rep.to_plot_data(header))
    return EXIT_OK


def cmd_flops(args) -> int:
    from .analysis import FlopParams, analytic_ops

    p = FlopParams(L=args.L, C=args.C, C_in=args.C_in, C_out=args.C_out, N=args.N, E=args.E, K=args.K, k=args.k)
    n = analytic_ops(args.arch, p)
    if args.arch == "mamba":
        n *= args.directions
    print(n)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .model import ModelConfig
    from .pointcloud import generate_scene, grid_pool, read_cloud, voxelize

    model, _ = _configs(args) if args.config else (ModelConfig(), None)
    grid = args.grid_size if args.grid_size is not None else model.grid_size
    pc = read_cloud(args.input) if args.input else generate_scene(args.seed)
    v = voxelize(pc, grid)
    print(f"# source = {args.input or f'synthetic seed {args.seed}'}\n# grid_size = {grid}")
    print(f"points {len(pc)} voxels {len(v)}")
    print("order,key,x,y,z,count" + (",label" if v.labels is not None else ""))
    n = len(v) if args.limit == 0 else min(args.limit, len(v))
    for i in range(n):
        x, y, z = v.coords[i]
        row = f"{i},{v.keys[i]},{x},{y},{z},{v.counts[i]}"
        if v.labels is not None:
            row += f",{v.labels[i]}"
        print(row)
    counts, level = [len(v)], v
    for stride in model.down_strides:
        level, _ = grid_pool(level, stride)
        counts.append(len(level))
    print("stage voxel counts: " + " ".join(map(str, counts)))
    return EXIT_OK


def cmd_describe(args) -> int:
    from .analysis import block_flops
    from .model import build_model, model_views

    model, train = _configs(args)
    store = build_model(model, args.seed)
    views = model_views(model, store)
    print(_commented(_echo(model, train, voxels=args.voxels)), end="")
    print(f"{'block':<16} {'type':<18} {'C':>5} {'voxels':>9} {'params':>11} {'GFLOPs':>10}")
    total_flops = 0
    L = args.voxels
    lengths = [L]
    for s in model.down_strides:
        lengths.append(max(1, lengths[-1] // (s**2)))  # surfaces: ~stride² fewer voxels per level
    for side, blocks, heads in (("enc", views.encoder, model.enc_heads()), ("dec", views.decoder, model.dec_heads())):
        for s, stage in enumerate(blocks):
            for b, bp in enumerate(stage):
                name = f"{side}.{s}.block.{b}"
                n = store.num_parameters(name + ".")
                fl = block_flops(bp.block_type, lengths[s + 1] if side == "enc" else lengths[s], bp.channels, heads[s], model)
                total_flops += sum(fl.values())
                print(f"{name:<16} {bp.block_type:<18} {bp.channels:>5} {lengths[s + 1] if side == 'enc' else lengths[s]:>9} "
                      f"{n:>11,} {sum(fl.values()) / 1e9:>10.3f}")
    print(f"blocks {model.total_blocks() - model.embedding_depth} parameters {store.num_parameters():,} "
          f"block GFLOPs {total_flops / 1e9:.3f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench-scaling": cmd_bench,
    "flops": cmd_flops,
    "inspect": cmd_inspect,
    "describe": cmd_describe,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage() + str(exc), file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"meepo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, NumericError, MeepoError, OSError) as exc:
        print(f"meepo {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
