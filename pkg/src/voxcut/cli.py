"""Command-line entry point: ``voxcut generate|train|run|evaluate|inspect``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .denoiser import (CheckpointError, DenoiserConfig, NumericError, TrainConfig, load_checkpoint, set_threads,
                       train)
from .diffusion import Sampler, SamplerStateError, ScheduleError
from .evaluation import evaluation_scenes, repetition_seeds, run_campaign
from .io import FormatError, load_vxdc
from .planner import PlannerConfig
from .policies import DiffusionPlanner, GroundTruthPlanner, RandomPlanner, nocond_planner
from .scenes import GenerationError, SceneDataset, build_dataset, default_modes, parse_scene_config
from .sim import EpisodeConfig, run_episode
from .voxel import Axis, ConfigError, CutAction, VoxelError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PLANNERS = ("proposed", "nocond", "gt", "random")
GLYPHS = ".#BGRabcdefghijklmnopqrstuvwxyz"


# --- argument types ----------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _sampler(text: str) -> Sampler:
    try:
        s = Sampler.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    if s.kind == "ddim" and s.steps < 1:
        raise argparse.ArgumentTypeError("ddim needs at least one step")
    return s


def _action(text: str) -> CutAction:
    try:
        return CutAction.parse(text)
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(f"bad cut action {text!r}; expected AXIS:INDEX:low|high") from exc


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}")
    return parse


def _widths(text: str) -> tuple[int, int]:
    ws = _csv_list(_positive_int)(text)
    if len(ws) != 2:
        raise argparse.ArgumentTypeError("widths take two comma-separated values, e.g. 16,32")
    return tuple(ws)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


# --- parser ------------------------------------------------------------------

def _scene_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scene source")
    g.add_argument("--scene-config", help="INI file describing arrangement modes (default: built-in modes)")
    g.add_argument("-K", "--K", type=_positive_int, default=16, help="grid resolution for built-in modes")
    g.add_argument("--n-modes", type=_positive_int, default=5, help="number of built-in modes")


def _planner_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("planning")
    g.add_argument("--checkpoint", help="trained denoiser (needed by proposed and nocond)")
    g.add_argument("--gamma", type=_nonneg_float, default=1.0, help="weight on the std in the presence score")
    g.add_argument("-M", "--samples", type=_positive_int, default=32, help="sampled structures per plan")
    g.add_argument("-w", "--guidance", type=_nonneg_float, default=0.2, help="classifier-free guidance scale")
    g.add_argument("--sampler", type=_sampler, default=Sampler(), help="ddpm or ddim:STEPS (default ddim:20)")
    g.add_argument("--scope", choices=("slab", "surface"), default="slab", help="feasibility over slab or cut plane")
    g.add_argument("--risk", choices=("ucb", "max"), default="ucb", help="presence-score functional")
    g.add_argument("--replacement", type=_on_off, default=True, help="re-impose observations each step (on|off)")
    g.add_argument("-T", "--horizon", type=_nonneg_int, default=8, help="total cuts per episode")
    g.add_argument("--initial", type=_action, default=CutAction.parse("Y:1:low"), help="first cut, e.g. Y:1:low")
    g.add_argument("--scene-seed", type=int, default=0, help="seed for drawing evaluation scenes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxcut", description=__doc__)
    parser.add_argument("--version", action="version", version=f"voxcut {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a scene dataset (VXDC + JSON sidecar)")
    _scene_args(p)
    p.add_argument("--modes", type=_positive_int, help="use only the first N modes")
    p.add_argument("--per-mode", type=_positive_int, default=100, help="scenes per mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="output .vxdc path")

    p = sub.add_parser("train", help="fit the denoiser on a dataset")
    p.add_argument("--data", required=True, help="VXDC dataset from generate")
    p.add_argument("-o", "--out", required=True, help="checkpoint path (.vxdn)")
    p.add_argument("--steps", type=_positive_int, default=20000)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--lr", type=_nonneg_float, default=2e-4)
    p.add_argument("--p-dropout", type=_probability, default=0.15, help="condition dropout probability")
    p.add_argument("--checkpoint-every", type=_positive_int, default=1000)
    p.add_argument("--log-every", type=_positive_int, default=100)
    p.add_argument("--widths", type=_widths, default=(16, 32))
    p.add_argument("--time-dim", type=_positive_int, default=64)
    p.add_argument("-N", "--diffusion-steps", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")

    p = sub.add_parser("run", help="run one cutting episode and write its JSON-lines record")
    _scene_args(p)
    _planner_args(p)
    p.add_argument("--planner", choices=PLANNERS, default="proposed")
    p.add_argument("--eta", type=_nonneg_float, default=0.5, help="cutting-risk threshold")
    p.add_argument("--mode", type=_nonneg_int, default=0, help="arrangement mode of the evaluation scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="episode record (.jsonl)")

    p = sub.add_parser("evaluate", help="multi-seed comparison campaign with CSV and text reports")
    _scene_args(p)
    _planner_args(p)
    p.add_argument("--methods", type=_csv_list(str), default=list(PLANNERS))
    p.add_argument("--etas", type=_csv_list(_nonneg_float), default=[0.5])
    p.add_argument("--scene-modes", type=_csv_list(_nonneg_int), help="mode ids to evaluate (default all)")
    p.add_argument("--reps", type=_positive_int, default=6, help="repetitions per cell")
    p.add_argument("--seed", type=int, default=0, help="campaign seed; repetition seeds derive from it")
    p.add_argument("--merge", action="append", default=[], help="external metrics CSV to merge")
    p.add_argument("--records", action="store_true", help="also write every episode record")
    p.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("inspect", help="print grids of a VXDC file as ASCII slices")
    p.add_argument("path")
    p.add_argument("--index", type=_nonneg_int, default=0, help="grid number in the file")
    p.add_argument("--axis", choices=("X", "Y", "Z", "x", "y", "z"), default="Z")
    p.add_argument("--plane", type=_positive_int, help="single 1-based plane (default all)")
    return parser


# --- helpers -----------------------------------------------------------------

def _modes(args):
    if args.scene_config:
        with open(args.scene_config) as fh:
            modes = parse_scene_config(fh.read())
    else:
        modes = default_modes(args.K, args.n_modes)
    return modes


def _planner_config(args, eta: float) -> PlannerConfig:
    return PlannerConfig(eta=eta, gamma=args.gamma, M=args.samples, scope=args.scope, risk=args.risk)


def _check_methods(methods, checkpoint) -> None:
    unknown = sorted(set(methods) - set(PLANNERS))
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {list(PLANNERS)}")
    if {"proposed", "nocond"} & set(methods) and not checkpoint:
        raise ConfigError("proposed and nocond planners need --checkpoint")


def _factory(name: str, args, model):
    def make(eta: float):
        cfg = _planner_config(args, eta)
        if name == "gt":
            return GroundTruthPlanner(cfg)
        if name == "random":
            return RandomPlanner()
        if name == "nocond":
            return nocond_planner(model, cfg, args.sampler)
        return DiffusionPlanner(model, cfg, args.guidance, args.sampler, replacement=args.replacement)
    return make


def _planner_provenance(args) -> dict:
    return {"gamma": args.gamma, "M": args.samples, "w": args.guidance, "sampler": str(args.sampler),
            "scope": args.scope, "risk": args.risk, "replacement": args.replacement, "T": args.horizon,
            "initial": str(args.initial), "scene_seed": args.scene_seed, "checkpoint": args.checkpoint}


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_model(args, K: int):
    if not args.checkpoint:
        return None
    return load_checkpoint(args.checkpoint, expect_K=K)


# --- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    modes = _modes(args)
    if args.modes:
        if args.modes > len(modes):
            raise ConfigError(f"--modes {args.modes} but only {len(modes)} modes are defined")
        modes = modes[:args.modes]
    ds = build_dataset(modes, args.per_mode, args.seed)
    ds.validate()
    ds.provenance["command"] = "generate"
    ds.provenance["modes"] = [d.mode_id for d in modes]
    ds.save(args.out)
    print(f"wrote {len(ds)} grids (K={ds.K}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = SceneDataset.load(args.data)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, p_dropout=args.p_dropout,
                      seed=args.seed, checkpoint_every=args.checkpoint_every, log_every=args.log_every)
    mc = DenoiserConfig(K=ds.K, widths=args.widths, time_dim=args.time_dim, N=args.diffusion_steps)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.out, expect_K=ds.K)
        print(f"resuming from step {resume.step}")
    start = time.perf_counter()

    def progress(step: int, loss: float) -> None:
        print(f"step {step:>7d}  loss {loss:.6f}  elapsed {time.perf_counter() - start:8.1f}s", flush=True)

    model, curve = train(ds, cfg, mc, checkpoint_path=args.out, resume=resume, progress=progress)
    mode = "a" if args.resume else "w"
    with open(args.out + ".loss.csv", mode) as fh:
        if not args.resume:
            fh.write("step,loss\n")
        fh.writelines(f"{s},{l!r}\n" for s, l in curve)
    print(f"saved checkpoint at step {model.step} to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    _check_methods([args.planner], args.checkpoint)
    cfg = _planner_config(args, args.eta)
    modes = _modes(args)
    chosen = [d for d in modes if d.mode_id == args.mode]
    if not chosen:
        raise ConfigError(f"no arrangement mode {args.mode}")
    scene = evaluation_scenes(chosen, args.scene_seed)[0]
    model = _load_model(args, scene.K) if args.planner in ("proposed", "nocond") else None
    planner = _factory(args.planner, args, model)(cfg.eta)
    episode = EpisodeConfig(args.horizon, args.initial, args.seed)
    rec = run_episode(scene, planner, episode, {"eta": args.eta, **_planner_provenance(args)})
    with open(args.out, "w") as fh:
        fh.write(rec.to_jsonl())
    f = rec.final
    print(f"final cut_error_volume={f['cut_error_volume']} remaining_rate={f['remaining_rate']:.2f} "
          f"occupancy_rate={f['occupancy_rate']:.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _check_methods(args.methods, args.checkpoint)
    for eta in args.etas:
        _planner_config(args, eta)
    for path in args.merge:
        if not os.path.exists(path):
            raise FileNotFoundError(f"merge file {path} not found")
    modes = _modes(args)
    if args.scene_modes is not None:
        known = {d.mode_id for d in modes}
        missing = sorted(set(args.scene_modes) - known)
        if missing:
            raise ConfigError(f"unknown scene modes {missing}")
        modes = [d for d in modes if d.mode_id in set(args.scene_modes)]
    scenes = evaluation_scenes(modes, args.scene_seed)
    model = _load_model(args, scenes[0].K) if {"proposed", "nocond"} & set(args.methods) else None
    methods = {name: _factory(name, args, model) for name in args.methods}
    seeds = repetition_seeds(args.seed, args.reps)

    def on_row(row: dict) -> None:
        print(f"{row['method']:<9} eta={row['eta']:.2f} {row['scene']:<8} seed={row['seed']:<11d} "
              f"cut_error={row['cut_error_volume']} remaining={row['remaining_rate']:.2f} "
              f"occupancy={row['occupancy_rate']:.2f}", flush=True)

    provenance = {"campaign_seed": args.seed, "reps": args.reps, **_planner_provenance(args)}
    report = run_campaign(methods, scenes, seeds, args.etas, EpisodeConfig(args.horizon, args.initial),
                          provenance, keep_records=args.records, on_row=on_row)
    for path in args.merge:
        report.merge_csv(path)
    report.write(args.out)
    _write_json(os.path.join(args.out, "provenance.json"),
                {**provenance, "methods": args.methods, "etas": args.etas, "scenes": [s.name for s in scenes],
                 "seeds": seeds, "fingerprint": report.fingerprint, "merged": args.merge})
    if args.records:
        with open(os.path.join(args.out, "episodes.jsonl"), "w") as fh:
            for rec in report.records:
                fh.write(rec.to_jsonl())
    print(report.to_text(), end="")
    return EXIT_OK


def render_slices(grid, axis: Axis, plane: int | None = None) -> str:
    planes = [plane] if plane else range(1, grid.K + 1)
    out = []
    ids = np.moveaxis(grid.part_ids, axis.dim, 0)
    for i in planes:
        out.append(f"{axis.name}={i}")
        for row in ids[i - 1][::-1]:
            out.append("".join(GLYPHS[v] if v < len(GLYPHS) else "?" for v in row))
    return "\n".join(out) + "\n"


def cmd_inspect(args) -> int:
    grids = load_vxdc(args.path)
    if args.index >= len(grids):
        raise ConfigError(f"file holds {len(grids)} grids; --index {args.index} is out of range")
    g = grids[args.index]
    if args.plane and args.plane > g.K:
        raise ConfigError(f"--plane must be within 1..{g.K}")
    counts = ", ".join(f"{k}:{v}" for k, v in sorted(g.counts_by_part().items()))
    print(f"grid {args.index} of {len(grids)}  K={g.K}  voxels per part {{{counts}}}")
    print("legend: . empty  # shell  B/G/R parts 2/3/4")
    print(render_slices(g, Axis[args.axis.upper()], args.plane), end="")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "run": cmd_run, "evaluate": cmd_evaluate,
            "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports bad flags with status 2
        return int(exc.code or 0)
    try:
        set_threads()
        return COMMANDS[args.command](args)
    except (ConfigError, GenerationError, SamplerStateError, ScheduleError, VoxelError, ValueError) as exc:
        print(f"voxcut: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"voxcut: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FormatError, OSError) as exc:
        print(f"voxcut: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
