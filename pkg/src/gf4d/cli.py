"""Command-line entry point: ``gf4d synth|train|render|regenerate|eval``.

Exit codes: 0 success, 2 usage / invalid input, 3 missing input, 4 numerical
abort. ``GF4D_THREADS`` caps the worker threads of the renderer and torch.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import workspace as ws
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, InvalidArgument, MissingInput, TrainingAborted, UndefinedResult
from .field import deform
from .formats import atomic_write, write_flo4, write_pfm, write_png
from .metrics import evaluate, format_report
from .render import Camera, rasterize, render_flow, render_sequence
from .synth import make_scene
from .tokenflow import regenerate_pipeline
from .trainer import STAGES, enter_stage, new_state, train_stage

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_ABORT = 0, 2, 3, 4


def _apply_threads():
    value = os.environ.get("GF4D_THREADS")
    if not value:
        return
    try:
        n = max(1, int(value))
    except ValueError:
        raise InvalidArgument(f"GF4D_THREADS must be an integer, got {value!r}") from None
    import numba
    import torch

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    torch.set_num_threads(n)


def _header(name, lines):
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return [f"# gf4d {name} {stamp}"] + [f"# {line}" for line in lines]


def _append_log(root, name, lines):
    if not lines:
        return
    path = os.path.join(root, "logs", f"{name}.log")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "a") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- synth

def cmd_synth(args):
    spec = cfgmod.load(args.spec, "scene", cfgmod.parse_overrides(args.set))
    ws.prepare(args.out, args.force)
    with ws.WorkspaceLock(args.out):
        truth = make_scene(spec)
        written = [os.path.join("inputs", p) for p in ws.write_sequence(os.path.join(args.out, "inputs"), truth.sequence)]
        written += [os.path.join("heldout", p)
                    for p in ws.write_sequence(os.path.join(args.out, "heldout"), truth.heldout)]
        atomic_write(os.path.join(args.out, "scene.cfg"), ("[scene]\n" + "\n".join(cfgmod.dump(spec)) + "\n").encode())
        written.append("scene.cfg")
        ws.write_manifest(args.out, written)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _ckpt(root, name):
    return os.path.join(root, "checkpoints", f"{name}.gf4d")


def _stage_sequence(root, stage):
    sub = "regenerated" if stage == "refine" else "inputs"
    return ws.read_sequence(os.path.join(root, sub))


def _check_inputs(root, stages, regenerate_first):
    missing = [os.path.join(root, "inputs", m) for m in ws.missing_slots(os.path.join(root, "inputs"))]
    if "refine" in stages and not regenerate_first:
        missing += [os.path.join(root, "regenerated", m) for m in ws.missing_slots(os.path.join(root, "regenerated"))]
    first = stages[0]
    if first != "static":
        prev = STAGES[STAGES.index(first) - 1]
        if not os.path.exists(_ckpt(root, prev)) and not _resumable(root, first):
            missing.append(_ckpt(root, prev))
    if missing:
        raise MissingInput(missing)


def _resumable(root, stage):
    return _progress_stage(root) == stage


def _run_stage(root, stage, cfg, args, seq):
    progress = _ckpt(root, "progress")
    if not args.restart and _resumable(root, stage):
        state = load_checkpoint(progress)
    elif stage == "static":
        state = new_state(seq, cfg)
    else:
        state = load_checkpoint(_ckpt(root, STAGES[STAGES.index(stage) - 1]))
        enter_stage(state, stage, cfg)
    lines = []

    def log(report):
        lines.append(report.to_line())
        if len(lines) >= 100:
            _append_log(root, "train", lines)
            lines.clear()

    def checkpoint(st):
        _append_log(root, "train", lines)
        lines.clear()
        save_checkpoint(st, progress)

    try:
        train_stage(state, seq, stage, cfg, log=log, checkpoint=checkpoint,
                    checkpoint_every=args.checkpoint_every, max_iterations=args.max_iterations,
                    abort_path=_ckpt(root, "abort"))
    finally:
        if lines:
            _append_log(root, "train", lines)
    if state.iteration >= cfg.stage_iters(stage):
        save_checkpoint(state, _ckpt(root, stage))
        return True
    save_checkpoint(state, progress)
    return False


def _progress_stage(root):
    path = _ckpt(root, "progress")
    return load_checkpoint(path).stage if os.path.exists(path) else None


def _finished(root, stage):
    """True when a later stage has already started from this stage's checkpoint."""
    later = _progress_stage(root)
    return (later is not None and STAGES.index(later) > STAGES.index(stage)
            and os.path.exists(_ckpt(root, stage)))


def _regenerate(root, ckpt_path, gen, seq_inputs):
    state = load_checkpoint(ckpt_path)
    result = regenerate_pipeline(state.field, seq_inputs, gen)
    written = ws.write_sequence(os.path.join(root, "regenerated"), result.sequence)
    for (n, k), vol in sorted(result.features.items()):
        vol.save(os.path.join(root, "features", ws.slot(n, k, "ftv1")))
    lines = _header("regenerate", cfgmod.dump(gen))
    lines += [f"view={k} frame={n} valid_warp={v!r}" for (n, k), v in sorted(result.valid_fraction.items(),
                                                                           key=lambda kv: (kv[0][1], kv[0][0]))]
    _append_log(root, "regenerate", lines)
    return result, written


def cmd_train(args):
    root = args.workspace
    overrides = cfgmod.parse_overrides(args.set)
    cfg = cfgmod.load(args.config, "train", overrides)
    gen = cfgmod.load(args.config, "regenerate", primary="train")
    stages = list(STAGES) if args.stage == "all" else [args.stage]
    regenerate_first = args.stage == "all"
    with ws.WorkspaceLock(root):
        _check_inputs(root, stages, regenerate_first)
        _append_log(root, "train", _header("train", cfgmod.dump(cfg)))
        inputs = ws.read_sequence(os.path.join(root, "inputs"))
        for stage in stages:
            if not args.restart and _finished(root, stage):
                print(f"stage {stage} already done: {_ckpt(root, stage)}")
                continue
            if stage == "refine" and regenerate_first and (args.restart or not _resumable(root, "refine")):
                _regenerate(root, _ckpt(root, "coarse"), gen, inputs)
            seq = inputs if stage != "refine" else _stage_sequence(root, stage)
            if not _run_stage(root, stage, cfg, args, seq):
                print(f"stopped in stage {stage}; rerun to resume from {_ckpt(root, 'progress')}")
                return EXIT_OK
            print(f"stage {stage} done: {_ckpt(root, stage)}")
    return EXIT_OK


# ---------------------------------------------------------------- render

def _cameras(root):
    cams = []
    for sub in ("inputs", "heldout"):
        path = os.path.join(root, sub, ws.META)
        if os.path.exists(path):
            with open(path) as f:
                cams += [Camera.from_array(a) for a in json.load(f)["cameras"]]
    if not cams:
        raise MissingInput([os.path.join(root, "inputs", ws.META)])
    return {c.viewpoint_index: c for c in cams}


def _indices(spec, available, what):
    if spec == "all":
        return sorted(available)
    try:
        value = int(spec)
    except ValueError:
        raise InvalidArgument(f"{what} must be an integer or 'all', got {spec!r}") from None
    if value not in available:
        raise InvalidArgument(f"unknown {what} {value}")
    return [value]


def cmd_render(args):
    state = load_checkpoint(args.checkpoint)
    field = state.field
    root = args.workspace or os.path.dirname(os.path.dirname(os.path.abspath(args.checkpoint)))
    cams = _cameras(root)
    views = _indices(args.view, cams, "view")
    times = _indices(args.time, range(1, field.num_frames + 1), "frame")
    channels = {c.strip() for c in args.channels.split(",") if c.strip()}
    unknown = channels - {"rgb", "alpha", "depth", "normal"}
    if unknown:
        raise InvalidArgument(f"unknown channel(s) {sorted(unknown)}")
    if args.flow_to is not None and not 1 <= args.flow_to <= field.num_frames:
        raise InvalidArgument(f"unknown frame {args.flow_to}")
    import torch

    count = 0
    with torch.no_grad():
        for n in times:
            g = deform(field, n)
            for k in views:
                cam = cams[k]
                name = ws.slot(n, k, "{}")
                out = rasterize(g, cam, channels | {"alpha"})
                if "rgb" in channels:
                    write_png(os.path.join(args.out, "rgb", name.format("png")), out.rgb.numpy())
                if "alpha" in channels:
                    write_png(os.path.join(args.out, "alpha", name.format("png")), out.alpha.numpy())
                if "depth" in channels:
                    write_pfm(os.path.join(args.out, "depth", name.format("pfm")), out.depth.numpy())
                if "normal" in channels:
                    write_pfm(os.path.join(args.out, "normal", name.format("pfm")), out.normal.numpy())
                count += 1
                if args.flow_to is not None:
                    fm = render_flow(field, cam, n, args.flow_to).numpy()
                    stem = f"frame{n:03}_view{k}_to{args.flow_to:03}"
                    write_flo4(os.path.join(args.out, "flow", stem + ".flo4"), fm)
                    write_pfm(os.path.join(args.out, "flow", stem + ".pfm"), fm.flow)
    print(f"rendered {count} view-time pair(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- regenerate

def cmd_regenerate(args):
    root = args.workspace
    overrides = cfgmod.parse_overrides(args.set)
    if args.tau is not None:
        overrides["tau"] = str(args.tau)
    if args.interval is not None:
        overrides["interval"] = str(args.interval)
    gen = cfgmod.load(args.config, "regenerate", overrides)
    if not os.path.exists(args.checkpoint):
        raise MissingInput([args.checkpoint])
    with ws.WorkspaceLock(root):
        inputs = ws.read_sequence(os.path.join(root, "inputs"))
        result, _ = _regenerate(root, args.checkpoint, gen, inputs)
    fr = list(result.valid_fraction.values())
    print(f"regenerated {inputs.num_frames}x{inputs.num_views} frames; "
          f"mean valid-warp fraction {np.mean(fr) if fr else 1.0:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args):
    root = args.workspace
    state = load_checkpoint(args.checkpoint)
    rows = []
    for sub, name in (("inputs", "train"), ("heldout", "heldout")):
        path = os.path.join(root, sub)
        if sub == "heldout" and not os.path.exists(os.path.join(path, ws.META)):
            continue
        truth = ws.read_sequence(path)
        if truth.num_frames != state.field.num_frames:
            raise InvalidArgument(f"checkpoint has {state.field.num_frames} frames, {sub} has {truth.num_frames}")
        pred = render_sequence(state.field, truth.cameras, with_flows=bool(truth.flow_views()))
        rows += evaluate(pred, truth, name)
    report = format_report(rows)
    out = args.out or os.path.join(root, "logs", "eval.txt")
    atomic_write(out, report.encode())
    sys.stdout.write(report.splitlines()[-1] + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="gf4d", description="Dynamic Gaussian field pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic workspace")
    s.add_argument("spec", help="scene config file ([scene] section or bare keys)")
    s.add_argument("out", help="workspace directory")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scene key")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("workspace")
    t.add_argument("--config", help="config file ([train] / [regenerate] sections)")
    t.add_argument("--stage", choices=list(STAGES) + ["all"], default="all")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a train key")
    t.add_argument("--checkpoint-every", type=int, default=100)
    t.add_argument("--max-iterations", type=int, default=None, help="stop after this many iterations")
    t.add_argument("--restart", action="store_true", help="ignore the progress checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render channels or flow from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--view", required=True, help="viewpoint index or 'all'")
    r.add_argument("--time", required=True, help="frame index or 'all'")
    r.add_argument("--flow-to", type=int, default=None)
    r.add_argument("--channels", default="rgb,alpha,depth,normal")
    r.add_argument("--workspace", default=None, help="workspace holding the cameras")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("regenerate", help="regenerate all views with token propagation")
    g.add_argument("checkpoint")
    g.add_argument("workspace")
    g.add_argument("--tau", type=int, default=None)
    g.add_argument("--interval", type=int, default=None)
    g.add_argument("--config", default=None)
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_regenerate)

    e = sub.add_parser("eval", help="metrics report for a checkpoint")
    e.add_argument("workspace")
    e.add_argument("checkpoint")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _apply_threads()
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (InvalidArgument, FormatError, UndefinedResult) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
