"""Command-line entry point: ``motioninfill <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input or usage, and 2 for
runtime failures. Output paths default to ``$MOTIONINFILL_OUT`` (or ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from .motion_core import DEFAULT_MARGIN_FRAMES, ValidationError

log = logging.getLogger("motioninfill")

OUTPUT_ENV = "MOTIONINFILL_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _out_root():
    return Path(os.environ.get(OUTPUT_ENV, "out"))


def _sampler_args(p):
    p.add_argument("--steps", type=int, default=32, help="Euler steps")
    p.add_argument("--sway", type=float, default=-1.0, help="sway coefficient in [-1, 0]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-context", action="store_true",
                   help="hold unmasked frames at their originals instead of re-noising them")


def _sampler_cfg(args):
    from .sampler import SamplerConfig

    return SamplerConfig(args.steps, args.sway, args.seed, renoise_context=not args.freeze_context)


def cmd_synth(args):
    from .bench import SynthConfig, make_synthetic_manifest

    cfg = SynthConfig(seed=args.seed, T=args.frames, D=args.dim, fps=args.fps,
                      feature_rate_hz=args.feature_rate, projection_seed=args.projection_seed)
    out = Path(args.out) if args.out else _out_root() / "synth"
    manifest = make_synthetic_manifest(out, cfg, args.count, margin=args.margin)
    print(f"wrote {len(manifest.samples)} samples to {out}")


def _load_pairs(data_dir):
    from .bench import BenchManifest
    from .motion_core import read_motion, read_speech

    manifest = BenchManifest.load(Path(data_dir) / "manifest.json")
    manifest.check_paths()
    return [(read_speech(manifest.resolve(s.speech_path)), read_motion(manifest.resolve(s.motion_path)))
            for s in manifest.samples]


def _build_train_configs(args, speech_dim):
    from .cfm import LossWeights
    from .dit import DiTConfig
    from .masking import MaskSamplerConfig
    from .pipelines import TrainConfig

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model_raw = dict(raw.get("model", {}))
    model_raw.setdefault("speech_dim", speech_dim)
    dit_cfg = DiTConfig.toy(**model_raw)
    train_raw = dict(raw.get("train", {}))
    if "loss_weights" in train_raw:
        train_raw["loss_weights"] = LossWeights(**train_raw["loss_weights"])
    if "mask_cfg" in train_raw:
        train_raw["mask_cfg"] = MaskSamplerConfig(**train_raw["mask_cfg"])
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train_raw) - known
    if unknown:
        raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
    base = {"lr_peak": 1e-3, "warmup_steps": 200, "total_steps": 4000, "batch_size": 16}
    base.update(train_raw)
    overrides = {"total_steps": args.total_steps, "batch_size": args.batch_size, "lr_peak": args.lr,
                 "warmup_steps": args.warmup, "seed": args.seed}
    base.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig(**base)
    if args.lambda_ts is not None:
        cfg = replace(cfg, loss_weights=LossWeights(args.lambda_ts))
    return dit_cfg, cfg


def cmd_train(args):
    from .pipelines import save_train_state, train

    pairs = _load_pairs(args.data)
    dit_cfg, cfg = _build_train_configs(args, pairs[0][0].dim)
    out = Path(args.out) if args.out else _out_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    curve = open(out / "loss_curve.csv", "w", newline="")
    writer = csv.writer(curve)
    writer.writerow(["step", "loss", "cfm", "ts", "lr"])

    def on_step(state, losses):
        writer.writerow([state.step, f"{losses['loss']:.6g}", f"{losses['cfm']:.6g}",
                         f"{losses['ts']:.6g}", f"{losses['lr']:.6g}"])
        if args.checkpoint_every and state.step % args.checkpoint_every == 0:
            save_train_state(state, out / f"checkpoint_{state.step:07d}.mfz", cfg)

    with curve:
        state, _ = train(pairs, dit_cfg, cfg, callback=on_step)
    save_train_state(state, out / "checkpoint.mfz", cfg)
    print(f"trained {state.step} steps; checkpoint at {out / 'checkpoint.mfz'}")


def cmd_edit(args):
    from .motion_core import read_edit_spec, read_motion, read_speech, write_motion
    from .pipelines import edit_motion, load_model

    orig = read_motion(args.motion)
    speech = read_speech(args.speech)
    spec = read_edit_spec(args.edit)
    timeline_only = args.checkpoint is None
    model = None if timeline_only else load_model(args.checkpoint)
    if model is None:
        from .masking import build_edit_timeline

        if build_edit_timeline(orig.n_frames, spec).mask.n_masked:
            raise ValidationError("this edit synthesizes frames; pass --checkpoint")
    out = edit_motion(orig, speech, spec, model, _sampler_cfg(args))
    write_motion(out, args.out)
    print(f"wrote {out.n_frames} frames to {args.out}")


def cmd_generate(args):
    from .motion_core import read_motion, read_speech, write_motion
    from .pipelines import generate_motion, load_model

    speech = read_speech(args.speech)
    prefix = read_motion(args.prefix) if args.prefix else None
    fps = prefix.fps if prefix else args.fps
    n = args.frames if args.frames else max(1, int(round(speech.duration * fps)) - (prefix.n_frames if prefix else 0))
    model = load_model(args.checkpoint)
    out = generate_motion(prefix, speech, n, model, _sampler_cfg(args), fps=fps)
    write_motion(out, args.out)
    print(f"wrote {out.n_frames} frames to {args.out}")


def cmd_eval(args):
    from .bench import BenchManifest
    from .masking import build_edit_timeline
    from .metrics import aggregate_reports, boundaries_from_timeline, evaluate_edit
    from .motion_core import read_motion, read_speech, write_motion
    from .render import render_motion

    manifest = BenchManifest.load(args.manifest)
    manifest.check_paths()
    outputs = Path(args.outputs)
    model = None
    if args.checkpoint:
        from .pipelines import edit_motion, load_model

        model = load_model(args.checkpoint)
        outputs.mkdir(parents=True, exist_ok=True)
    reports, skipped = [], []
    for s in manifest.samples:
        orig = read_motion(manifest.resolve(s.motion_path))
        out_path = outputs / f"{s.id}.fmot"
        if model is not None:
            edited_speech = read_speech(manifest.resolve(s.edited_speech_path))
            write_motion(edit_motion(orig, edited_speech, s.edit, model, _sampler_cfg(args)), out_path)
        if not out_path.exists():
            raise ValidationError(f"missing output {out_path} (pass --checkpoint to produce it)")
        edited = read_motion(out_path)
        timeline = build_edit_timeline(orig.n_frames, s.edit)
        if edited.n_frames != timeline.new_total_frames:
            raise ValidationError(f"{out_path}: {edited.n_frames} frames, expected {timeline.new_total_frames}")
        boundaries = boundaries_from_timeline(timeline)
        if len(boundaries) == 0:
            skipped.append(s.id)
            continue
        reports.append(evaluate_edit(s.id, render_motion(orig), render_motion(edited), edited, boundaries))
    summary = aggregate_reports(reports)
    doc = {"aggregate": summary, "samples": [r.to_dict() for r in reports], "skipped": skipped}
    report_path = Path(args.report) if args.report else outputs / "eval_report.json"
    report_path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"{'metric':<26}{'mean':>10}{'std':>10}")
    for name, st in summary.items():
        print(f"{name:<26}{st['mean']:>10.4f}{st['std']:>10.4f}")
    print(f"report: {report_path}")


def _read_frames(path, fps):
    from .resample import read_frame_dir, read_video

    path = Path(path)
    return read_frame_dir(path, fps) if path.is_dir() else read_video(path)


def cmd_resample(args):
    from .resample import resample_sequence, write_frame_dir, write_video

    frames = _read_frames(args.input, args.fps)
    out = resample_sequence(frames, args.count)
    if args.out.endswith(".fvid"):
        write_video(out, args.out)
    else:
        write_frame_dir(out, args.out)
    print(f"resampled {len(frames)} -> {len(out)} frames into {args.out}")


def build_parser():
    parser = _Parser(prog="motioninfill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic paired dataset with an edit manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--feature-rate", type=float, default=50.0)
    p.add_argument("--projection-seed", type=int, default=0)
    p.add_argument("--margin", type=int, default=DEFAULT_MARGIN_FRAMES, help="context margin frames in generated edits")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a synthetic (or manifest-described) dataset")
    p.add_argument("--data", required=True, help="directory holding manifest.json")
    p.add_argument("--config", help="JSON with optional 'model' and 'train' objects")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lambda-ts", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="edit a motion sequence for new speech")
    p.add_argument("--motion", required=True)
    p.add_argument("--speech", required=True, help="features of the whole edited utterance")
    p.add_argument("--edit", required=True, help="EditSpec JSON file")
    p.add_argument("--checkpoint", help="required unless the edit synthesizes no frames")
    p.add_argument("--out", required=True)
    _sampler_args(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("generate", help="generate motion for speech, optionally after a prefix")
    p.add_argument("--speech", required=True)
    p.add_argument("--prefix")
    p.add_argument("--frames", type=int, help="frames to generate (default: speech duration minus prefix)")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _sampler_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score edited outputs against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outputs", required=True, help="directory of <id>.fmot edited motions")
    p.add_argument("--checkpoint", help="run the edits first with this checkpoint")
    p.add_argument("--report")
    _sampler_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("resample", help="retime a frame sequence")
    p.add_argument("--input", required=True, help=".fvid file or directory of PNG frames")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--fps", type=float, default=25.0, help="frame rate for PNG directories")
    p.add_argument("--out", required=True, help=".fvid path or output directory")
    p.set_defaults(func=cmd_resample)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
