"""Command-line entry point: simulate | pretrain | train | infer | eval.

Relative output directories are placed under ``$MCS2SND_OUTPUT`` when that
variable is set.  Config files are flat ``key = value`` text; values given
with ``--set key=value`` win over the file, which wins over the defaults.
Exit status is 0 on success, 2 on bad input and 3 when training diverges.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import BlockPlan, DiarizationResult, RttmError, parse_kv, parse_overrides, parse_rttm_all, read_rttm, \
    update_dataclass, write_rttm
from .evaluate import UndefinedDER, score_corpus, score_der

log = logging.getLogger("mcs2snd")

OUTPUT_ENV = "MCS2SND_OUTPUT"
EXIT_INPUT = 2
EXIT_DIVERGED = 3


class InputError(Exception):
    pass


def output_dir(path: str | None, default: str) -> Path:
    p = Path(path or default)
    root = os.environ.get(OUTPUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise InputError(f"output directory {p} is not writable")
    return p


def load_settings(config: str | None, overrides) -> dict:
    values = {}
    if config:
        path = Path(config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        values.update(parse_kv(path.read_text()))
    values.update(parse_overrides(overrides or []))
    return values


def _write_tsv(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    from .simulate import CorpusSpec, overlap_fraction, read_manifest, write_corpus

    values = load_settings(args.config, args.set)
    if args.seed is not None:
        values["seed"] = args.seed
    cspec = update_dataclass(CorpusSpec(), values)
    out = output_dir(args.out, "corpus")
    manifest = write_corpus(cspec, out)
    entries = read_manifest(manifest)
    hours = sum(e["duration"] for e in entries) / 3600
    speakers = sorted({s for e in entries for s in e["speakers"]})
    overlaps = [overlap_fraction(read_rttm(e["rttm"])) for e in entries]
    print(f"conversations={len(entries)} hours={hours:.3f} speakers={len(speakers)} "
          f"mean_overlap={np.mean(overlaps) if overlaps else 0.0:.3f} manifest={manifest}")
    return 0


# ---------------------------------------------------------------------------
# pretrain / train


def _recipe(args):
    from .recipe import Recipe

    return Recipe().apply(load_settings(args.config, args.set))


def cmd_pretrain(args) -> int:
    from .recipe import pretrained_model

    recipe = _recipe(args)
    out = output_dir(args.out, "train")
    path = out / "pretrained.safetensors"
    if path.exists() and not args.force:
        print(f"pretrained extractor already at {path} (use --force to redo)")
        return 0
    path.unlink(missing_ok=True)
    pretrained_model(recipe, out)
    from .model import load_checkpoint

    _, extra = load_checkpoint(path, with_extra=True)
    print(f"accuracy={extra['accuracy']:.4f} checkpoint={path}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .recipe import run_recipe, stage_checkpoint
    from .train import STAGE_ORDER, parse_log_line

    recipe = _recipe(args)
    out = output_dir(args.out, "train")
    stages = args.stage or list(STAGE_ORDER)
    for name in stages:
        if name not in recipe.stages:
            raise InputError(f"unknown stage {name!r}; known: {', '.join(recipe.stages)}")
    first = recipe.stages[stages[0]]
    if first.requires and not stage_checkpoint(out, first.requires).exists():
        raise InputError(f"stage {first.name} needs the {first.requires} checkpoint, "
                         f"missing {stage_checkpoint(out, first.requires)}")
    log_path = out / "train.log"
    done = run_recipe(recipe, out, stages, resume=args.resume, log_path=log_path)
    if log_path.exists():
        history = [parse_log_line(line) for line in log_path.read_text().splitlines() if line.strip()]
        if history:
            plot_losses(history, out / "losses.png")
    for name, path in done.items():
        print(f"{name}\t{path}")
    return 0


# ---------------------------------------------------------------------------
# infer


def _load_model(path):
    from .model import CheckpointError, load_checkpoint

    if not Path(path).exists():
        raise InputError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path, with_extra=True)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc


def _recordings(args):
    from .features import read_wav
    from .simulate import read_manifest

    recs = []
    if args.manifest:
        for entry in read_manifest(args.manifest):
            recs.append((entry["recording_id"], entry["audio"], entry.get("rttm")))
    for audio in args.audio or []:
        recs.append((Path(audio).stem, audio, None))
    if not recs:
        raise InputError("no input audio: give WAV files or --manifest")
    for rec_id, audio, ref in recs:
        if not Path(audio).exists():
            raise InputError(f"audio file not found: {audio}")
        yield rec_id, read_wav(audio), ref


def cmd_infer(args) -> int:
    from .infer import PipelineConfig, run_first_pass, run_pipeline
    from .plotting import plot_activity

    values = load_settings(args.config, args.set)
    if args.block_shift is not None:
        values["block_shift"] = float(args.block_shift)
    plan_keys = {f.name for f in dataclasses.fields(BlockPlan)}
    plan = update_dataclass(BlockPlan(), {k: v for k, v in values.items() if k in plan_keys})
    cfg = update_dataclass(PipelineConfig(plan=plan), {k: v for k, v in values.items() if k not in plan_keys})
    if args.no_clustering:
        cfg = dataclasses.replace(cfg, clustering=False)

    first = mc = None
    if args.first_pass:
        first, _ = _load_model(args.first_pass)
    if not args.single_channel:
        if not args.model:
            raise InputError("--model is required unless --single-channel is given")
        mc, mc_extra = _load_model(args.model)
    if first is None and not args.init:
        if args.single_channel and args.model:
            first, _ = _load_model(args.model)
        else:
            raise InputError("need --first-pass (or --init with reference RTTM)")
    inits = {}
    if args.init:
        try:
            inits = parse_rttm_all(Path(args.init).read_text())
        except (OSError, RttmError) as exc:
            raise InputError(str(exc)) from exc

    out = output_dir(args.out, "infer")
    rows = []
    for rec_id, wave, ref_path in _recordings(args):
        if args.single_channel:
            wave = wave.channels(0)
        elif mc.cfg.channel_attention:
            expected = mc_extra.get("channels")
            if expected is not None and wave.num_channels != expected:
                raise InputError(f"{rec_id}: audio has {wave.num_channels} channels, model was trained on {expected}")
        init = inits.get(rec_id) if args.init else None
        if args.init and init is None:
            raise InputError(f"--init has no segments for recording {rec_id}")
        if args.single_channel:
            output = run_first_pass(wave, first, cfg, rec_id) if init is None else \
                run_pipeline(wave, None, first, cfg, init=init, recording_id=rec_id)
        else:
            output = run_pipeline(wave, first, mc, cfg, init=init, recording_id=rec_id)
        result = DiarizationResult(output.result.segments, rec_id)
        write_rttm(result, out / f"{rec_id}.rttm")
        if args.save_scores:
            np.save(out / f"{rec_id}.scores.npy", output.scores.values.astype(np.float32))
        if args.plot:
            ref = read_rttm(ref_path) if ref_path else None
            plot_activity(output.scores.values, output.scores.frame_period, result, out / f"{rec_id}.png", ref,
                          cfg.binarize_threshold)
        speech = sum(s.duration for s in result.segments)
        rows.append((rec_id, len(result.speakers), len(result.segments), f"{speech:.2f}"))
        print(f"{rec_id}\tspeakers={len(result.speakers)}\tsegments={len(result.segments)}")
    _write_tsv(out / "summary.tsv", ("recording", "speakers", "segments", "speech_s"), rows)
    return 0


# ---------------------------------------------------------------------------
# eval


def _rttm_set(path) -> dict[str, DiarizationResult]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"not found: {path}")
    files = sorted(path.glob("*.rttm")) if path.is_dir() else [path]
    out = {}
    for f in files:
        try:
            for rec, res in parse_rttm_all(f.read_text()).items():
                if rec in out:
                    out[rec] = DiarizationResult(out[rec].segments + res.segments, rec)
                else:
                    out[rec] = res
        except RttmError as exc:
            raise InputError(f"{f}: {exc}") from exc
    return out


def cmd_eval(args) -> int:
    from .plotting import plot_der_breakdown

    refs, hyps = _rttm_set(args.ref), _rttm_set(args.hyp)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise InputError(f"hypothesis has no recording(s): {', '.join(missing)}")
    pairs = [(refs[r], hyps[r]) for r in sorted(refs)]
    try:
        reports = [score_der(ref, hyp) for ref, hyp in pairs]
        total = score_corpus(pairs)
    except UndefinedDER as exc:
        raise InputError(str(exc)) from exc
    rows = [(rec, f"{100 * r.der:.2f}", f"{100 * r.missed:.2f}", f"{100 * r.false_alarm:.2f}",
             f"{100 * r.confusion:.2f}", f"{r.scored_time:.2f}") for rec, r in zip(sorted(refs), reports)]
    rows.append(("ALL", f"{100 * total.der:.2f}", f"{100 * total.missed:.2f}", f"{100 * total.false_alarm:.2f}",
                 f"{100 * total.confusion:.2f}", f"{total.scored_time:.2f}"))
    print(total.text())
    print(total.line())
    if args.out:
        out = output_dir(args.out, "eval")
        _write_tsv(out / "der.tsv", ("recording", "der", "miss", "fa", "conf", "scored_s"), rows)
        if args.plot:
            plot_der_breakdown([(r[0], float(r[2]), float(r[3]), float(r[4])) for r in rows], out / "der.png")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcs2snd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out=True):
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
        if default_out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="write a synthetic corpus (WAV + RTTM + manifest)")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="pretrain the extractor as a speaker classifier")
    common(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run training stages")
    common(p)
    p.add_argument("--stage", action="append", help="stage name (repeatable); default: every stage in order")
    p.add_argument("--resume", action="store_true", help="skip stages whose checkpoint exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="diarize recordings")
    common(p)
    p.add_argument("audio", nargs="*", help="multi-channel WAV file(s), one recording each")
    p.add_argument("--manifest", help="corpus manifest from 'simulate'")
    p.add_argument("--model", help="multi-channel checkpoint")
    p.add_argument("--first-pass", help="single-channel checkpoint for the first pass")
    p.add_argument("--init", help="RTTM used as the first-pass result instead of running it")
    p.add_argument("--block-shift", type=float, choices=(2.0, 8.0))
    p.add_argument("--no-clustering", action="store_true")
    p.add_argument("--single-channel", action="store_true", help="channel 0 only, single-channel pass")
    p.add_argument("--save-scores", action="store_true", help="also write fused scores as .npy")
    p.add_argument("--plot", action="store_true", help="write a score/segment figure per recording")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score hypothesis RTTM against reference RTTM")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", help="directory for der.tsv (and der.png with --plot)")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    from .model import CheckpointError
    from .train import TrainingDiverged

    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, RttmError, KeyError, ValueError, FileNotFoundError, CheckpointError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
