"""Command-line entry point: prepare, train, synth, eval.

Run directory layout::

    RUN/config.yaml            resolved configuration of the last command
    RUN/vocab.txt              phoneme vocabulary (copied by ``prepare``)
    RUN/prepared/manifest.tsv  validated manifest
    RUN/prepared/norm_stats.json
    RUN/cache/                 cached log-mels
    RUN/checkpoints/<kind>.pt  ctap, duration, semantic, acoustic, wave
    RUN/logs/<kind>_loss.jsonl and <kind>_loss.png
    RUN/samples/, RUN/reports/

Exit codes: 0 success, 1 user error, 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import ConfigKeyError, ExperimentConfig
from .data import (DataError, FeatureStore, read_manifest, read_vocab, record_problems,
                   symbols_to_ids, write_manifest)
from .evalsuite import ProsodyReport, plot_loss_curve, plot_mel, score_utterance
from .features import AudioFormatError, NormStats, load_wav, save_wav
from .pipeline import (CheckpointError, StageCheckpoint, Synthesizer, load_checkpoints,
                       train_ctap, train_semantic_to_speech, train_text_to_semantic)
from .schedules import ScheduleError

log = logging.getLogger("diffspeech")

STAGES = {"ctap": ("ctap",), "t2s": ("duration", "semantic"), "s2s": ("acoustic", "wave")}
WORKERS_ENV = "DIFFSPEECH_WORKERS"


class UserError(Exception):
    pass


USER_ERRORS = (UserError, DataError, ConfigKeyError, CheckpointError, AudioFormatError, ScheduleError,
               FileNotFoundError)


# ---------------------------------------------------------------- helpers

class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        paths = {"config": "config.yaml", "vocab": "vocab.txt", "prepared": "prepared",
                 "manifest": "prepared/manifest.tsv", "stats": "prepared/norm_stats.json",
                 "cache": "cache", "checkpoints": "checkpoints", "logs": "logs",
                 "samples": "samples", "reports": "reports", "lock": "train.lock"}
        if name not in paths:
            raise AttributeError(name)
        return self.root / paths[name]

    def checkpoint(self, kind: str) -> Path:
        return self.checkpoints / f"{kind}.pt"

    def make(self):
        for d in (self.prepared, self.cache, self.checkpoints, self.logs, self.samples, self.reports):
            d.mkdir(parents=True, exist_ok=True)


def resolve_config(args, run: RunDir | None = None) -> ExperimentConfig:
    path = getattr(args, "config", None)
    if path is None and run is not None and run.config.exists():
        path = run.config
    config = cfgmod.load_config(path, getattr(args, "set", None) or [])
    if run is not None and run.vocab.exists():
        config.vocab_size = len(read_vocab(run.vocab))
    return config


@contextmanager
def run_lock(run: RunDir):
    try:
        fd = os.open(run.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UserError(f"{run.lock} exists: another training command owns this run directory")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        run.lock.unlink(missing_ok=True)


def write_history(run: RunDir, kind: str, history) -> None:
    path = run.logs / f"{kind}_loss.jsonl"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(json.dumps({"step": i + 1, "loss": v}) + "\n" for i, v in enumerate(history)))
    os.replace(tmp, path)
    if history:
        plot_loss_curve(history, run.logs / f"{kind}_loss.png", title=kind)


def parse_lexicon(path) -> dict[str, list[str]]:
    lex = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if parts:
            lex[parts[0].lower()] = parts[1:]
    return lex


def phoneme_symbols(args) -> list[str]:
    if args.phonemes:
        return args.phonemes.split()
    if not args.lexicon:
        raise UserError("--text needs --lexicon (there is no built-in grapheme-to-phoneme)")
    lex = parse_lexicon(args.lexicon)
    out = []
    for word in args.text.split():
        key = word.lower().strip(".,;:!?\"'")
        if key not in lex:
            raise UserError(f"word {word!r} not in lexicon {args.lexicon}")
        out.extend(lex[key])
    return out


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    run = RunDir(args.out)
    run.make()
    config = resolve_config(args)
    vocab_size = None
    if args.vocab:
        if Path(args.vocab).resolve() != run.vocab.resolve():
            shutil.copyfile(args.vocab, run.vocab)
        vocab_size = len(read_vocab(run.vocab))
    records = read_manifest(args.manifest)
    store = FeatureStore(config.features, run.cache)
    failures, mels = 0, []
    for rec in records:
        try:
            mel = store.mel(rec.path)
        except (OSError, AudioFormatError, ValueError) as exc:
            print(f"line {rec.line}: {rec.path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        problems = record_problems(rec, mel.shape[0], vocab_size)
        for p in problems:
            print(f"line {rec.line}: {rec.path}: {p}", file=sys.stderr)
        failures += bool(problems)
        mels.append(mel)
    if failures:
        print(f"{failures} of {len(records)} record(s) failed validation", file=sys.stderr)
        return 1
    write_manifest(run.manifest, records)
    NormStats.from_mels(mels).save(run.stats)
    if vocab_size:
        config.vocab_size = vocab_size
    cfgmod.save_config(config, run.config)
    print(f"prepared {len(records)} record(s) "
          f"({sum(r.labeled for r in records)} labeled) in {run.root}")
    return 0


def _load_stage_checkpoints(run: RunDir, kinds) -> dict:
    return {k: StageCheckpoint.load(run.checkpoint(k)) for k in kinds if run.checkpoint(k).exists()}


def cmd_train(args) -> int:
    run = RunDir(args.run)
    run.make()
    config = resolve_config(args, run)
    manifest = Path(args.manifest) if args.manifest else run.manifest
    if not manifest.exists():
        raise UserError(f"manifest {manifest} not found; run `diffspeech prepare` first")
    records = read_manifest(manifest)
    store = FeatureStore(config.features, run.cache)
    if args.stage != "ctap" and not run.checkpoint("ctap").exists():
        raise UserError(f"stage {args.stage!r} requires the 'ctap' checkpoint; run `train ctap` first")

    def save(kind, ck):
        ck.save(run.checkpoint(kind))
        write_history(run, kind, ck.history)

    with run_lock(run):
        cfgmod.save_config(config, run.config)
        resume = _load_stage_checkpoints(run, STAGES[args.stage])
        if args.stage == "ctap":
            stats = NormStats.load(run.stats) if run.stats.exists() else None
            out = {"ctap": train_ctap(records, store, config, stats, resume.get("ctap"),
                                      lambda ck: save("ctap", ck))}
        else:
            ctap = StageCheckpoint.load(run.checkpoint("ctap"))
            trainer = train_text_to_semantic if args.stage == "t2s" else train_semantic_to_speech
            out = trainer(records, store, config, ctap, resume, save)
        for kind, ck in out.items():
            save(kind, ck)
            print(f"{kind}: step {ck.step}, final loss "
                  f"{ck.history[-1] if ck.history else float('nan'):.5f} -> {run.checkpoint(kind)}")
    return 0


def _synthesizer(run: RunDir, config: ExperimentConfig) -> Synthesizer:
    ckpts = load_checkpoints(run.checkpoints)
    missing = [k for k in ("ctap", "duration", "semantic", "acoustic", "wave") if k not in ckpts]
    if missing:
        raise UserError(f"missing checkpoint(s) in {run.checkpoints}: {', '.join(missing)}")
    return Synthesizer(ckpts, config)


def cmd_synth(args) -> int:
    run = RunDir(args.run)
    config = resolve_config(args, run)
    if not run.vocab.exists():
        raise UserError(f"{run.vocab} not found; pass --vocab to `prepare`")
    symbols = phoneme_symbols(args)
    ids = symbols_to_ids(symbols, read_vocab(run.vocab))
    synth = _synthesizer(run, config)
    gen = torch.Generator().manual_seed(args.seed)
    res = synth.synthesize(ids, load_wav(args.prompt), gen, duration_scale=args.duration_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(out, res.waveform)
    meta = {"seed": args.seed, "duration_scale": args.duration_scale, "phonemes": symbols,
            "durations": res.durations.tolist(), "frames": int(res.durations.sum()),
            "samples": len(res.waveform), "prompt": str(args.prompt)}
    out.with_name(out.name + ".json").write_text(json.dumps(meta, indent=2))
    if args.mel_image:
        plot_mel(res.mel, args.mel_image, title=" ".join(symbols))
    print(f"wrote {out} ({len(res.waveform) / res.waveform.rate:.2f} s)")
    return 0


def cmd_eval(args) -> int:
    run = RunDir(args.run)
    config = resolve_config(args, run)
    manifest = Path(args.manifest) if args.manifest else run.manifest
    records = [r for r in read_manifest(manifest) if r.labeled]
    if not records:
        raise UserError("evaluation needs labeled records (phonemes + durations)")
    synth = None if args.self_check else _synthesizer(run, config)
    scores = []
    for i, rec in enumerate(records):
        ref = load_wav(rec.path)
        if synth is None:
            hyp, hyp_durs = ref, rec.durations
        else:
            hyp = synth.synthesize(rec.phonemes, ref, torch.Generator().manual_seed(args.seed + i),
                                   durations=rec.durations).waveform
            hyp_durs = synth.predict_durations(rec.phonemes,
                                               torch.Generator().manual_seed(args.seed + i)).numpy()
        scores.append(score_utterance(Path(rec.path).stem, ref, hyp, rec.durations, hyp_durs))
    report = ProsodyReport.aggregate(scores)
    report_path = Path(args.report) if args.report else run.reports / "prosody.jsonl"
    report.write(report_path)
    print(report.table())
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffspeech", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. train.lr=1e-3 (repeatable; wins over --config)")

    p = sub.add_parser("prepare", help="validate a manifest, cache mels, write normalization stats")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--vocab", help="phoneme vocabulary file (one symbol per line)")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one stage: ctap, t2s or s2s")
    p.add_argument("stage", choices=sorted(STAGES))
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", help="defaults to RUN/prepared/manifest.tsv")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize speech from phonemes and a prompt recording")
    p.add_argument("--run", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--phonemes", help="space-separated phoneme symbols")
    src.add_argument("--text", help="words, mapped through --lexicon")
    p.add_argument("--lexicon", help="word -> phoneme symbols, one entry per line")
    p.add_argument("--prompt", required=True, help="prompt speech WAV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-scale", type=float, default=1.0)
    p.add_argument("--mel-image", help="also write a PNG of the generated mel")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="MSEP/MSED over the labeled records of a manifest")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest")
    p.add_argument("--report", help="JSON-lines report path (a .txt table is written alongside)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--self-check", action="store_true",
                   help="compare references with themselves (metric sanity check)")
    common(p)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = os.environ.get(WORKERS_ENV)
    if workers:
        torch.set_num_threads(int(workers))
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
