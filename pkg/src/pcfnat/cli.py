"""Command-line entry point: ``pcfnat <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import io
from .bench import bench_na, format_bench
from .config import RunConfig, load_config
from .data import SyntheticSpeakerDataset
from .errors import ConfigError, ContractError, ParseError
from .features import extract_fbank
from .gradcheck import CHECKS, run_suite
from .model import (GA, ModelConfig, attention_schedule, count_parameters,
                    format_breakdown, parameter_breakdown)
from .na_kernel import TileShape
from .scoring import (Cohort, adaptive_snorm, compute_eer, compute_min_dcf,
                      segment_and_average, score_trials)
from .train import Trainer, TrainingDiverged

# (name, model switches, non-model switches) for the MFA-NAT 4x4 ablation rows
ABLATIONS = [
    ("baseline", {}, {}),
    ("w/o Fbank norm", {}, {"fbank.cms": False}),
    ("w/o NA padding", {"na_padding": False}, {}),
    ("w/o GA", {"use_ga": False}, {}),
    ("with four GAs", {"four_gas": True}, {}),
    ("with LayerNorm", {"layernorm": True}, {}),
    ("w/o drop path", {"use_drop_path": False}, {}),
    ("w/o MFA", {"use_mfa": False}, {}),
    ("w/o ASP", {"use_asp": False}, {}),
    ("w/o AS-norm", {}, {"score.snorm": False}),
]


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _emit(text: str, out):
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# ------------------------------------------------------------------ commands

def cmd_params(args):
    cfg = _run_config(args).model
    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
        if args.variant != cfg.variant:
            # the group schedule and drop-path coefficient follow the variant
            overrides.update(group_schedule=None, drop_path_coefficient=None)
    if args.layers:
        overrides["layers_per_block"] = args.layers
        overrides.setdefault("drop_path_coefficient", None)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    rows = parameter_breakdown(cfg)
    header = f"{cfg.variant.upper()}-NAT ({cfg.layers_per_block}x4), C={cfg.channels}"
    _emit(header + "\n" + format_breakdown(rows), args.out)
    return 0


def cmd_gradcheck(args):
    names = args.only or None
    results = run_suite(seed=args.seed, names=names)
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    _emit("\n".join(lines), args.out)
    return 1 if failed else 0


def cmd_na_bench(args):
    tile = TileShape.parse(args.tile)
    results = [bench_na(T, args.channels, args.heads, args.window, tile, args.repeats, seed=args.seed)
               for T in args.lengths]
    _emit(format_bench(results, tile, args.window), args.out)
    return 0


def cmd_train(args):
    rc = _run_config(args)
    train_cfg = rc.train
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, max_steps=args.steps)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    data_cfg = dataclasses.replace(rc.data, n_mels=rc.model.n_mels)
    dataset = SyntheticSpeakerDataset(data_cfg)
    trainer = Trainer(rc.model, train_cfg, data_cfg.n_speakers)
    log = open(args.log, "a", encoding="utf-8") if args.log else None

    def report(rec):
        line = f"step {rec.step:6d}  lr {rec.lr:.6f}  loss {rec.loss:.5f}"
        if log:
            log.write(line + "\n")
        if not args.quiet and (rec.step % args.every == 0):
            print(line, flush=True)
    try:
        trainer.fit(dataset, report)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    finally:
        if log:
            log.close()
    ckpt_io.save(args.out, ckpt_io.trainer_checkpoint(trainer))
    print(f"saved {args.out} after {trainer.step} steps (final loss {trainer.log[-1].loss:.4f})")
    return 0


def _load_input(path: Path, rc: RunConfig):
    if path.suffix.lower() == ".wav":
        samples, rate = io.read_wav(path)
        feats = extract_fbank(samples, rc.fbank, sample_rate=rate)
        return feats, samples.size / rate
    feats = io.read_features(path)
    return feats, feats.shape[-1] / 100.0


def cmd_embed(args):
    rc = _run_config(args)
    model = ckpt_io.load_model(args.checkpoint)
    paths = []
    for p in map(Path, args.inputs):
        paths.extend(sorted(p.glob("*.wav")) + sorted(p.glob("*.feat")) if p.is_dir() else [p])
    if not paths:
        raise ContractError("no input files")
    embeddings = {}
    for p in paths:
        feats, duration = _load_input(p, rc)
        if feats.shape[0] != model.cfg.n_mels:
            raise ContractError(f"{p}: {feats.shape[0]} mel bins, model expects {model.cfg.n_mels}")
        embeddings[p.stem] = segment_and_average(feats, lambda f: model.extract(f[None]), duration)
    if args.out:
        io.write_embeddings(args.out, embeddings)
    else:
        for utt, vec in embeddings.items():
            print(utt, " ".join(f"{v:.6g}" for v in vec))
    return 0


def cmd_score(args):
    trials = io.read_trials(args.trials)
    embeddings = io.read_embeddings(args.embeddings)
    scores = score_trials(trials, embeddings)
    if args.cohort:
        cohort_emb = io.read_embeddings(args.cohort)
        ids = list(cohort_emb)
        spk = io.read_utt2spk(args.utt2spk) if args.utt2spk else {u: u for u in ids}
        missing = [u for u in ids if u not in spk]
        if missing:
            raise ContractError(f"no speaker for cohort utterance {missing[0]!r}")
        cohort = Cohort.from_embeddings(np.stack([cohort_emb[u] for u in ids]),
                                        [spk[u] for u in ids], top_n=args.top_n)
        top_n = min(args.top_n, len(cohort.matrix))
        scores = adaptive_snorm(scores, embeddings, cohort, top_n)
    if args.out:
        io.write_scores(args.out, scores)
    else:
        for e, t, r, n in zip(scores.enroll, scores.test, scores.raw, scores.scores):
            print(f"{e} {t} {r:.9g} {n:.9g}")
    return 0


def cmd_metrics(args):
    records = io.read_scores(args.scores)
    if args.trials:
        s, y = io.attach_labels(records, io.read_trials(args.trials), 2 if args.raw else 3)
    else:
        raise ContractError("score files carry no labels; pass --trials")
    lines = [f"trials {y.size}", f"targets {int(y.sum())}", f"eer {compute_eer(s, y):.6f}"]
    for p in args.p_target:
        lines.append(f"min_dcf_{p:g} {compute_min_dcf(s, y, p_target=p):.6f}")
    _emit("\n".join(lines), args.out)
    return 0


def _structure(cfg: ModelConfig) -> str:
    kinds = attention_schedule(cfg)
    return "/".join("".join("G" if k == GA else "N" for k in block) for block in kinds)


def cmd_ablate(args):
    rc = _run_config(args)
    base = dataclasses.replace(rc.model, variant="mfa", layers_per_block=args.layers,
                               group_schedule=None, drop_path_coefficient=None)
    base_n = count_parameters(base)
    lines = [f"{'no.':>3}  {'system':<16} {'params':>12} {'delta':>10}  {'GA':>2}  {'layers':<19} switches"]
    for i, (name, model_sw, other_sw) in enumerate(ABLATIONS):
        cfg = dataclasses.replace(base, **model_sw)
        n = count_parameters(cfg)
        n_ga = sum(k == GA for block in attention_schedule(cfg) for k in block)
        sw = ", ".join(f"{k}={v}" for k, v in {**model_sw, **other_sw}.items()) or "-"
        lines.append(f"{i:>3}  {name:<16} {n:>12,} {n - base_n:>+10,}  {n_ga:>2}  {_structure(cfg):<19} {sw}")
    _emit("\n".join(lines), args.out)
    return 0


def cmd_synth(args):
    rc = _run_config(args)
    data_cfg = rc.data if args.seed is None else dataclasses.replace(rc.data, seed=args.seed)
    ds = SyntheticSpeakerDataset(data_cfg)
    out = Path(args.out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    spk = {}
    for i, (utt, feats, _) in enumerate(ds.items()):
        io.write_features(out / "feats" / f"{utt}.feat", feats)
        spk[utt] = ds.speaker_id(i)
    io.write_utt2spk(out / "utt2spk", spk)
    io.write_trials(out / "trials", ds.trials(args.nontarget, seed=data_cfg.seed))
    print(f"wrote {len(ds)} utterances of {data_cfg.n_speakers} speakers to {out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed")
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--out", help="output path (stdout when omitted)")

    ap = argparse.ArgumentParser(prog="pcfnat", description="Neighborhood-attention speaker embeddings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", parents=[common], help="parameter count table")
    p.add_argument("--variant", choices=["mfa", "pcf"])
    p.add_argument("--layers", type=int, help="layers per block")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--only", nargs="*", choices=list(CHECKS), metavar="NAME")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("na-bench", parents=[common], help="naive vs blocked NA timings")
    p.add_argument("--tile", default="16x8x16")
    p.add_argument("--window", type=int, default=27)
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--lengths", type=int, nargs="+", default=[200, 1024])
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_na_bench)

    p = sub.add_parser("train", parents=[common], help="train on synthetic speakers")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--log", help="append per-step lr/loss lines here")
    p.add_argument("--every", type=int, default=10, help="print every N steps")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="WAV/feature files to embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="files or directories of .wav/.feat")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", parents=[common], help="cosine trial scores (+ adaptive s-norm)")
    p.add_argument("--trials", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--cohort", help="cohort embedding file")
    p.add_argument("--utt2spk", help="cohort utterance-to-speaker map")
    p.add_argument("--top-n", type=int, default=300)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("metrics", parents=[common], help="EER and minDCF of a score file")
    p.add_argument("scores")
    p.add_argument("--trials", help="trial list supplying the labels")
    p.add_argument("--raw", action="store_true", help="use raw instead of normalized scores")
    p.add_argument("--p-target", type=float, nargs="+", default=[0.01, 0.05])
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", parents=[common], help="ablation variant configs")
    p.add_argument("--layers", type=int, default=4)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--nontarget", type=int, default=20, help="nontarget trials per utterance")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("train", "synth") and not args.out:
        print(f"error: {args.command} needs --out", file=sys.stderr)
        return 2
    if args.command not in ("train", "synth") and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (ParseError, ConfigError, ContractError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
