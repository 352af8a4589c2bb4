"""Batch command-line surface: synth | train | decode | score.

Exit codes: 0 success, 2 usage/validation problems, 3 runtime failures.
Every command writes a run_manifest.json with the seed, inputs, and
sha256 hashes of its outputs so runs can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path



from . import fileio, report
from .checkpoint import load_checkpoint
from .corpus import Utterance, build_vocab, read_manifest
from .ctc import (
    DecodeConfig,
    LogPosteriorMatrix,
    ctc_greedy_decode,
    hypothesis_line,
    read_hypotheses,
    st_win_frames,
    write_hypotheses,
)
from .encoder import DOWNSAMPLE_FACTOR, ModelConfig, infer_log_posteriors
from .features import FeatureMatrix, compute_norm_stats, mvn, read_features, write_features
from .scoring import DEFAULT_COLLAR_S, aggregate, score_hypotheses
from .synth import SynthConfig, synth_corpus, write_corpus
from .training import (
    Trainer,
    TrainConfig,
    TrainingDiverged,
    prepare_samples,
    quantizer_from_checkpoint,
    warm_start_scd,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(ValueError):
    """Raised for validation problems that should exit with code 2."""


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SCDLAB_SEED")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise UsageError(f"SCDLAB_SEED is not an integer: {env!r}") from e
    return 0


def _load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _write_run_manifest(
    out_dir: Path,
    command: str,
    seed: int,
    config_path: str | None,
    inputs: dict,
    outputs: list[Path],
    extra: dict | None = None,
) -> None:
    manifest = {
        "command": command,
        "config": config_path,
        "master_seed": seed,
        "inputs": inputs,
        "outputs": sorted(str(p.relative_to(out_dir)) for p in outputs),
        "hashes": {str(p.relative_to(out_dir)): fileio.sha256_file(p) for p in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    fileio.write_json(out_dir / "run_manifest.json", manifest)


def _load_corpus(manifest_path: str | Path) -> tuple[list[Utterance], dict[str, FeatureMatrix]]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise UsageError(f"manifest not found: {manifest_path}")
    utterances = read_manifest(manifest_path)
    features: dict[str, FeatureMatrix] = {}
    for utt in utterances:
        if utt.feature_file is None:
            raise UsageError(f"utterance {utt.id} has no feature file")
        features[utt.id] = read_features(manifest_path.parent / utt.feature_file)
    return utterances, features


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    config = SynthConfig.from_dict(_load_json(args.config))
    out_dir = Path(args.out_dir)
    corpus = synth_corpus(config, seed)
    manifest_path = write_corpus(corpus, out_dir)
    outputs = [manifest_path, out_dir / "synth_meta.json"]
    outputs += [out_dir / u.feature_file for u in corpus.utterances]
    _write_run_manifest(out_dir, "synth", seed, args.config, {}, outputs)
    print(f"wrote {len(corpus.utterances)} utterances to {manifest_path}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _stage_train_config(raw: dict, args, seed: int) -> TrainConfig:
    stages = raw.get("stages", {})
    if args.stage not in stages:
        raise UsageError(f"config has no section for stage {args.stage!r}")
    section = dict(stages[args.stage])
    section["stage"] = args.stage
    section.setdefault("seed", seed)
    if args.steps is not None:
        section["steps"] = args.steps
    if args.batch_size is not None:
        section["batch_size"] = args.batch_size
    if args.freeze is not None:
        section["freeze"] = args.freeze
    return TrainConfig.from_dict(section)


def cmd_train(args) -> int:
    seed = _resolve_seed(args)
    raw = _load_json(args.config)
    if args.stage == "scd" and not args.init and not args.from_scratch:
        raise UsageError("scd stage requires --init CHECKPOINT (or explicit --from-scratch)")
    train_cfg = _stage_train_config(raw, args, seed)

    utterances, features = _load_corpus(args.data)
    transcripts = [seg.transcript for u in utterances for seg in u.segments]
    vocab = build_vocab(transcripts, mode=train_cfg.vocab_mode)
    input_dim = next(iter(features.values())).dim
    n_languages = max(raw.get("model", {}).get("n_languages", 0), max(u.language_id for u in utterances) + 1)

    params = None
    quantizer = None
    if args.init:
        ckpt = load_checkpoint(args.init)
        if args.stage == "bestrq":
            model_cfg = ckpt.config
            params = {n: t.copy() for n, t in ckpt.tensors.items() if not n.startswith("quantizer/")}
            quantizer = quantizer_from_checkpoint(ckpt)
        else:
            params, model_cfg = warm_start_scd(ckpt, vocab, decoder_seed=seed + 1)
    else:
        model_section = dict(raw.get("model", {}))
        model_section.update(
            input_dim=input_dim,
            n_languages=n_languages,
            vocab_size=vocab.size,
        )
        model_section.setdefault("seed", seed)
        model_cfg = ModelConfig.from_dict(model_section)

    samples = prepare_samples(utterances, features, train_cfg, vocab, quantizer)
    trainer = Trainer(model_cfg, train_cfg, samples, vocab, params=params, quantizer=quantizer)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.scdc"
    log_path = out_dir / "train_log.jsonl"
    result = trainer.run(log_path=log_path, ckpt_path=ckpt_path)
    report.render_loss_curve(out_dir / "loss_curve.png", result.log_rows)

    outputs = [ckpt_path, log_path, out_dir / "loss_curve.png"]
    _write_run_manifest(
        out_dir,
        "train",
        seed,
        args.config,
        {"data": str(args.data), "init": args.init, "stage": args.stage},
        [p for p in outputs if p.exists()],
        extra={"freeze": train_cfg.freeze, "steps": train_cfg.steps},
    )
    loss = result.final_loss
    print(f"stage {args.stage}: {train_cfg.steps} steps, final loss {loss if loss is None else round(loss, 6)}, "
          f"skipped {result.skipped_total}")
    return EXIT_OK


# ---------------------------------------------------------------- decode


def _parse_sweep(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError as e:
        raise UsageError(f"bad sweep spec {spec!r}; expected START:STOP:STEP") from e
    if step <= 0 or hi < lo:
        raise UsageError(f"bad sweep spec {spec!r}: need START <= STOP and STEP > 0")
    lams = []
    x = lo
    while x <= hi + 1e-9:
        lams.append(round(x, 9))
        x += step
    return lams


def _decode_lambda_grid(args) -> list[float]:
    if args.st_scale_sweep:
        lams = _parse_sweep(args.st_scale_sweep)
    else:
        lams = [args.st_scale if args.st_scale is not None else 1.0]
    if any(lam <= 0 for lam in lams):
        raise UsageError("turn-token scale must be positive")
    return lams


def cmd_decode(args) -> int:
    seed = _resolve_seed(args)
    lams = _decode_lambda_grid(args)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.vocab is None:
        raise UsageError(f"checkpoint {args.ckpt} carries no vocabulary; train an asr/scd stage first")
    vocab = ckpt.vocab
    mvn_mode = ckpt.extra.get("preproc", {}).get("mvn", "utterance")

    utterances, features = _load_corpus(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    hyp_rows: dict[float, list[dict]] = {lam: [] for lam in lams}
    win_counts: dict[float, int] = {lam: 0 for lam in lams}
    outputs: list[Path] = []
    for utt in utterances:
        fm = features[utt.id]
        feats = mvn(fm, compute_norm_stats(fm)).frames if mvn_mode == "utterance" else fm.frames
        logp = infer_log_posteriors(ckpt.tensors, ckpt.config, feats, utt.language_id)
        post = LogPosteriorMatrix(logp, frame_shift_s=fm.frame_shift_s * DOWNSAMPLE_FACTOR)
        if args.dump_posteriors:
            post_path = out_dir / "posteriors" / f"{utt.id}.scdf"
            write_features(post_path, FeatureMatrix(logp, frame_shift_s=post.frame_shift_s))
            outputs.append(post_path)
        for lam in lams:
            result = ctc_greedy_decode(post, vocab, DecodeConfig(st_scale=lam))
            hyp_rows[lam].append(hypothesis_line(utt.id, result, vocab, lam))
            win_counts[lam] += int(st_win_frames(logp, vocab.st_id, lam).size)

    for lam in lams:
        path = out_dir / f"hyps_lambda_{lam:g}.jsonl"
        write_hypotheses(path, hyp_rows[lam])
        outputs.append(path)

    sweep_rows = []
    best_lambda = None
    if args.refs:
        ref_utts = read_manifest(args.refs)
        for lam in lams:
            scores = score_hypotheses(ref_utts, hyp_rows[lam], collar_s=args.collar, token_mode=vocab.mode)
            rep = aggregate(scores, group_by="pooled")
            pooled = rep.pooled
            sweep_rows.append(
                {
                    "lambda": lam,
                    "precision": pooled.precision,
                    "recall": pooled.recall,
                    "f1": pooled.f1,
                    "wer": pooled.wer,
                    "st_win_frames": win_counts[lam],
                }
            )
        best_lambda = max(sweep_rows, key=lambda r: r["f1"])["lambda"]
        fileio.write_json(out_dir / "sweep_summary.json", {"rows": sweep_rows, "best_lambda": best_lambda})
        report.write_sweep_tsv(out_dir / "sweep_summary.tsv", sweep_rows)
        report.render_sweep_figure(out_dir / "sweep.png", sweep_rows)
        outputs += [out_dir / "sweep_summary.json", out_dir / "sweep_summary.tsv", out_dir / "sweep.png"]
        print(report.render_sweep_summary_table(sweep_rows, best_lambda), end="")

    _write_run_manifest(
        out_dir,
        "decode",
        seed,
        None,
        {"ckpt": str(args.ckpt), "data": str(args.data), "refs": args.refs, "lambdas": lams},
        outputs,
    )
    return EXIT_OK


# ---------------------------------------------------------------- score


def cmd_score(args) -> int:
    seed = _resolve_seed(args)
    ref_utts = read_manifest(args.refs)
    hyp_lines = read_hypotheses(args.hyps)
    ref_ids = {u.id for u in ref_utts}
    hyp_ids = {h["id"] for h in hyp_lines}
    missing_refs = sorted(hyp_ids - ref_ids)
    missing_hyps = sorted(ref_ids - hyp_ids)
    if missing_refs or missing_hyps:
        raise UsageError(
            "reference/hypothesis id mismatch: "
            f"no reference for {missing_refs or 'none'}; no hypothesis for {missing_hyps or 'none'}"
        )

    scores = score_hypotheses(ref_utts, hyp_lines, collar_s=args.collar, token_mode=args.token_mode)
    rep = aggregate(scores, group_by=args.group_by)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_json(out_dir / "report.json", rep.to_dict())
    report.write_report_tsv(out_dir / "report.tsv", rep)
    report.render_report_figure(out_dir / "report.png", rep)
    table = report.render_report_table(rep)
    fileio.atomic_write_text(out_dir / "report.txt", table)
    print(table, end="")

    outputs = [out_dir / "report.json", out_dir / "report.tsv", out_dir / "report.png", out_dir / "report.txt"]
    _write_run_manifest(
        out_dir,
        "score",
        seed,
        None,
        {"refs": str(args.refs), "hyps": str(args.hyps), "collar": args.collar},
        [p for p in outputs if p.exists()],
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scdlab",
        description="Desk-scale speaker change detection lab: synthesize data, "
        "pretrain/train the toy encoder, decode with turn-token scaling, and score.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="SynthConfig JSON")
    p.add_argument("--seed", type=int, default=None, help="master seed (falls back to SCDLAB_SEED)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["bestrq", "asr", "scd"])
    p.add_argument("--config", required=True, help="train JSON with model + stages sections")
    p.add_argument("--data", required=True, help="corpus manifest.jsonl")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--init", default=None, help="checkpoint to warm start from")
    p.add_argument("--from-scratch", action="store_true", help="allow scd without a checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="override config steps")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--freeze", default=None, help="all | first_K | last_K | first_and_last_K")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy decode with turn-token posterior scaling")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="corpus manifest.jsonl")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--st-scale", type=float, default=None, help="single turn-token scale (default 1.0)")
    p.add_argument("--st-scale-sweep", default=None, help="START:STOP:STEP, e.g. 1:9:1")
    p.add_argument("--refs", default=None, help="reference manifest for the sweep summary")
    p.add_argument("--collar", type=float, default=DEFAULT_COLLAR_S)
    p.add_argument("--dump-posteriors", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score hypotheses against a reference manifest")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--collar", type=float, default=DEFAULT_COLLAR_S)
    p.add_argument("--group-by", choices=["language", "pooled"], default="language")
    p.add_argument("--token-mode", choices=["word", "char"], default="word")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_score)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # anything else is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())
