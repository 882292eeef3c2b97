"""``rfop`` command line: train, eval, synth, eer, gradcheck.

Exit codes: 0 success, 1 check failure, 2 config/argument error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from .checks import run_suite
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    load_store,
    read_trials,
    save_store,
    split_identities,
    write_trials,
)
from .benchmark import TEST_FRACTION, VAL_FRACTION, make_test_trials
from .losses import LossWeights
from .metrics import EvalMatrix, compute_eer, read_scores, score_trials, write_report
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .train import NumericalAbort, PhaseConfig, TrainingData, TrainPlan, two_phase_train, write_log

log = logging.getLogger("rfop")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _err(msg: str) -> None:
    print(f"rfop: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# config


def parse_run_config(raw: dict, base: Path, seed: int | None = None) -> dict:
    """Validate a training config document and resolve its paths against ``base``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"model", "loss_weights", "plan", "paths", "languages"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        model = dict(raw.get("model", {}))
        lw = LossWeights(**raw.get("loss_weights", {}))
        plan_raw = dict(raw.get("plan", {}))
        for key in ("phase1", "phase2"):
            if key in plan_raw:
                plan_raw[key] = PhaseConfig(**plan_raw[key])
        if seed is not None:
            plan_raw["seed"] = seed
            model["seed"] = seed
        plan = TrainPlan(**plan_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    paths = raw.get("paths", {})
    needed = ("train_manifest", "train_blob", "val_manifest", "val_blob")
    missing = [k for k in needed if k not in paths]
    if missing:
        raise ConfigError(f"paths lacks {missing}")
    resolved = {k: (base / v) for k, v in paths.items()}
    if len({str(p.resolve()) for p in resolved.values()}) != len(resolved):
        raise ConfigError("config paths must be distinct")
    langs = raw.get("languages", {})
    if "train_lang" not in langs:
        raise ConfigError("languages.train_lang is required")
    return {
        "model": model,
        "loss_weights": lw,
        "plan": plan,
        "paths": resolved,
        "train_lang": langs["train_lang"],
        "test_langs": list(langs.get("test_langs", [langs["train_lang"]])),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    try:
        cfg_path = Path(args.config)
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
        cfg = parse_run_config(raw, cfg_path.parent, args.seed)
    except FileNotFoundError:
        _err(f"config file not found: {args.config}")
        return EXIT_CONFIG
    except (json.JSONDecodeError, ConfigError) as exc:
        _err(f"bad config: {exc}")
        return EXIT_CONFIG

    paths = cfg["paths"]
    try:
        train = load_store(paths["train_manifest"], paths["train_blob"])
        val = load_store(paths["val_manifest"], paths["val_blob"])
        data = TrainingData.from_stores(train, val, cfg["train_lang"], cfg["plan"])
        face_dim = train.features([next(i for i, r in enumerate(train.records) if r.modality == "face")]).shape[1]
        voice_dim = train.features([next(i for i, r in enumerate(train.records) if r.modality == "voice")]).shape[1]
    except (DataError, StopIteration) as exc:
        _err(f"data error: {exc or 'store lacks face or voice samples'}")
        return EXIT_DATA

    model_kw = {"face_dim": face_dim, "voice_dim": voice_dim, "latent_dim": 128, "seed": cfg["plan"].seed}
    model_kw.update(cfg["model"])
    model_kw["num_identities"] = len(data.sampler.identities)
    try:
        model_cfg = ModelConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        _err(f"bad model config: {exc}")
        return EXIT_CONFIG
    if (model_cfg.face_dim, model_cfg.voice_dim) != (face_dim, voice_dim):
        _err(f"data error: feature dims ({face_dim}, {voice_dim}) disagree with model config")
        return EXIT_DATA

    try:
        result = two_phase_train(cfg["plan"], data, model_cfg, cfg["loss_weights"])
    except NumericalAbort as exc:
        _err(f"numerical abort: {exc}")
        return EXIT_NUMERIC

    out = Path(args.out)
    meta = {
        "train_lang": cfg["train_lang"],
        "identities": data.sampler.identities,
        "best_phase": result.best.phase,
        "best_epoch": result.best.epoch,
        "val_eer": result.best.val_eer,
    }
    save_checkpoint(out, result.params, meta)
    log_path = paths.get("log", out.with_name(out.name + ".log.csv"))
    write_log(result.log, log_path)
    print(f"best: phase {result.best.phase} epoch {result.best.epoch} val EER {result.best.val_eer:.2f}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, meta = load_checkpoint(args.ckpt)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        _err(f"bad checkpoint {args.ckpt}: {exc}")
        return EXIT_CONFIG
    try:
        store = load_store(args.manifest, args.blob)
        trials = read_trials(args.trials)
        scored = score_trials(params, store, trials)
        eer = compute_eer(scored).eer_percent
    except (DataError, ValueError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA

    test_lang = args.test_lang or Counter(store.record(t.voice_sample_id).language for t in trials).most_common(1)[0][0]
    train_lang = args.train_lang or meta.get("train_lang", "unknown")
    matrix = EvalMatrix({(train_lang, test_lang): eer})
    write_report(matrix, args.report)
    print(f"EER: {eer:.1f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec.from_json(Path(args.spec).read_text(encoding="utf-8")) if args.spec else SyntheticSpec()
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    except FileNotFoundError:
        _err(f"spec file not found: {args.spec}")
        return EXIT_CONFIG
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        _err(f"bad synthetic spec: {exc}")
        return EXIT_CONFIG

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store, _ = generate_synthetic(spec)
    splits = split_identities(store, TEST_FRACTION, VAL_FRACTION, seed=spec.seed)
    for name, part in splits._asdict().items():
        save_store(part, out / f"{name}.manifest.csv", out / f"{name}.blob")
    n = spec.samples_per_identity_per_language
    n_test_ids = len(splits.test.identities())
    n_pairs = min(2000, n_test_ids * n * n)
    for lang in spec.languages:
        try:
            trials = make_test_trials(splits.test, lang, spec.seed, n_pairs, n_pairs)
        except DataError as exc:
            _err(f"cannot build trials for {lang}: {exc}")
            return EXIT_CONFIG
        write_trials(trials, out / f"trials_test_{lang}.csv")
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_eer(args) -> int:
    try:
        scores, labels = read_scores(args.scores)
        eer = compute_eer((scores, labels)).eer_percent
    except (DataError, ValueError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    print(f"EER: {eer:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not (args.tol > 0 and math.isfinite(args.tol)):
        _err("--tol must be a positive number")
        return EXIT_CONFIG
    ok = True
    for name, report in run_suite(args.tol, args.seed):
        status = "PASS" if report.passed else "FAIL"
        extra = f" ({report.message})" if report.message else ""
        print(f"{name}: max_rel_err={report.max_rel_err:.3e} {status}{extra}")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _err(message)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfop", description="Face-voice association training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="two-phase training from a JSON config")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", required=True, help="output checkpoint path (RFOP1 format)")
    t.add_argument("--seed", type=int, default=None, help="override plan and model seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trials file and report the EER")
    e.add_argument("--ckpt", required=True, help="RFOP1 checkpoint")
    e.add_argument("--manifest", required=True, help="feature-store manifest CSV")
    e.add_argument("--blob", required=True, help="feature-store float32 blob")
    e.add_argument("--trials", required=True, help="CSV face_sample_id,voice_sample_id,label")
    e.add_argument("--report", required=True, help="output CSV train_lang,test_lang,eer")
    e.add_argument("--train-lang", default=None, help="label for the report (default: from checkpoint)")
    e.add_argument("--test-lang", default=None, help="label for the report (default: trials' voice language)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write the synthetic benchmark splits and trials")
    s.add_argument("--spec", default=None, help="synthetic spec JSON (default: built-in)")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="override the spec seed")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("eer", help="EER of a score,label CSV")
    r.add_argument("--scores", required=True, help="CSV with header score,label")
    r.set_defaults(func=cmd_eer)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed (default 1e-4)")
    g.add_argument("--seed", type=int, default=0, help="input seed")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
