"""``kt`` command line: prepare, stats, train, eval, predict, synth, gradcheck.

Every command prints one JSON document on standard output (indented with
``--pretty``). ``train`` also prints one progress line per epoch before its
JSON summary. Failures exit nonzero with a one-line JSON error object on
standard output and a readable diagnostic on standard error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, data, evaluation, synth, training
from .errors import ConfigError, KTError

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(KTError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- data directory -----------------------------------------------------------

def _data_dir(args):
    root = args.data_dir or os.environ.get("KT_DATA_DIR")
    if not root:
        raise ConfigError("no data directory: pass --data-dir or set KT_DATA_DIR")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    return root


def _path(args, attr, default_name):
    explicit = getattr(args, attr, None)
    if explicit:
        p = Path(explicit)
    else:
        p = _data_dir(args) / default_name
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return p


def _maps(args):
    try:
        return data.parse_keyid2idx(_path(args, "keyid2idx", synth.KEYID_FILE))
    except FileNotFoundError:
        return None


def _sizes(maps, sequences):
    if maps is not None and maps.num_kcs and maps.num_questions:
        return maps.num_kcs, maps.num_questions
    return training._index_sizes(sequences)


def _emit(obj, args):
    print(json.dumps(obj, indent=2 if getattr(args, "pretty", False) else None, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- commands -----------------------------------------------------------------

def cmd_prepare(args):
    report = {"ok": True}
    caught = []
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        maps = _maps(args)
        if maps is not None:
            report["maps"] = maps.counts()
            qpath = (Path(args.questions) if args.questions else _data_dir(args) / synth.QUESTIONS_FILE)
            if qpath.exists():
                bank = data.parse_questions(qpath, maps)
                report["question_bank"] = {"questions": len(bank.questions), "kcs": len(bank.kc_routes)}
        for attr, name, parse, key in (
            ("train", synth.TRAIN_FILE, lambda p: data.parse_train_valid(p, maps=maps), "train_sequences"),
            ("test", synth.TEST_FILE, lambda p: data.parse_test(p, maps=maps), "test_sequences"),
        ):
            explicit = getattr(args, attr)
            p = Path(explicit) if explicit else (_data_dir(args) / name)
            if explicit and not p.exists():
                raise FileNotFoundError(f"{p} does not exist")
            if p.exists():
                seqs = parse(p)
                report[key] = len(seqs)
                if key == "test_sequences":
                    report["test_unknown_responses"] = int(sum(s.real_length - s.known_length for s in seqs))
                else:
                    report["folds"] = {str(f): int(sum(s.fold == f for s in seqs)) for f in range(5)}
        caught = [str(x.message) for x in w]
    report["warnings"] = caught
    if len(report) == 2:
        raise FileNotFoundError("no challenge files found to prepare")
    return report


def cmd_stats(args):
    train = data.parse_train_valid(_path(args, "train", synth.TRAIN_FILE), maps=_maps(args))
    return data.dataset_stats(train)


def _train_config(args, fold):
    if args.config:
        cfg = training.TrainConfig.from_json(args.config)
        doc = asdict(cfg)
    else:
        doc = {}
    for flag, key in (("model", "model"), ("seed", "seed"), ("lr", "lr"), ("epochs", "max_epochs"),
                      ("batch_size", "batch_size"), ("patience", "patience"), ("clip_norm", "clip_norm")):
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    if args.model_options:
        try:
            doc["model_options"] = json.loads(args.model_options)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--model-options is not valid JSON: {exc}") from None
    doc["fold"] = fold
    return training.TrainConfig(**doc)


def _run_fold(args, fold, quiet=False):
    config = _train_config(args, fold)
    maps = _maps(args)
    sequences = data.parse_train_valid(_path(args, "train", synth.TRAIN_FILE), maps=maps)
    train, valid = training.kfold_split(sequences, fold)
    K, Q = _sizes(maps, sequences)
    out = Path(args.out) if args.out else None
    record = training.train_model(config, train, valid, K, Q, checkpoint_dir=out, log=None if quiet else sys.stdout)
    if out is not None:
        record.save(out / f"{config.model}-fold{fold}-seed{config.seed}.run.json")
    return record.to_dict()


def _parse_folds(text):
    if text == "all":
        return list(range(5))
    try:
        folds = [int(x) for x in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"fold must be an integer in 0..4 or 'all', got {text!r}") from None
    for f in folds:
        if not 0 <= f <= 4:
            raise ConfigError(f"fold must be in 0..4, got {f}")
    return folds


def cmd_train(args):
    folds = _parse_folds(args.fold)
    for f in folds:
        _train_config(args, f)  # validate every config before any work starts
    if args.parallel_folds and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=len(folds)) as pool:
            runs = list(pool.map(_run_fold, [args] * len(folds), folds, [True] * len(folds)))
        for r in runs:
            for e in r["epochs"]:
                loss = "nan" if e["train_loss"] is None else f"{e['train_loss']:.6f}"
                print(f"fold {r['config']['fold']} epoch {e['epoch']} train_loss {loss} val_auc {e['val_auc']:.6f}")
    else:
        runs = [_run_fold(args, f) for f in folds]
    return runs[0] if len(runs) == 1 else {"runs": runs}


def _normalize_mode(mode):
    mode = mode.replace("-", "_")
    if mode not in evaluation.MODES:
        raise ConfigError(f"mode must be accumulative or non-accumulative, got {mode!r}")
    return mode


def cmd_eval(args):
    mode = _normalize_mode(args.mode)
    model = checkpoint.load_model(args.checkpoint)
    maps = _maps(args)
    if args.split == "validation":
        sequences = data.parse_train_valid(_path(args, "train", synth.TRAIN_FILE), maps=maps)
        _, valid = training.kfold_split(sequences, _parse_folds(args.fold)[0])
        truths = [s.trimmed() for s in valid if s.real_length >= 2]
        masked = [evaluation.mask_suffix(s, args.known_fraction)[0] for s in truths]
        keep = [i for i, m in enumerate(masked) if m.known_length < m.real_length]
        truths, masked = [truths[i] for i in keep], [masked[i] for i in keep]
    else:
        masked = data.parse_test(_path(args, "test", synth.TEST_FILE), maps=maps)
        truth_path = Path(args.truth) if args.truth else _data_dir(args) / synth.TRUTH_FILE
        if not truth_path.exists():
            raise FileNotFoundError(f"scoring the test split needs hidden responses; {truth_path} does not exist")
        _, answers, _ = synth.load_truth(truth_path)
        truths = []
        for s in masked:
            if s.uid not in answers:
                raise ConfigError(f"no hidden responses for test uid {s.uid}")
            truths.append(s.with_responses(answers[s.uid]))
    fills = evaluation.predict(model, masked, mode, soft_feedback=args.soft_feedback)
    report = evaluation.evaluate_fills(masked, truths, fills, mode)
    out = report.to_dict()
    out["split"] = args.split
    if args.split == "validation":
        out["per_fold"] = {str(_parse_folds(args.fold)[0]): {"auc": report.auc, "accuracy": report.accuracy}}
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=1))
    return out


def cmd_predict(args):
    mode = _normalize_mode(args.mode)
    model = checkpoint.load_model(args.checkpoint)
    sequences = data.parse_test(_path(args, "test", synth.TEST_FILE), maps=_maps(args))
    fills = evaluation.predict(model, sequences, mode, soft_feedback=args.soft_feedback)
    path = evaluation.write_submission(sequences, fills, args.out)
    return {"submission": str(path), "rows": len(sequences), "filled": int(sum(len(f) for f in fills)), "mode": mode}


def cmd_synth(args):
    if args.config:
        gt = synth.GroundTruth.from_json(args.config)
    elif args.scenario == "bkt":
        gt = synth.bkt_scenario()
    else:
        gt = synth.default_scenario()
    overrides = {k: v for k, v in (("seed", args.seed), ("n_train", args.n_train), ("n_test", args.n_test),
                                   ("steps", args.steps)) if v is not None}
    if overrides:
        gt = synth.GroundTruth.from_dict({**gt.to_dict(), **overrides})
    if args.write_config:
        Path(args.write_config).write_text(json.dumps(gt.to_dict(), indent=1))
    files = synth.generate(gt, args.out, shuffled=args.shuffled)
    return {"files": {k: str(v) for k, v in files.items()}, "ground_truth": gt.to_dict()}


def cmd_gradcheck(args):
    from .gradcheck import SUITES, run_suites

    results = run_suites(SUITES, seed=args.seed or 0, max_coords=args.max_coords)
    summary = {name: max(groups.values()) for name, groups in results.items()}
    ok = all(v <= args.tolerance for v in summary.values())
    out = {"ok": ok, "tolerance": args.tolerance, "max_error": summary}
    if args.verbose:
        out["groups"] = results
    if not ok:
        raise _Failed(out)
    return out


class _Failed(Exception):
    def __init__(self, payload):
        super().__init__("gradient check failed")
        self.payload = payload


# -- parser -------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="kt", description="Knowledge tracing workbench: BKT, DKT and AKT on challenge-format data.")
    p.add_argument("--pretty", action="store_true", help="indent JSON output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(sp, train=True, test=True):
        sp.add_argument("--data-dir", help="directory holding the challenge files (default $KT_DATA_DIR)")
        sp.add_argument("--keyid2idx", help="path to keyid2idx.json")
        if train:
            sp.add_argument("--train", help="path to train_valid_sequences.csv")
        if test:
            sp.add_argument("--test", help="path to pykt_test.csv")
        sp.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS, help="indent JSON output")

    sp = sub.add_parser("prepare", help="parse and validate every challenge file")
    data_flags(sp)
    sp.add_argument("--questions", help="path to questions.json")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("stats", help="dataset statistics of the training file")
    data_flags(sp, test=False)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("train", help="train one model on one fold (or several)")
    data_flags(sp, test=False)
    sp.add_argument("--model", choices=training.MODEL_KINDS)
    sp.add_argument("--fold", default="0", help="validation fold 0..4, a comma list, or 'all'")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--clip-norm", type=float)
    sp.add_argument("--model-options", help='JSON object of model settings, e.g. {"hidden_dim": 32}')
    sp.add_argument("--config", help="TrainConfig JSON file; flags override it")
    sp.add_argument("--out", help="directory for checkpoints and run records")
    sp.add_argument("--parallel-folds", action="store_true", help="train the requested folds in parallel processes")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint with the prefix/suffix protocol")
    data_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("validation", "test"), default="validation")
    sp.add_argument("--fold", default="0")
    sp.add_argument("--mode", default="non-accumulative", help="accumulative | non-accumulative")
    sp.add_argument("--soft-feedback", action="store_true", help="feed back probabilities instead of 0/1")
    sp.add_argument("--known-fraction", type=float, default=0.5)
    sp.add_argument("--truth", help="ground_truth.json holding hidden test responses")
    sp.add_argument("--report", help="also write the report JSON here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="fill the test file and write a submission CSV")
    data_flags(sp, train=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", default="non-accumulative")
    sp.add_argument("--soft-feedback", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("synth", help="generate a synthetic dataset in challenge format")
    sp.add_argument("--config", help="GroundTruth JSON file")
    sp.add_argument("--scenario", choices=("default", "bkt"), default="default")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--shuffled", action="store_true", help="permute all responses (null-signal control)")
    sp.add_argument("--write-config", help="also save the effective GroundTruth JSON here")
    sp.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every model's gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--max-coords", type=int, help="subsample at most this many coordinates per group")
    sp.add_argument("--verbose", action="store_true", help="report every parameter group")
    sp.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _fail(kind, message, code, payload=None):
    doc = {"ok": False, "error": kind, "message": message}
    if payload:
        doc.update(payload)
    print(json.dumps(doc, default=_json_default))
    print(f"kt: error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", str(exc), EXIT_USAGE)
    try:
        result = args.func(args)
    except _Failed as exc:
        return _fail("check_failed", str(exc), EXIT_ERROR, exc.payload)
    except KTError as exc:
        return _fail(exc.kind, str(exc), EXIT_ERROR)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_ERROR)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_ERROR)
    _emit(result, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
