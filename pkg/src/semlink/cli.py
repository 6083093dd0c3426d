"""Command-line entry point: data generation, staged training, evaluation,
SNR sweeps, and the built-in verification battery.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 check failure.
Every run echoes its fully-resolved configuration into the output directory,
and re-running with the same config and seed rewrites outputs byte-identically.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from semlink import config as cf
from semlink import data as dt
from semlink import evalharness as ev
from semlink import models as md
from semlink import nn
from semlink import pipeline as pl
from semlink import selftest as st

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

CORPUS_FILES = {
    "train_clean": "train_clean.corpus",
    "train_corrupted": "train_corrupted.corpus",
    "test_clean": "test_clean.corpus",
    "test_corrupted": "test_corrupted.corpus",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semlink",
        description="Desk-scale robust semantic speech-to-text link simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="config file path")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        p.add_argument("--data", type=Path, default=None,
                       help="directory holding corpora/checkpoints (default: --out)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override, last wins")

    common(sub.add_parser("gen-data", help="generate the synthetic corpora"))
    p_train = sub.add_parser("train", help="run one training stage")
    common(p_train)
    p_train.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p_eval = sub.add_parser("eval", help="evaluate systems at one channel point")
    common(p_eval)
    common(sub.add_parser("sweep", help="full SNR sweep across systems"))
    p_grad = sub.add_parser("grad-check", help="finite-difference gradient battery")
    p_grad.add_argument("--quick", action="store_true")
    p_self = sub.add_parser("self-test", help="full verification battery")
    p_self.add_argument("--quick", action="store_true")
    p_self.add_argument("--inject-grad-fault", action="store_true",
                        help=argparse.SUPPRESS)  # test fixture
    return parser


def _prepare(args) -> tuple[cf.RunSettings, Path, Path]:
    try:
        settings = cf.resolve(args.config, args.overrides, args.seed)
    except FileNotFoundError as e:
        raise CliError(f"config file not found: {e.filename}", EXIT_USAGE) from None
    except cf.ConfigError as e:
        raise CliError(str(e), EXIT_USAGE) from None
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    data_dir: Path = args.data if args.data is not None else out
    (out / "resolved.cfg").write_text(cf.format_settings(settings), encoding="utf-8")
    return settings, out, data_dir


def _load_corpus(data_dir: Path, name: str) -> dt.Corpus:
    path = data_dir / CORPUS_FILES[name]
    if not path.exists():
        raise CliError(f"missing corpus file {path}; run gen-data first", EXIT_RUNTIME)
    return dt.load_corpus(path)


def _checkpoint_path(data_dir: Path, stage: int) -> Path:
    return data_dir / f"stage{stage}.ckpt"


def _require_checkpoints(data_dir: Path, stages) -> None:
    for s in stages:
        path = _checkpoint_path(data_dir, s)
        if not path.exists():
            raise CliError(f"missing stage-{s} checkpoint {path}; train stage {s} first",
                           EXIT_RUNTIME)


def _load_bundle(settings: cf.RunSettings, data_dir: Path, stages) -> md.ModelBundle:
    bundle = md.ModelBundle.initialize(settings.model_config(), seed=settings["run"]["seed"])
    _require_checkpoints(data_dir, stages)
    for s in stages:
        pl.load_stage_checkpoint(_checkpoint_path(data_dir, s), bundle, stage=s)
    return bundle


def _stages_for_systems(systems) -> tuple[int, ...]:
    stages = {1}
    if any(s in ("ross_full", "generator_only") for s in systems):
        stages.add(2)
    if "ross_full" in systems:
        stages.add(3)
    return tuple(sorted(stages))


def cmd_gen_data(args) -> int:
    settings, out, _ = _prepare(args)
    spec = settings.corpus_spec()
    corpus = dt.generate_corpus(spec)
    n_train = settings["data"]["train_size"]
    train = dt.Corpus(spec, corpus.utterances[:n_train], corpus.prototypes)
    test = dt.Corpus(spec, corpus.utterances[n_train:], corpus.prototypes)
    cspec = settings.corruption_spec()
    seed = settings["run"]["seed"]
    pieces = {
        "train_clean": train,
        "test_clean": test,
        "train_corrupted": dt.corrupt_corpus(train, cspec, seed=seed),
        "test_corrupted": dt.corrupt_corpus(test, cspec, seed=seed + 1),
    }
    for name, c in pieces.items():
        dt.save_corpus(out / CORPUS_FILES[name], c)
        print(f"wrote {out / CORPUS_FILES[name]} ({len(c)} utterances)")
    return EXIT_OK


def cmd_train(args) -> int:
    settings, out, data_dir = _prepare(args)
    stage = args.stage
    bundle = md.ModelBundle.initialize(settings.model_config(), seed=settings["run"]["seed"])
    for dep in range(1, stage):
        _require_checkpoints(data_dir, [dep])
        pl.load_stage_checkpoint(_checkpoint_path(data_dir, dep), bundle, stage=dep)
    train_clean = _load_corpus(data_dir, "train_clean")
    cfg = settings.train_config(stage)
    if stage == 1:
        report = pl.train_stage1(bundle, train_clean, cfg)
    else:
        train_corr = _load_corpus(data_dir, "train_corrupted")
        if stage == 2:
            report = pl.train_stage2(bundle, train_clean, train_corr, cfg)
        else:
            report = pl.train_stage3(bundle, train_clean, train_corr, cfg)
    pl.write_loss_csv(out / f"stage{stage}_loss.csv", report.curve)
    adam_states = report.diagnostics.get("adam_states")
    pl.save_stage_checkpoint(_checkpoint_path(out, stage), bundle, stage=stage,
                             adam_states=adam_states, step=cfg.steps)
    print(f"stage {stage}: final loss {report.final_loss:.6f} over {cfg.steps} steps")
    if report.halted:
        print(f"halted: {report.halt_reason}")
        return EXIT_RUNTIME
    print(f"wrote {_checkpoint_path(out, stage)} and {out / f'stage{stage}_loss.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    settings, out, data_dir = _prepare(args)
    e = settings["eval"]
    systems = tuple(e["systems"])
    bundle = _load_bundle(settings, data_dir, _stages_for_systems(systems))
    corpus = _load_corpus(data_dir,
                          "test_corrupted" if e["input"] == "corrupted" else "test_clean")
    sweep = settings.sweep_config()
    reports = [ev.evaluate_system(bundle, corpus, system, e["eval_channel"],
                                  e["eval_snr_db"], sweep)
               for system in sorted(systems)]
    ev.write_report_csv(out / "eval.csv", reports)
    for r in reports:
        print(f"{r.system:32s} {r.channel:8s} {r.snr_db:5.1f} dB  "
              f"acc {r.token_acc:.4f}  ngram {r.ngram:.4f}  sts {r.sts:.4f}  n={r.n}")
    print(f"wrote {out / 'eval.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    settings, out, data_dir = _prepare(args)
    sweep = settings.sweep_config()
    bundle = _load_bundle(settings, data_dir, _stages_for_systems(sweep.systems))
    corpus = _load_corpus(data_dir, "test_corrupted"
                          if settings["eval"]["input"] == "corrupted" else "test_clean")
    reports = ev.snr_sweep(bundle, corpus, sweep)
    ev.write_report_csv(out / "results.csv", reports)
    failures = sum(r.flags.get("inference_failures", 0) for r in reports)
    print(f"wrote {out / 'results.csv'} ({len(reports)} rows, {failures} flagged failures)")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    points = 10 if args.quick else 100
    results = st.op_gradient_battery(points_per_op=points)
    results += st.block_gradient_battery(points=1 if args.quick else 2)
    results += st.network_gradient_battery(points=1 if args.quick else 2)
    results += st.loss_gradient_battery(points=points)
    print(st.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_self_test(args) -> int:
    results, dur = st.run_self_test(quick=args.quick,
                                    inject_grad_fault=args.inject_grad_fault)
    print(st.format_table(results))
    print(f"runtime: {dur:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "grad-check": cmd_grad_check,
        "self-test": cmd_self_test,
    }
    try:
        return handlers[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (dt.DataError, pl.PipelineError, md.ModelError, nn.NNError, ev.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
