"""Command-line entry point: ``canids <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data/validation error,
3 runtime/numeric error.  Failures print one ``canids: error[<kind>]: ...``
line on stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, canbus, features, model_io, nn, pipeline, quant, trafgen
from .detector import Detector, write_verdicts
from .errors import CanIdsError, ConfigError, DomainError
from .metrics import evaluate_model
from .train import split_dataset, transfer_train, write_history

EXIT = {"usage": 1, "data": 2, "runtime": 3}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _load_cfg(args) -> dict:
    override = trafgen.load_config(args.config) if getattr(args, "config", None) else {}
    return pipeline.validate_config(pipeline.merge_config(pipeline.DEFAULT_CONFIG, override))


def _stamp(args) -> str:
    if args.frozen_clock is not None:
        return args.frozen_clock
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _model_ref(path) -> dict:
    """Location-independent identity of a bundle for report headers."""
    manifest = Path(path) / model_io.MANIFEST
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest() if manifest.is_file() else None
    return {"name": Path(path).name, "manifest_sha256": digest}


def _report(args, cfg: dict, body: dict) -> dict:
    return {"generated_at": _stamp(args), "command": args.command, "config": cfg, **body}


def cmd_generate(args, cfg):
    section = dict(cfg["benign"])
    if args.seed is not None:
        section["seed"] = args.seed
    if args.duration is not None:
        section["duration"] = args.duration
    log = trafgen.gen_benign(trafgen.profile_from_dict(section))
    canbus.write_log_file(log, args.out)


def cmd_inject(args, cfg):
    log = canbus.read_log_file(args.log)
    section = dict(cfg[args.attack])
    if args.seed is not None:
        section["seed"] = args.seed
    if args.attack == "dos":
        out = trafgen.inject_dos(log, trafgen.dos_from_dict(section))
    else:
        out = trafgen.inject_fuzzing(log, trafgen.fuzz_from_dict(section))
    canbus.write_log_file(out, args.out)


def cmd_train(args, cfg):
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.phase2_epochs is not None:
        cfg["train"]["phase2_epochs"] = args.phase2_epochs
    tcfg = pipeline.train_config(cfg)
    if args.checkpoint_dir:
        tcfg.checkpoint_dir = args.checkpoint_dir
    dos = features.window_set(canbus.read_log_file(args.dos_log, attack_hint="dos"))
    fuzz = features.window_set(canbus.read_log_file(args.fuzz_log, attack_hint="fuzzing"))
    result = transfer_train(tcfg, dos, fuzz, model=pipeline.make_model(cfg),
                            phase2_epochs=cfg["train"].get("phase2_epochs"))
    model_io.save_bundle(result.model, args.out)
    if args.history:
        write_history(result, args.history,
                      {"generated_at": _stamp(args), "command": "train", "config": cfg})


def _windows(path, hint=None, labeled=True) -> features.WindowSet:
    return features.window_set(canbus.read_log_file(path, attack_hint=hint, labeled=labeled))


def cmd_quantize(args, cfg):
    model = model_io.load_bundle(args.model)
    if not isinstance(model, nn.CnnModel):
        raise DomainError("quantize needs a float model bundle")
    wins = features.WindowSet.concat([_windows(p) for p in args.calib_log])
    calib = pipeline.calibration_windows(wins, cfg)
    folded = quant.fold_batchnorm(model)
    profile = quant.calibrate(folded, calib)
    epochs = args.fine_tune_epochs if args.fine_tune_epochs is not None else \
        int(cfg["quantize"]["fine_tune_epochs"])
    if epochs > 0:
        train, val, _ = split_dataset(wins, pipeline.train_config(cfg))
        from .metrics import EvalReport

        def f1(qm, data):
            return EvalReport.build("val", quant.qmodel_predict(qm, data.x), data.y).f1

        _, qm = quant.fine_tune_quantized(folded, profile, train, epochs,
                                          lr=float(cfg["quantize"]["fine_tune_lr"]),
                                          seed=int(cfg["train"]["seed"]), val=val, score=f1)
    else:
        qm = quant.quantize_model(folded, profile)
    model_io.save_bundle(qm, args.out)
    if args.report:
        _write_json(args.report, _report(args, cfg, {
            "calibration": {"samples": profile.samples, "max_abs": profile.max_abs},
            "site_frac_bits": {k: p.frac_bits for k, p in qm.site_params().items()},
            "fine_tune_epochs": epochs}))


def cmd_evaluate(args, cfg):
    engine = model_io.load_bundle(args.model)
    wins = _windows(args.log, hint=args.attack)
    if args.split == "test":
        wins = split_dataset(wins, pipeline.train_config(cfg))[2]
    rep = evaluate_model(engine, wins, args.attack)
    if args.roc_csv:
        with open(args.roc_csv, "w", encoding="utf-8", newline="\n") as fh:
            rep.write_roc_csv(fh)
    body = {"model": _model_ref(args.model), "split": args.split, "report": rep.to_dict()}
    _write_json(args.out, _report(args, cfg, body))


def cmd_bench(args, cfg):
    engine = model_io.load_bundle(args.model)
    b = cfg["bench"]
    reps = args.reps if args.reps is not None else int(b["reps"])
    warmup = args.warmup if args.warmup is not None else int(b["warmup"])
    if args.log:
        ids = canbus.read_log_file(args.log, labeled=False).ids().tolist()
    else:
        ids = np.random.default_rng(cfg["seed"]).integers(0, 2048, 256).tolist()
    det = Detector(engine)
    stats = bench.measure_latency(det, ids, reps, warmup)
    budget = bench.line_rate_budget(stats, float(b["bitrate"]), int(b["dlc"]), bool(b["stuffed"]))
    doc = bench.bench_report(det.kind, stats, budget)
    doc["model"] = _model_ref(args.model)
    _write_json(args.out, _report(args, cfg, doc))


def cmd_detect(args, cfg):
    engine = model_io.load_bundle(args.model)
    log = canbus.read_log_file(args.log, labeled=False)
    det = Detector(engine)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_verdicts(det.run(log), fh)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canids", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config overriding the built-in defaults")
        sp.add_argument("--frozen-clock", nargs="?", const="1970-01-01T00:00:00+00:00",
                        default=None, help="fixed report timestamp (reproducible output)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("generate", cmd_generate, "synthesise a benign log")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--duration", type=float)

    sp = add("inject", cmd_inject, "inject DoS or fuzzing frames into a log")
    sp.add_argument("--log", required=True)
    sp.add_argument("--attack", choices=("dos", "fuzzing"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "DoS then fuzzing transfer training")
    sp.add_argument("--dos-log", required=True)
    sp.add_argument("--fuzz-log", required=True)
    sp.add_argument("--out", required=True, help="float model bundle directory")
    sp.add_argument("--history", help="history JSON path")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--phase2-epochs", type=int)
    sp.add_argument("--checkpoint-dir")

    sp = add("quantize", cmd_quantize, "fold, calibrate and quantise to int8")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib-log", required=True, nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--fine-tune-epochs", type=int)
    sp.add_argument("--report")

    sp = add("evaluate", cmd_evaluate, "metrics report for one attack log")
    sp.add_argument("--model", required=True)
    sp.add_argument("--log", required=True)
    sp.add_argument("--attack", choices=("dos", "fuzzing"), required=True)
    sp.add_argument("--split", choices=("all", "test"), default="all")
    sp.add_argument("--out", required=True)
    sp.add_argument("--roc-csv")

    sp = add("bench", cmd_bench, "per-frame latency and line-rate budget")
    sp.add_argument("--model", required=True)
    sp.add_argument("--log")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--out", required=True)

    sp = add("detect", cmd_detect, "per-frame verdicts for a log")
    sp.add_argument("--model", required=True)
    sp.add_argument("--log", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_cfg(args)
        args.func(args, cfg)
    except CanIdsError as exc:
        print(f"canids: error[{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT[exc.kind]
    except OSError as exc:
        print(f"canids: error[data]: {exc}", file=sys.stderr)
        return EXIT["data"]
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"canids: error[runtime]: {exc}", file=sys.stderr)
        return EXIT["runtime"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
