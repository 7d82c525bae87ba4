"""``kpft`` command-line entry point.

Exit codes: 0 ok, 1 a check failed, 2 bad config or arguments, 3 I/O error,
4 numeric abort (non-finite gradient or loss). Data goes to stdout,
diagnostics to stderr. ``KPFT_SEED`` overrides the config seed.
"""

import argparse
import dataclasses
import os
import sys
import time
import tracemalloc

from kpft import _alloc, backend, checkpoint, gradcheck, grad, parambudget, rng
from kpft.config import ConfigError, load_config, write_sections
from kpft.layers import AdapterSpec, LayerConfigError
from kpft.model import ModelError
from kpft.train import (LOW_RESOURCE_SIZES, NumericAbort, accuracy, build_for, low_resource_sweep,
                        run_training, training_data)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def fmt(x):
    return format(x, ".9g")


def _err(msg):
    print(msg, file=sys.stderr)


def _load(path):
    try:
        cfg = load_config(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}", EXIT_CONFIG) from None
    except ConfigError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None
    seed = os.environ.get("KPFT_SEED")
    if seed is not None:
        try:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        except ValueError:
            raise CliError(f"KPFT_SEED must be an integer, got {seed!r}", EXIT_CONFIG) from None
        if cfg.seed < 0:
            raise CliError("KPFT_SEED must be >= 0", EXIT_CONFIG)
    return cfg


# -- count-params --------------------------------------------------------------------

def cmd_count_params(args):
    cfg = _load(args.config)
    base = cfg.adapter or AdapterSpec()
    try:
        if args.all_methods:
            reports = [parambudget.audit_method(cfg.model, m, base) for m in parambudget.TABLE_METHODS]
        elif args.method:
            reports = [parambudget.audit_method(cfg.model, args.method, base)]
        else:
            reports = [parambudget.audit(cfg.model, cfg.adapter, cfg.mode)]
    except (LayerConfigError, ModelError, parambudget.BudgetError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    for report in reports:
        for line in report.lines():
            print(line)
    if args.all_methods:
        print(f"{'method':<12} {'trainable':>12} {'fraction%':>14}")
        for r in reports:
            print(f"{r.method:<12} {r.counted_trainable:>12} {fmt(100 * r.fraction_counted):>14}")
    if args.record:
        _write_text(args.record, write_sections({r.method: r.record() for r in reports}))
    return EXIT_OK


# -- verification drivers ----------------------------------------------------------

def _report_checks(results):
    failed = [r for r in results if not r.ok]
    for r in results:
        print(r.line())
    for r in failed:
        _err(f"gradient check failed: op={r.op} max_rel_err={r.max_rel_err:.3e} at {r.worst_input}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_gradcheck(args):
    try:
        results = gradcheck.run_gradchecks(args.op, trials=args.trials, seed=args.seed)
    except KeyError as exc:
        raise CliError(exc.args[0], EXIT_CONFIG) from None
    return _report_checks(results)


def cmd_materialize_check(args):
    return _report_checks(gradcheck.run_materialize_checks(args.trials, seed=args.seed))


# -- train / eval ------------------------------------------------------------------

def _write_bytes(path, data):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None


def _write_text(path, text):
    _write_bytes(path, text.encode("utf-8"))


def _prepare_out(out):
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror or exc}", EXIT_IO) from None
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable", EXIT_IO)


def cmd_train(args):
    cfg = _load(args.config)
    _prepare_out(args.out)
    try:
        if args.sweep:
            rows = low_resource_sweep(cfg, sizes=LOW_RESOURCE_SIZES, seeds=args.seeds, log=print)
            record = {f"size_{r.size}": {"mean": fmt(r.mean), "std": fmt(r.std),
                                         "accuracies": ",".join(fmt(a) for a in r.accuracies)}
                      for r in rows}
            _write_text(os.path.join(args.out, "sweep.txt"), write_sections(record))
            return EXIT_OK
        report = run_training(cfg, log=print)
    except NumericAbort as exc:
        raise CliError(f"numeric abort: {exc}", EXIT_NUMERIC) from None
    except (ValueError, ModelError, LayerConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    _write_bytes(os.path.join(args.out, "checkpoint.kpft"), checkpoint.save_checkpoint(report.model))
    _write_text(os.path.join(args.out, "report.txt"), write_sections(report.record()))
    print(f"final_accuracy={fmt(report.final_accuracy)} best_val_accuracy={fmt(report.best_val_accuracy)} "
          f"best_step={report.best_step} trained_fraction={fmt(100 * report.trained_fraction)}%")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load(args.config)
    model = build_for(cfg)
    try:
        checkpoint.read_checkpoint(args.checkpoint, model)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}", EXIT_IO) from None
    except checkpoint.CheckpointError as exc:
        raise CliError(f"{args.checkpoint}: {exc}", EXIT_IO) from None
    _, _, test = training_data(cfg)
    print(f"accuracy={fmt(accuracy(model, test))}")
    return EXIT_OK


# -- bench ---------------------------------------------------------------------------

BENCH_METHODS = parambudget.TABLE_METHODS


def _bench_method(cfg, method, steps):
    m = parambudget.METHODS[method]
    spec = parambudget.method_spec(m, cfg.adapter or AdapterSpec())
    run = dataclasses.replace(cfg, adapter=spec, mode=m.mode)
    model = build_for(run)
    params = [v for _, v in sorted(model.params.items()) if v.requires_grad]
    train, _, _ = training_data(run)
    gen = rng.stream(run.seed, rng.PROBE)
    idx = gen.integers(0, len(train), size=run.optim.batch_size)
    tokens, labels = train.tokens[idx], train.labels[idx]

    def step():
        with grad.Tape() as tape:
            loss = grad.cross_entropy(model(tokens), labels)
        grad.backward(loss, tape)
        for v in params:
            v.value -= 1e-3 * v.grad

    step()  # warm-up
    tracemalloc.start()
    with _alloc.probe() as shapes:
        start = time.perf_counter()
        for _ in range(steps):
            step()
        elapsed = time.perf_counter() - start
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    k, d = run.model.hidden, spec.bottleneck if spec else 0
    dense_w = {(k, d), (d, k)} & set(shapes)
    trainable = sum(v.value.size for v in params)
    return {
        "method": method,
        "trainable": trainable,
        "steps_per_sec": steps / elapsed,
        "peak_alloc_bytes": peak,
        "kernel_buffers": len(shapes),
        "materialized_kxd": "yes" if dense_w else "no",
    }


def cmd_bench(args):
    cfg = _load(args.config)
    if cfg.model.decoder_layers or cfg.model.relative_buckets or cfg.model.tied_head:
        raise CliError("bench needs a trainable encoder-only geometry", EXIT_CONFIG)
    if args.backend:
        try:
            backend.set_backend(args.backend)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
    print(f"# desk-scale single-process timings on backend={backend.active()}; "
          "not comparable to accelerator measurements")
    failed = False
    try:
        for method in BENCH_METHODS:
            row = _bench_method(cfg, method, args.steps)
            print(" ".join(f"{k}={fmt(v) if isinstance(v, float) else v}" for k, v in row.items()))
            if method in ("phm", "compacter", "compacter++") and row["materialized_kxd"] != "no":
                _err(f"{method}: efficient path allocated a k x d weight")
                failed = True
    except (ValueError, ModelError, LayerConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    return EXIT_CHECK if failed else EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="kpft", description="Kronecker/PHM adapter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="trainable-parameter budget of a configuration")
    p.add_argument("--config", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--method", choices=sorted(parambudget.METHODS))
    group.add_argument("--all-methods", action="store_true")
    p.add_argument("--record", help="also write the report(s) as a record file")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", action="append", help="check only this op (repeatable)")
    p.add_argument("--trials", type=int, default=gradcheck.DEFAULT_TRIALS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("materialize-check", help="blockwise PHM against the materialized weight")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_materialize_check)

    p = sub.add_parser("train", help="train adapters and write a checkpoint and report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", action="store_true", help="run the low-resource sweep instead")
    p.add_argument("--seeds", type=int, default=5, help="trials per sweep size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="steps/sec and peak allocation per method")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--backend", choices=backend.available())
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    for name in ("trials", "steps", "seeds"):
        if getattr(args, name, 1) < 1:
            _err(f"--{name} must be >= 1")
            return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        _err(f"kpft {args.command}: {exc}")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
