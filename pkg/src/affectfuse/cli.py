"""Command-line entry point: ``affectfuse <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
or training error (a failed theory check counts as numerical).
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
import warnings
from dataclasses import replace

from threadpoolctl import threadpool_limits

from .config import MODALITIES, ConfigError, RunConfig, canonical_text, config_hash, parse_config
from .container import FormatError, IntegrityWarning
from .data import SPLITS, deserialize_dataset, generate_dataset, serialize_dataset
from .harness import (ABLATIONS, VARIANTS, AblationSpec, ProtocolError, confidence_trace, missing_rate_sweep,
                      result_path, run_ablation, write_rows_csv, write_summary_json)
from .spectral import NumericalError
from .tensor import ContractError, DimensionError, DomainError
from .theory import fixed_point_check, gradient_check, lipschitz_bound, lipschitz_empirical, toy_model_config
from .training import (TrainingError, evaluate, load_checkpoint, save_checkpoint, train,
                       write_history_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "AFFECTFUSE_THREADS"
EVAL_HEADER = (["split", "missing_rate", "mode", "accuracy", "macro_f1"] + [f"f1_class{k}" for k in range(4)]
               + ["ce", "kl", "total", "n_steps", "data_fingerprint", "config_hash", "seed"])


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _rates(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="affectfuse", description="Multimodal emotion recognition experiments on synthetic sessions.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker cap for evaluation (default: ${THREADS_ENV} or 1)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="flat 'section.key = value' file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")

    g = sub.add_parser("generate-data", help="generate and save a synthetic dataset")
    with_config(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model; writes checkpoint, history CSV and summary")
    with_config(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--variant", choices=VARIANTS)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--missing-rate", type=float, default=0.0)
    e.add_argument("--mode", choices=("at_most_one", "independent"), default="at_most_one")
    e.add_argument("--seed", type=int, default=0, help="mask seed")
    e.add_argument("--out", default=".")

    s = sub.add_parser("sweep-missing", help="paired missing-modality sweep over several checkpoints")
    s.add_argument("--models", nargs="+", required=True, metavar="[NAME=]CKPT")
    s.add_argument("--data", required=True)
    s.add_argument("--rates", type=_rates, default=[0.0, 0.2, 0.4, 0.6])
    s.add_argument("--mode", choices=("at_most_one", "independent"), default="at_most_one")
    s.add_argument("--seed", type=int, default=0, help="mask seed")
    s.add_argument("--out", default=".")

    c = sub.add_parser("trace-confidence", help="per-step modality weights for one session")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--session", required=True, help="session id (e.g. test-00003) or test-split index")
    c.add_argument("--out", default=".")

    a = sub.add_parser("ablate", help="train and test every variant over several seeds")
    with_config(a)
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=_ints, default=None, help="comma list (default: harness.seeds)")
    a.add_argument("--variants", default=",".join(VARIANTS))
    a.add_argument("--out", default=".")

    th = sub.add_parser("check-theory", help="gradient, Lipschitz and fixed-point checks")
    th.add_argument("check", choices=("grad", "lipschitz", "fixed-point"))
    with_config(th)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--feedback-grad", action="store_true", help="grad: differentiate through the feedback path")
    th.add_argument("--model", help="lipschitz: checkpoint to audit")
    th.add_argument("--data", help="lipschitz: dataset holding the probe session")
    th.add_argument("--samples", type=int, help="lipschitz: perturbations per modality")
    th.add_argument("--trials", type=int, default=100, help="fixed-point: random (z, y0) pairs")
    th.add_argument("--init-scale", type=float, default=0.05, help="fixed-point: feedback/classifier init scale")
    th.add_argument("--out", default=None, help="also write a CSV here")
    return p


def resolve_threads(arg: int | None) -> int:
    if arg is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            arg = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if arg < 1:
        raise UsageError("--threads must be at least 1")
    return arg


def _load_run_config(args) -> RunConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    extra = []
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        extra.append(item)
    # later lines may not repeat a key, so overrides replace matching lines
    keys = {x.split("=", 1)[0].strip() for x in extra}
    kept = [ln for ln in text.splitlines() if ln.split("#", 1)[0].split("=", 1)[0].strip() not in keys]
    return parse_config("\n".join(kept + extra)).synced().validate()


def _out_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise UsageError(f"output directory does not exist: {path}")
    return path


def _readable(*paths) -> None:
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"no such file: {p}")


def cmd_generate(args, threads) -> int:
    cfg = _load_run_config(args)
    parent = os.path.dirname(os.path.abspath(args.out))
    _out_dir(parent)
    ds = generate_dataset(cfg.data)
    serialize_dataset(ds, args.out)
    print(f"wrote {args.out}: {sum(len(v) for v in ds.splits.values())} sessions, "
          f"fingerprint {ds.fingerprint}, config {config_hash(cfg.data)}, seed {cfg.data.seed}")
    return EXIT_OK


def _dataset(path):
    _readable(path)
    return deserialize_dataset(path)


def cmd_train(args, threads) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.variant is not None:
        cfg = replace(cfg, model=replace(cfg.model, variant=args.variant))
    out = _out_dir(args.out)
    ds = _dataset(args.data)
    if ds.config.dims() != cfg.model.dims() or ds.config.n_classes != cfg.model.n_classes:
        cfg = replace(cfg, data=ds.config).synced()
    h, seed = config_hash(cfg), cfg.train.seed

    def log(rec):
        print(f"epoch {rec.epoch:3d} lr {rec.lr:.2e} train {rec.train_total:.4f} val {rec.val_total:.4f} "
              f"acc {rec.val_acc:.4f} f1 {rec.val_macro_f1:.4f}", flush=True)

    res = train(cfg.model, cfg.train, ds.splits["train"], ds.splits["val"], log=log, threads=threads)
    res.model.data_fingerprint = ds.fingerprint
    test = evaluate(res.model, ds.splits["test"], threads=threads)
    extra = {"seed": str(seed), "run_hash": h, "data_fingerprint": ds.fingerprint,
             "best_epoch": str(res.best_epoch), "best_val_macro_f1": repr(res.best_val_macro_f1)}
    save_checkpoint(result_path(out, "train", h, seed, "afus"), res.model, extra)
    write_history_csv(result_path(out, "train", h, seed), res.history, h, seed)
    write_summary_json(result_path(out, "train", h, seed, "json"), {
        "config_hash": h, "seed": seed, "data_fingerprint": ds.fingerprint, "variant": cfg.model.variant,
        "best_epoch": res.best_epoch, "best_val_macro_f1": res.best_val_macro_f1,
        "test_accuracy": test.accuracy, "test_macro_f1": test.macro_f1, "config": canonical_text(cfg)})
    print(f"best epoch {res.best_epoch} val macro-F1 {res.best_val_macro_f1:.4f}; "
          f"test acc {test.accuracy:.4f} macro-F1 {test.macro_f1:.4f}; config {h} seed {seed}")
    return EXIT_OK


def _checkpoint(path):
    _readable(path)
    model, extra = load_checkpoint(path)
    model.data_fingerprint = extra.get("data_fingerprint")
    return model, extra


def _eval_row(split, rec, mode, fingerprint, h, seed) -> dict:
    row = {"split": split, "missing_rate": rec.missing_rate, "mode": mode, "accuracy": rec.accuracy,
           "macro_f1": rec.macro_f1, "ce": rec.ce, "kl": rec.kl, "total": rec.total, "n_steps": rec.n_steps,
           "data_fingerprint": fingerprint, "config_hash": h, "seed": seed}
    for k in range(4):
        row[f"f1_class{k}"] = rec.per_class_f1[k] if k < len(rec.per_class_f1) else 0.0
    return row


def cmd_eval(args, threads) -> int:
    if not 0.0 <= args.missing_rate <= 1.0:
        raise UsageError("--missing-rate must lie in [0, 1]")
    out = _out_dir(args.out)
    model, extra = _checkpoint(args.model)
    ds = _dataset(args.data)
    rec = evaluate(model, ds.splits[args.split], args.missing_rate, args.mode, args.seed, threads=threads)
    h = extra.get("run_hash", config_hash(model.cfg))
    write_rows_csv(result_path(out, "eval", h, args.seed),
                   [_eval_row(args.split, rec, args.mode, ds.fingerprint, h, args.seed)], EVAL_HEADER)
    print(f"{args.split}: acc {rec.accuracy:.4f} macro-F1 {rec.macro_f1:.4f} at missing rate "
          f"{args.missing_rate} ({args.mode}); config {h} seed {args.seed}")
    return EXIT_OK


def _named_models(specs: list[str]) -> dict[str, str]:
    named = {}
    for spec in specs:
        name, path = spec.split("=", 1) if "=" in spec else (os.path.splitext(os.path.basename(spec))[0], spec)
        if name in named:
            raise UsageError(f"duplicate model name {name!r}")
        named[name] = path
    return named


def cmd_sweep(args, threads) -> int:
    rates = args.rates
    if not rates or any(b <= a for a, b in zip(rates, rates[1:])) or any(not 0 <= r <= 1 for r in rates):
        raise UsageError("--rates must be strictly increasing within [0, 1]")
    out = _out_dir(args.out)
    paths = _named_models(args.models)
    ds = _dataset(args.data)
    models = {name: _checkpoint(path)[0] for name, path in paths.items()}
    res = missing_rate_sweep(models, ds.splits["test"], rates, args.mode, args.seed, ds.fingerprint, threads)
    h = sweep_hash(res.config_hashes)
    write_rows_csv(result_path(out, "sweep", h, args.seed), res.rows(),
                   ["model", "rate", "accuracy", "macro_f1", "config_hash", "seed"])
    write_summary_json(result_path(out, "sweep", h, args.seed, "json"), {
        "rates": res.rates, "accuracy": res.accuracy, "macro_f1": res.macro_f1, "mode": res.mode,
        "seed": res.seed, "config_hashes": res.config_hashes, "config_hash": h, "data_fingerprint": ds.fingerprint,
        "drop": {n: res.drop(n) for n in res.accuracy}})
    for name in res.accuracy:
        accs = " ".join(f"{a:.4f}" for a in res.accuracy[name])
        print(f"{name}: accuracy {accs} (drop {res.drop(name):.4f})")
    print(f"sweep config {h} seed {args.seed}")
    return EXIT_OK


def sweep_hash(hashes: dict[str, str]) -> str:
    """Digest of the member config hashes in name order."""
    joined = "\n".join(f"{k}={v}" for k, v in sorted(hashes.items()))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12]


def cmd_trace(args, threads) -> int:
    out = _out_dir(args.out)
    model, extra = _checkpoint(args.model)
    ds = _dataset(args.data)
    sessions = {s.id: s for split in SPLITS for s in ds.splits[split]}
    if args.session in sessions:
        session = sessions[args.session]
    elif args.session.isdigit() and int(args.session) < len(ds.splits["test"]):
        session = ds.splits["test"][int(args.session)]
    else:
        raise UsageError(f"unknown session {args.session!r}")
    tr = confidence_trace(model, session)
    h = extra.get("run_hash", config_hash(model.cfg))
    seed = int(extra.get("seed", 0))
    rows = tr.rows()
    for r in rows:
        r.update(session=session.id, config_hash=h, seed=seed)
    header = ["session", "step", "label", "prediction"] + [f"w_{m}" for m in MODALITIES] + \
        [f"sigma_{m}" for m in MODALITIES] + [f"present_{m}" for m in MODALITIES] + ["config_hash", "seed"]
    path = result_path(out, f"trace-{session.id}", h, seed)
    write_rows_csv(path, rows, header)
    print(f"wrote {path} ({len(rows)} steps)")
    return EXIT_OK


def cmd_ablate(args, threads) -> int:
    cfg = _load_run_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise UsageError(f"unknown variants {unknown}; choose from {VARIANTS}")
    seeds = args.seeds if args.seeds is not None else list(cfg.harness.seeds)
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    out = _out_dir(args.out)
    ds = _dataset(args.data)
    cfg = replace(cfg, data=ds.config).synced()
    h = config_hash(cfg)
    specs = [s for s in ABLATIONS if s.variant in variants]

    def progress(spec: AblationSpec, seed, res, rec):
        print(f"{spec.variant} seed {seed}: best epoch {res.best_epoch} test acc {rec.accuracy:.4f} "
              f"macro-F1 {rec.macro_f1:.4f}", flush=True)

    table = run_ablation(specs, ds, cfg.model, cfg.train, seeds, threads, progress)
    tag = "-".join(str(s) for s in seeds)
    rows = table.rows()
    for r in rows:
        r["config_hash"] = h
    write_rows_csv(result_path(out, "ablation", h, tag), rows,
                   ["variant", "seed", "accuracy", "macro_f1", "best_epoch", "config_hash"])
    write_summary_json(result_path(out, "ablation", h, tag, "json"), {
        "config_hash": h, "seeds": seeds, "data_fingerprint": ds.fingerprint, "table": table.format(),
        "mean_macro_f1": {v: table.mean(v) for v in variants}})
    print(table.format())
    return EXIT_OK


def cmd_theory(args, threads) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args.out) if args.out else None
    if args.check == "grad":
        toy = toy_model_config(args.feedback_grad)
        t0 = time.perf_counter()
        report = gradient_check(args.feedback_grad, seed=args.seed)
        elapsed = time.perf_counter() - t0
        h = config_hash(toy)
        rows = []
        for name, r in report.items():
            print(f"{name:<48} {r['max_rel_error']:.3e} {'PASS' if r['passed'] else 'FAIL'}")
            rows.append({"block": name, "max_rel_error": r["max_rel_error"], "checked": r["checked"],
                         "passed": int(r["passed"]), "config_hash": h, "seed": args.seed})
        ok = all(r["passed"] for r in report.values())
        print(f"gradient check {'PASS' if ok else 'FAIL'}: {len(report)} blocks in {elapsed:.1f} s; "
              f"config {h} seed {args.seed}")
        if out:
            write_rows_csv(result_path(out, "theory-grad", h, args.seed), rows)
    elif args.check == "fixed-point":
        if args.trials < 1:
            raise UsageError("--trials must be positive")
        rep = fixed_point_check(n_trials=args.trials, seed=args.seed, init_scale=args.init_scale)
        ok = rep.passed
        for k, v in vars(rep).items():
            print(f"{k:<20} {v}")
        print(f"fixed-point check {'PASS' if ok else 'FAIL'}; seed {args.seed}")
        if out:
            row = dict(vars(rep), passed=int(ok), init_scale=args.init_scale, seed=args.seed,
                       config_hash=config_hash(cfg))
            write_rows_csv(result_path(out, "theory-fixed-point", config_hash(cfg), args.seed), [row])
    else:
        if not args.model or not args.data:
            raise UsageError("check-theory lipschitz needs --model and --data")
        n = args.samples if args.samples is not None else cfg.harness.lipschitz_samples
        if n < 1:
            raise UsageError("--samples must be positive")
        model, extra = _checkpoint(args.model)
        ds = _dataset(args.data)
        session = ds.splits["test"][0]
        bound = lipschitz_bound(model)
        h = extra.get("run_hash", config_hash(model.cfg))
        rows = []
        ok = True
        for m in MODALITIES:
            for zero in [None] + [o for o in MODALITIES if o != m]:
                emp = lipschitz_empirical(model, session, m, n, cfg.harness.eps_scale, zero, args.seed)
                passed = emp <= bound[m]
                ok &= passed
                print(f"{m:<7} zeroed={zero or '-':<7} empirical {emp:.4e} bound {bound[m]:.4e} "
                      f"{'PASS' if passed else 'FAIL'}")
                rows.append({"modality": m, "zeroed": zero or "", "empirical": emp, "bound": bound[m],
                             "passed": int(passed), "samples": n, "config_hash": h, "seed": args.seed})
        print(f"lipschitz check {'PASS' if ok else 'FAIL'}; config {h} seed {args.seed}")
        if out:
            write_rows_csv(result_path(out, "theory-lipschitz", h, args.seed), rows)
    if not ok:
        raise CheckFailed(f"{args.check} check failed")
    return EXIT_OK


COMMANDS = {"generate-data": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep-missing": cmd_sweep,
            "trace-confidence": cmd_trace, "ablate": cmd_ablate, "check-theory": cmd_theory}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        threads = resolve_threads(args.threads)
        with warnings.catch_warnings():
            warnings.simplefilter("error", IntegrityWarning)
            with threadpool_limits(limits=1):
                return COMMANDS[args.command](args, threads)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IntegrityWarning, ProtocolError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError, DomainError, ContractError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
