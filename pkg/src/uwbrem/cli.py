"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Stdout
carries one machine-readable JSON document per run; progress goes to
stderr. Option precedence: command-line flag, then --config file
(flat `key = value` lines), then built-in default. `--threads` caps the
math-library thread pools and defaults to 1 so results are reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# heavyweight imports (numpy and friends) happen in _run_command, after the
# thread caps below are in place


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise UsageError(message)


def _apply_thread_cap(argv: list[str]) -> None:
    """Set thread env vars before numpy is imported anywhere."""
    threads = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, threads)


# ---------------------------------------------------------------------------
# option registry: per-subcommand dest -> (default, type), used to resolve
# config-file values (the same flag can default differently per subcommand)

def _opt(parser, registry, *names, default=None, type=str, dest=None, **kw):
    action = parser.add_argument(*names, default=None, type=type, dest=dest, **kw)
    registry[action.dest] = (default, type)
    return action


def _flag(parser, registry, *names, **kw):
    action = parser.add_argument(*names, action="store_true", default=None, **kw)
    registry[action.dest] = (False, bool)
    return action

_COMMON_OPTS = {"seed": (0, int), "threads": (1, int), "config": (None, str),
                "verbose": (False, bool)}


def _parse_config_file(path) -> dict[str, str]:
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected key = value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _coerce(raw: str, typ: type):
    if typ is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"not a boolean: {raw!r}")
    return typ(raw)


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    registry = args._registry
    config = _parse_config_file(args.config) if args.config else {}
    for dest, (default, typ) in registry.items():
        if getattr(args, dest, None) is None:
            if dest in config:
                setattr(args, dest, _coerce(config[dest], typ))
            else:
                setattr(args, dest, default)
    unknown = set(config) - set(registry)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return args


def _manifest(args: argparse.Namespace, out_path) -> None:
    """Record everything needed to re-run the command, next to its output."""
    import numpy

    from . import __version__
    payload = {
        "command": args.command,
        "options": {k: v for k, v in sorted(vars(args).items())
                    if k not in ("command", "func", "_registry")},
        "versions": {"uwbrem": __version__, "numpy": numpy.__version__,
                     "python": sys.version.split()[0]},
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands

def _load_samples(args, path=None):
    from . import dataset as ds
    path = path or args.data
    report = ds.import_csv(path)
    if report.errors:
        _log(f"{len(report.errors)} rows rejected during import")
    if not report.samples:
        raise ds.DatasetError(f"no valid samples in {path}")
    return report.samples


def _split_samples(args, samples):
    from . import dataset as ds
    policy = getattr(args, "split", "none")
    if policy == "none":
        return samples, []
    sp = ds.split(samples, policy, env=getattr(args, "env", None),
                  obstacle=getattr(args, "obstacle", None),
                  frac=args.train_frac, seed=args.seed)
    return sp.train, sp.test


def _model_config(args):
    from .model import RemnetConfig
    return RemnetConfig(input_len=args.k, filters=args.filters,
                        blocks=args.blocks, se_reduction=args.se_reduction,
                        dropout_rate=args.dropout)


def _train_plan(args, **overrides):
    from .training import TrainPlan
    base = dict(epochs=args.epochs, batch_size=args.batch_size,
                learning_rate=args.lr, shuffle_seed=args.seed * 2 + 1,
                dropout_seed=args.seed * 2 + 2)
    base.update(overrides)
    return TrainPlan(**base)


def _load_any_model(path):
    """Dispatch on file magic: float checkpoint or quantized model."""
    from . import model, quant
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == model.CHECKPOINT_MAGIC:
        weights, cfg = model.load_checkpoint(path)
        return ("float", cfg, weights)
    if magic == quant.QUANT_MAGIC:
        return ("int8", quant.load_quantized(path))
    raise model.CheckpointError(f"{path}: not a model file")


def _cmd_import(args) -> dict:
    from . import dataset as ds
    cmap = None
    if args.column_map:
        cmap = dict(pair.split(":", 1) for pair in args.column_map.split(","))
    report = ds.import_csv(args.data, column_map=cmap,
                           peak_fraction=args.peak_frac)
    ds.export_csv(report.samples, args.out)
    if args.errors_out:
        report.write_errors(args.errors_out)
    _manifest(args, args.out)
    return {"imported": len(report.samples), "rejected": len(report.errors),
            "out": args.out}


def _cmd_train(args) -> dict:
    from . import dataset as ds, model, training
    from .rng import Rng
    samples = _load_samples(args)
    train, test = _split_samples(args, samples)
    cfg = _model_config(args)
    x, y = ds.prepare(train, k=cfg.input_len)
    x_val = y_val = None
    if test:
        x_val, y_val = ds.prepare(test, k=cfg.input_len)
    weights = model.build(cfg, Rng(args.seed))
    result = training.fit(cfg, weights, x, y, _train_plan(args),
                          x_val=x_val, y_val=y_val, log_path=args.log,
                          verbose=args.verbose)
    model.save_checkpoint(result.weights, cfg, args.out)
    _manifest(args, args.out)
    last = result.history[-1] if result.history else None
    return {"out": args.out, "params": result.weights.total_params,
            "epochs": len(result.history),
            "train_mae": last.train_mae if last else None,
            "val_mae": (None if last is None or last.val_mae != last.val_mae
                        else last.val_mae)}


def _cmd_eval(args) -> dict:
    from . import evaluation as ev
    loaded = _load_any_model(args.model)
    variant = (loaded[1], loaded[2]) if loaded[0] == "float" else loaded[1]
    samples = _load_samples(args)
    _, test = _split_samples(args, samples)
    report = ev.evaluate(variant, test if test else samples)
    if args.hist_out:
        ev.write_histogram_csv(report.histogram, args.hist_out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
        _manifest(args, args.out)
    return report.to_dict()


def _cmd_quantize(args) -> dict:
    from . import dataset as ds, model, quant
    kind, cfg, weights = _load_any_model(args.model)
    if kind != "float":
        raise quant.QuantError("quantize expects a float checkpoint")
    info = {"mode": args.mode, "out": args.out}
    if args.mode == "f16":
        model.save_checkpoint(weights.as_float16(), cfg, args.out)
    else:
        samples = _load_samples(args)
        x, y = ds.prepare(samples, k=cfg.input_len)
        if args.mode == "ptq":
            calib = quant.calibration_subset(x, n=args.calib_size, seed=args.seed)
            qm = quant.calibrate_ptq(cfg, weights, calib)
        else:  # qat
            res = quant.train_qat(cfg, weights, x, y,
                                  _train_plan(args), verbose=args.verbose)
            qm = res.qmodel
            info["final_train_mae"] = res.history[-1] if res.history else None
        quant.save_quantized(qm, args.out)
        info["bytes"] = qm.size_bytes()
    _manifest(args, args.out)
    return info


def _cmd_sweep_k(args) -> dict:
    from . import evaluation as ev
    samples = _load_samples(args)
    train, test = _split_samples(args, samples)
    if not test:
        raise ev.EvaluationError("sweep-k needs a split with a test side "
                                 "(use --split stratified or medium_room_holdout)")
    ks = [int(v) for v in args.ks.split(",")]
    cfg = _model_config(args)
    rows = ev.k_sweep(train, test, ks, repeats=args.repeats, cfg=cfg,
                      plan=_train_plan(args), seed=args.seed,
                      verbose=args.verbose)
    if args.out:
        ev.write_sweep_csv(rows, args.out)
        _manifest(args, args.out)
    return {"rows": [{"k": r.k, "mean_mae": r.mean_mae, "maes": r.maes}
                     for r in rows]}


def _cmd_transfer(args) -> dict:
    from . import evaluation as ev
    samples = _load_samples(args)
    result = ev.transfer_matrix(samples, axis=args.axis, k=args.k,
                                hidden=args.hidden, layers=args.layers,
                                plan=_train_plan(args), seed=args.seed,
                                verbose=args.verbose)
    if args.out:
        ev.write_transfer_csv(result, args.out)
        _manifest(args, args.out)
    return result.to_dict()


def _cmd_locate(args) -> dict:
    import numpy as np

    from . import localization as loc
    anchors, epochs = loc.load_scenario(args.scenario)
    rows = []
    errors = []
    converged = 0
    for ep in epochs:
        fix = loc.gauss_newton_solve(anchors, ep.ranges)
        err = float(np.linalg.norm(fix.position - ep.truth))
        errors.append(err)
        converged += fix.converged
        rows.append((fix, err))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("x,y,z,iterations,residual_norm,converged,position_error\n")
            for fix, err in rows:
                p = fix.position
                fh.write(f"{p[0]:.9f},{p[1]:.9f},{p[2]:.9f},{fix.iterations},"
                         f"{fix.final_residual_norm:.9f},{int(fix.converged)},"
                         f"{err:.9f}\n")
        _manifest(args, args.out)
    return {"epochs": len(epochs), "converged": converged,
            "position_mae": float(np.mean(errors))}


def _cmd_bench(args) -> dict:
    import os as _os

    from . import evaluation as ev
    out = {}
    for label, path in (("float32", args.model), ("int8", args.quantized)):
        if path is None:
            continue
        loaded = _load_any_model(path)
        variant = (loaded[1], loaded[2]) if loaded[0] == "float" else loaded[1]
        run_once, width = ev.single_sample_runner(variant)
        import numpy as np
        x = np.zeros(width)
        x[5] = 1.0
        res = ev.bench_latency(run_once, x, _os.path.getsize(path),
                               iters=args.iters, warmup=args.warmup)
        out[label] = {"median_ms": res.median_ms, "p95_ms": res.p95_ms,
                      "model_bytes": res.model_bytes, "iters": res.iters}
    if "float32" in out and "int8" in out:
        out["speedup"] = out["float32"]["median_ms"] / out["int8"]["median_ms"]
        out["size_ratio"] = out["int8"]["model_bytes"] / out["float32"]["model_bytes"]
    return out


def _cmd_pca(args) -> dict:
    from . import dataset as ds
    samples = _load_samples(args)
    result = ds.pca_project(samples, dims=args.dims)
    if args.out:
        with open(args.out, "w") as fh:
            axes = ",".join(f"c{i}" for i in range(args.dims))
            fh.write(f"{axes},env,obstacle\n")
            for row, s in zip(result.projections, samples):
                vals = ",".join(f"{v:.9g}" for v in row)
                fh.write(f"{vals},{s.env},{s.obstacle}\n")
        _manifest(args, args.out)
    return {"explained_variance": [float(v) for v in result.explained_variance],
            "samples": len(samples)}


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="uwbrem", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="thread cap for math libraries (default 1)")
    common.add_argument("--config", default=None, help="key = value defaults file")
    common.add_argument("--verbose", action="store_true", default=None)

    sub = parser.add_subparsers(dest="command", required=True)

    def new_sub(name, **kw):
        p = sub.add_parser(name, parents=[common], **kw)
        registry = dict(_COMMON_OPTS)
        p.set_defaults(_registry=registry)
        return p, registry

    p, reg = new_sub("import",
                     help="read a CSV, window raw traces, write canonical CSV")
    _opt(p, reg, "--data", required=True)
    _opt(p, reg, "--out", required=True)
    _opt(p, reg, "--column-map", help="canonical:actual pairs, comma separated")
    _opt(p, reg, "--peak-frac", type=float, default=0.4)
    _opt(p, reg, "--errors-out", help="write the rejected-row report here")
    p.set_defaults(func=_cmd_import)

    def add_model_opts(p, reg):
        _opt(p, reg, "--k", type=int, default=128)
        _opt(p, reg, "--filters", type=int, default=16)
        _opt(p, reg, "--blocks", type=int, default=3)
        _opt(p, reg, "--se-reduction", type=int, default=8)
        _opt(p, reg, "--dropout", type=float, default=0.2)

    def add_train_opts(p, reg):
        _opt(p, reg, "--epochs", type=int, default=30)
        _opt(p, reg, "--batch-size", type=int, default=32)
        _opt(p, reg, "--lr", type=float, default=3e-4)

    def add_split_opts(p, reg):
        _opt(p, reg, "--split", default="none",
             choices=["none", "medium_room_holdout", "stratified",
                      "by_environment", "by_obstacle"])
        _opt(p, reg, "--train-frac", type=float, default=0.8)
        _opt(p, reg, "--env")
        _opt(p, reg, "--obstacle")

    p, reg = new_sub("train", help="train the float model")
    _opt(p, reg, "--data", required=True)
    _opt(p, reg, "--out", required=True)
    _opt(p, reg, "--log", help="per-epoch CSV log")
    add_model_opts(p, reg); add_train_opts(p, reg); add_split_opts(p, reg)
    p.set_defaults(func=_cmd_train)

    p, reg = new_sub("eval", help="evaluate a model file on labeled samples")
    _opt(p, reg, "--model", required=True)
    _opt(p, reg, "--data", required=True)
    _opt(p, reg, "--out", help="also write the JSON report here")
    _opt(p, reg, "--hist-out", help="residual histogram CSV")
    add_split_opts(p, reg)
    p.set_defaults(func=_cmd_eval)

    p, reg = new_sub("quantize", help="produce int8/f16 models")
    p.add_argument("mode", choices=["ptq", "qat", "f16"])
    _opt(p, reg, "--model", required=True)
    _opt(p, reg, "--out", required=True)
    _opt(p, reg, "--data", help="calibration/training samples (ptq, qat)")
    _opt(p, reg, "--calib-size", type=int, default=500)
    add_train_opts(p, reg)
    p.set_defaults(func=_cmd_quantize)

    p, reg = new_sub("sweep-k", help="input-width sweep")
    _opt(p, reg, "--data", required=True)
    _opt(p, reg, "--ks", default="8,16,32,64,128,157")
    _opt(p, reg, "--repeats", type=int, default=10)
    _opt(p, reg, "--out")
    add_model_opts(p, reg); add_train_opts(p, reg); add_split_opts(p, reg)
    p.set_defaults(func=_cmd_sweep_k)

    p, reg = new_sub("transfer",
                     help="cross-environment/material generalization grid")
    _opt(p, reg, "--data", required=True)
    _opt(p, reg, "--axis", default="environment",
         choices=["environment", "obstacle"])
    _opt(p, reg, "--k", type=int, default=157)
    _opt(p, reg, "--hidden", type=int, default=64)
    _opt(p, reg, "--layers", type=int, default=3)
    _opt(p, reg, "--out")
    add_train_opts(p, reg)
    p.set_defaults(func=_cmd_transfer)

    p, reg = new_sub("locate", help="solve a ranging scenario")
    _opt(p, reg, "--scenario", required=True)
    _opt(p, reg, "--out", help="per-epoch fixes CSV")
    p.set_defaults(func=_cmd_locate)

    p, reg = new_sub("bench", help="inference latency")
    _opt(p, reg, "--model", help="float checkpoint")
    _opt(p, reg, "--quantized", help="quantized model")
    _opt(p, reg, "--iters", type=int, default=10_000)
    _opt(p, reg, "--warmup", type=int, default=100)
    p.set_defaults(func=_cmd_bench)

    p, reg = new_sub("pca", help="principal components of windows")
    _opt(p, reg, "--data", required=True)
    _opt(p, reg, "--dims", type=int, default=3)
    _opt(p, reg, "--out", help="projection CSV")
    p.set_defaults(func=_cmd_pca)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = _build_parser()
    try:
        args = _resolve(parser.parse_args(argv))
        _emit(args.func(args))
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # data/validation failures
        if _is_data_error(e):
            print(f"error: {e}", file=sys.stderr)
            return 2
        raise


def _is_data_error(e: Exception) -> bool:
    from . import nn, training
    return isinstance(e, (nn.NonFiniteError, training.DivergenceError,
                          FileNotFoundError, ValueError, OSError))


if __name__ == "__main__":
    sys.exit(main())
