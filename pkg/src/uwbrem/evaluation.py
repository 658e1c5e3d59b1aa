"""Metrics, experiment drivers, and the latency benchmark.

A "variant" anywhere in this module is one of:
    (RemnetConfig, ModelWeights)   float model
    (MlpConfig, ModelWeights)      dense baseline
    QuantizedModel                 integer model
    callable (N, K) -> (N,)        anything else, with k passed explicitly
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataset as ds
from . import model as model_mod
from . import quant as quant_mod
from . import training as training_mod
from .model import MlpConfig, ModelWeights, RemnetConfig
from .quant import QuantizedModel
from .rng import Rng

HIST_BINS = 300
HIST_RANGE = (-1.0, 1.0)


class EvaluationError(ValueError):
    pass


def mae(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise EvaluationError(f"bad shapes {preds.shape} vs {targets.shape}")
    return float(np.mean(np.abs(preds - targets)))


def r_squared(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise EvaluationError("undefined R-squared: constant targets")
    return 1.0 - float(np.sum((targets - preds) ** 2)) / ss_tot


def residual_histogram(residuals, bins: int = HIST_BINS,
                       lo: float = HIST_RANGE[0],
                       hi: float = HIST_RANGE[1]) -> np.ndarray:
    """Uniform bins over [lo, hi); out-of-range residuals land in the edge
    bins, so counts always sum to the sample count."""
    residuals = np.asarray(residuals, dtype=np.float64)
    idx = np.floor((residuals - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return np.bincount(idx, minlength=bins)


def as_predictor(variant, k: int | None = None):
    """Resolve a variant to (predict(N, K) -> (N,), input width)."""
    if isinstance(variant, QuantizedModel):
        return (lambda x: quant_mod.predict_int8(variant, x)), variant.cfg.input_len
    if isinstance(variant, tuple) and len(variant) == 2:
        cfg, w = variant
        if isinstance(cfg, RemnetConfig):
            return (lambda x: model_mod.predict(cfg, w, x)), cfg.input_len
        if isinstance(cfg, MlpConfig):
            return (lambda x: model_mod.mlp_forward_batch(cfg, w, x)[0]), cfg.input_dim
    if callable(variant):
        if k is None:
            raise EvaluationError("callable variant needs an explicit k")
        return variant, k
    raise EvaluationError(f"not a model variant: {type(variant).__name__}")


@dataclass
class EvalReport:
    n_nlos: int
    n_los: int
    mae_nlos: float | None
    mae_los: float | None
    r2_nlos: float | None
    r2_los: float | None
    sigma_nlos: float | None
    sigma_los: float | None            # extra: not part of the usual table
    raw_mae_nlos: float | None
    raw_mae_los: float | None
    improvement_nlos: float | None     # (raw_mae - mae) / raw_mae
    improvement_los: float | None
    histogram: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            if key == "histogram":
                out[key] = self.histogram.tolist()
            elif val is None or isinstance(val, int):
                out[key] = val
            else:
                out[key] = float(val)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _group_stats(preds, targets):
    if targets.size == 0:
        return None, None, None, None, None
    m = mae(preds, targets)
    raw = float(np.mean(np.abs(targets)))
    try:
        r2 = r_squared(preds, targets)
    except EvaluationError:
        r2 = None
    sigma = float(np.std(targets - preds))
    imp = (raw - m) / raw if raw > 0 else None
    return m, r2, sigma, raw, imp


def evaluate(variant, samples: list[ds.CirSample], k: int | None = None) -> EvalReport:
    """Residual statistics of a model on labeled samples, split by LoS flag.

    Residual = delta_d - prediction; the raw columns describe the
    uncorrected errors (a zero-output model reproduces them exactly).
    """
    if not samples:
        raise EvaluationError("empty test set")
    predict, width = as_predictor(variant, k)
    x, y = ds.prepare(samples, k=width)
    preds = np.asarray(predict(x), dtype=np.float64)
    los_mask = np.array([s.los for s in samples])

    m_n, r2_n, sg_n, raw_n, imp_n = _group_stats(preds[~los_mask], y[~los_mask])
    m_l, r2_l, sg_l, raw_l, imp_l = _group_stats(preds[los_mask], y[los_mask])
    return EvalReport(
        n_nlos=int((~los_mask).sum()), n_los=int(los_mask.sum()),
        mae_nlos=m_n, mae_los=m_l, r2_nlos=r2_n, r2_los=r2_l,
        sigma_nlos=sg_n, sigma_los=sg_l,
        raw_mae_nlos=raw_n, raw_mae_los=raw_l,
        improvement_nlos=imp_n, improvement_los=imp_l,
        histogram=residual_histogram(y - preds),
    )


def write_histogram_csv(histogram: np.ndarray, path,
                        lo: float = HIST_RANGE[0], hi: float = HIST_RANGE[1]) -> None:
    width = (hi - lo) / len(histogram)
    with open(path, "w") as fh:
        fh.write("bin_left,count\n")
        for i, c in enumerate(histogram):
            fh.write(f"{lo + i * width:.9g},{int(c)}\n")


# ---------------------------------------------------------------------------
# experiment drivers

def _trial_seeds(seed: int, trial: int) -> tuple[int, int, int]:
    base = seed * 1_000_003 + trial * 7919
    return base, base + 1, base + 2  # init / shuffle / dropout


@dataclass
class SweepRow:
    k: int
    maes: list[float]

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.maes))


def k_sweep(train: list[ds.CirSample], test: list[ds.CirSample],
            k_values: list[int], repeats: int = 10,
            cfg: RemnetConfig | None = None,
            plan: training_mod.TrainPlan | None = None,
            seed: int = 0, verbose: bool = False) -> list[SweepRow]:
    """Mean test MAE after retraining at each input width."""
    if repeats < 1:
        raise EvaluationError("repeats must be >= 1")
    cfg = cfg or model_mod.RemnetConfig()
    plan = plan or training_mod.TrainPlan()
    rows = []
    for k in k_values:
        cfg_k = replace(cfg, input_len=k)
        x_tr, y_tr = ds.prepare(train, k=k)
        x_te, y_te = ds.prepare(test, k=k)
        maes = []
        for trial in range(repeats):
            s_init, s_shuf, s_drop = _trial_seeds(seed, trial)
            w0 = model_mod.build(cfg_k, Rng(s_init))
            res = training_mod.fit(
                cfg_k, w0, x_tr, y_tr,
                replace(plan, shuffle_seed=s_shuf, dropout_seed=s_drop))
            maes.append(mae(model_mod.predict(cfg_k, res.weights, x_te), y_te))
            if verbose:
                print(f"k={k} trial={trial} mae={maes[-1]:.4f}")
        rows.append(SweepRow(k, maes))
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("k,mean_mae," + ",".join(f"trial_{i}" for i in range(len(rows[0].maes))) + "\n")
        for r in rows:
            fh.write(f"{r.k},{r.mean_mae:.9f}," + ",".join(f"{m:.9f}" for m in r.maes) + "\n")


@dataclass
class TransferResult:
    axis: str
    classes: list[str]
    grid: np.ndarray      # grid[i, j] = test MAE trained on i, tested on j
    raw: np.ndarray       # raw MAE per target class

    def to_dict(self) -> dict:
        return {"axis": self.axis, "classes": self.classes,
                "grid": self.grid.tolist(), "raw": self.raw.tolist()}


def transfer_matrix(samples: list[ds.CirSample], axis: str = "environment",
                    k: int = ds.WINDOW_LEN, hidden: int = 64, layers: int = 3,
                    plan: training_mod.TrainPlan | None = None,
                    holdout: float = 0.2, seed: int = 0,
                    verbose: bool = False) -> TransferResult:
    """Cross-class generalization grid using the dense baseline on raw windows.

    Per source class the baseline trains on (1 - holdout) of the class and
    is scored on the held-out part, so the diagonal is not a training-set
    number; off-diagonal cells score the full target class.
    """
    if axis == "environment":
        label = lambda s: s.env
        vocab = ds.ENVIRONMENTS
    elif axis == "obstacle":
        label = lambda s: s.obstacle
        vocab = ds.OBSTACLES
    else:
        raise EvaluationError(f"axis must be environment or obstacle, got {axis!r}")
    plan = plan or training_mod.TrainPlan()

    classes = [c for c in vocab if any(label(s) == c for s in samples)]
    if not classes:
        raise EvaluationError("no labeled samples")
    pools = {c: [s for s in samples if label(s) == c] for c in classes}
    holdouts, trains = {}, {}
    for c in classes:
        rows = pools[c]
        order = Rng(seed * 65537 + hash_str(c)).permutation(len(rows))
        cut = max(1, int(round((1.0 - holdout) * len(rows))))
        trains[c] = [rows[i] for i in order[:cut]]
        holdouts[c] = [rows[i] for i in order[cut:]] or [rows[i] for i in order[:1]]

    grid = np.zeros((len(classes), len(classes)))
    raw = np.zeros(len(classes))
    for j, tgt in enumerate(classes):
        _, y_h = ds.prepare(holdouts[tgt], k=k)
        raw[j] = float(np.mean(np.abs(y_h)))
    for i, src in enumerate(classes):
        x_tr, y_tr = ds.prepare(trains[src], k=k)
        mcfg = MlpConfig(input_dim=k, hidden=hidden, layers=layers)
        s_init, s_shuf, _ = _trial_seeds(seed, i)
        w0 = model_mod.build_mlp(mcfg, Rng(s_init))
        res = training_mod.fit_mlp(mcfg, w0, x_tr, y_tr,
                                   replace(plan, shuffle_seed=s_shuf))
        for j, tgt in enumerate(classes):
            x_te, y_te = ds.prepare(holdouts[tgt] if tgt == src else pools[tgt], k=k)
            pred, _ = model_mod.mlp_forward_batch(mcfg, res.weights, x_te)
            grid[i, j] = mae(pred, y_te)
            if verbose:
                print(f"{src} -> {tgt}: {grid[i, j]:.4f}")
    return TransferResult(axis, classes, grid, raw)


def hash_str(text: str) -> int:
    """Stable small hash (FNV-1a 32-bit); hash() is salted per process."""
    h = 2166136261
    for b in text.encode():
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


def write_transfer_csv(result: TransferResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("train\\test," + ",".join(result.classes) + "\n")
        fh.write("raw," + ",".join(f"{v:.9f}" for v in result.raw) + "\n")
        for c, row in zip(result.classes, result.grid):
            fh.write(c + "," + ",".join(f"{v:.9f}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# latency benchmark

@dataclass
class BenchResult:
    median_ms: float
    p95_ms: float
    model_bytes: int
    iters: int


def single_sample_runner(variant, fused: bool = True):
    """(run_once(x_1d) -> float, input width). For the integer model this
    prefers the fused compiled engine and falls back to the numpy path."""
    if isinstance(variant, QuantizedModel):
        if fused:
            from . import quant_fast
            engine = quant_fast.make_engine(variant)
            if engine is not None:
                engine.warmup()
                qp = variant.activations["input"]
                def run(x):
                    return engine(quant_mod.quantize(x, qp).astype(np.uint8))
                return run, variant.cfg.input_len
        return (lambda x: quant_mod.forward_int8(
            variant, quant_mod.quantize_input(variant, x))), variant.cfg.input_len
    predict, width = as_predictor(variant)
    return (lambda x: float(predict(x[None])[0])), width


def bench_latency(run_once, x: np.ndarray, model_bytes: int,
                  iters: int = 10_000, warmup: int = 100) -> BenchResult:
    """Median/p95 wall time of run_once(x) after warmup."""
    if iters <= 0:
        raise EvaluationError("iters must be >= 1")
    for _ in range(warmup):
        run_once(x)
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        run_once(x)
        times[i] = time.perf_counter() - t0
    times *= 1e3
    return BenchResult(float(np.median(times)),
                       float(np.percentile(times, 95)), model_bytes, iters)
