"""CIR dataset handling: import, windowing, normalization, splits, PCA.

A sample couples one 157-entry CIR window with a two-way-ranging
measurement. The window holds 5 samples before the detected first path and
152 after it; the regression label is the range error
delta_d = d_meas - d_true (positive for the typical NLoS bias).

The canonical CSV schema is
    d_meas,d_true,env,obstacle,los,cir_0..cir_156
with environments {big_room, medium_room, small_room, outdoor, ttw} and
obstacles {none, aluminium, plastic, wood, glass, other}. Files whose CIR
columns have a different length are treated as raw traces and windowed on
import; a column_map renames foreign headers onto the canonical ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng

WINDOW_PRE = 5
WINDOW_POST = 152
WINDOW_LEN = WINDOW_PRE + WINDOW_POST
PEAK_FRACTION = 0.4
MAX_ABS_ERROR = 10.0  # |delta_d| sanity bound, meters

ENVIRONMENTS = ("big_room", "medium_room", "small_room", "outdoor", "ttw")
OBSTACLES = ("none", "aluminium", "plastic", "wood", "glass", "other")
INDOOR_ROOMS = ("big_room", "medium_room", "small_room")


class DatasetError(ValueError):
    """Invalid sample data."""


class SchemaError(DatasetError):
    """CSV layout does not match the expected schema."""


class WindowError(DatasetError):
    """A trace cannot be windowed (e.g. all zeros)."""


@dataclass(frozen=True)
class CirSample:
    cir: np.ndarray           # windowed, length 157, non-negative
    d_meas: float             # measured range, meters
    d_true: float             # ground-truth range, meters
    env: str
    obstacle: str
    los: bool

    @property
    def delta_d(self) -> float:
        return self.d_meas - self.d_true

    def validate(self) -> None:
        if self.cir.shape != (WINDOW_LEN,):
            raise DatasetError(f"cir must have length {WINDOW_LEN}, got {self.cir.shape}")
        if not np.all(np.isfinite(self.cir)):
            raise DatasetError("cir contains non-finite values")
        if np.any(self.cir < 0):
            raise DatasetError("cir amplitudes must be non-negative")
        if not (self.d_true > 0):
            raise DatasetError(f"d_true must be positive, got {self.d_true}")
        if not (abs(self.delta_d) < MAX_ABS_ERROR):
            raise DatasetError(f"|range error| {abs(self.delta_d):.3f} exceeds "
                               f"{MAX_ABS_ERROR} m sanity bound")
        if self.env not in ENVIRONMENTS:
            raise DatasetError(f"unknown environment {self.env!r}")
        if self.obstacle not in OBSTACLES:
            raise DatasetError(f"unknown obstacle {self.obstacle!r}")


# ---------------------------------------------------------------------------
# per-sample transforms

def window_cir(raw: np.ndarray, peak_fraction: float = PEAK_FRACTION) -> np.ndarray:
    """Anchor a 157-sample window on the first path of a raw trace.

    The first path is the first index whose amplitude reaches
    peak_fraction * max(raw); the window spans 5 samples before it and 152
    after, zero-padded where it overruns the trace.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size == 0:
        raise WindowError(f"trace must be a non-empty vector, got shape {raw.shape}")
    peak_val = float(np.max(raw))
    if peak_val <= 0.0:
        raise WindowError("cannot window an all-zero trace")
    peak = int(np.argmax(raw >= peak_fraction * peak_val))
    out = np.zeros(WINDOW_LEN)
    lo = peak - WINDOW_PRE
    src_lo = max(lo, 0)
    src_hi = min(peak + WINDOW_POST, raw.size)
    out[src_lo - lo : src_hi - lo] = raw[src_lo:src_hi]
    return out


def normalize_cir(cir: np.ndarray) -> np.ndarray:
    """Scale so the maximum amplitude is 1. Idempotent."""
    cir = np.asarray(cir, dtype=np.float64)
    peak = float(np.max(np.abs(cir)))
    if peak <= 0.0:
        raise WindowError("cannot normalize an all-zero window")
    return cir / peak


def truncate_to_k(cir: np.ndarray, k: int) -> np.ndarray:
    """First k entries of the window (pre-peak samples kept)."""
    cir = np.asarray(cir, dtype=np.float64)
    if not (1 <= k <= cir.size):
        raise DatasetError(f"k must be in [1, {cir.size}], got {k}")
    return cir[:k]


def normalize(sample: CirSample) -> CirSample:
    return replace(sample, cir=normalize_cir(sample.cir))


def prepare(samples: list[CirSample], k: int = 128,
            normalized: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into model inputs: (N, k) windows and (N,) labels."""
    if not samples:
        raise DatasetError("no samples to prepare")
    x = np.stack([truncate_to_k(normalize_cir(s.cir) if normalized else s.cir, k)
                  for s in samples])
    y = np.array([s.delta_d for s in samples])
    return x, y


# ---------------------------------------------------------------------------
# CSV import/export

CANONICAL_FIELDS = ("d_meas", "d_true", "env", "obstacle", "los")


@dataclass
class ImportReport:
    samples: list[CirSample] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)  # (row, message)

    def write_errors(self, path) -> None:
        with open(path, "w") as fh:
            for row, msg in self.errors:
                fh.write(f"row {row}: {msg}\n")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def import_csv(path, column_map: dict[str, str] | None = None,
               peak_fraction: float = PEAK_FRACTION) -> ImportReport:
    """Read samples; malformed rows land in the report instead of raising.

    column_map maps canonical names (including "cir" for the trace column
    prefix) to the file's actual headers. Traces longer or shorter than 157
    entries are windowed.
    """
    cmap = {name: name for name in CANONICAL_FIELDS}
    cmap["cir"] = "cir"
    if column_map:
        cmap.update(column_map)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file") from None
        col = {name: i for i, name in enumerate(header)}
        missing = [cmap[f] for f in CANONICAL_FIELDS if cmap[f] not in col]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}")
        cir_cols = []
        i = 0
        while f"{cmap['cir']}_{i}" in col:
            cir_cols.append(col[f"{cmap['cir']}_{i}"])
            i += 1
        if not cir_cols:
            raise SchemaError(f"no {cmap['cir']}_0.. trace columns")
        windowed_input = len(cir_cols) == WINDOW_LEN

        report = ImportReport()
        for row_num, row in enumerate(reader, start=2):
            try:
                if len(row) != len(header):
                    raise DatasetError(f"expected {len(header)} cells, got {len(row)}")
                trace = np.array([float(row[c]) for c in cir_cols])
                cir = trace if windowed_input else window_cir(trace, peak_fraction)
                sample = CirSample(
                    cir=cir,
                    d_meas=float(row[col[cmap["d_meas"]]]),
                    d_true=float(row[col[cmap["d_true"]]]),
                    env=row[col[cmap["env"]]].strip(),
                    obstacle=row[col[cmap["obstacle"]]].strip(),
                    los=_parse_bool(row[col[cmap["los"]]]),
                )
                sample.validate()
                report.samples.append(sample)
            except (ValueError, DatasetError) as e:
                report.errors.append((row_num, str(e)))
    return report


def export_csv(samples: list[CirSample], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CANONICAL_FIELDS) + [f"cir_{i}" for i in range(WINDOW_LEN)])
        for s in samples:
            writer.writerow(
                [f"{s.d_meas:.6f}", f"{s.d_true:.6f}", s.env, s.obstacle,
                 int(s.los)] + [f"{v:.9g}" for v in s.cir])


# ---------------------------------------------------------------------------
# splits

@dataclass
class DatasetSplit:
    train: list[CirSample]
    test: list[CirSample]
    policy: str


def split(samples: list[CirSample], policy: str, env: str | None = None,
          obstacle: str | None = None, frac: float = 0.8,
          seed: int = 0) -> DatasetSplit:
    """Partition samples.

    medium_room_holdout: train = big + small rooms, test = medium room,
        outdoor and through-the-wall samples excluded from both.
    by_environment: train = the given environment, test = everything else.
    by_obstacle: likewise on the obstacle label.
    stratified: per (env, obstacle) stratum, a seeded shuffle sends `frac`
        of rows to train.
    """
    if policy == "medium_room_holdout":
        train = [s for s in samples if s.env in ("big_room", "small_room")]
        test = [s for s in samples if s.env == "medium_room"]
    elif policy == "by_environment":
        if env not in ENVIRONMENTS:
            raise DatasetError(f"unknown environment {env!r}")
        train = [s for s in samples if s.env == env]
        test = [s for s in samples if s.env != env]
    elif policy == "by_obstacle":
        if obstacle not in OBSTACLES:
            raise DatasetError(f"unknown obstacle {obstacle!r}")
        train = [s for s in samples if s.obstacle == obstacle]
        test = [s for s in samples if s.obstacle != obstacle]
    elif policy == "stratified":
        if not (0.0 < frac < 1.0):
            raise DatasetError(f"frac must be in (0, 1), got {frac}")
        rng = Rng(seed)
        strata: dict[tuple[str, str], list[CirSample]] = {}
        for s in samples:
            strata.setdefault((s.env, s.obstacle), []).append(s)
        train, test = [], []
        for key in sorted(strata):
            rows = strata[key]
            order = rng.permutation(len(rows))
            cut = int(round(frac * len(rows)))
            train += [rows[i] for i in order[:cut]]
            test += [rows[i] for i in order[cut:]]
    else:
        raise DatasetError(f"unknown split policy {policy!r}")
    return DatasetSplit(train, test, policy)


# ---------------------------------------------------------------------------
# PCA via power iteration

@dataclass
class PcaResult:
    projections: np.ndarray         # (N, dims)
    explained_variance: np.ndarray  # fractions, descending
    components: np.ndarray          # (dims, D) row vectors
    mean: np.ndarray


def pca_project(data, dims: int = 3, tol: float = 1e-9,
                max_iter: int = 10_000) -> PcaResult:
    """Top principal components by power iteration with deflation.

    data: (N, D) matrix or list of CirSamples (their windows are used,
    unnormalized). Start vectors are drawn from a fixed-seed generator and
    each component's sign is fixed so its largest-magnitude coordinate is
    positive, making results independent of sample order.
    """
    if isinstance(data, np.ndarray):
        x = np.asarray(data, dtype=np.float64)
    else:
        x = np.stack([s.cir for s in data])
    if x.ndim != 2:
        raise DatasetError(f"expected a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < dims:
        raise DatasetError(f"need at least {dims} samples, got {n}")
    if not (1 <= dims <= d):
        raise DatasetError(f"dims must be in [1, {d}], got {dims}")

    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / max(n - 1, 1)
    total = float(np.trace(cov))
    rng = Rng(1031)
    components = np.zeros((dims, d))
    variances = np.zeros(dims)
    work = cov.copy()
    for i in range(dims):
        v = rng.normals(d)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            nv = work @ v
            norm = np.linalg.norm(nv)
            if norm <= tol * total or norm == 0.0:
                break  # residual spectrum is numerically zero
            nv /= norm
            if np.linalg.norm(nv - v) < tol or np.linalg.norm(nv + v) < tol:
                v = nv
                break
            v = nv
        lam = float(v @ work @ v)
        anchor = np.argmax(np.abs(v))
        if v[anchor] < 0:
            v = -v
        components[i] = v
        variances[i] = max(lam, 0.0)
        work -= lam * np.outer(v, v)
    explained = variances / total if total > 0 else variances
    return PcaResult(xc @ components.T, explained, components, mean)


# ---------------------------------------------------------------------------
# synthetic data

def make_synthetic(n: int, seed: int = 0) -> list[CirSample]:
    """Physically-flavored synthetic samples for dataset-free experiments.

    The first path at index 5 always has unit amplitude (windows arrive
    pre-normalized). NLoS samples carry a late multipath cluster, and the
    range error is a function of the energy arriving from index 16 onward
    plus noise. The first 8 window entries are statistically identical for
    LoS and NLoS, so a model truncated to K=8 cannot predict the error
    while one seeing the full window can; cluster positions shift with the
    room so environment transfer is non-trivial.
    """
    rng = Rng(seed)
    cluster_lo = {"big_room": 60, "medium_room": 35, "small_room": 16}
    samples = []
    for _ in range(n):
        env = INDOOR_ROOMS[rng.randbelow(3)]
        los = rng.uniform() < 0.5
        obstacle = "none" if los else OBSTACLES[1 + rng.randbelow(4)]
        d_true = rng.uniform(1.0, 8.0)

        cir = np.zeros(WINDOW_LEN)
        cir[:WINDOW_PRE] = np.abs(rng.normals(WINDOW_PRE, 0.0, 0.01))
        cir[WINDOW_PRE] = 1.0
        decay = rng.uniform(0.55, 0.75)
        for t in range(1, 11):  # early tail, independent of the label
            cir[WINDOW_PRE + t] = decay ** t * rng.uniform(0.6, 1.0)
        if not los:
            lo = cluster_lo[env]
            center = lo + rng.randbelow(111 - lo)  # cluster within the window
            width = 2 + rng.randbelow(5)
            peak_amp = rng.uniform(0.25, 0.6)
            for t in range(center - width, center + width + 1):
                if WINDOW_PRE < t < WINDOW_LEN:
                    fall = abs(t - center) / (width + 1)
                    cir[t] = max(cir[t], peak_amp * (1.0 - fall) * rng.uniform(0.7, 1.0))
        cir += np.abs(rng.normals(WINDOW_LEN, 0.0, 0.004))
        cir[WINDOW_PRE] = 1.0  # keep the first path the global max

        late_frac = cir[16:].sum() / cir.sum()
        delta = 1.2 * late_frac + rng.normals(1, 0.0, 0.02)[0]
        samples.append(CirSample(cir=cir, d_meas=d_true + delta, d_true=d_true,
                                 env=env, obstacle=obstacle, los=los))
    return samples
