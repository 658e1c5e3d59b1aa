"""Trilateration: nonlinear least-squares position from anchor ranges.

Minimizes sum_i (||p - a_i|| - d_i)^2 with Gauss-Newton steps
J^T J delta = -J^T r, J_i = (p - a_i)^T / ||p - a_i||, plus Levenberg
damping: lambda starts at 1e-3, grows x10 when a step would increase the
cost and shrinks /10 on acceptance, so accepted iterations never increase
the cost and the method degrades gracefully on biased ranges.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np


class LocalizationError(ValueError):
    """Invalid anchors or ranges."""


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (n, 3) meters

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        object.__setattr__(self, "anchors", a)
        if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 4:
            raise LocalizationError(f"need at least 4 anchors as (n, 3), got {a.shape}")
        diff = a[:, None, :] - a[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if np.min(dist[np.triu_indices(a.shape[0], 1)]) < 1e-9:
            raise LocalizationError("coincident anchors")
        # z-ambiguity: with (near-)coplanar anchors two mirror solutions exist
        centered = a - a.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[2] < 1e-6 * max(sv[0], 1e-12):
            warnings.warn("anchors are coplanar: the position is ambiguous "
                          "across the anchor plane", stacklevel=2)

    @property
    def centroid(self) -> np.ndarray:
        return self.anchors.mean(axis=0)


@dataclass(frozen=True)
class PositionFix:
    position: np.ndarray
    iterations: int
    final_residual_norm: float
    converged: bool


def gauss_newton_solve(anchors: AnchorSet, ranges: np.ndarray,
                       init: np.ndarray | None = None, tol: float = 1e-9,
                       max_iter: int = 100) -> PositionFix:
    """Solve for the tag position; starts at the anchor centroid by default.

    Convergence = accepted step shorter than tol. A singular damped system
    or exhausted iterations return converged=False with the best point so
    far.
    """
    a = anchors.anchors
    d = np.asarray(ranges, dtype=np.float64)
    if d.shape != (a.shape[0],):
        raise LocalizationError(
            f"got {d.shape[0] if d.ndim == 1 else d.shape} ranges for {a.shape[0]} anchors")
    if np.any(d <= 0):
        raise LocalizationError("ranges must be positive")
    p = np.asarray(init, dtype=np.float64).copy() if init is not None \
        else anchors.centroid.copy()
    if p.shape != (3,):
        raise LocalizationError(f"init must be a 3-vector, got shape {p.shape}")

    def residuals(point):
        diff = point - a
        dist = np.sqrt((diff ** 2).sum(axis=1))
        # an iterate exactly on an anchor has no gradient; nudge it off
        bad = dist < 1e-12
        if np.any(bad):
            diff = diff + np.where(bad[:, None], 1e-9, 0.0)
            dist = np.sqrt((diff ** 2).sum(axis=1))
        return dist - d, diff / dist[:, None]

    lam = 1e-3
    r, jac = residuals(p)
    cost = float(r @ r)
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        jtj = jac.T @ jac
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj + lam * np.eye(3), -jtr)
        except np.linalg.LinAlgError:
            break
        r_new, jac_new = residuals(p + step)
        cost_new = float(r_new @ r_new)
        if cost_new <= cost:
            p = p + step
            r, jac, cost = r_new, jac_new, cost_new
            lam = max(lam / 10.0, 1e-12)
            if float(np.linalg.norm(step)) <= tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    return PositionFix(p, iterations, float(np.linalg.norm(r)), converged)


@dataclass
class Epoch:
    """One measurement instant: ground truth plus per-anchor ranges, with
    optional CIR windows for model-based correction."""
    truth: np.ndarray              # (3,)
    ranges: np.ndarray             # (n_anchors,)
    cirs: np.ndarray | None = None  # (n_anchors, K) model inputs


def position_experiment(anchors: AnchorSet, epochs: list[Epoch],
                        mitigator=None) -> tuple[float, float]:
    """Position MAE with raw ranges and with model-corrected ranges.

    mitigator: callable mapping an (n_anchors, K) matrix of CIR windows to
    per-anchor range-error estimates, subtracted from the measured ranges.
    Returns (raw_mae, mitigated_mae); without a mitigator the two are equal.
    """
    if not epochs:
        raise LocalizationError("no epochs")
    raw_err = []
    fix_err = []
    for ep in epochs:
        raw = gauss_newton_solve(anchors, ep.ranges)
        raw_err.append(np.linalg.norm(raw.position - ep.truth))
        if mitigator is None:
            fix_err.append(raw_err[-1])
            continue
        if ep.cirs is None:
            raise LocalizationError("mitigator given but epoch has no CIR data")
        corr = ep.ranges - np.asarray(mitigator(ep.cirs), dtype=np.float64)
        corr = np.maximum(corr, 1e-6)  # corrected ranges must stay positive
        fix = gauss_newton_solve(anchors, corr)
        fix_err.append(np.linalg.norm(fix.position - ep.truth))
    return float(np.mean(raw_err)), float(np.mean(fix_err))


# ---------------------------------------------------------------------------
# scenario files

def save_scenario(path, anchors: AnchorSet, epochs: list[Epoch]) -> None:
    """CSV: `anchor,x,y,z` rows, then `epoch,tx,ty,tz,r_0..r_{n-1}` rows."""
    n = anchors.anchors.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "x", "y", "z"] + [f"r_{i}" for i in range(n)])
        for a in anchors.anchors:
            w.writerow(["anchor", f"{a[0]:.9g}", f"{a[1]:.9g}", f"{a[2]:.9g}"]
                       + [""] * n)
        for ep in epochs:
            w.writerow(["epoch"] + [f"{v:.9g}" for v in ep.truth]
                       + [f"{v:.9g}" for v in ep.ranges])


def load_scenario(path) -> tuple[AnchorSet, list[Epoch]]:
    anchors = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:4] != ["record", "x", "y", "z"]:
            raise LocalizationError("not a scenario file")
        n = len(header) - 4
        for row in reader:
            if row[0] == "anchor":
                anchors.append([float(v) for v in row[1:4]])
            elif row[0] == "epoch":
                rows.append((np.array([float(v) for v in row[1:4]]),
                             np.array([float(v) for v in row[4 : 4 + n]])))
            else:
                raise LocalizationError(f"unknown record type {row[0]!r}")
    aset = AnchorSet(np.array(anchors))
    return aset, [Epoch(truth=t, ranges=r) for t, r in rows]
