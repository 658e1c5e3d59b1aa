"""Full-integer 8-bit quantization for the range-error model.

Scheme (per tensor, affine): real = S * (q - Z).
  weights     int8, symmetric in [-127, 127], Z = 0
  activations uint8 in [0, 255], range widened to include 0 so that real 0
              is exactly on the grid (q = Z)
  biases      int32 with scale S_in * S_w, clamped to +/- 2^30 so that any
              conv/dense accumulator stays far inside int32

Requantization multiplies an int32 accumulator by a real factor
M = S_acc / S_out using only integers: M is decomposed into m0 in
[2^30, 2^31) and a right shift (M ~= m0 * 2^(-31-shift)), applied as a
saturating rounding doubling-high multiply followed by a rounding right
shift. Every rounding step, including quantize itself, rounds half away
from zero so independent implementations agree bit for bit.

Output scales are floored at a hair above the accumulator scale, which
pins every multiplier strictly inside (0, 1). Residual adds rescale both
inputs onto a shared grid (inputs pre-shifted left by ADD_LEFT_SHIFT)
before the output requantization, so an add uses three multipliers.

The SE sigmoid runs through a 256-entry lookup table indexed by the
quantized pre-activation; gate values live on a fixed 1/256 grid. The
table is stored in the model file so the integer path never calls exp().

Two independent forward implementations are kept in agreement,
element-exact: `forward_int8` (integer arithmetic throughout) and
`simulate` (float arithmetic on dequantized grid values, recovering each
integer accumulator by rounding; recovery is exact because the float
error is orders of magnitude below 0.5). A fused compiled engine in
`quant_fast` gives a third, speed-oriented implementation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import model as model_mod
from . import nn
from .model import ModelWeights, RemnetConfig
from .rng import Rng

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1
BIAS_CLAMP = 1 << 30  # leaves > 2^30 of accumulator headroom
ADD_LEFT_SHIFT = 20
SCALE_FLOOR = 1e-8
GATE_SCALE = 1.0 / 256.0
EMA_DECAY = 0.99
DEFAULT_CALIB_SEED = 7
DEFAULT_CALIB_SIZE = 500


class QuantError(ValueError):
    """Invalid quantization parameters, inputs, or file contents."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Returns float array."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    qmin: int
    qmax: int

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise QuantError(f"scale must be positive, got {self.scale}")
        if not (self.qmin <= self.zero_point <= self.qmax):
            raise QuantError(
                f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]")


GATE_PARAMS = QuantParams(GATE_SCALE, 0, 0, 255)


def weight_params(arr: np.ndarray) -> QuantParams:
    """Symmetric int8 parameters covering max |value|; floored for all-zero."""
    scale = max(float(np.max(np.abs(arr))) / 127.0, SCALE_FLOOR)
    return QuantParams(scale, 0, -127, 127)


def activation_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric uint8 parameters; the range is widened to include zero."""
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    scale = max((hi - lo) / 255.0, SCALE_FLOOR)
    zero = int(round_half_away(-lo / scale))
    return QuantParams(scale, min(max(zero, 0), 255), 0, 255)


def quantize(r, p: QuantParams):
    """real -> integer grid: clamp(round_half_away(r/S) + Z, qmin, qmax)."""
    scalar = np.isscalar(r)
    q = round_half_away(np.asarray(r, dtype=np.float64) / p.scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax).astype(np.int64)
    return int(q) if scalar else q


def dequantize(q, p: QuantParams):
    """integer -> real: S * (q - Z)."""
    scalar = np.isscalar(q)
    r = p.scale * (np.asarray(q, dtype=np.float64) - p.zero_point)
    return float(r) if scalar else r


# ---------------------------------------------------------------------------
# fixed-point requantization

@dataclass(frozen=True)
class FixedPointMultiplier:
    m0: int          # in [2^30, 2^31)
    right_shift: int  # >= 0

    @property
    def value(self) -> float:
        return self.m0 * 2.0 ** (-31 - self.right_shift)


def decompose_multiplier(m: float) -> FixedPointMultiplier:
    """Split M in (0,1) into m0 * 2^(-31-shift) with m0 in [2^30, 2^31)."""
    if not (0.0 < m < 1.0):
        raise QuantError(f"multiplier must be in (0, 1), got {m}")
    frac, exp = math.frexp(m)  # m = frac * 2^exp, frac in [0.5, 1)
    m0 = int(frac * (1 << 31) + 0.5)
    if m0 == 1 << 31:
        m0 >>= 1
        exp += 1
    right_shift = -exp
    if right_shift < 0:
        raise QuantError(f"multiplier {m} rounds to >= 1")
    if right_shift > 255:
        raise QuantError(f"multiplier {m} needs shift {right_shift} > 255")
    return FixedPointMultiplier(m0, right_shift)


def fixed_point_mul(x, m: FixedPointMultiplier):
    """round(x * M) in integer arithmetic, |x| < 2^31.

    Doubling-high multiply: round(x * m0 / 2^31), then a rounding right
    shift; both round half away from zero. Result differs from the exact
    round(x * M) by at most 1.
    """
    scalar = not isinstance(x, np.ndarray)
    ab = np.asarray(x, dtype=np.int64) * m.m0
    mag = (np.abs(ab) + (1 << 30)) >> 31
    high = np.where(ab >= 0, mag, -mag)
    if m.right_shift > 0:
        half = np.int64(1) << (m.right_shift - 1)
        mag = (np.abs(high) + half) >> m.right_shift
        high = np.where(high >= 0, mag, -mag)
    return int(high) if scalar else high


def _requant(acc, m: FixedPointMultiplier, p: QuantParams):
    """int32 accumulator -> output grid (ReLU is free when Z = 0)."""
    return np.clip(fixed_point_mul(acc, m) + p.zero_point, p.qmin, p.qmax)


# ---------------------------------------------------------------------------
# quantized model container

@dataclass(frozen=True)
class QTensor:
    q: np.ndarray  # int8 (weights) or int32 (biases)
    params: QuantParams

    def dequantized(self) -> np.ndarray:
        return dequantize(self.q.astype(np.int64), self.params)


def multiplier_keys(cfg: RemnetConfig) -> list[str]:
    keys = ["stem"]
    for i in range(cfg.blocks):
        p = f"block{i}."
        keys += [p + "body", p + "gap", p + "se_reduce", p + "se_pre",
                 p + "se_mul",
                 p + "res_add.in1", p + "res_add.in2", p + "res_add.out",
                 p + "red_a", p + "red_b",
                 p + "red_add.in1", p + "red_add.in2", p + "red_add.out"]
    return keys


@dataclass
class QuantizedModel:
    cfg: RemnetConfig
    weights: dict[str, QTensor]        # int8, keyed by "<layer>.w"
    biases: dict[str, QTensor]         # int32, keyed by "<layer>.b"
    activations: dict[str, QuantParams]
    multipliers: dict[str, FixedPointMultiplier]
    luts: list[np.ndarray]             # uint8[256] sigmoid table per block

    @property
    def head_scale(self) -> float:
        """Scale of the final accumulator; the one float op at the output."""
        last = f"block{self.cfg.blocks - 1}.red_add"
        return self.activations[last].scale * self.weights["head.w"].params.scale

    def size_bytes(self) -> int:
        return len(save_quantized_bytes(self))


def _sigmoid_lut(pre: QuantParams) -> np.ndarray:
    """Gate value for every possible quantized pre-activation byte."""
    real = dequantize(np.arange(256), pre)
    g = nn.sigmoid(real)
    return np.clip(round_half_away(g / GATE_SCALE), 0, 255).astype(np.uint8)


def _input_of(cfg: RemnetConfig, block: int) -> str:
    return "stem" if block == 0 else f"block{block - 1}.red_add"


def build_quantized(cfg: RemnetConfig, weights: ModelWeights,
                    ranges: dict[str, tuple[float, float]]) -> QuantizedModel:
    """Assemble the integer model from float weights and activation ranges.

    `ranges` maps every activation site (except the pinned SE gate) to an
    observed (min, max). Output scales are floored just above their
    accumulator scale so every requantization multiplier lands in (0, 1).
    """
    cfg.validate()
    qweights: dict[str, QTensor] = {}
    for name, arr in weights.items():
        if name.endswith(".w"):
            p = weight_params(arr)
            qweights[name] = QTensor(quantize(arr, p).astype(np.int8), p)

    acts: dict[str, QuantParams] = {}
    mults: dict[str, float] = {}

    def resolve(site: str, acc_scale: float) -> QuantParams:
        """Activation params for `site`, floored so acc_scale / S < 1."""
        lo, hi = ranges.get(site, (0.0, 0.0))
        p = activation_params(lo, hi)
        floor = acc_scale * (1.0 + 2.0 ** -20)
        if p.scale < floor:
            p = QuantParams(floor, p.zero_point, p.qmin, p.qmax)
        return p

    def conv_like(site: str, in_site: str, wname: str) -> float:
        s_acc = acts[in_site].scale * qweights[wname].params.scale
        acts[site] = resolve(site, s_acc)
        mults[site] = s_acc / acts[site].scale
        return s_acc

    def add_like(site: str, in1: str, in2: str) -> None:
        s1, s2 = acts[in1].scale, acts[in2].scale
        twice = 2.0 * max(s1, s2)
        acts[site] = resolve(site, twice * 2.0 ** -ADD_LEFT_SHIFT)
        mults[site + ".in1"] = s1 / twice
        mults[site + ".in2"] = s2 / twice
        mults[site + ".out"] = twice / (2.0 ** ADD_LEFT_SHIFT * acts[site].scale)

    lo, hi = ranges.get("input", (0.0, 0.0))
    acts["input"] = activation_params(lo, hi)
    conv_like("stem", "input", "stem.w")
    luts = []
    for i in range(cfg.blocks):
        p = f"block{i}."
        block_in = _input_of(cfg, i)
        conv_like(p + "body", block_in, p + "body.w")
        s_gap = acts[p + "body"].scale / cfg.block_lengths()[i]
        acts[p + "gap"] = resolve(p + "gap", s_gap)
        mults[p + "gap"] = s_gap / acts[p + "gap"].scale
        conv_like(p + "se_reduce", p + "gap", p + "se_reduce.w")
        conv_like(p + "se_pre", p + "se_reduce", p + "se_expand.w")
        acts[p + "se_expand"] = GATE_PARAMS
        luts.append(_sigmoid_lut(acts[p + "se_pre"]))
        s_mul = acts[p + "body"].scale * GATE_SCALE
        acts[p + "se_mul"] = resolve(p + "se_mul", s_mul)
        mults[p + "se_mul"] = s_mul / acts[p + "se_mul"].scale
        add_like(p + "res_add", block_in, p + "se_mul")
        conv_like(p + "red_a", p + "res_add", p + "red_a.w")
        conv_like(p + "red_b", p + "res_add", p + "red_b.w")
        add_like(p + "red_add", p + "red_a", p + "red_b")

    qbiases: dict[str, QTensor] = {}

    def quant_bias(layer: str, in_site: str) -> None:
        s_acc = acts[in_site].scale * qweights[layer + ".w"].params.scale
        p = QuantParams(s_acc, 0, -BIAS_CLAMP, BIAS_CLAMP)
        q = np.clip(round_half_away(weights[layer + ".b"] / s_acc),
                    -BIAS_CLAMP, BIAS_CLAMP)
        qbiases[layer + ".b"] = QTensor(q.astype(np.int32), p)

    quant_bias("stem", "input")
    for i in range(cfg.blocks):
        p = f"block{i}."
        quant_bias(p + "body", _input_of(cfg, i))
        quant_bias(p + "se_reduce", p + "gap")
        quant_bias(p + "se_expand", p + "se_reduce")
        quant_bias(p + "red_a", p + "res_add")
        quant_bias(p + "red_b", p + "res_add")
    quant_bias("head", f"block{cfg.blocks - 1}.red_add")

    multipliers = {k: decompose_multiplier(mults[k]) for k in multiplier_keys(cfg)}
    return QuantizedModel(cfg, qweights, qbiases, acts, multipliers, luts)


def calibration_subset(x: np.ndarray, n: int = DEFAULT_CALIB_SIZE,
                       seed: int = DEFAULT_CALIB_SEED) -> np.ndarray:
    """Fixed-seed sample of calibration rows (all rows when x is small)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= n:
        return x
    order = Rng(seed).permutation(x.shape[0])[:n]
    return x[order]


def calibrate_ptq(cfg: RemnetConfig, weights: ModelWeights,
                  calib: np.ndarray) -> QuantizedModel:
    """Post-training quantization from activation ranges observed on `calib`.

    calib: (N, input_len) prepared model inputs.
    """
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] == 0:
        raise QuantError(f"calibration set must be (N, {cfg.input_len}) with N >= 1")
    collect: dict[str, np.ndarray] = {}
    model_mod.forward_batch(cfg, weights, calib, training=False, collect=collect)
    ranges = {site: (float(np.min(v)), float(np.max(v)))
              for site, v in collect.items()}
    return build_quantized(cfg, weights, ranges)


# ---------------------------------------------------------------------------
# integer inference

def quantize_input(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Float CIR windows -> uint8 grid using the model's input params."""
    return quantize(np.asarray(x, dtype=np.float64), qm.activations["input"]).astype(np.uint8)


def _check_acc(acc: np.ndarray, what: str) -> None:
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise QuantError(f"int32 accumulator overflow in {what}")


def _conv_int(q_in, z_in, qw, qb, stride):
    """Integer `same` convolution; padding contributes zero (q = Z)."""
    x = q_in.astype(np.int64) - z_in
    k = qw.shape[0]
    batch, length, _ = x.shape
    out_len = nn.conv_output_len(length, stride)
    pad_left = k // 2
    pad_right = max(0, stride * (out_len - 1) + k - 1 - pad_left - (length - 1))
    xp = np.pad(x, ((0, 0), (pad_left, pad_right), (0, 0)))
    windows = sliding_window_view(xp, k, axis=1)[:, : stride * out_len : stride]
    return np.einsum("blck,kco->blo", windows, qw.astype(np.int64)) + qb.astype(np.int64)


def _add_int(trace_key, q1, p1, q2, p2, qm, out_p):
    m = qm.multipliers
    raw1 = (q1.astype(np.int64) - p1.zero_point) << ADD_LEFT_SHIFT
    raw2 = (q2.astype(np.int64) - p2.zero_point) << ADD_LEFT_SHIFT
    s = fixed_point_mul(raw1, m[trace_key + ".in1"]) \
        + fixed_point_mul(raw2, m[trace_key + ".in2"])
    return _requant(s, m[trace_key + ".out"], out_p)


def forward_int8(qm: QuantizedModel, q_in: np.ndarray,
                 trace: dict | None = None) -> np.ndarray | float:
    """Integer-only inference on quantized inputs.

    q_in: uint8 (K,) or (B, K) on the model's input grid. Returns meters as
    float (scalar for a single sample); the only float operation is the
    final accumulator * scale. Deterministic bit for bit.
    """
    cfg = qm.cfg
    q_in = np.asarray(q_in)
    single = q_in.ndim == 1
    if single:
        q_in = q_in[None]
    if q_in.ndim != 2 or q_in.shape[1] != cfg.input_len:
        raise QuantError(f"expected uint8 input (batch, {cfg.input_len}), got {q_in.shape}")
    a, m, w, b = qm.activations, qm.multipliers, qm.weights, qm.biases

    def note(key, val):
        if trace is not None:
            trace[key] = val.astype(np.uint8)

    note("input", q_in)
    acc = _conv_int(q_in[:, :, None], a["input"].zero_point,
                    w["stem.w"].q, b["stem.b"].q, 1)
    _check_acc(acc, "stem")
    h = _requant(acc, m["stem"], a["stem"])
    note("stem", h)

    for i in range(cfg.blocks):
        p = f"block{i}."
        in_site = _input_of(cfg, i)
        length = cfg.block_lengths()[i]

        acc = _conv_int(h, a[in_site].zero_point, w[p + "body.w"].q,
                        b[p + "body.b"].q, 1)
        _check_acc(acc, p + "body")
        u = _requant(acc, m[p + "body"], a[p + "body"])
        note(p + "body", u)

        acc = u.astype(np.int64).sum(axis=1) - length * a[p + "body"].zero_point
        s = _requant(acc, m[p + "gap"], a[p + "gap"])
        note(p + "gap", s)

        acc = (s.astype(np.int64) - a[p + "gap"].zero_point) \
            @ w[p + "se_reduce.w"].q.astype(np.int64) + b[p + "se_reduce.b"].q
        _check_acc(acc, p + "se_reduce")
        s = _requant(acc, m[p + "se_reduce"], a[p + "se_reduce"])
        note(p + "se_reduce", s)

        acc = (s.astype(np.int64) - a[p + "se_reduce"].zero_point) \
            @ w[p + "se_expand.w"].q.astype(np.int64) + b[p + "se_expand.b"].q
        _check_acc(acc, p + "se_pre")
        pre = _requant(acc, m[p + "se_pre"], a[p + "se_pre"])
        note(p + "se_pre", pre)

        gate = qm.luts[i][pre]  # uint8 on the 1/256 grid
        note(p + "se_expand", gate)

        acc = (u.astype(np.int64) - a[p + "body"].zero_point) * gate.astype(np.int64)[:, None, :]
        scaled = _requant(acc, m[p + "se_mul"], a[p + "se_mul"])
        note(p + "se_mul", scaled)

        h = _add_int(p + "res_add", h, a[in_site], scaled, a[p + "se_mul"],
                     qm, a[p + "res_add"])
        note(p + "res_add", h)

        acc = _conv_int(h, a[p + "res_add"].zero_point, w[p + "red_a.w"].q,
                        b[p + "red_a.b"].q, 2)
        _check_acc(acc, p + "red_a")
        ra = _requant(acc, m[p + "red_a"], a[p + "red_a"])
        note(p + "red_a", ra)
        acc = _conv_int(h, a[p + "res_add"].zero_point, w[p + "red_b.w"].q,
                        b[p + "red_b.b"].q, 2)
        _check_acc(acc, p + "red_b")
        rb = _requant(acc, m[p + "red_b"], a[p + "red_b"])
        note(p + "red_b", rb)

        h = _add_int(p + "red_add", ra, a[p + "red_a"], rb, a[p + "red_b"],
                     qm, a[p + "red_add"])
        note(p + "red_add", h)

    last = f"block{cfg.blocks - 1}.red_add"
    flat = h.reshape(h.shape[0], -1).astype(np.int64) - a[last].zero_point
    acc = flat @ w["head.w"].q.astype(np.int64) + b["head.b"].q
    _check_acc(acc, "head")
    y = qm.head_scale * acc[:, 0].astype(np.float64)
    return float(y[0]) if single else y


def predict_int8(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Quantize float inputs and run the integer path; (B, K) -> (B,)."""
    y = forward_int8(qm, quantize_input(qm, np.atleast_2d(np.asarray(x, dtype=np.float64))))
    return np.asarray(y, dtype=np.float64).reshape(-1)


# ---------------------------------------------------------------------------
# fake-quant float simulation of the integer path

def _recover(y_float: np.ndarray, acc_scale: float) -> np.ndarray:
    """Recover the integer accumulator from a float computation on grid
    values; the float error is ~1e-6 of a unit, far below the 0.5 margin."""
    return round_half_away(np.asarray(y_float) / acc_scale).astype(np.int64)


def simulate(qm: QuantizedModel, x: np.ndarray,
             trace: dict | None = None) -> np.ndarray | float:
    """Float fake-quant forward that matches forward_int8 element-exactly.

    Every tensor is held as dequantized grid values; each accumulator is
    recovered to its exact integer and requantized through the same
    fixed-point path as the integer engine.
    """
    cfg = qm.cfg
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    a, m = qm.activations, qm.multipliers
    dw = {k: t.dequantized() for k, t in qm.weights.items()}
    db = {k: t.params.scale * t.q.astype(np.float64) for k, t in qm.biases.items()}

    def grid(key, q):
        if trace is not None:
            trace[key] = q.astype(np.uint8)
        return dequantize(q, a[key])

    def conv_site(key, wname, r_in, in_key, stride=1):
        y, _ = nn.conv1d_forward(r_in, dw[wname + ".w"], db[wname + ".b"], stride)
        s_acc = a[in_key].scale * qm.weights[wname + ".w"].params.scale
        return grid(key, _requant(_recover(y, s_acc), m[key], a[key]))

    def add_site(key, r1, k1, r2, k2):
        q1 = _recover(r1, a[k1].scale) + a[k1].zero_point
        q2 = _recover(r2, a[k2].scale) + a[k2].zero_point
        s = fixed_point_mul((q1 - a[k1].zero_point) << ADD_LEFT_SHIFT, m[key + ".in1"]) \
            + fixed_point_mul((q2 - a[k2].zero_point) << ADD_LEFT_SHIFT, m[key + ".in2"])
        return grid(key, _requant(s, m[key + ".out"], a[key]))

    q_in = quantize(x, a["input"])
    if trace is not None:
        trace["input"] = q_in.astype(np.uint8)
    h = dequantize(q_in, a["input"])[:, :, None]
    h = conv_site("stem", "stem", h, "input")

    for i in range(cfg.blocks):
        p = f"block{i}."
        in_key = _input_of(cfg, i)
        u = conv_site(p + "body", p + "body", h, in_key)

        gap = u.mean(axis=1)
        s_gap = a[p + "body"].scale / cfg.block_lengths()[i]
        s = grid(p + "gap", _requant(_recover(gap, s_gap), m[p + "gap"], a[p + "gap"]))

        y, _ = nn.dense_forward(s, dw[p + "se_reduce.w"], db[p + "se_reduce.b"])
        s_acc = a[p + "gap"].scale * qm.weights[p + "se_reduce.w"].params.scale
        red = grid(p + "se_reduce",
                   _requant(_recover(y, s_acc), m[p + "se_reduce"], a[p + "se_reduce"]))

        y, _ = nn.dense_forward(red, dw[p + "se_expand.w"], db[p + "se_expand.b"])
        s_acc = a[p + "se_reduce"].scale * qm.weights[p + "se_expand.w"].params.scale
        q_pre = _requant(_recover(y, s_acc), m[p + "se_pre"], a[p + "se_pre"])
        if trace is not None:
            trace[p + "se_pre"] = q_pre.astype(np.uint8)

        gate_q = qm.luts[i][q_pre].astype(np.int64)
        if trace is not None:
            trace[p + "se_expand"] = gate_q.astype(np.uint8)
        gate = gate_q.astype(np.float64) * GATE_SCALE

        prod = u * gate[:, None, :]
        s_acc = a[p + "body"].scale * GATE_SCALE
        scaled = grid(p + "se_mul",
                      _requant(_recover(prod, s_acc), m[p + "se_mul"], a[p + "se_mul"]))

        h = add_site(p + "res_add", h, in_key, scaled, p + "se_mul")
        ra = conv_site(p + "red_a", p + "red_a", h, p + "res_add", stride=2)
        rb = conv_site(p + "red_b", p + "red_b", h, p + "res_add", stride=2)
        h = add_site(p + "red_add", ra, p + "red_a", rb, p + "red_b")

    last = f"block{cfg.blocks - 1}.red_add"
    flat = h.reshape(h.shape[0], -1)
    y, _ = nn.dense_forward(flat, dw["head.w"], db["head.b"])
    acc = _recover(y, qm.head_scale)
    out = qm.head_scale * acc[:, 0].astype(np.float64)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# fake-quant nodes and quantization-aware training

def fake_quant(x: np.ndarray, p: QuantParams):
    """Forward: dequantize(quantize(x)). Returns (y, pass_mask) where the
    mask is 1 inside the representable range (straight-through estimator)."""
    x = np.asarray(x, dtype=np.float64)
    y = dequantize(quantize(x, p), p)
    lo = p.scale * (p.qmin - p.zero_point)
    hi = p.scale * (p.qmax - p.zero_point)
    return y, ((x >= lo) & (x <= hi)).astype(np.float64)


def fake_quant_backward(grad_out: np.ndarray, pass_mask: np.ndarray) -> np.ndarray:
    return np.asarray(grad_out) * pass_mask


class EmaRanges:
    """Per-site activation ranges tracked by exponential moving average."""

    def __init__(self, decay: float = EMA_DECAY):
        self.decay = decay
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}

    def update(self, site: str, value: np.ndarray) -> None:
        lo, hi = float(np.min(value)), float(np.max(value))
        if site not in self.lo:
            self.lo[site], self.hi[site] = lo, hi
        else:
            d = self.decay
            self.lo[site] = d * self.lo[site] + (1.0 - d) * lo
            self.hi[site] = d * self.hi[site] + (1.0 - d) * hi

    def params(self, site: str) -> QuantParams:
        return activation_params(self.lo[site], self.hi[site])

    def as_ranges(self) -> dict[str, tuple[float, float]]:
        return {site: (self.lo[site], self.hi[site]) for site in self.lo}


def _qat_forward(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray,
                 ema: EmaRanges, rng: Rng | None, training: bool):
    """Forward pass with fake-quant on weights and activations."""
    w = weights.data
    caches: dict = {}
    fw: dict[str, np.ndarray] = {}   # fake-quantized weights
    wmask: dict[str, np.ndarray] = {}
    for name, arr in weights.items():
        if name.endswith(".w"):
            fw[name], wmask[name] = fake_quant(arr, weight_params(arr))
    caches["wmask"] = wmask

    def fq_site(site, value, params=None):
        if training:
            ema.update(site, value)
        p = params if params is not None else ema.params(site)
        y, mask = fake_quant(value, p)
        caches[site + ".fqmask"] = mask
        return y

    x = np.asarray(x, dtype=np.float64)
    h = fq_site("input", x)[:, :, None]

    z, caches["stem"] = nn.conv1d_forward(h, fw["stem.w"], w["stem.b"])
    h = nn.relu(z)
    caches["stem.out"] = h
    h = fq_site("stem", h)

    for i in range(cfg.blocks):
        p = f"block{i}."
        ident = h
        u, caches[p + "body"] = nn.conv1d_forward(h, fw[p + "body.w"], w[p + "body.b"])
        u = nn.relu(u)
        caches[p + "body.out"] = u
        u = fq_site(p + "body", u)
        caches[p + "body.fq"] = u

        s, caches[p + "gap.len"] = nn.global_avg_pool(u)
        s = fq_site(p + "gap", s)
        s, caches[p + "se_reduce"] = nn.dense_forward(
            s, fw[p + "se_reduce.w"], w[p + "se_reduce.b"], "relu")
        s = fq_site(p + "se_reduce", s)
        pre, caches[p + "se_pre"] = nn.dense_forward(
            s, fw[p + "se_expand.w"], w[p + "se_expand.b"], "linear")
        pre = fq_site(p + "se_pre", pre)
        gate = nn.sigmoid(pre)
        caches[p + "gate"] = gate
        gate = fq_site(p + "se_expand", gate, GATE_PARAMS)
        caches[p + "gate.fq"] = gate

        scaled = u * gate[:, None, :]
        scaled = fq_site(p + "se_mul", scaled)
        h = ident + scaled
        h = fq_site(p + "res_add", h)
        caches[p + "res_add.fq"] = h

        a, caches[p + "red_a"] = nn.conv1d_forward(h, fw[p + "red_a.w"],
                                                   w[p + "red_a.b"], stride=2)
        a = nn.relu(a)
        caches[p + "red_a.out"] = a
        a = fq_site(p + "red_a", a)
        b2, caches[p + "red_b"] = nn.conv1d_forward(h, fw[p + "red_b.w"],
                                                    w[p + "red_b.b"], stride=2)
        b2 = nn.relu(b2)
        caches[p + "red_b.out"] = b2
        b2 = fq_site(p + "red_b", b2)
        h = a + b2
        h = fq_site(p + "red_add", h)

    flat = h.reshape(h.shape[0], -1)
    caches["flat.shape"] = h.shape
    flat, caches["dropout"] = nn.dropout_forward(flat, cfg.dropout_rate, rng, training)
    y, caches["head"] = nn.dense_forward(flat, fw["head.w"], w["head.b"], "linear")
    caches["fw"] = fw
    return y[:, 0], caches


def _qat_backward(cfg: RemnetConfig, weights: ModelWeights, caches: dict,
                  grad_y: np.ndarray) -> ModelWeights:
    grads = weights.zeros_like()
    g = grads.data
    fw = caches["fw"]
    wmask = caches["wmask"]

    def fq_back(site, grad):
        return grad * caches[site + ".fqmask"]

    gy = np.asarray(grad_y, dtype=np.float64)[:, None]
    gflat, g["head.w"], g["head.b"] = nn.dense_backward(gy, caches["head"], fw["head.w"])
    gflat = nn.dropout_backward(gflat, caches["dropout"])
    gh = gflat.reshape(caches["flat.shape"])

    for i in reversed(range(cfg.blocks)):
        p = f"block{i}."
        gh = fq_back(p + "red_add", gh)
        ga = nn.relu_backward(fq_back(p + "red_a", gh), caches[p + "red_a.out"])
        gb2 = nn.relu_backward(fq_back(p + "red_b", gh), caches[p + "red_b.out"])
        gh_a, g[p + "red_a.w"], g[p + "red_a.b"] = nn.conv1d_backward(
            ga, caches[p + "red_a"], fw[p + "red_a.w"])
        gh_b, g[p + "red_b.w"], g[p + "red_b.b"] = nn.conv1d_backward(
            gb2, caches[p + "red_b"], fw[p + "red_b.w"])
        gh = fq_back(p + "res_add", gh_a + gh_b)

        u = caches[p + "body.fq"]
        gate = caches[p + "gate.fq"]
        gscaled = fq_back(p + "se_mul", gh)
        gu_scaled = gscaled * gate[:, None, :]
        ggate = fq_back(p + "se_expand", (gscaled * u).sum(axis=1))

        gpre = fq_back(p + "se_pre", nn.sigmoid_backward(ggate, caches[p + "gate"]))
        gs, g[p + "se_expand.w"], g[p + "se_expand.b"] = nn.dense_backward(
            gpre, caches[p + "se_pre"], fw[p + "se_expand.w"])
        gs = fq_back(p + "se_reduce", gs)
        gs, g[p + "se_reduce.w"], g[p + "se_reduce.b"] = nn.dense_backward(
            gs, caches[p + "se_reduce"], fw[p + "se_reduce.w"])
        gu_from_gap = nn.global_avg_pool_backward(
            fq_back(p + "gap", gs), caches[p + "gap.len"])

        gu = fq_back(p + "body", gu_scaled + gu_from_gap)
        gu = nn.relu_backward(gu, caches[p + "body.out"])
        gh_body, g[p + "body.w"], g[p + "body.b"] = nn.conv1d_backward(
            gu, caches[p + "body"], fw[p + "body.w"])
        gh = gh + gh_body

    gh = fq_back("stem", gh)
    gz = nn.relu_backward(gh, caches["stem.out"])
    _, g["stem.w"], g["stem.b"] = nn.conv1d_backward(gz, caches["stem"], fw["stem.w"])

    for name in weights.names:  # straight-through estimator on weight nodes
        if name.endswith(".w"):
            g[name] = g[name] * wmask[name]
    return grads


def qat_loss_and_grads(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray,
                       targets: np.ndarray, ema: EmaRanges,
                       rng: Rng | None = None, training: bool = True):
    y, caches = _qat_forward(cfg, weights, x, ema, rng, training)
    err = y - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(np.abs(err)))
    grads = _qat_backward(cfg, weights, caches, np.sign(err) / err.size)
    return loss, grads


@dataclass
class QatResult:
    qmodel: QuantizedModel
    weights: ModelWeights
    history: list = field(default_factory=list)


def train_qat(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray,
              y: np.ndarray, plan, fq_enabled: bool = True,
              verbose: bool = False) -> QatResult:
    """Quantization-aware training with fake-quant on weights/activations.

    With fq_enabled=False this is exactly float training (same epoch loop,
    same dropout draws), which makes the no-op case checkable. Exports the
    integer model from the final weights and EMA activation ranges.
    """
    from . import training  # late import: training does not know about quant

    plan.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    weights = weights.copy()
    state = training.AdamState(weights)
    shuffle_rng = Rng(plan.shuffle_seed)
    dropout_rng = Rng(plan.dropout_seed)
    ema = EmaRanges()
    history = []
    for epoch in range(plan.epochs):
        order = shuffle_rng.permutation(x.shape[0])
        total = 0.0
        for start in range(0, x.shape[0], plan.batch_size):
            idx = order[start : start + plan.batch_size]
            if fq_enabled:
                loss, grads = qat_loss_and_grads(
                    cfg, weights, x[idx], y[idx], ema, rng=dropout_rng)
            else:
                loss, grads = model_mod.mae_loss_and_grads(
                    cfg, weights, x[idx], y[idx], training=True, rng=dropout_rng)
            if not np.isfinite(loss):
                raise training.DivergenceError(f"loss became non-finite at epoch {epoch}")
            training.adam_step(weights, grads, state, plan)
            total += loss * idx.size
        history.append(total / x.shape[0])
        if verbose:
            print(f"qat epoch {epoch:3d}  train_mae {history[-1]:.6f}")

    if not fq_enabled:  # ranges never tracked; observe once on the train set
        collect: dict[str, np.ndarray] = {}
        model_mod.forward_batch(cfg, weights, x, training=False, collect=collect)
        ranges = {s: (float(np.min(v)), float(np.max(v))) for s, v in collect.items()}
    else:
        ranges = ema.as_ranges()
    return QatResult(build_quantized(cfg, weights, ranges), weights, history)


# ---------------------------------------------------------------------------
# model file

QUANT_MAGIC = b"REMQ"
QUANT_VERSION = 1


def save_quantized_bytes(qm: QuantizedModel) -> bytes:
    """Serialize; tensor names, shapes and counts come from the config."""
    cfg = qm.cfg
    out = [QUANT_MAGIC, struct.pack("<H", QUANT_VERSION), model_mod.pack_config(cfg)]
    for name, _ in model_mod._param_shapes(cfg):
        t = qm.weights[name] if name.endswith(".w") else qm.biases[name]
        out.append(struct.pack("<di", t.params.scale, t.params.zero_point))
        dt = "<i1" if name.endswith(".w") else "<i4"
        out.append(t.q.astype(dt).tobytes(order="C"))
    for site in model_mod.activation_names(cfg):
        p = qm.activations[site]
        out.append(struct.pack("<di", p.scale, p.zero_point))
    for key in multiplier_keys(cfg):
        fpm = qm.multipliers[key]
        out.append(struct.pack("<iB", fpm.m0, fpm.right_shift))
    for lut in qm.luts:
        out.append(lut.astype(np.uint8).tobytes())
    return b"".join(out)


def save_quantized(qm: QuantizedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_quantized_bytes(qm))


def load_quantized(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = model_mod._Reader(blob)
    try:
        if r.take(4) != QUANT_MAGIC:
            raise QuantError("bad magic")
        (version,) = r.unpack("<H")
        if version != QUANT_VERSION:
            raise QuantError(f"unsupported quantized model version {version}")
        cfg = model_mod.unpack_config(r.take(32))
        cfg.validate()
        weights: dict[str, QTensor] = {}
        biases: dict[str, QTensor] = {}
        for name, shape in model_mod._param_shapes(cfg):
            scale, zero = r.unpack("<di")
            n = int(np.prod(shape))
            if name.endswith(".w"):
                q = np.frombuffer(r.take(n), dtype="<i1").reshape(shape)
                weights[name] = QTensor(q, QuantParams(scale, zero, -127, 127))
            else:
                q = np.frombuffer(r.take(4 * n), dtype="<i4").reshape(shape)
                biases[name] = QTensor(q, QuantParams(scale, zero, -BIAS_CLAMP, BIAS_CLAMP))
        acts = {}
        for site in model_mod.activation_names(cfg):
            scale, zero = r.unpack("<di")
            acts[site] = QuantParams(scale, zero, 0, 255)
        mults = {}
        for key in multiplier_keys(cfg):
            m0, shift = r.unpack("<iB")
            if not (1 << 30) <= m0 < (1 << 31):
                raise QuantError(f"multiplier m0 {m0} out of range for {key}")
            mults[key] = FixedPointMultiplier(m0, shift)
        luts = [np.frombuffer(r.take(256), dtype=np.uint8).copy()
                for _ in range(cfg.blocks)]
    except model_mod.CheckpointError as e:
        raise QuantError(str(e)) from None
    if r.pos != len(blob):
        raise QuantError("trailing bytes after quantized model")
    return QuantizedModel(cfg, weights, biases, acts, mults, luts)
