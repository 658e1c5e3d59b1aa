"""REMNet model: configuration, weight store, forward/backward, checkpoints.

The network maps a normalized CIR window of length `input_len` to a scalar
range-error estimate in meters:

    stem conv (first_kernel, 1 -> filters) + ReLU
    `blocks` x reduction block:
        residual unit: body conv (body_kernel) + ReLU, channel attention
            (GAP -> dense filters -> filters/se_reduction ReLU
                 -> dense back with sigmoid -> scale), plus identity
        reduction: two parallel stride-2 convs (body_kernel / branch_kernel),
            each ReLU'd, summed
    flatten -> dropout -> dense(-> 1, linear)

A plain MLP on the raw window is kept alongside as a baseline for the
generalization experiments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .rng import Rng


class ConfigError(ValueError):
    """Invalid model configuration."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent."""


@dataclass(frozen=True)
class RemnetConfig:
    input_len: int = 128        # CIR samples fed to the network
    filters: int = 16           # channels everywhere in the trunk
    blocks: int = 3             # number of residual-reduction blocks
    se_reduction: int = 8       # bottleneck factor of the attention block
    first_kernel: int = 7
    body_kernel: int = 3
    branch_kernel: int = 1      # second reduction branch
    dropout_rate: float = 0.2

    def validate(self) -> None:
        if min(self.input_len, self.filters, self.blocks, self.se_reduction) < 1:
            raise ConfigError("all size fields must be >= 1")
        for k in (self.first_kernel, self.body_kernel, self.branch_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 1, got {k}")
        if self.filters % self.se_reduction != 0 or self.filters < self.se_reduction:
            raise ConfigError(
                f"filters ({self.filters}) must be a positive multiple of "
                f"se_reduction ({self.se_reduction})"
            )
        if self.input_len < 2 ** self.blocks:
            raise ConfigError(
                f"input_len {self.input_len} collapses to nothing after "
                f"{self.blocks} halvings"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def block_lengths(self) -> list[int]:
        """Temporal length entering each block, plus the final length."""
        lengths = [self.input_len]
        for _ in range(self.blocks):
            lengths.append(nn.conv_output_len(lengths[-1], 2))
        return lengths

    @property
    def flat_dim(self) -> int:
        return self.block_lengths()[-1] * self.filters


def _param_shapes(cfg: RemnetConfig) -> list[tuple[str, tuple[int, ...]]]:
    f, fr = cfg.filters, cfg.filters // cfg.se_reduction
    shapes = [
        ("stem.w", (cfg.first_kernel, 1, f)),
        ("stem.b", (f,)),
    ]
    for i in range(cfg.blocks):
        shapes += [
            (f"block{i}.body.w", (cfg.body_kernel, f, f)),
            (f"block{i}.body.b", (f,)),
            (f"block{i}.se_reduce.w", (f, fr)),
            (f"block{i}.se_reduce.b", (fr,)),
            (f"block{i}.se_expand.w", (fr, f)),
            (f"block{i}.se_expand.b", (f,)),
            (f"block{i}.red_a.w", (cfg.body_kernel, f, f)),
            (f"block{i}.red_a.b", (f,)),
            (f"block{i}.red_b.w", (cfg.branch_kernel, f, f)),
            (f"block{i}.red_b.b", (f,)),
        ]
    shapes += [
        ("head.w", (cfg.flat_dim, 1)),
        ("head.b", (1,)),
    ]
    return shapes


class ModelWeights:
    """Ordered, named parameter tensors (float64 in memory, float32 on disk)."""

    def __init__(self, tensors: list[tuple[str, np.ndarray]]):
        self.names = [n for n, _ in tensors]
        self.data = {n: np.asarray(a, dtype=np.float64) for n, a in tensors}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.data:
            raise KeyError(name)
        self.data[name] = np.asarray(value, dtype=np.float64)

    def items(self):
        for n in self.names:
            yield n, self.data[n]

    @property
    def total_params(self) -> int:
        return sum(a.size for a in self.data.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights([(n, a.copy()) for n, a in self.items()])

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights([(n, np.zeros_like(a)) for n, a in self.items()])

    def as_float32(self) -> "ModelWeights":
        """Mirror of the on-disk precision: values rounded through float32."""
        return ModelWeights([(n, a.astype(np.float32).astype(np.float64))
                             for n, a in self.items()])

    def as_float16(self) -> "ModelWeights":
        """Half-precision storage variant; compute stays float."""
        return ModelWeights([(n, a.astype(np.float16).astype(np.float64))
                             for n, a in self.items()])


def _init_tensor(rng: Rng, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 1:  # biases start at zero
        return np.zeros(shape)
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        k, cin, cout = shape
        fan_in, fan_out = k * cin, k * cout
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(shape, -limit, limit)


def build(cfg: RemnetConfig, rng: Rng) -> ModelWeights:
    """Initialize weights for `cfg`; draws happen in parameter order."""
    cfg.validate()
    return ModelWeights([(name, _init_tensor(rng, shape))
                         for name, shape in _param_shapes(cfg)])


def param_count(cfg: RemnetConfig) -> int:
    """Closed-form parameter count; must equal enumeration over built tensors."""
    f, fr = cfg.filters, cfg.filters // cfg.se_reduction
    stem = cfg.first_kernel * f + f
    block = (cfg.body_kernel * f * f + f) + (f * fr + fr) + (fr * f + f) \
        + (cfg.body_kernel * f * f + f) + (cfg.branch_kernel * f * f + f)
    head = cfg.flat_dim + 1
    return stem + cfg.blocks * block + head


# ---------------------------------------------------------------------------
# forward / backward

# Names of the intermediate activation tensors, in graph order. The quantized
# path calibrates one range per entry; "input" is the network input itself.
def activation_names(cfg: RemnetConfig) -> list[str]:
    names = ["input", "stem"]
    for i in range(cfg.blocks):
        names += [f"block{i}.body", f"block{i}.gap", f"block{i}.se_reduce",
                  f"block{i}.se_pre", f"block{i}.se_expand", f"block{i}.se_mul",
                  f"block{i}.res_add", f"block{i}.red_a", f"block{i}.red_b",
                  f"block{i}.red_add"]
    return names


def forward_batch(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray,
                  training: bool = False, rng: Rng | None = None,
                  collect: dict | None = None):
    """Run the network on a batch.

    x: (B, input_len). Returns (y, caches) with y shape (B,). `collect`, if a
    dict, receives every named activation (used for quantization calibration).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_len:
        raise nn.ShapeError(
            f"expected input shape (batch, {cfg.input_len}), got {x.shape}"
        )
    w = weights.data
    caches: dict = {}

    def note(name, value):
        if collect is not None:
            collect[name] = value

    note("input", x)
    h = x[:, :, None]
    z, caches["stem"] = nn.conv1d_forward(h, w["stem.w"], w["stem.b"])
    h = nn.relu(z)
    caches["stem.out"] = h
    note("stem", h)

    for i in range(cfg.blocks):
        p = f"block{i}."
        ident = h
        u, caches[p + "body"] = nn.conv1d_forward(h, w[p + "body.w"], w[p + "body.b"])
        u = nn.relu(u)
        caches[p + "body.out"] = u
        note(p + "body", u)

        s, caches[p + "gap.len"] = nn.global_avg_pool(u)
        note(p + "gap", s)
        s, caches[p + "se_reduce"] = nn.dense_forward(
            s, w[p + "se_reduce.w"], w[p + "se_reduce.b"], "relu")
        note(p + "se_reduce", s)
        # pre-activation of the gate is its own tensor on the quantized path
        pre = s @ w[p + "se_expand.w"] + w[p + "se_expand.b"]
        note(p + "se_pre", pre)
        gate = nn.sigmoid(pre)
        caches[p + "se_expand"] = (s, gate)
        note(p + "se_expand", gate)

        scaled = u * gate[:, None, :]
        caches[p + "se_mul"] = gate
        note(p + "se_mul", scaled)
        h = ident + scaled
        note(p + "res_add", h)

        a, caches[p + "red_a"] = nn.conv1d_forward(h, w[p + "red_a.w"], w[p + "red_a.b"], stride=2)
        a = nn.relu(a)
        caches[p + "red_a.out"] = a
        note(p + "red_a", a)
        b2, caches[p + "red_b"] = nn.conv1d_forward(h, w[p + "red_b.w"], w[p + "red_b.b"], stride=2)
        b2 = nn.relu(b2)
        caches[p + "red_b.out"] = b2
        note(p + "red_b", b2)
        h = a + b2
        note(p + "red_add", h)

    batch = h.shape[0]
    flat = h.reshape(batch, -1)
    caches["flat.shape"] = h.shape
    flat, caches["dropout"] = nn.dropout_forward(flat, cfg.dropout_rate, rng, training)
    y, caches["head"] = nn.dense_forward(flat, w["head.w"], w["head.b"], "linear")
    return y[:, 0], caches


def backward_batch(cfg: RemnetConfig, weights: ModelWeights, caches: dict,
                   grad_y: np.ndarray) -> ModelWeights:
    """Gradients of forward_batch w.r.t. every parameter."""
    w = weights.data
    grads = weights.zeros_like()
    g = grads.data

    gy = np.asarray(grad_y, dtype=np.float64)[:, None]
    gflat, g["head.w"], g["head.b"] = nn.dense_backward(gy, caches["head"], w["head.w"])
    gflat = nn.dropout_backward(gflat, caches["dropout"])
    gh = gflat.reshape(caches["flat.shape"])

    for i in reversed(range(cfg.blocks)):
        p = f"block{i}."
        ga = nn.relu_backward(gh, caches[p + "red_a.out"])
        gb2 = nn.relu_backward(gh, caches[p + "red_b.out"])
        gh_a, g[p + "red_a.w"], g[p + "red_a.b"] = nn.conv1d_backward(
            ga, caches[p + "red_a"], w[p + "red_a.w"])
        gh_b, g[p + "red_b.w"], g[p + "red_b.b"] = nn.conv1d_backward(
            gb2, caches[p + "red_b"], w[p + "red_b.w"])
        gh = gh_a + gh_b  # gradient into res_add output

        u = caches[p + "body.out"]
        gate = caches[p + "se_mul"]
        gscaled = gh  # residual add: identity branch collects gh as well
        gu_scaled = gscaled * gate[:, None, :]
        ggate = (gscaled * u).sum(axis=1)

        s_in, gate_vals = caches[p + "se_expand"]
        gpre = nn.sigmoid_backward(ggate, gate_vals)
        g[p + "se_expand.w"] = s_in.T @ gpre
        g[p + "se_expand.b"] = gpre.sum(axis=0)
        gs = gpre @ w[p + "se_expand.w"].T
        gs, g[p + "se_reduce.w"], g[p + "se_reduce.b"] = nn.dense_backward(
            gs, caches[p + "se_reduce"], w[p + "se_reduce.w"])
        gu_from_gap = nn.global_avg_pool_backward(gs, caches[p + "gap.len"])

        gu = nn.relu_backward(gu_scaled + gu_from_gap, caches[p + "body.out"])
        gh_body, g[p + "body.w"], g[p + "body.b"] = nn.conv1d_backward(
            gu, caches[p + "body"], w[p + "body.w"])
        gh = gh + gh_body  # identity branch + body branch

    gz = nn.relu_backward(gh, caches["stem.out"])
    _, g["stem.w"], g["stem.b"] = nn.conv1d_backward(gz, caches["stem"], w["stem.w"])
    return grads


def forward(cfg: RemnetConfig, weights: ModelWeights, cir: np.ndarray,
            mode: str = "infer", rng: Rng | None = None) -> float:
    """Single-sample prediction in meters. `infer` mode is deterministic."""
    if mode not in ("infer", "train"):
        raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
    cir = np.asarray(cir, dtype=np.float64)
    if cir.ndim != 1:
        raise nn.ShapeError(f"expected a 1-D CIR vector, got shape {cir.shape}")
    y, _ = forward_batch(cfg, weights, cir[None], training=(mode == "train"), rng=rng)
    return float(y[0])


def predict(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Deterministic batch prediction, (B, input_len) -> (B,)."""
    y, _ = forward_batch(cfg, weights, x, training=False)
    return y


def mae_loss_and_grads(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray,
                       targets: np.ndarray, training: bool = True,
                       rng: Rng | None = None) -> tuple[float, ModelWeights]:
    """Mean absolute error over the batch and its parameter gradients.

    The subgradient of |e| at e == 0 is taken as 0.
    """
    targets = np.asarray(targets, dtype=np.float64)
    y, caches = forward_batch(cfg, weights, x, training=training, rng=rng)
    err = y - targets
    loss = float(np.mean(np.abs(err)))
    grad_y = np.sign(err) / err.size
    grads = backward_batch(cfg, weights, caches, grad_y)
    return loss, grads


# ---------------------------------------------------------------------------
# MLP baseline

@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden: int = 64
    layers: int = 3  # total dense layers, including the linear output


def build_mlp(cfg: MlpConfig, rng: Rng) -> ModelWeights:
    if cfg.layers < 1 or cfg.hidden < 1 or cfg.input_dim < 1:
        raise ConfigError("mlp dims must be >= 1")
    dims = [cfg.input_dim] + [cfg.hidden] * (cfg.layers - 1) + [1]
    tensors = []
    for i in range(cfg.layers):
        tensors.append((f"mlp{i}.w", _init_tensor(rng, (dims[i], dims[i + 1]))))
        tensors.append((f"mlp{i}.b", np.zeros(dims[i + 1])))
    return ModelWeights(tensors)


def mlp_forward_batch(cfg: MlpConfig, weights: ModelWeights, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    caches = []
    h = x
    for i in range(cfg.layers):
        act = "linear" if i == cfg.layers - 1 else "relu"
        h, cache = nn.dense_forward(h, weights[f"mlp{i}.w"], weights[f"mlp{i}.b"], act)
        caches.append(cache)
    return h[:, 0], caches


def mlp_loss_and_grads(cfg: MlpConfig, weights: ModelWeights, x: np.ndarray,
                       targets: np.ndarray) -> tuple[float, ModelWeights]:
    y, caches = mlp_forward_batch(cfg, weights, x)
    err = y - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(np.abs(err)))
    grad = (np.sign(err) / err.size)[:, None]
    grads = weights.zeros_like()
    for i in reversed(range(cfg.layers)):
        grad, grads.data[f"mlp{i}.w"], grads.data[f"mlp{i}.b"] = nn.dense_backward(
            grad, caches[i], weights[f"mlp{i}.w"])
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint format (documented byte-exactly in docs/formats.md)

CHECKPOINT_MAGIC = b"REMN"
CHECKPOINT_VERSION = 1
_DROPOUT_UNITS = 1_000_000  # dropout stored as micro-units in a u32


def pack_config(cfg: RemnetConfig) -> bytes:
    return struct.pack(
        "<8I", cfg.input_len, cfg.filters, cfg.blocks, cfg.se_reduction,
        cfg.first_kernel, cfg.body_kernel, cfg.branch_kernel,
        round(cfg.dropout_rate * _DROPOUT_UNITS))


def unpack_config(blob: bytes) -> RemnetConfig:
    vals = struct.unpack("<8I", blob)
    return RemnetConfig(*vals[:7], dropout_rate=vals[7] / _DROPOUT_UNITS)


def save_checkpoint(weights: ModelWeights, cfg: RemnetConfig, path) -> None:
    """Write weights as float32 with the config header; bit-exact round trip."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
              pack_config(cfg), struct.pack("<I", len(weights.names))]
    for name, arr in weights.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.astype("<f4").tobytes(order="C")
        chunks.append(payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ModelWeights, RemnetConfig]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = unpack_config(r.take(32))
    cfg.validate()
    (count,) = r.unpack("<I")
    expected = _param_shapes(cfg)
    if count != len(expected):
        raise CheckpointError(
            f"checkpoint lists {count} tensors, config implies {len(expected)}")
    tensors = []
    for exp_name, exp_shape in expected:
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if name != exp_name or shape != exp_shape:
            raise CheckpointError(
                f"tensor {name} {shape} does not match config "
                f"({exp_name} {exp_shape})")
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors.append((name, arr.astype(np.float64)))
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelWeights(tensors), cfg


def default_config() -> RemnetConfig:
    return RemnetConfig()


def config_with(cfg: RemnetConfig, **kwargs) -> RemnetConfig:
    return replace(cfg, **kwargs)
