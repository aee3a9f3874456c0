"""Three-stage 3D residual CNN emitting Dirichlet evidence, trained with Adam.

Stage 1 is a 3x3x3 convolution, ReLU and 2x max pooling.  Stage 2 holds two
residual blocks (conv-ReLU-conv plus skip, then ReLU), each followed by 2x
max pooling.  Stage 3 averages over space and a dense layer maps to K
evidence values through a non-negative activation.

Arrays are channels-last, ``(N, D, H, W, C)``.  Backpropagation is written
out by hand.  Convolutions run on the flattened zero-padded grid, where each
kernel tap is a fixed row offset, so the work lands in BLAS matmuls without
an im2col buffer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericFault, ValidationError
from .evidential import batch_loss, class_weights_from_counts

KERNEL = 3
_OFFSETS = [(a, b, c) for a in range(KERNEL) for b in range(KERNEL) for c in range(KERNEL)]
EVIDENCE_ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int = 32
    stage1_channels: int = 16
    block_channels: int = 16
    num_classes: int = 3
    evidence_activation: str = "relu"
    # Starting value of the evidence-layer bias; positive keeps ReLU evidence units alive early on.
    head_bias_init: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_side < 8 or self.input_side % 8:
            raise ValidationError(f"input_side must be a positive multiple of 8, got {self.input_side}")
        if self.stage1_channels < 1 or self.block_channels < 1:
            raise ValidationError("channel counts must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.evidence_activation not in EVIDENCE_ACTIVATIONS:
            raise ValidationError(f"evidence_activation must be one of {EVIDENCE_ACTIVATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def kernel(self) -> int:
        return KERNEL

    @property
    def has_projection(self) -> bool:
        return self.stage1_channels != self.block_channels


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 300

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("epsilon, batch_size and epochs must be positive")


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    # Training-split class counts; carried so evaluation never needs the eval set's counts.
    class_counts: tuple[int, ...] | None = None


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    c1, cb, k = config.stage1_channels, config.block_channels, config.num_classes
    shapes: dict[str, tuple[int, ...]] = {
        "stem.w": (KERNEL, KERNEL, KERNEL, 1, c1),
        "stem.b": (c1,),
    }
    for blk, cin in (("block1", c1), ("block2", cb)):
        shapes[f"{blk}.conv1.w"] = (KERNEL, KERNEL, KERNEL, cin, cb)
        shapes[f"{blk}.conv1.b"] = (cb,)
        shapes[f"{blk}.conv2.w"] = (KERNEL, KERNEL, KERNEL, cb, cb)
        shapes[f"{blk}.conv2.b"] = (cb,)
        if cin != cb:
            shapes[f"{blk}.proj.w"] = (cin, cb)
            shapes[f"{blk}.proj.b"] = (cb,)
    shapes["head.w"] = (cb, k)
    shapes["head.b"] = (k,)
    return shapes


def init_state(config: NetworkConfig, seed: int) -> ModelState:
    """He-uniform weights drawn from ``seed``.

    Biases start at zero except the evidence layer's, which starts at
    ``config.head_bias_init``.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    params["head.b"][:] = config.head_bias_init
    m = {n: np.zeros_like(p) for n, p in params.items()}
    v = {n: np.zeros_like(p) for n, p in params.items()}
    return ModelState(config, params, m, v, step=0, seed=int(seed))


# ---------------------------------------------------------------------------
# layer primitives


def _tap_offsets(pd: int, ph: int, pw: int) -> list[int]:
    return [a * ph * pw + b * pw + c for a, b, c in _OFFSETS]


def _conv_forward(x, w, b):
    """Same-padded 3x3x3 convolution.

    On the flattened zero-padded grid every kernel tap is a constant row
    offset, so the convolution is 27 contiguous-slice matmuls.  Row ``i`` of
    the result is the output voxel whose window starts at padded index ``i``.
    """
    n, d, h, wd, c = x.shape
    cout = w.shape[-1]
    xp = np.zeros((n, d + 2, h + 2, wd + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1, :] = x
    flat = xp.reshape(-1, c)
    offs = _tap_offsets(d + 2, h + 2, wd + 2)
    length = flat.shape[0] - offs[-1]
    wk = w.reshape(len(_OFFSETS), c, cout)
    full = np.zeros((flat.shape[0], cout), dtype=x.dtype)
    out = full[:length]
    if c == 1:
        cols = np.stack([flat[o : o + length, 0] for o in offs])
        np.matmul(cols.T, wk[:, 0, :], out=out)
    else:
        cols = None
        tmp = np.empty_like(out)
        for k, o in enumerate(offs):
            np.matmul(flat[o : o + length], wk[k], out=tmp)
            out += tmp
    y = full.reshape(n, d + 2, h + 2, wd + 2, cout)[:, :d, :h, :wd, :] + b
    return y, (flat, cols, offs, length, x.shape)


def _conv_backward(dy, ctx, w, need_dx=True):
    flat, cols, offs, length, x_shape = ctx
    n, d, h, wd, c = x_shape
    cout = w.shape[-1]
    dyp = np.zeros((n, d + 2, h + 2, wd + 2, cout), dtype=dy.dtype)
    dyp[:, :d, :h, :wd, :] = dy
    dyf = dyp.reshape(-1, cout)[:length]
    wk = w.reshape(len(_OFFSETS), c, cout)
    if cols is not None:
        dw = (cols @ dyf).reshape(w.shape)
    else:
        dw = np.stack([flat[o : o + length].T @ dyf for o in offs]).reshape(w.shape)
    db = dy.reshape(-1, cout).sum(axis=0)
    if not need_dx:
        return None, dw, db
    dflat = np.zeros_like(flat)
    tmp = np.empty((length, c), dtype=dy.dtype)
    for k, o in enumerate(offs):
        np.matmul(dyf, wk[k].T, out=tmp)
        dflat[o : o + length] += tmp
    dx = dflat.reshape(n, d + 2, h + 2, wd + 2, c)[:, 1:-1, 1:-1, 1:-1, :]
    return dx, dw, db


_POOL_TAPS = [(a, b, c) for a in range(2) for b in range(2) for c in range(2)]


def _pool_forward(x):
    out = x[:, ::2, ::2, ::2, :].copy()
    for a, b, c in _POOL_TAPS[1:]:
        np.maximum(out, x[:, a::2, b::2, c::2, :], out=out)
    return out, (x, out)


def _pool_backward(dout, ctx):
    # Gradient goes to the first tap (in _POOL_TAPS order) holding the maximum.
    x, out = ctx
    dx = np.empty_like(x)
    free = np.ones(out.shape, dtype=bool)
    for a, b, c in _POOL_TAPS:
        hit = (x[:, a::2, b::2, c::2, :] == out) & free
        dx[:, a::2, b::2, c::2, :] = np.where(hit, dout, 0)
        free &= ~hit
    return dx


def _softplus(z):
    return np.logaddexp(0.0, z).astype(z.dtype)


def _sigmoid(z):
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(z.dtype)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite activation in layer {name}")


# ---------------------------------------------------------------------------
# network forward / backward


def _prepare_input(state: ModelState, volumes) -> np.ndarray:
    x = np.asarray(volumes)
    side = state.config.input_side
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (side, side, side):
        raise ValidationError(f"expected volume(s) of shape ({side}, {side}, {side}), got {np.shape(volumes)}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input volume contains non-finite values")
    return np.ascontiguousarray(x, dtype=state.config.dtype)[..., None]


def _block_forward(p, name, x, cache):
    a1, ctx1 = _conv_forward(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
    h1 = np.maximum(a1, 0)
    a2, ctx2 = _conv_forward(h1, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
    if f"{name}.proj.w" in p:
        skip = (x.reshape(-1, x.shape[-1]) @ p[f"{name}.proj.w"] + p[f"{name}.proj.b"]).reshape(a2.shape)
    else:
        skip = x
    z = a2 + skip
    out = np.maximum(z, 0)
    _check_finite(name, out)
    cache[name] = (x, ctx1, a1, ctx2, z)
    return out


def _block_backward(p, name, dout, cache, grads):
    x, ctx1, a1, ctx2, z = cache[name]
    dz = dout * (z > 0)
    dh1, grads[f"{name}.conv2.w"], grads[f"{name}.conv2.b"] = _conv_backward(dz, ctx2, p[f"{name}.conv2.w"])
    da1 = dh1 * (a1 > 0)
    dx, grads[f"{name}.conv1.w"], grads[f"{name}.conv1.b"] = _conv_backward(da1, ctx1, p[f"{name}.conv1.w"])
    if f"{name}.proj.w" in p:
        dz2 = dz.reshape(-1, dz.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        grads[f"{name}.proj.w"] = x2.T @ dz2
        grads[f"{name}.proj.b"] = dz2.sum(axis=0)
        dx += (dz2 @ p[f"{name}.proj.w"].T).reshape(x.shape)
    else:
        dx += dz
    return dx


def _forward(state: ModelState, x: np.ndarray, cache: dict | None):
    p = state.params
    cfg = state.config
    if cache is None:
        cache = {}
    a0, ctx0 = _conv_forward(x, p["stem.w"], p["stem.b"])
    h0 = np.maximum(a0, 0)
    _check_finite("stem", h0)
    s1, pool0 = _pool_forward(h0)
    b1 = _block_forward(p, "block1", s1, cache)
    s2, pool1 = _pool_forward(b1)
    b2 = _block_forward(p, "block2", s2, cache)
    s3, pool2 = _pool_forward(b2)
    n = x.shape[0]
    g = s3.reshape(n, -1, s3.shape[-1]).mean(axis=1)
    logits = g @ p["head.w"] + p["head.b"]
    if cfg.evidence_activation == "relu":
        evidence = np.maximum(logits, 0)
    else:
        evidence = _softplus(logits)
    _check_finite("head", evidence)
    cache.update(
        ctx0=ctx0, a0=a0, pool0=pool0, pool1=pool1, pool2=pool2, s3_shape=s3.shape, g=g, logits=logits,
    )
    return evidence


def _backward(state: ModelState, cache: dict, devidence: np.ndarray) -> dict[str, np.ndarray]:
    p = state.params
    grads: dict[str, np.ndarray] = {}
    logits = cache["logits"]
    if state.config.evidence_activation == "relu":
        dlogits = devidence * (logits > 0)
    else:
        dlogits = devidence * _sigmoid(logits)
    grads["head.w"] = cache["g"].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dg = dlogits @ p["head.w"].T
    n, d3, h3, w3, c = cache["s3_shape"]
    ds3 = np.broadcast_to((dg / (d3 * h3 * w3))[:, None, None, None, :], cache["s3_shape"])
    db2 = _pool_backward(ds3, cache["pool2"])
    ds2 = _block_backward(p, "block2", db2, cache, grads)
    db1 = _pool_backward(ds2, cache["pool1"])
    ds1 = _block_backward(p, "block1", db1, cache, grads)
    dh0 = _pool_backward(ds1, cache["pool0"])
    da0 = dh0 * (cache["a0"] > 0)
    _, grads["stem.w"], grads["stem.b"] = _conv_backward(da0, cache["ctx0"], p["stem.w"], need_dx=False)
    return {name: grads[name].astype(p[name].dtype, copy=False) for name in p}


def forward_batch(state: ModelState, volumes, chunk: int = 1) -> np.ndarray:
    """Evidence for a stack of cubic volumes, shape (N, K)."""
    x = _prepare_input(state, volumes)
    out = [_forward(state, x[i : i + chunk], None) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def forward(state: ModelState, volume) -> np.ndarray:
    """Evidence vector for one cubic volume."""
    return forward_batch(state, np.asarray(volume)[None] if np.ndim(volume) == 3 else volume)[0]


def backward(state: ModelState, volumes, true_classes, weights, chunk: int = 1):
    """Mean batch loss and its gradient with respect to every parameter.

    ``volumes`` may be one cube or a stack; ``true_classes`` matches.
    ``weights`` is the per-class weight vector (zeros allowed).
    """
    x = _prepare_input(state, volumes)
    labels = np.atleast_1d(np.asarray(true_classes, dtype=np.int64))
    n = x.shape[0]
    k = state.config.num_classes
    if labels.shape != (n,):
        raise ValidationError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    w = np.asarray(getattr(weights, "w", weights), dtype=np.float64)
    if w.shape != (k,):
        raise ValidationError(f"expected {k} class weights")
    grads = {name: np.zeros_like(v) for name, v in state.params.items()}
    total = 0.0
    for i in range(0, n, chunk):
        cache: dict = {}
        ev = _forward(state, x[i : i + chunk], cache)
        m = ev.shape[0]
        loss, dev, _ = batch_loss(ev, labels[i : i + chunk], w)
        # batch_loss averages over the chunk; rescale to the full-batch mean.
        total += loss * m
        part = _backward(state, cache, (dev * (m / n)).astype(state.config.dtype))
        for name in grads:
            grads[name] += part[name]
    return total / n, grads


# ---------------------------------------------------------------------------
# optimizer and training


def adam_step(state: ModelState, grads: dict[str, np.ndarray], config: OptimizerConfig) -> ModelState:
    """One bias-corrected Adam update; returns a new state, the input is untouched."""
    if set(grads) != set(state.params):
        raise ValidationError("gradient names do not match parameters")
    t = state.step + 1
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    params, m, v = {}, {}, {}
    for name, theta in state.params.items():
        g = np.asarray(grads[name])
        if g.shape != theta.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        dt = theta.dtype
        m_new = (config.beta1 * state.m[name] + (1.0 - config.beta1) * g).astype(dt)
        v_new = (config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)).astype(dt)
        update = config.learning_rate * (m_new / bc1) / (np.sqrt(v_new / bc2) + config.epsilon)
        params[name] = (theta - update).astype(dt)
        m[name], v[name] = m_new, v_new
    return replace(state, params=params, m=m, v=v, step=t)


@dataclass
class TrainResult:
    state: ModelState
    loss_trace: list[float] = field(default_factory=list)


def train(
    volumes: np.ndarray,
    labels,
    net_config: NetworkConfig,
    opt_config: OptimizerConfig,
    seed: int,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train from scratch on a preprocessed split.

    Class weights are the reciprocal training-split class counts.  The loss
    trace holds the mean per-subject loss over each epoch's batches.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigurationError("training split is empty")
    counts = np.bincount(labels, minlength=net_config.num_classes)
    if counts.size > net_config.num_classes:
        raise ValidationError("label outside the configured class range")
    weights = class_weights_from_counts(counts).w
    init_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(2)
    state = init_state(net_config, int(init_seed.generate_state(1)[0]))
    state.seed = int(seed)
    state.class_counts = tuple(int(c) for c in counts)
    rng = np.random.default_rng(shuffle_seed)
    x = np.asarray(volumes, dtype=net_config.dtype)
    n = len(labels)
    trace: list[float] = []
    for epoch in range(opt_config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opt_config.batch_size):
            idx = order[start : start + opt_config.batch_size]
            loss, grads = backward(state, x[idx], labels[idx], weights)
            state = adam_step(state, grads, opt_config)
            total += loss * len(idx)
        trace.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
    return TrainResult(state, trace)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout: 8-byte magic, uint32 LE header length, UTF-8 JSON header, then the
# concatenated tensor payload.  Each header tensor entry names its shape and
# byte offset into the payload; tensors are little-endian float32, C order.

MAGIC = b"RCCEDL01"


def _tensor_entries(state: ModelState):
    for group, tensors in (("param", state.params), ("adam_m", state.m), ("adam_v", state.v)):
        for name, arr in tensors.items():
            yield f"{group}/{name}", arr


def save_checkpoint(state: ModelState, path) -> None:
    entries = []
    chunks = []
    offset = 0
    for key, arr in _tensor_entries(state):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "rcc-edl-checkpoint",
        "version": 1,
        "dtype": "f32le",
        "config": asdict(state.config),
        "seed": state.seed,
        "step": state.step,
        "class_counts": list(state.class_counts) if state.class_counts is not None else None,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    payload = memoryview(data)[12 + hlen :]
    config = NetworkConfig(**header["config"])
    dtype = np.dtype(config.dtype)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        group, name = entry["name"].split("/", 1)
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(dtype)
        groups[group][name] = arr
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in groups["param"] or groups["param"][name].shape != shape:
            raise ValidationError(f"{path}: tensor {name} missing or misshapen")
    counts = header.get("class_counts")
    return ModelState(
        config,
        groups["param"],
        groups["adam_m"],
        groups["adam_v"],
        step=int(header["step"]),
        seed=int(header["seed"]),
        class_counts=tuple(counts) if counts is not None else None,
    )
