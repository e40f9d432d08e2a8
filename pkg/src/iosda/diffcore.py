"""Reverse-mode differentiation for dense MLPs, plus the losses and optimizer
every model in the package is built from.

Networks are described by an :class:`MlpSpec` and carried as a flat parameter
dict (``"l0.W"``, ``"l0.b"``, ...).  ``forward`` returns the output together
with a tape of cached intermediates, and ``backward`` walks that tape in
reverse.  Every tensor, biases included, is stored as a 2-D float64 array so
that checkpoints have a uniform rows x cols layout.

Models that need more than one network (shared trunks, several heads) compose
these primitives by hand and apply the chain rule across the joins.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import DataError, NumericError, ShapeError

LOG_FLOOR = 1e-12
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
DEFAULT_SLOPE = 0.01

_ACTIVATIONS = ("leaky_relu", "linear")
_RUNNING = ("running_mean", "running_var")

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths and per-layer options of a dense network.

    ``activation`` is applied after every hidden layer, ``output_activation``
    after the last one.  ``batch_norm`` has one flag per linear layer and sits
    between the affine map and the activation.
    """

    layer_dims: tuple[int, ...]
    activation: str = "leaky_relu"
    output_activation: str = "linear"
    slope: float = DEFAULT_SLOPE
    batch_norm: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ShapeError("an MLP needs at least an input and an output width")
        if any(d < 1 for d in self.layer_dims):
            raise ShapeError(f"layer widths must be positive, got {self.layer_dims}")
        if not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky-relu slope must lie in (0, 1), got {self.slope}")
        for act in (self.activation, self.output_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        bn = tuple(bool(b) for b in self.batch_norm) or (False,) * self.n_layers
        if len(bn) != self.n_layers:
            raise ShapeError(f"need {self.n_layers} batch-norm flags, got {len(bn)}")
        object.__setattr__(self, "batch_norm", bn)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def layer_activation(self, i: int) -> str:
        return self.output_activation if i == self.n_layers - 1 else self.activation


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases, unit BN scale."""
    params: ParamSet = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"l{i}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"l{i}.b"] = np.zeros((1, fan_out))
        if spec.batch_norm[i]:
            params[f"l{i}.gamma"] = np.ones((1, fan_out))
            params[f"l{i}.beta"] = np.zeros((1, fan_out))
            params[f"l{i}.running_mean"] = np.zeros((1, fan_out))
            params[f"l{i}.running_var"] = np.ones((1, fan_out))
    return params


def trainable(params: Mapping[str, np.ndarray]) -> Iterator[str]:
    return (k for k in params if not k.endswith(_RUNNING))


def prefixed(params: Mapping[str, np.ndarray], prefix: str) -> ParamSet:
    return {f"{prefix}{k}": v for k, v in params.items()}


def view(params: Mapping[str, np.ndarray], prefix: str) -> ParamSet:
    """Sub-dict of ``params`` under ``prefix`` with the prefix stripped.

    Values are the same array objects, so in-place updates (running stats,
    optimizer steps) reach the parent dict.
    """
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class Tape:
    spec: MlpSpec
    train: bool
    layers: list[dict[str, np.ndarray]] = field(default_factory=list)


def _leaky(a: np.ndarray, slope: float) -> np.ndarray:
    return np.where(a > 0, a, slope * a)


def forward(
    spec: MlpSpec, params: ParamSet, x: np.ndarray, train: bool = True
) -> tuple[np.ndarray, Tape]:
    """Run the network on a batch of row vectors.

    In train mode batch-norm layers normalise with batch statistics and fold
    them into the running estimates (in place); eval mode uses the running
    estimates and leaves ``params`` untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(f"expected input of shape (n, {spec.in_dim}), got {x.shape}")
    tape = Tape(spec, train)
    h = x
    for i in range(spec.n_layers):
        cache: dict[str, np.ndarray] = {"x": h}
        z = h @ params[f"l{i}.W"] + params[f"l{i}.b"]
        if spec.batch_norm[i]:
            gamma, beta = params[f"l{i}.gamma"], params[f"l{i}.beta"]
            if train:
                mu = z.mean(axis=0, keepdims=True)
                var = z.var(axis=0, keepdims=True)
                n = z.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                rm, rv = params[f"l{i}.running_mean"], params[f"l{i}.running_var"]
                rm *= BN_MOMENTUM
                rm += (1.0 - BN_MOMENTUM) * mu
                rv *= BN_MOMENTUM
                rv += (1.0 - BN_MOMENTUM) * unbiased
            else:
                mu = params[f"l{i}.running_mean"]
                var = params[f"l{i}.running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            cache["xhat"] = xhat
            cache["inv_std"] = inv_std
            a = gamma * xhat + beta
        else:
            a = z
        cache["a"] = a
        if spec.layer_activation(i) == "leaky_relu":
            h = _leaky(a, spec.slope)
        else:
            h = a
        tape.layers.append(cache)
    return h, tape


def backward(
    tape: Tape, params: ParamSet, upstream: np.ndarray
) -> tuple[ParamSet, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
    spec = tape.spec
    if not tape.layers:
        raise ShapeError("empty tape")
    n = tape.layers[0]["x"].shape[0]
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (n, spec.out_dim):
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {(n, spec.out_dim)}")
    grads: ParamSet = {}
    g = upstream
    for i in reversed(range(spec.n_layers)):
        cache = tape.layers[i]
        if spec.layer_activation(i) == "leaky_relu":
            g = np.where(cache["a"] > 0, g, spec.slope * g)
        if spec.batch_norm[i]:
            xhat, inv_std = cache["xhat"], cache["inv_std"]
            gamma = params[f"l{i}.gamma"]
            grads[f"l{i}.gamma"] = (g * xhat).sum(axis=0, keepdims=True)
            grads[f"l{i}.beta"] = g.sum(axis=0, keepdims=True)
            gx = g * gamma
            if tape.train:
                m = gx.shape[0]
                g = inv_std / m * (m * gx - gx.sum(axis=0, keepdims=True) - xhat * (gx * xhat).sum(axis=0, keepdims=True))
            else:
                g = gx * inv_std
        grads[f"l{i}.W"] = cache["x"].T @ g
        grads[f"l{i}.b"] = g.sum(axis=0, keepdims=True)
        g = g @ params[f"l{i}.W"].T
    return grads, g


def grad_reverse(input_grad: np.ndarray, lam: float = 1.0) -> np.ndarray:
    """Backward hook of a gradient-reversal node (its forward is identity)."""
    if lam < 0:
        raise ValueError("reversal strength must be non-negative")
    return -lam * np.asarray(input_grad, dtype=np.float64)


def add_grads(total: ParamSet, extra: Mapping[str, np.ndarray], prefix: str = "") -> ParamSet:
    for k, v in extra.items():
        key = prefix + k
        if key in total:
            total[key] = total[key] + v
        else:
            total[key] = v
    return total


# ---------------------------------------------------------------- losses


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def nll_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    Returns the loss and its gradient w.r.t. the logits.  Rows whose target
    probability falls under the log floor contribute a constant, hence zero
    gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"{n} logit rows but {targets.shape} targets")
    if n == 0:
        return 0.0, np.zeros_like(logits, dtype=np.float64)
    probs = softmax_rows(logits)
    rows = np.arange(n)
    p_true = probs[rows, targets]
    loss = float(-clamped_log(p_true).mean())
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    grad[p_true < LOG_FLOOR] = 0.0
    return loss, grad / n


def boundary_loss(logits: np.ndarray, t: float = 0.5, slot: int = -1) -> tuple[float, np.ndarray]:
    """Binary cross-entropy pulling the probability of one slot towards ``t``.

    With p the softmax probability of ``slot`` the per-row loss is
    ``-t*log(p) - (1-t)*log(1-p)``; returns the batch mean and its gradient
    w.r.t. the logits.
    """
    n, c = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits, dtype=np.float64)
    slot = slot % c
    probs = softmax_rows(logits)
    p = probs[:, slot]
    # 1 - p summed from the other entries keeps precision when p is near 1
    q = np.delete(probs, slot, axis=1).sum(axis=1)
    loss = float((-t * clamped_log(p) - (1.0 - t) * clamped_log(q)).mean())
    dp = np.where(p >= LOG_FLOOR, -t / np.maximum(p, LOG_FLOOR), 0.0)
    dq = np.where(q >= LOG_FLOOR, -(1.0 - t) / np.maximum(q, LOG_FLOOR), 0.0)
    dl_dp = dp - dq
    onehot = np.zeros(c)
    onehot[slot] = 1.0
    grad = (dl_dp * p)[:, None] * (onehot[None, :] - probs)
    return loss, grad / n


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0
    m: ParamSet = field(default_factory=dict)
    v: ParamSet = field(default_factory=dict)


def adam_init(params: Mapping[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.5,
              beta2: float = 0.9, eps: float = 1e-8) -> AdamState:
    m = {k: np.zeros_like(params[k]) for k in trainable(params)}
    v = {k: np.zeros_like(params[k]) for k in trainable(params)}
    return AdamState(lr, beta1, beta2, eps, 0, m, v)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters tracked by ``state`` but absent from ``grads`` are treated as
    having zero gradient.
    """
    unknown = set(grads) - set(state.m)
    if unknown:
        raise ShapeError(f"gradients for untracked parameters: {sorted(unknown)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, m in state.m.items():
        g = grads.get(k)
        v = state.v[k]
        m *= b1
        v *= b2
        if g is not None:
            if g.shape != m.shape:
                raise ShapeError(f"gradient {k} has shape {g.shape}, expected {m.shape}")
            m += (1.0 - b1) * g
            v += (1.0 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------ checkpoints

PARAM_MAGIC = b"IOSDPARM"
PARAM_VERSION = 1


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Write tensors in the ``IOSDPARM`` layout (little-endian, f64 payload)."""
    chunks = [PARAM_MAGIC, struct.pack("<I", PARAM_VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise ShapeError(f"tensor {name} must be 2-D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:8] != PARAM_MAGIC:
        raise DataError(f"{path}: not a parameter file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != PARAM_VERSION:
        raise DataError(f"{path}: unsupported parameter file version {version}")
    pos = 12
    params: ParamSet = {}
    try:
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(buf):
                raise DataError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise DataError(f"{path}: truncated parameter file") from exc
    return params


def adam_to_params(state: AdamState) -> ParamSet:
    out: ParamSet = {
        "adam.hyper": np.array([[state.lr, state.beta1, state.beta2, state.eps, float(state.step)]]),
    }
    out.update(prefixed(state.m, "m."))
    out.update(prefixed(state.v, "v."))
    return out


def adam_from_params(tensors: Mapping[str, np.ndarray]) -> AdamState:
    lr, b1, b2, eps, step = tensors["adam.hyper"][0]
    return AdamState(float(lr), float(b1), float(b2), float(eps), int(step),
                     view(tensors, "m."), view(tensors, "v."))


def save_adam(state: AdamState, path: str | Path) -> None:
    save_params(adam_to_params(state), path)


def load_adam(path: str | Path) -> AdamState:
    return adam_from_params(load_params(path))


def write_manifest(entries: Mapping[str, object], path: str | Path) -> None:
    """Checkpoint manifests are flat ``key=value`` text files."""
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def check_finite(name: str, *arrays: np.ndarray | float) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")
