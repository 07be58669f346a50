"""Minimal feed-forward approximator with hand-written reverse-mode gradients.

Parameters live in a single flat float64 vector; the layout maps layers to
slices so optimizer state and checkpoints stay trivially serializable.
Hidden layers use a smooth activation (tanh by default); the output layer is
linear and zero-initialized, so a fresh network outputs exactly 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (
        lambda z: 1.0 / (1.0 + np.exp(-z)),
        lambda z, a: a * (1.0 - a),
    ),
}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    init_scale: float = 1.0

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def num_params(self) -> int:
        d = self.dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


def layout(spec: MlpSpec) -> list[tuple[slice, slice, tuple[int, int]]]:
    """Per layer: (weight slice, bias slice, weight shape) into the flat vector."""
    out, off = [], 0
    d = spec.dims
    for i in range(len(d) - 1):
        fan_in, fan_out = d[i], d[i + 1]
        w = slice(off, off + fan_in * fan_out)
        off = w.stop
        b = slice(off, off + fan_out)
        off = b.stop
        out.append((w, b, (fan_in, fan_out)))
    return out


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Hidden weights ~ N(0, (init_scale/sqrt(fan_in))^2); final layer all zero."""
    params = np.zeros(spec.num_params)
    lay = layout(spec)
    for i, (w, _b, (fan_in, fan_out)) in enumerate(lay[:-1]):
        params[w] = rng.normal(0.0, spec.init_scale / np.sqrt(fan_in), fan_in * fan_out)
    return params


def _unpack(spec: MlpSpec, params: np.ndarray):
    if params.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got {params.shape}")
    return [(params[w].reshape(shape), params[b]) for w, b, shape in layout(spec)]


def forward_batch(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch of rows, shape (B, input_dim) -> (B, output_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected (B, {spec.input_dim}) input, got {x.shape}")
    act, _ = _ACTIVATIONS[spec.activation]
    ws = _unpack(spec, params)
    h = x
    for w, b in ws[:-1]:
        h = act(h @ w + b)
    w, b = ws[-1]
    return h @ w + b


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    return forward_batch(spec, params, np.asarray(x, dtype=np.float64)[None, :])[0]


def backward_batch(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
                   cotangent: np.ndarray) -> np.ndarray:
    """Gradient of sum_b <output_b, cotangent_b> with respect to the flat params.

    Aborts on non-finite intermediates, which otherwise propagate silently
    through matmuls.
    """
    x = np.asarray(x, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    act, dact = _ACTIVATIONS[spec.activation]
    ws = _unpack(spec, params)

    hs = [x]          # layer inputs
    zs = []           # pre-activations of hidden layers
    h = x
    for w, b in ws[:-1]:
        z = h @ w + b
        h = act(z)
        zs.append(z)
        hs.append(h)
    if any(not np.all(np.isfinite(a)) for a in hs):
        raise FloatingPointError("non-finite intermediate in backward pass")

    grad = np.zeros_like(params)
    lay = layout(spec)
    delta = cotangent
    for i in range(len(ws) - 1, -1, -1):
        w_sl, b_sl, shape = lay[i]
        grad[w_sl] = (hs[i].T @ delta).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ ws[i][0].T) * dact(zs[i - 1], hs[i])
    return grad


def backward(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
             cotangent: np.ndarray) -> np.ndarray:
    return backward_batch(spec, params, np.asarray(x, dtype=np.float64)[None, :],
                          np.asarray(cotangent, dtype=np.float64)[None, :])


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm > 0:
        return grad * (max_norm / norm)
    return grad


@dataclass
class AdamWState:
    """AdamW with decoupled weight decay and bias correction."""

    m: np.ndarray
    v: np.ndarray
    count: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, spec_or_size, lr: float = 1e-3, weight_decay: float = 0.0) -> "AdamWState":
        n = spec_or_size.num_params if isinstance(spec_or_size, MlpSpec) else int(spec_or_size)
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, weight_decay=weight_decay)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != self.m.shape or grad.shape != self.m.shape:
            raise ValueError("parameter/gradient shape does not match optimizer state")
        self.count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.count)
        v_hat = self.v / (1.0 - self.beta2**self.count)
        return params - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                   + self.weight_decay * params)


def adamw_step(params: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    return state.step(params, grad)


@dataclass
class EmaState:
    """Exponential-moving-average shadow of a parameter vector."""

    shadow: np.ndarray
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"EMA rate must be in [0, 1], got {self.rate}")


def ema_update(ema: EmaState, params: np.ndarray) -> EmaState:
    """shadow <- rate * shadow + (1 - rate) * params."""
    if params.shape != ema.shadow.shape:
        raise ValueError("parameter shape does not match EMA shadow")
    ema.shadow = ema.rate * ema.shadow + (1.0 - ema.rate) * params
    return ema


# ---------------------------------------------------------------------------
# Checkpoints: little-endian header (dims, activation, step) + float64 params
# ---------------------------------------------------------------------------

_MAGIC = b"TWMLP001"


def save_checkpoint(path, spec: MlpSpec, params: np.ndarray, step: int = 0) -> None:
    act = spec.activation.encode("ascii")[:8].ljust(8, b"\0")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", spec.input_dim, spec.output_dim, len(spec.hidden)))
        fh.write(struct.pack(f"<{len(spec.hidden)}I", *spec.hidden))
        fh.write(act)
        fh.write(struct.pack("<dQ", spec.init_scale, step))
        fh.write(np.ascontiguousarray(params, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MlpSpec, np.ndarray, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        input_dim, output_dim, n_hidden = struct.unpack("<III", fh.read(12))
        hidden = struct.unpack(f"<{n_hidden}I", fh.read(4 * n_hidden))
        act = fh.read(8).rstrip(b"\0").decode("ascii")
        init_scale, step = struct.unpack("<dQ", fh.read(16))
        spec = MlpSpec(input_dim, tuple(hidden), output_dim, act, init_scale)
        params = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if params.shape != (spec.num_params,):
        raise ValueError(f"{path}: expected {spec.num_params} parameters, got {params.size}")
    return spec, params, step
