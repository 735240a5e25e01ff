"""Dense multilayer perceptrons over flat parameter vectors.

Both networks of the game (the response model ``g(x; theta)`` and the
moment/critic model ``f(z; tau)``) are plain MLPs with a scalar output.
Parameters live in one flat float64 vector laid out layer by layer as
``W_0 (row-major, in x out), b_0, W_1, b_1, ...``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

LEAKY_RELU = "leaky_relu"
TANH = "tanh"
IDENTITY = "identity"
ACTIVATIONS = (LEAKY_RELU, TANH, IDENTITY)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture shared by every client for one role of the game."""

    layer_widths: tuple[int, ...]
    activation: str = LEAKY_RELU
    slope: float = 0.1

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError(f"need at least input and output widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    @cached_property
    def layer_slices(self) -> tuple[tuple[slice, slice, tuple[int, int]], ...]:
        """(weight slice, bias slice, weight shape) for every layer."""
        out = []
        pos = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            n_w = w[i] * w[i + 1]
            out.append((slice(pos, pos + n_w), slice(pos + n_w, pos + n_w + w[i + 1]), (w[i], w[i + 1])))
            pos += n_w + w[i + 1]
        return tuple(out)

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation, "slope": self.slope}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", LEAKY_RELU), float(d.get("slope", 0.1)))


@dataclass(frozen=True)
class ParamVector:
    """Flat weights of one network together with the spec they parameterize."""

    values: np.ndarray
    spec: MlpSpec = field(compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != self.spec.n_params:
            raise ValueError(
                f"parameter vector has length {values.shape[0]}, spec {self.spec.layer_widths} needs {self.spec.n_params}"
            )
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise ValueError(f"non-finite parameter at index {int(bad[0])}: {values[bad[0]]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.spec)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.spec, self.values)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "values": [float(v) for v in self.values]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamVector":
        return cls(np.asarray(d["values"], dtype=np.float64), MlpSpec.from_dict(d["spec"]))


def unpack(spec: MlpSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (no copies) of each layer's weight matrix and bias."""
    return [(values[ws].reshape(shape), values[bs]) for ws, bs, shape in spec.layer_slices]


def init_params(spec: MlpSpec, seed: int, scheme: str = "kaiming", scale: float = 0.0) -> ParamVector:
    """Deterministic initialisation.

    ``"kaiming"`` draws weights from U(-sqrt(6/fan_in), sqrt(6/fan_in)) and zeroes
    biases; ``"kaiming_zero_last"`` does the same but also zeroes the output layer,
    so the network starts at the constant 0; ``"fan_in"`` draws weights and biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    (the usual default of deep-learning libraries); ``"uniform"`` draws every entry,
    biases included, from U(-scale, scale).
    """
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    if scheme in ("kaiming", "kaiming_zero_last"):
        for ws, _, (fan_in, fan_out) in spec.layer_slices:
            bound = np.sqrt(6.0 / fan_in)
            values[ws] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        if scheme == "kaiming_zero_last":
            ws, _, _ = spec.layer_slices[-1]
            values[ws] = 0.0
    elif scheme == "fan_in":
        for ws, bs, (fan_in, fan_out) in spec.layer_slices:
            bound = 1.0 / np.sqrt(fan_in)
            values[ws] = rng.uniform(-bound, bound, size=fan_in * fan_out)
            values[bs] = rng.uniform(-bound, bound, size=fan_out)
    elif scheme == "uniform":
        values[:] = rng.uniform(-scale, scale, size=spec.n_params)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return ParamVector(values, spec)


CHUNK_ROWS = 2048


def _act_and_deriv(spec: MlpSpec, h: np.ndarray):
    """Activation and its derivative; the derivative is None for identity."""
    if spec.activation == LEAKY_RELU:
        # LeakyReLU at exactly 0 takes the positive-side slope.
        d = (h >= 0.0) * (1.0 - spec.slope) + spec.slope
        return h * d, d
    if spec.activation == TANH:
        a = np.tanh(h)
        return a, 1.0 - a * a
    return h, None


def _as_batch(spec: MlpSpec, inputs) -> np.ndarray:
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim == 1 and spec.n_inputs == 1 and a.shape[0] != 1:
        a = a[:, None]
    elif a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != spec.n_inputs:
        raise ValueError(f"input shape {np.shape(inputs)} does not match input width {spec.n_inputs}")
    return a


def _augmented_layers(spec: MlpSpec, values: np.ndarray) -> list[np.ndarray]:
    # W (in x out, row-major) followed by b (out) is exactly the (in+1) x out matrix [W; b].
    return [values[ws.start:bs.stop].reshape(shape[0] + 1, shape[1]) for ws, bs, shape in spec.layer_slices]


def forward_cache(params: ParamVector | np.ndarray, inputs, spec: MlpSpec | None = None):
    """Forward pass that keeps what :func:`backward_from_cache` needs.

    Returns ``(outputs, cache)`` with outputs of shape (n,).  Inputs are
    processed in one block; callers with many rows should feed chunks.
    """
    spec, values = _resolve(params, spec)
    a = _as_batch(spec, inputs)
    n = a.shape[0]
    layers = _augmented_layers(spec, values)
    aug = np.empty((n, spec.n_inputs + 1))
    aug[:, :-1] = a
    aug[:, -1] = 1.0
    acts = [aug]
    derivs = []
    for i, w_aug in enumerate(layers):
        h = aug @ w_aug
        if i == len(layers) - 1:
            break
        a, d = _act_and_deriv(spec, h)
        derivs.append(d)
        aug = np.empty((n, h.shape[1] + 1))
        aug[:, :-1] = a
        aug[:, -1] = 1.0
        acts.append(aug)
    return h[:, 0], (spec, layers, acts, derivs)


def backward_from_cache(cache, upstream) -> np.ndarray:
    spec, layers, acts, derivs = cache
    delta = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
    if delta.shape[0] != acts[0].shape[0]:
        raise ValueError(f"upstream has {delta.shape[0]} rows, inputs have {acts[0].shape[0]}")
    grad = np.empty(spec.n_params)
    for i in range(len(layers) - 1, -1, -1):
        ws, bs, _ = spec.layer_slices[i]
        grad[ws.start:bs.stop] = (acts[i].T @ delta).reshape(-1)
        if i > 0:
            delta = delta @ layers[i][:-1].T
            if derivs[i - 1] is not None:
                delta *= derivs[i - 1]
    return grad


def _chunks(n: int):
    for start in range(0, n, CHUNK_ROWS):
        yield slice(start, min(start + CHUNK_ROWS, n))


def forward_batch(params: ParamVector | np.ndarray, inputs, spec: MlpSpec | None = None) -> np.ndarray:
    """Network output for every row of ``inputs``; returns shape (n,)."""
    spec, values = _resolve(params, spec)
    a = _as_batch(spec, inputs)
    if spec.n_outputs != 1:
        raise ValueError("only scalar-output networks are supported")
    out = np.empty(a.shape[0])
    for sl in _chunks(a.shape[0]):
        out[sl] = forward_cache(values, a[sl], spec)[0]
    return out


def forward(params: ParamVector, x) -> float:
    """Scalar output of the network at a single input vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.spec.n_inputs:
        raise ValueError(f"input length {x.shape[0]} does not match input width {params.spec.n_inputs}")
    if params.spec.n_outputs != 1:
        raise ValueError("forward expects a scalar-output network")
    return float(forward_cache(params, x[None, :])[0][0])


def backward_batch(params: ParamVector | np.ndarray, inputs, upstream, spec: MlpSpec | None = None) -> np.ndarray:
    """Sum over rows k of ``upstream[k] * d out(inputs[k]) / d params``.

    One reverse pass per block of rows; this is what the objective uses to
    turn per-sample output sensitivities into a parameter gradient.
    """
    spec, values = _resolve(params, spec)
    a = _as_batch(spec, inputs)
    u = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if u.shape[0] != a.shape[0]:
        raise ValueError(f"upstream has {u.shape[0]} rows, inputs have {a.shape[0]}")
    grad = np.zeros(spec.n_params)
    for sl in _chunks(a.shape[0]):
        grad += backward_from_cache(forward_cache(values, a[sl], spec)[1], u[sl])
    return grad


def grad_params(params: ParamVector, x, upstream: float = 1.0) -> np.ndarray:
    """``upstream * d forward(params, x) / d params`` as a flat vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.spec.n_inputs:
        raise ValueError(f"input length {x.shape[0]} does not match input width {params.spec.n_inputs}")
    return backward_batch(params, x[None, :], [upstream])


def hvp(params, grad_fn: Callable[[np.ndarray], np.ndarray], vector) -> np.ndarray:
    """Hessian-vector product by central differences of an exact gradient.

    ``grad_fn`` maps a flat parameter array to the gradient of the scalar loss.
    """
    p = np.asarray(getattr(params, "values", params), dtype=np.float64)
    v = np.asarray(getattr(vector, "values", vector), dtype=np.float64)
    if v.shape != p.shape:
        raise ValueError(f"vector shape {v.shape} does not match params shape {p.shape}")
    h = 1e-4 * (1.0 + np.max(np.abs(p), initial=0.0))
    g_plus = np.asarray(grad_fn(p + h * v), dtype=np.float64)
    g_minus = np.asarray(grad_fn(p - h * v), dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        out = (g_plus - g_minus) / (2.0 * h)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise FloatingPointError(f"non-finite Hessian-vector product at coordinate {int(bad[0])}")
    return out


def dense_hessian(params, grad_fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Symmetrised dense Hessian assembled column by column from :func:`hvp`."""
    p = np.asarray(getattr(params, "values", params), dtype=np.float64)
    n = p.shape[0]
    cols = np.empty((n, n))
    eye = np.eye(n)
    for j in range(n):
        cols[:, j] = hvp(p, grad_fn, eye[j])
    return 0.5 * (cols + cols.T)


def _resolve(params, spec: MlpSpec | None) -> tuple[MlpSpec, np.ndarray]:
    if isinstance(params, ParamVector):
        return params.spec, params.values
    if spec is None:
        raise TypeError("a raw parameter array needs an explicit spec")
    return spec, np.asarray(params, dtype=np.float64)
