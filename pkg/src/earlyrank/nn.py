"""Dense neural-network substrate: MLPs with explicit tapes, embeddings, losses,
optimizers, and finite-difference gradient checks.

Models in this package are small and fixed-topology, so every forward pass
returns a tape holding exactly what its backward pass needs. Linear layers
store weights as ``(out, in)`` and compute ``y = x @ W.T + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericalError, UsageError

PROB_EPS = 1e-7
ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(x):
    return expit(x)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (outputs of each layer) and one activation per layer."""

    input_dim: int
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.layer_widths) < 1:
            raise ConfigError("an MLP needs at least one layer")
        if len(self.activations) != len(self.layer_widths):
            raise ConfigError(
                f"{len(self.layer_widths)} layers but {len(self.activations)} activations"
            )
        for w in self.layer_widths:
            if w < 1:
                raise ConfigError(f"layer width must be >= 1, got {w}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")

    @classmethod
    def build(cls, input_dim: int, widths: Sequence[int], final: str,
              hidden: str = "relu") -> "MlpSpec":
        widths = tuple(int(w) for w in widths)
        acts = tuple([hidden] * (len(widths) - 1) + [final])
        return cls(int(input_dim), widths, acts)

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.layer_widths
        return [(dims[i + 1], dims[i]) for i in range(len(self.layer_widths))]

    def multiply_adds(self) -> int:
        return sum(o * i for o, i in self.shapes())


class ParamSet:
    """Named parameter arrays plus per-parameter adagrad accumulators.

    ``version`` increments on every optimizer step; tapes remember the version
    they were recorded at so stale tapes are rejected.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.accum: dict[str, np.ndarray] = {}
        self.version = 0
        self._packed = None

    def packed(self):
        """``(values, accum, slices)``: one flat buffer each, with ``self.values``
        and ``self.accum`` re-pointed at views into them.

        Repacks whenever an entry was replaced by an array outside the buffer.
        """
        if self._packed is not None:
            flat_v, flat_a, slices = self._packed
            if len(slices) == len(self.values) and all(
                    self.values[n].base is flat_v and self.accum[n].base is flat_a for n in slices):
                return self._packed
        slices, start = {}, 0
        for n, v in self.values.items():
            slices[n] = slice(start, start + v.size)
            start += v.size
        flat_v = np.empty(start)
        flat_a = np.empty(start)
        for n, sl in slices.items():
            shape = self.values[n].shape
            flat_v[sl] = self.values[n].ravel()
            flat_a[sl] = self.accum[n].ravel()
            self.values[n] = flat_v[sl].reshape(shape)
            self.accum[n] = flat_a[sl].reshape(shape)
        self._packed = (flat_v, flat_a, slices)
        return self._packed

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ConfigError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise DataError(f"parameter {name!r} has non-finite values")
        self.values[name] = value
        self.accum[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(v) for n, v in self.values.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, v in self.values.items():
            out.values[n] = v.copy()
            out.accum[n] = self.accum[n].copy()
        out.version = self.version
        return out

    def num_weights(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def init_mlp(spec: MlpSpec, params: ParamSet, prefix: str,
             rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    for i, (out_dim, in_dim) in enumerate(spec.shapes()):
        bound = 1.0 / np.sqrt(in_dim)
        params.add(f"{prefix}{i}.weight", rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        params.add(f"{prefix}{i}.bias", np.zeros(out_dim))


def init_embedding(params: ParamSet, name: str, vocab_size: int, dim: int,
                   rng: np.random.Generator) -> None:
    if vocab_size < 1 or dim < 1:
        raise ConfigError(f"embedding {name!r} needs vocab_size, dim >= 1")
    bound = 1.0 / np.sqrt(dim)
    params.add(name, rng.uniform(-bound, bound, size=(vocab_size, dim)))


@dataclass
class MlpTape:
    spec: MlpSpec
    prefix: str
    params: ParamSet
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    vector_input: bool = False


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return expit(z)
    return z


def mlp_forward(spec: MlpSpec, params: ParamSet, x, prefix: str = ""):
    """Run the MLP on a vector ``(in,)`` or a batch ``(B, in)``.

    Returns ``(output, tape)``.
    """
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    if vector_input:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"input shape {x.shape} does not match input_dim {spec.input_dim}")
    tape = MlpTape(spec, prefix, params, params.version, vector_input=vector_input)
    h = x
    for i, act in enumerate(spec.activations):
        w = params.values[f"{prefix}{i}.weight"]
        b = params.values[f"{prefix}{i}.bias"]
        if w.shape[1] != h.shape[1]:
            raise ConfigError(f"layer {prefix}{i} expects {w.shape[1]} inputs, got {h.shape[1]}")
        tape.inputs.append(h)
        h = activate(act, h @ w.T + b)
        tape.outputs.append(h)
    return (h[0] if vector_input else h), tape


def mlp_predict(spec: MlpSpec, params: ParamSet, h: np.ndarray, prefix: str = "",
                start: int = 0) -> np.ndarray:
    """Tape-free batch forward from layer ``start`` onward; ``h`` is that layer's input."""
    for i in range(start, len(spec.activations)):
        w = params.values[f"{prefix}{i}.weight"]
        h = activate(spec.activations[i], h @ w.T + params.values[f"{prefix}{i}.bias"])
    return h


def mlp_backward(tape: MlpTape, upstream_grad):
    """Backpropagate ``upstream_grad`` (d loss / d output) through a tape.

    Returns ``(grads, grad_input)``; ``grads`` maps parameter names to arrays of
    the parameter's shape.
    """
    if tape.version != tape.params.version:
        raise UsageError(
            f"stale tape for {tape.prefix!r}: recorded at version {tape.version}, "
            f"params now at {tape.params.version}"
        )
    g = np.asarray(upstream_grad, dtype=np.float64)
    if tape.vector_input:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise UsageError(f"upstream grad shape {g.shape} != output shape {tape.outputs[-1].shape}")
    grads = {}
    for i in range(len(tape.spec.activations) - 1, -1, -1):
        act = tape.spec.activations[i]
        out = tape.outputs[i]
        if act == "relu":
            g = g * (out > 0.0)
        elif act == "sigmoid":
            g = g * out * (1.0 - out)
        w = tape.params.values[f"{tape.prefix}{i}.weight"]
        grads[f"{tape.prefix}{i}.weight"] = g.T @ tape.inputs[i]
        grads[f"{tape.prefix}{i}.bias"] = g.sum(axis=0)
        g = g @ w
    return grads, (g[0] if tape.vector_input else g)


def embedding_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Rows of ``table`` for integer ``ids`` of any shape; result shape ``ids.shape + (dim,)``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"feature id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    return table[ids]


def embedding_backward(grad: np.ndarray, ids: np.ndarray, vocab_size: int) -> np.ndarray:
    dim = grad.shape[-1]
    ids = np.asarray(ids).ravel()
    flat = grad.reshape(-1, dim)
    # one bincount per column is much faster than np.add.at
    return np.stack([np.bincount(ids, weights=flat[:, k], minlength=vocab_size)
                     for k in range(dim)], axis=1)


# --- losses -----------------------------------------------------------------

def binary_ce_loss(p, y):
    """Log loss and its derivative with respect to ``p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; the derivative is evaluated at
    the clamped value (straight-through), so saturated heads still move.
    Works elementwise on scalars or arrays; ``y`` may be a soft label.
    """
    p = clamp_prob(np.asarray(p, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = -y / p + (1.0 - y) / (1.0 - p)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def soft_label_ce_loss(y_ctr, ectr):
    """Cross-entropy of a prediction against a probability target (distillation)."""
    ectr = np.asarray(ectr, dtype=np.float64)
    if np.any((ectr < 0.0) | (ectr > 1.0)):
        raise DataError("soft label must lie in [0, 1]")
    return binary_ce_loss(y_ctr, ectr)


def mse_loss(pred, label):
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(label))):
        raise DataError("mse_loss received non-finite input")
    diff = label - pred
    loss = diff * diff
    grad = -2.0 * diff
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# --- optimizers -------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adagrad"
    lr: float = 0.05
    eps: float = 1e-10

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adagrad"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


def optimizer_step(params: ParamSet, grads: dict, config: OptimizerConfig) -> ParamSet:
    """Apply one in-place update. Parameters absent from ``grads`` are untouched.

    A zero gradient leaves both the value and the adagrad accumulator as they
    were, so the update runs once over the packed buffer with zeros filled in.
    """
    flat_v, flat_a, slices = params.packed()
    g = np.zeros_like(flat_v)
    for name, grad in grads.items():
        if name not in slices:
            raise UsageError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params.values[name].shape:
            raise UsageError(f"gradient shape {grad.shape} != parameter {name!r} shape")
        g[slices[name]] = grad.ravel()
    if not np.isfinite(g).all():
        bad = next(n for n, grad in grads.items() if not np.all(np.isfinite(grad)))
        raise NumericalError(f"non-finite gradient for parameter {bad!r}")
    if config.algorithm == "sgd":
        g *= config.lr
        flat_v -= g
    else:
        flat_a += g * g
        step = np.sqrt(flat_a)
        step += config.eps
        np.divide(g, step, out=step)
        step *= config.lr
        flat_v -= step
    params.version += 1
    return params


# --- gradient verification --------------------------------------------------

def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray,
                       h: float = 1e-5, indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. entries of ``array`` (mutated in place
    and restored). ``indices`` limits the probed entries; others are left at zero."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    grad_flat = out.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


# --- parameter dumps ------------------------------------------------------------
#
# Binary layout, little-endian throughout:
#   magic b"ERKPARAM", uint32 format version (1), uint32 entry count
#   per entry: uint16 name length, utf-8 name, uint8 ndim, ndim x uint64 dims
#   then every entry's float64 values, row-major, in table order.
# Optimizer accumulators are not stored; a dump restores a frozen model.

PARAM_MAGIC = b"ERKPARAM"
PARAM_FORMAT = 1


def save_params(path, params: ParamSet) -> None:
    names = list(params.values)
    head = [PARAM_MAGIC, struct.pack("<II", PARAM_FORMAT, len(names))]
    for n in names:
        raw = n.encode("utf-8")
        shape = params.values[n].shape
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        head.append(struct.pack(f"<{len(shape)}Q", *shape))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        for n in names:
            fh.write(np.ascontiguousarray(params.values[n], dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != PARAM_MAGIC:
        raise DataError(f"{path}: not a parameter dump")
    version, count = struct.unpack_from("<II", data, 8)
    if version != PARAM_FORMAT:
        raise DataError(f"{path}: unsupported dump format {version}")
    pos = 16
    table = []
    for _ in range(count):
        (length,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + length].decode("utf-8")
        pos += 2 + length
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 1)
        pos += 1 + 8 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(data):
            raise DataError(f"{path}: truncated at {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def restore_params(params: ParamSet, values: dict[str, np.ndarray]) -> None:
    """Overwrite ``params`` in place from a loaded dump; names and shapes must match."""
    if set(values) != set(params.values):
        missing = sorted(set(params.values) ^ set(values))
        raise DataError(f"parameter names differ from the model: {missing[:5]}")
    for n, v in values.items():
        if v.shape != params.values[n].shape:
            raise DataError(f"{n!r}: dump shape {v.shape} != model shape {params.values[n].shape}")
        params.values[n] = v.copy()
        params.accum[n] = np.zeros_like(v)
    params.version += 1
