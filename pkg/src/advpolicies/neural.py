"""Dense tanh MLP with hand-written backprop, activation capture and checkpoints.

Networks are plain lists of numpy arrays so the optimizer and the checkpoint
code can treat them uniformly. Everything is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HIDDEN_SIZES = (64, 64)
CHECKPOINT_MAGIC = b"ADVMLP\x00\x01"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MlpParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # weights[i] has shape (layer_sizes[i], layer_sizes[i+1])
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer_sizes does not match the number of weight matrices")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> MlpParams:
        return MlpParams(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    """Orthogonal init (Saxe et al.) as used by the common PPO baselines."""
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def init_mlp(
    rng: np.random.Generator,
    input_dim: int,
    output_dim: int,
    hidden: tuple[int, ...] = HIDDEN_SIZES,
    output_gain: float = 1.0,
    hidden_gain: float = np.sqrt(2.0),
    activation: str = "tanh",
) -> MlpParams:
    sizes = (input_dim, *hidden, output_dim)
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        gain = output_gain if i == len(sizes) - 2 else hidden_gain
        weights.append(orthogonal(rng, (sizes[i], sizes[i + 1]), gain))
        biases.append(np.zeros(sizes[i + 1]))
    return MlpParams(sizes, weights, biases, activation)


@dataclass
class ActivationTrace:
    hidden: list[np.ndarray]

    @property
    def hidden1(self) -> np.ndarray:
        return self.hidden[0]

    @property
    def hidden2(self) -> np.ndarray:
        return self.hidden[1]

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate(self.hidden, axis=-1)


@dataclass
class ForwardCache:
    inputs: np.ndarray  # always 2-D (batch, in)
    hidden: list[np.ndarray] = field(default_factory=list)  # post-activation values
    squeeze: bool = False


def _act(params: MlpParams, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if params.activation == "tanh" else z


def forward(params: MlpParams, x, capture: bool = False):
    """Evaluate the network on a vector or a (batch, in) matrix.

    Returns ``(output, trace)``; ``trace`` is ``None`` unless ``capture``.
    """
    out, cache = forward_cached(params, x)
    trace = ActivationTrace([h[0] if cache.squeeze else h for h in cache.hidden]) if capture else None
    return out, trace


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ValueError(f"input has shape {x.shape}, network expects last dim {params.input_dim}")
    cache = ForwardCache(inputs=h, squeeze=squeeze)
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n_layers - 1:
            h = _act(params, h)
            cache.hidden.append(h)
    return (h[0] if squeeze else h), cache


def backward(params: MlpParams, cache: ForwardCache | None, output_grad) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(output).

    Uses the activations stored by :func:`forward_cached`; the returned list is
    ordered like :meth:`MlpParams.arrays`. For batched inputs the gradients are
    summed over the batch.
    """
    if cache is None:
        raise RuntimeError("backward called without a cached forward pass")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.inputs.shape[0], params.output_dim):
        raise ValueError(f"output_grad has shape {g.shape}, expected {(cache.inputs.shape[0], params.output_dim)}")
    layer_inputs = [cache.inputs, *cache.hidden]
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = layer_inputs[i]
        grads[2 * i] = a_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i].T
            if params.activation == "tanh":
                g = g * (1.0 - layer_inputs[i] ** 2)
    return grads


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    worst_error: list[float]  # one entry per parameter array
    worst_index: list[tuple[int, ...]]

    @property
    def max_error(self) -> float:
        return max(self.worst_error, default=0.0)

    def offending(self) -> list[tuple[int, tuple[int, ...], float]]:
        return [
            (i, idx, err)
            for i, (idx, err) in enumerate(zip(self.worst_index, self.worst_error))
            if err >= self.tolerance
        ]


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_gradient(arrays: list[np.ndarray], loss_fn, h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. arrays (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):  # index in place: works for non-contiguous views too
            old = a[idx]
            a[idx] = old + h
            up = loss_fn()
            a[idx] = old - h
            down = loss_fn()
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def grad_check(arrays: list[np.ndarray], loss_fn, analytic: list[np.ndarray], tolerance: float = 1e-4,
               h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences, per parameter array.

    ``loss_fn`` takes no arguments and must read the (in-place perturbed)
    ``arrays``. Entries where both gradients are below 1e-8 count as exact.
    """
    numeric = numerical_gradient(arrays, loss_fn, h)
    worst, where = [], []
    for num, ana in zip(numeric, analytic):
        if num.size == 0:
            worst.append(0.0)
            where.append(())
            continue
        err = relative_error(ana, num)
        k = int(np.argmax(err))
        worst.append(float(err.reshape(-1)[k]))
        where.append(tuple(int(i) for i in np.unravel_index(k, num.shape)))
    passed = all(e < tolerance for e in worst)
    return GradCheckReport(passed, tolerance, worst, where)


# --- checkpoints -------------------------------------------------------------
#
# Binary layout (little endian):
#   8 bytes magic, u32 format version, u32 activation id, u32 n_sizes,
#   n_sizes * u32 layer sizes, then for every layer the row-major float64
#   weight matrix followed by the float64 bias vector.

def mlp_to_bytes(params: MlpParams) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<III", CHECKPOINT_VERSION, _ACTIVATIONS.index(params.activation), len(params.layer_sizes)),
        struct.pack(f"<{len(params.layer_sizes)}I", *params.layer_sizes),
    ]
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def mlp_from_bytes(buf: bytes, offset: int = 0) -> tuple[MlpParams, int]:
    """Parse one network starting at ``offset``; returns it and the end offset."""
    if buf[offset:offset + 8] != CHECKPOINT_MAGIC:
        raise ValueError("not an MLP checkpoint (bad magic)")
    offset += 8
    version, act_id, n = struct.unpack_from("<III", buf, offset)
    offset += 12
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n}I", buf, offset)
    offset += 4 * n
    weights, biases = [], []
    for i in range(n - 1):
        count = sizes[i] * sizes[i + 1]
        w = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(sizes[i], sizes[i + 1])
        offset += 8 * count
        b = np.frombuffer(buf, dtype="<f8", count=sizes[i + 1], offset=offset)
        offset += 8 * sizes[i + 1]
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpParams(sizes, weights, biases, _ACTIVATIONS[act_id]), offset


def mlp_to_json(params: MlpParams) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "activation": params.activation,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def mlp_from_json(record: dict) -> MlpParams:
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('format_version')}")
    return MlpParams(
        tuple(record["layer_sizes"]),
        [np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in
         zip(record["weights"], record["layer_sizes"][:-1], record["layer_sizes"][1:])],
        [np.array(b, dtype=np.float64) for b in record["biases"]],
        record.get("activation", "tanh"),
    )


def save_mlp(params: MlpParams, path, binary: bool = True) -> None:
    path = Path(path)
    if binary:
        path.write_bytes(mlp_to_bytes(params))
    else:
        path.write_text(json.dumps(mlp_to_json(params)))


def load_mlp(path) -> MlpParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(CHECKPOINT_MAGIC):
        return mlp_from_bytes(raw)[0]
    return mlp_from_json(json.loads(raw))
