"""Reverse-mode gradients and the small MLP used for learned fields.

Two routes compute the same derivatives:

* a scalar tape (:class:`Tape`, :class:`Var`) that records every primitive
  operation; it is general and slow, and is what :func:`forward_eval` /
  :func:`backward` use for a single input vector;
* a layer-level batched reverse pass (:meth:`MlpNet.forward_batch` /
  :meth:`MlpNet.backward_batch`) over many inputs at once, which is what the
  field models use inside optimization loops.

The scalar tape doubles as the reference for the batched pass in the tests.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# scalar tape
# ---------------------------------------------------------------------------


class Tape:
    """Flat record of scalar operations in evaluation order.

    ``parents[i]`` holds ``(operand_index, local_partial)`` pairs for node ``i``;
    operands always precede their consumer, so one reverse sweep suffices.
    """

    def __init__(self) -> None:
        self.values: list[float] = []
        self.parents: list[tuple[tuple[int, float], ...]] = []
        # filled by forward_eval
        self.outputs: list[Var] = []
        self.inputs: list[Var] = []

    def __len__(self) -> int:
        return len(self.values)

    def var(self, value: float) -> "Var":
        return self._push(float(value), ())

    def _push(self, value: float, parents: tuple[tuple[int, float], ...]) -> "Var":
        self.values.append(value)
        self.parents.append(parents)
        return Var(self, len(self.values) - 1, value)

    def adjoints(self, seeds: dict[int, float]) -> np.ndarray:
        """Reverse sweep; returns d(sum seed_i * node_i)/d(node) for every node."""
        adj = np.zeros(len(self.values))
        for idx, s in seeds.items():
            adj[idx] += s
        for i in range(len(self.values) - 1, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            for j, partial in self.parents[i]:
                adj[j] += a * partial
        return adj

    def grad(self, out: "Var", wrt: Sequence["Var"], seed: float = 1.0) -> np.ndarray:
        adj = self.adjoints({out.idx: seed})
        return np.array([adj[v.idx] for v in wrt])


class Var:
    """A scalar node on a :class:`Tape`. Supports the usual arithmetic."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: Tape, idx: int, value: float) -> None:
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self) -> str:
        return f"Var({self.value!r})"

    def __float__(self) -> float:
        return self.value

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.var(float(other))

    def __add__(self, other):
        if not isinstance(other, Var):
            return self.tape._push(self.value + float(other), ((self.idx, 1.0),))
        return self.tape._push(self.value + other.value, ((self.idx, 1.0), (other.idx, 1.0)))

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Var):
            return self.tape._push(self.value - float(other), ((self.idx, 1.0),))
        return self.tape._push(self.value - other.value, ((self.idx, 1.0), (other.idx, -1.0)))

    def __rsub__(self, other):
        return self.tape._push(float(other) - self.value, ((self.idx, -1.0),))

    def __mul__(self, other):
        if not isinstance(other, Var):
            c = float(other)
            return self.tape._push(self.value * c, ((self.idx, c),))
        return self.tape._push(
            self.value * other.value, ((self.idx, other.value), (other.idx, self.value))
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Var):
            c = float(other)
            return self.tape._push(self.value / c, ((self.idx, 1.0 / c),))
        q = self.value / other.value
        return self.tape._push(q, ((self.idx, 1.0 / other.value), (other.idx, -q / other.value)))

    def __rtruediv__(self, other):
        c = float(other)
        q = c / self.value
        return self.tape._push(q, ((self.idx, -q / self.value),))

    def __neg__(self):
        return self.tape._push(-self.value, ((self.idx, -1.0),))

    def __pow__(self, p):
        if isinstance(p, Var):
            # x**p = exp(p log x)
            return exp(p * log(self))
        p = float(p)
        return self.tape._push(self.value**p, ((self.idx, p * self.value ** (p - 1.0)),))


def _unary(x, value: float, partial: float):
    return x.tape._push(value, ((x.idx, partial),))


def exp(x):
    if isinstance(x, Var):
        v = math.exp(x.value)
        return _unary(x, v, v)
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return _unary(x, math.log(x.value), 1.0 / x.value)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        v = math.sqrt(x.value)
        return _unary(x, v, 0.5 / v)
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Var):
        return _unary(x, math.sin(x.value), math.cos(x.value))
    return np.sin(x)


def cos(x):
    if isinstance(x, Var):
        return _unary(x, math.cos(x.value), -math.sin(x.value))
    return np.cos(x)


def tanh(x):
    if isinstance(x, Var):
        v = math.tanh(x.value)
        return _unary(x, v, 1.0 - v * v)
    return np.tanh(x)


def _sigmoid_f(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _softplus_f(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        return math.log1p(math.exp(-abs(float(z)))) + max(float(z), 0.0)
    out = np.exp(-np.abs(z))
    np.log1p(out, out=out)
    out += np.maximum(z, 0.0)
    return out


def sigmoid(x):
    if isinstance(x, Var):
        v = float(_sigmoid_f(x.value))
        return _unary(x, v, v * (1.0 - v))
    return _sigmoid_f(x)


def softplus(x):
    if isinstance(x, Var):
        return _unary(x, float(_softplus_f(x.value)), float(_sigmoid_f(x.value)))
    return _softplus_f(x)


def relu(x):
    if isinstance(x, Var):
        return _unary(x, max(x.value, 0.0), 1.0 if x.value > 0 else 0.0)
    return np.maximum(x, 0.0)


def identity(x):
    return x


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

ACTIVATIONS = ("linear", "softplus", "sigmoid", "relu", "tanh")

_SCALAR_ACT: dict[str, Callable] = {
    "linear": identity,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "relu": relu,
    "tanh": tanh,
}


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "softplus":
        return _softplus_f(z)
    if name == "sigmoid":
        return _sigmoid_f(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_derivative(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "linear":
        return np.ones_like(z)
    if name == "softplus":
        return _sigmoid_f(z)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    W: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    activation: str


class MlpNet:
    """Fully connected network ``y = act(... act(x W1 + b1) ... W_k + b_k)``.

    All weights live in one flat vector :attr:`theta`; the per-layer ``W`` and
    ``b`` arrays are views into it, so an optimizer updating ``theta`` in place
    updates the network.
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str], theta: np.ndarray | None = None):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if len(activations) != len(dims) - 1:
            raise ValueError("one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.dims = dims
        self.activations = list(activations)
        n = sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
        if theta is None:
            theta = np.zeros(n)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {theta.shape}")
        self.theta = theta
        self.layers: list[Layer] = []
        off = 0
        for (i, o), act in zip(zip(dims[:-1], dims[1:]), self.activations):
            W = theta[off : off + i * o].reshape(i, o)
            off += i * o
            b = theta[off : off + o]
            off += o
            self.layers.append(Layer(W, b, act))

    @classmethod
    def init(cls, dims, activations, rng: np.random.Generator | int | None = 0) -> "MlpNet":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        net = cls(dims, activations)
        for layer in net.layers:
            fan_in, fan_out = layer.W.shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            layer.W[...] = rng.uniform(-lim, lim, size=layer.W.shape)
        return net

    @property
    def param_count(self) -> int:
        return self.theta.size

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def copy(self) -> "MlpNet":
        return MlpNet(self.dims, self.activations, self.theta.copy())

    def __call__(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        for layer in self.layers:
            h = _act_forward(layer.activation, h @ layer.W + layer.b)
        return h

    def forward_batch(self, X: np.ndarray) -> tuple[np.ndarray, list]:
        """Evaluate on rows of ``X`` and keep what the reverse pass needs."""
        h = np.asarray(X, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ValueError(f"expected (n, {self.in_dim}) input, got {h.shape}")
        cache = []
        for layer in self.layers:
            z = h @ layer.W + layer.b
            a = _act_forward(layer.activation, z)
            cache.append((h, z, a))
            h = a
        return h, cache

    def backward_batch(self, cache: list, G: np.ndarray, want_input: bool = False):
        """Gradient of ``sum(G * Y)`` w.r.t. :attr:`theta` (and optionally ``X``)."""
        grad = np.zeros_like(self.theta)
        offsets = []
        off = 0
        for layer in self.layers:
            i, o = layer.W.shape
            offsets.append(off)
            off += i * o + o
        g = np.asarray(G, dtype=np.float64)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h, z, a = cache[k]
            gz = g * _act_derivative(layer.activation, z, a)
            i, o = layer.W.shape
            off = offsets[k]
            grad[off : off + i * o] = (h.T @ gz).ravel()
            grad[off + i * o : off + i * o + o] = gz.sum(axis=0)
            if k > 0 or want_input:
                g = gz @ layer.W.T
        if want_input:
            return grad, g
        return grad


def forward_eval(net: MlpNet, x: Sequence[float]) -> tuple[np.ndarray, Tape]:
    """Evaluate ``net`` on one input vector while recording a scalar tape."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != net.in_dim:
        raise ValueError(f"input has {x.size} entries, network expects {net.in_dim}")
    tape = Tape()
    params = [tape.var(v) for v in net.theta]
    tape.inputs = params
    off = 0
    h: list = [float(v) for v in x]
    for layer in net.layers:
        n_in, n_out = layer.W.shape
        Wv = params[off : off + n_in * n_out]
        off += n_in * n_out
        bv = params[off : off + n_out]
        off += n_out
        act = _SCALAR_ACT[layer.activation]
        out = []
        for j in range(n_out):
            acc = bv[j]
            for i in range(n_in):
                acc = acc + Wv[i * n_out + j] * h[i]
            out.append(act(acc))
        h = out
    tape.outputs = h
    y = np.array([v.value for v in h])
    return y, tape


def backward(tape: Tape, seed) -> np.ndarray:
    """Gradient of ``seed . output`` w.r.t. the tape's parameters."""
    if len(tape) == 0:
        return np.zeros(0)
    seed = np.broadcast_to(np.asarray(seed, dtype=float), (len(tape.outputs),))
    seeds: dict[int, float] = {}
    for out, s in zip(tape.outputs, seed):
        seeds[out.idx] = seeds.get(out.idx, 0.0) + float(s)
    adj = tape.adjoints(seeds)
    return np.array([adj[p.idx] for p in tape.inputs])


# ---------------------------------------------------------------------------
# spatial gradient by central differences
# ---------------------------------------------------------------------------

_AXES = np.eye(3)


def stencil_points(x: np.ndarray, h: float) -> np.ndarray:
    """(n, 6, 3) array of x +/- h e_i, ordered (+x, -x, +y, -y, +z, -z)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    offs = np.stack([_AXES[0], -_AXES[0], _AXES[1], -_AXES[1], _AXES[2], -_AXES[2]]) * h
    return x[:, None, :] + offs[None, :, :]


def spatial_gradient(sigma: Callable[[np.ndarray], np.ndarray], x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar field at one or many points."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    P = stencil_points(x, h)
    vals = np.asarray(sigma(P.reshape(-1, 3)), dtype=np.float64).reshape(-1, 6)
    g = (vals[:, 0::2] - vals[:, 1::2]) / (2.0 * h)
    return g[0] if single else g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Adam with a fixed learning rate, updating a flat parameter array in place."""

    param_count: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.first_moment is None:
            self.first_moment = np.zeros(self.param_count)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.param_count)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if params.shape != (self.param_count,) or grad.shape != (self.param_count,):
            raise ValueError("parameter/gradient size does not match optimizer state")
        self.step_count += 1
        t = self.step_count
        m, v = self.first_moment, self.second_moment
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"TFG1"
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def write_net(net: MlpNet, f: BinaryIO) -> None:
    """Little-endian: magic, layer count, (in, out, activation) per layer, then
    each layer's weights (row-major, in x out) followed by its biases."""
    f.write(MAGIC)
    f.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        i, o = layer.W.shape
        f.write(struct.pack("<III", i, o, _ACT_CODES[layer.activation]))
    for layer in net.layers:
        f.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def read_net(f: BinaryIO) -> MlpNet:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    (n_layers,) = struct.unpack("<I", _read_exact(f, 4))
    dims: list[int] = []
    acts: list[str] = []
    for k in range(n_layers):
        i, o, code = struct.unpack("<III", _read_exact(f, 12))
        if k == 0:
            dims.append(i)
        elif dims[-1] != i:
            raise ValueError("layer dimensions do not chain")
        dims.append(o)
        if code >= len(ACTIVATIONS):
            raise ValueError(f"unknown activation code {code}")
        acts.append(ACTIVATIONS[code])
    n = sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    theta = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").astype(np.float64)
    return MlpNet(dims, acts, theta)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def save_net(net: MlpNet, path: str | Path) -> None:
    with open(path, "wb") as f:
        write_net(net, f)


def load_net(path: str | Path) -> MlpNet:
    with open(path, "rb") as f:
        return read_net(f)


def net_to_bytes(net: MlpNet) -> bytes:
    buf = io.BytesIO()
    write_net(net, buf)
    return buf.getvalue()


def net_from_bytes(data: bytes) -> MlpNet:
    return read_net(io.BytesIO(data))
