"""Feed-forward Q-network with explicit-order floating-point reductions.

All parameters and activations are float32.  Every dot product (forward
pass, batch gradient sums, back-propagated errors) goes through
:func:`ordered_matmul`, whose summation order is fixed by the
:class:`ComputeMode`:

* ``DETERMINISTIC`` -- each output element is ``((0 + p_0) + p_1) + ...``
  with products ``p_k`` taken in ascending ``k``.
* ``PERTURBED`` -- each output element sums the same products in a
  pseudo-random order: a Fisher-Yates permutation of ``k`` shared by the
  whole product, entered at a random rotation chosen per output element.
  Both are keyed by one word drawn from the compute stream per product.
  In exact arithmetic the result is unchanged; in float32 the rounding
  differs, which is the desk-scale stand-in for nondeterministic GPU
  kernels.

Zero inputs are skipped in both modes.  Products with a zero input are
signed zeros and an accumulator that starts at +0.0 can never become -0.0
under round-to-nearest, so skipping them leaves every result bit unchanged.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``h @ W + b``.  The canonical parameter order (initialization, hashing,
serialization, optimizer state) is ``W0, b0, W1, b1, ...`` with each array
in row-major order.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from detrl.rng import RandomStream

FLOAT = np.float32

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _matmul_ascending(a, b):
    m_rows, k_dim = a.shape
    n_cols = b.shape[1]
    out = np.zeros((m_rows, n_cols), dtype=a.dtype)
    for m in range(m_rows):
        for k in range(k_dim):
            x = a[m, k]
            if x == 0.0:
                continue
            for n in range(n_cols):
                out[m, n] += x * b[k, n]
    return out


@numba.njit(cache=True)
def _matmul_permuted(a, b, key):
    m_rows, k_dim = a.shape
    n_cols = b.shape[1]
    out = np.zeros((m_rows, n_cols), dtype=a.dtype)
    # one Fisher-Yates permutation of k shared by the whole product ...
    perm = np.empty(k_dim, dtype=np.int64)
    for i in range(k_dim):
        perm[i] = i
    state = _mix64(key)
    for i in range(k_dim - 1, 0, -1):
        state += _GAMMA
        j = np.int64(((_mix64(state) >> np.uint64(32)) * np.uint64(i + 1)) >> np.uint64(32))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    # ... entered at an independent random rotation for every output element.
    # Per row only the nonzero terms are walked: rotating the full walk and
    # dropping zeros equals rotating the compressed walk at the first
    # nonzero position at or after the offset.
    nz_pos = np.empty(k_dim, dtype=np.int64)
    nz_k = np.empty(2 * k_dim, dtype=np.int64)
    start = np.empty(n_cols, dtype=np.int64)
    acc = np.empty(n_cols, dtype=a.dtype)
    for m in range(m_rows):
        cnt = 0
        for p in range(k_dim):
            k = perm[p]
            if a[m, k] != 0.0:
                nz_pos[cnt] = p
                nz_k[cnt] = k
                cnt += 1
        if cnt == 0:
            continue
        for i in range(cnt):
            nz_k[cnt + i] = nz_k[i]
        for n in range(n_cols):
            r = _mix64(key ^ _mix64(np.uint64(m * n_cols + n) + _GAMMA))
            offset = np.int64(((r >> np.uint64(32)) * np.uint64(k_dim)) >> np.uint64(32))
            lo, hi = 0, cnt
            while lo < hi:
                mid = (lo + hi) >> 1
                if nz_pos[mid] < offset:
                    lo = mid + 1
                else:
                    hi = mid
            start[n] = lo if lo < cnt else 0
            acc[n] = 0.0
        for i in range(cnt):
            for n in range(n_cols):
                k = nz_k[start[n] + i]
                acc[n] += a[m, k] * b[k, n]
        out[m, :] = acc
    return out


@numba.njit(cache=True)
def _fnv1a64(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


class ComputeKind(enum.Enum):
    DETERMINISTIC = "deterministic"
    PERTURBED = "perturbed_reduction"


@dataclass
class ComputeMode:
    kind: ComputeKind = ComputeKind.DETERMINISTIC
    stream: RandomStream | None = None

    def __post_init__(self):
        if (self.kind is ComputeKind.PERTURBED) != (self.stream is not None):
            raise ValueError("a compute stream is required iff the mode is PERTURBED")

    @classmethod
    def deterministic(cls) -> "ComputeMode":
        return cls()

    @classmethod
    def perturbed(cls, stream: RandomStream) -> "ComputeMode":
        return cls(ComputeKind.PERTURBED, stream)

    @property
    def is_deterministic(self) -> bool:
        return self.kind is ComputeKind.DETERMINISTIC


DETERMINISTIC = ComputeMode()


def ordered_matmul(a: np.ndarray, b: np.ndarray, mode: ComputeMode = DETERMINISTIC) -> np.ndarray:
    """``a @ b`` with the summation order prescribed by ``mode``.

    Works for any float dtype (float64 is used by test oracles).  A
    PERTURBED call consumes exactly one word of the compute stream.
    """
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if mode.is_deterministic:
        return _matmul_ascending(a, b)
    return _matmul_permuted(a, b, np.uint64(mode.stream.next_u64()))


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass
class QNetwork:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != shape or b.shape != shape[1:]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {shape}")
            if w.dtype != FLOAT or b.dtype != FLOAT:
                raise TypeError("parameters must be float32")

    @property
    def n_actions(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "QNetwork":
        return QNetwork(self.layer_sizes, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def bitwise_equal(self, other: "QNetwork") -> bool:
        if self.layer_sizes != other.layer_sizes:
            return False
        return all(np.array_equal(p.view(np.uint32), q.view(np.uint32))
                   for p, q in zip(self.params(), other.params()))

    @classmethod
    def zeros(cls, layer_sizes) -> "QNetwork":
        sizes = _check_sizes(layer_sizes)
        return cls(sizes,
                   [np.zeros((i, o), FLOAT) for i, o in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(o, FLOAT) for o in sizes[1:]])


def _check_sizes(layer_sizes) -> tuple[int, ...]:
    sizes = tuple(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("a network needs at least an input and an output layer")
    if any(not isinstance(s, (int, np.integer)) or s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive integers, got {sizes}")
    return tuple(int(s) for s in sizes)


def init_network(layer_sizes, init_stream: RandomStream) -> QNetwork:
    """Gaussian weights scaled by ``1/sqrt(fan_in)``, zero biases.

    Draws are taken layer by layer, row-major over each ``(fan_in,
    fan_out)`` matrix.
    """
    sizes = _check_sizes(layer_sizes)
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        vals = [init_stream.next_gaussian() * scale for _ in range(fan_in * fan_out)]
        weights.append(np.array(vals, dtype=np.float64).astype(FLOAT).reshape(fan_in, fan_out))
    return QNetwork(sizes, weights, [np.zeros(o, FLOAT) for o in sizes[1:]])


def _as_batch(net: QNetwork, states) -> np.ndarray:
    x = np.asarray(states, dtype=FLOAT)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"expected input width {net.layer_sizes[0]}, got shape {np.shape(states)}")
    return x


def _forward_cache(net, x, mode):
    acts, pres = [x], []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = ordered_matmul(h, w, mode) + b
        pres.append(z)
        h = z if i == last else np.where(z > 0, z, FLOAT(0))
        acts.append(h)
    return acts, pres


def forward(net: QNetwork, states, mode: ComputeMode = DETERMINISTIC) -> np.ndarray:
    """Action values for one state (1-D result) or a batch (2-D result)."""
    single = np.ndim(states) == 1
    acts, _ = _forward_cache(net, _as_batch(net, states), mode)
    return acts[-1][0] if single else acts[-1]


def greedy_action(q_values: np.ndarray) -> int:
    """Argmax over action values; the lowest index wins ties."""
    return int(np.argmax(q_values))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float = 0.0

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(net: QNetwork, states, actions, targets, mode: ComputeMode = DETERMINISTIC) -> Gradients:
    """Gradient of ``mean_i (target_i - Q(s_i, a_i))**2``.

    Only the output unit of the taken action receives error.  Sums over the
    batch are ordered reductions like every other dot product.
    """
    x = _as_batch(net, states)
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty minibatch")
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=FLOAT)
    if actions.shape != (batch,) or targets.shape != (batch,):
        raise ValueError("states, actions and targets must have the same length")
    if actions.min() < 0 or actions.max() >= net.n_actions:
        raise ValueError("action index out of range")

    acts, pres = _forward_cache(net, x, mode)
    rows = np.arange(batch)
    err = targets - acts[-1][rows, actions]
    loss = float(np.dot(err.astype(np.float64), err.astype(np.float64)) / batch)

    delta = np.zeros_like(acts[-1])
    delta[rows, actions] = FLOAT(-2.0 / batch) * err
    ones = np.ones((1, batch), dtype=FLOAT)
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gw[i] = ordered_matmul(acts[i].T, delta, mode)
        gb[i] = ordered_matmul(ones, delta, mode)[0]
        if i > 0:
            back = ordered_matmul(delta, net.weights[i].T, mode)
            delta = np.where(pres[i - 1] > 0, back, FLOAT(0))
    return Gradients(gw, gb, loss)


@dataclass
class RMSProp:
    """Uncentered RMSProp with the stabilizer inside the square root."""

    learning_rate: float = 1e-3
    decay: float = 0.95
    epsilon_stab: float = 1e-5
    accumulators: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: QNetwork, **kwargs) -> "RMSProp":
        opt = cls(**kwargs)
        opt.accumulators = [np.zeros_like(p) for p in net.params()]
        return opt


def apply_update(net: QNetwork, grads: Gradients, opt: RMSProp) -> QNetwork:
    """One RMSProp step, in place, over the canonical parameter order."""
    params, gparams = net.params(), grads.params()
    if len(gparams) != len(params) or len(opt.accumulators) != len(params):
        raise ValueError("gradient/optimizer structure does not match the network")
    for g in gparams:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    decay = FLOAT(opt.decay)
    keep = FLOAT(1.0 - opt.decay)
    lr = FLOAT(opt.learning_rate)
    eps = FLOAT(opt.epsilon_stab)
    for p, g, acc in zip(params, gparams, opt.accumulators):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        acc *= decay
        acc += keep * (g * g)
        p -= lr * g / np.sqrt(acc + eps)
    return net


def weight_hash(net: QNetwork) -> int:
    """64-bit FNV-1a over the little-endian bytes of all parameters."""
    data = np.concatenate([p.astype("<f4").ravel() for p in net.params()]).view(np.uint8)
    return int(_fnv1a64(data))


def format_hash(h: int) -> str:
    return f"{h:016x}"


_MAGIC = b"DQNW"
_VERSION = 1


def network_to_bytes(net: QNetwork) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HH", _VERSION, len(net.layer_sizes)))
    buf.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    for p in net.params():
        buf.write(p.astype("<f4").tobytes(order="C"))
    return buf.getvalue()


def network_from_bytes(data: bytes) -> QNetwork:
    if data[:4] != _MAGIC:
        raise ValueError("not a serialized QNetwork (bad magic)")
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported network format version {version}")
    offset = 8
    sizes = struct.unpack_from(f"<{n_layers}I", data, offset)
    offset += 4 * n_layers
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, "<f4", fan_in * fan_out, offset).reshape(fan_in, fan_out)
        offset += 4 * fan_in * fan_out
        b = np.frombuffer(data, "<f4", fan_out, offset)
        offset += 4 * fan_out
        weights.append(w.astype(FLOAT))
        biases.append(b.astype(FLOAT))
    if offset != len(data):
        raise ValueError("trailing bytes after network payload")
    return QNetwork(sizes, weights, biases)


def save_network(net: QNetwork, path) -> None:
    with open(path, "wb") as f:
        f.write(network_to_bytes(net))


def load_network(path) -> QNetwork:
    with open(path, "rb") as f:
        return network_from_bytes(f.read())
