"""
Dense float64 tensors with reverse-mode gradients.

Only the ops the learnable L2 extractor and the threshold MLP need are provided. Each op records its
parents and a backward closure on the output tensor; `Tensor.backward` walks that graph in reverse
topological order. Recurrent layers are one coarse op (`gru_sequence`) with hand-written BPTT.

Usage:
    w = Tensor(np.ones((4, 2)), requires_grad=True)
    loss = tsum(relu(x @ w))
    loss.backward()
    w.grad  # same shape as w
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .ctc_ops import CollapseMode, PosteriorSequence, ctc_occupancy
from .dsp_ops import FeatureSequence
from .errors import NoGraph, NonFiniteValue, ShapeError
from .io_ops import tensor_hash

logger = logging.getLogger(__name__)


class Tensor:
    """A value plus (optionally) the recorded computation that produced it"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"{op} produced a non-finite value")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        """
        Populate `.grad` on every leaf with requires_grad that this scalar depends on.

        Gradients accumulate: calling backward twice without zero_grad adds the second pass onto the first.
        """

        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise NoGraph("backward called on a tensor with no recorded computation")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                grads[id(parent)] = grads[id(parent)] + pg if id(parent) in grads else pg


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n, k) @ (k, m), got {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis"""

    out = a.data - logsumexp(a.data, axis=-1, keepdims=True)
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def gru_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """
    One gated recurrent layer over a whole (T, in) sequence, h0 = 0.

    Gates are laid out [z, r, n] along the 3H axis:
        z = sigmoid(x Wxz + h Whz + bz)
        r = sigmoid(x Wxr + h Whr + br)
        n = tanh(x Wxn + (r * h) Whn + bn)
        h' = z * h + (1 - z) * n

    With reverse=True the sequence is consumed last-to-first; output row t is always the state after frame t.
    """

    T = x.shape[0]
    H = wh.shape[0]
    if wx.shape != (x.shape[1], 3 * H) or wh.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise ShapeError(f"GRU weights {wx.shape}, {wh.shape}, {b.shape} do not fit input {x.shape} and hidden {H}")

    gx = x.data @ wx.data + b.data
    wh_zr, wh_n = wh.data[:, : 2 * H], wh.data[:, 2 * H :]
    steps = range(T - 1, -1, -1) if reverse else range(T)

    out = np.zeros((T, H))
    h_prev = np.zeros((T, H))
    z_all, r_all, n_all = np.zeros((T, H)), np.zeros((T, H)), np.zeros((T, H))
    h = np.zeros(H)
    for t in steps:
        zr = expit(gx[t, : 2 * H] + h @ wh_zr)
        z, r = zr[:H], zr[H:]
        n = np.tanh(gx[t, 2 * H :] + (r * h) @ wh_n)
        h_prev[t], z_all[t], r_all[t], n_all[t] = h, z, r, n
        h = z * h + (1 - z) * n
        out[t] = h

    def backward(g):
        d_gx = np.zeros((T, 3 * H))
        d_wh = np.zeros((H, 3 * H))
        dh_next = np.zeros(H)
        for t in reversed(list(steps)):
            hp, z, r, n = h_prev[t], z_all[t], r_all[t], n_all[t]
            dh = g[t] + dh_next
            dz = dh * (hp - n)
            dn = dh * (1 - z)
            dh_prev = dh * z

            dan = dn * (1 - n * n)
            d_hr = dan @ wh_n.T
            d_wh[:, 2 * H :] += np.outer(r * hp, dan)
            dr = d_hr * hp
            dh_prev += d_hr * r

            da_zr = np.concatenate([dz * z * (1 - z), dr * r * (1 - r)])
            d_wh[:, : 2 * H] += np.outer(hp, da_zr)
            dh_prev += da_zr @ wh_zr.T

            d_gx[t, : 2 * H] = da_zr
            d_gx[t, 2 * H :] = dan
            dh_next = dh_prev
        return d_gx @ wx.data.T, x.data.T @ d_gx, d_wh, d_gx.sum(axis=0)

    return _make(out, (x, wx, wh, b), backward, "gru_sequence")


def ctc_loss_op(log_probs: Tensor, target: Sequence[int], blank_index: int | None) -> Tensor:
    """
    Scalar CTC loss of a (T, V) log-probability tensor; blank_index None selects the blank-free mode.

    The backward pass gives -gamma with respect to the log-probabilities, which composed with
    log_softmax yields the familiar softmax - gamma on the logits.
    """

    mode = CollapseMode.REPEAT_MERGE if blank_index is None else CollapseMode.STANDARD_CTC
    loss, gamma = ctc_occupancy(PosteriorSequence(log_probs.data, blank_index), target, mode)
    return _make(np.asarray(loss), (log_probs,), lambda g: (-float(g) * gamma,), "ctc_loss")


def numeric_grad(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function with respect to `array`, perturbed in place"""

    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + step
        plus = fn()
        array[idx] = original - step
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


@dataclass(eq=False)
class GruStack:
    """Bidirectional GRU layers, then a linear classifier and a log-softmax head"""

    params: dict[str, Tensor]
    input_dim: int
    hidden: int = 128
    n_out: int = 42
    n_layers: int = 2
    classifier_bias: bool = True

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def content_hash(self) -> str:
        return tensor_hash(self.to_arrays())

    def copy(self) -> "GruStack":
        params = {name: Tensor(p.data.copy(), requires_grad=True) for name, p in self.params.items()}
        return GruStack(params, self.input_dim, self.hidden, self.n_out, self.n_layers, self.classifier_bias)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (shape-checked)"""

        for name, p in self.params.items():
            if name not in arrays or arrays[name].shape != p.shape:
                raise ShapeError(f"Parameter {name} missing or misshaped in the supplied arrays")
            p.data = np.array(arrays[name], dtype=np.float64)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], classifier_bias: bool | None = None) -> "GruStack":
        n_layers = len({name.split(".")[0] for name in arrays if name.startswith("gru")})
        hidden = arrays["gru0.fwd.wh"].shape[0]
        input_dim = arrays["gru0.fwd.wx"].shape[0]
        n_out = arrays["classifier.w"].shape[1]
        if classifier_bias is None:
            classifier_bias = "classifier.b" in arrays
        params = {name: Tensor(np.array(value), requires_grad=True) for name, value in arrays.items()}
        return cls(params, input_dim, hidden, n_out, n_layers, classifier_bias)


def init_gru_stack(
    input_dim: int,
    hidden: int = 128,
    n_out: int = 42,
    n_layers: int = 2,
    classifier_bias: bool = True,
    seed: int = 0,
) -> GruStack:
    """Uniform(+-1/sqrt(fan_in)) initialisation, fan_in being the input width of each weight"""

    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    in_dim = input_dim
    for layer in range(n_layers):
        for direction in ("fwd", "bwd"):
            prefix = f"gru{layer}.{direction}"
            bound_x, bound_h = 1 / np.sqrt(in_dim), 1 / np.sqrt(hidden)
            params[f"{prefix}.wx"] = Tensor(rng.uniform(-bound_x, bound_x, (in_dim, 3 * hidden)), requires_grad=True)
            params[f"{prefix}.wh"] = Tensor(rng.uniform(-bound_h, bound_h, (hidden, 3 * hidden)), requires_grad=True)
            params[f"{prefix}.b"] = Tensor(rng.uniform(-bound_h, bound_h, 3 * hidden), requires_grad=True)
        in_dim = 2 * hidden

    bound = 1 / np.sqrt(in_dim)
    params["classifier.w"] = Tensor(rng.uniform(-bound, bound, (in_dim, n_out)), requires_grad=True)
    if classifier_bias:
        params["classifier.b"] = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True)
    return GruStack(params, input_dim, hidden, n_out, n_layers, classifier_bias)


def bidirectional_gru(x: Tensor, model: GruStack, layer: int) -> Tensor:
    """One layer, output columns are [forward states, backward states]"""

    p = model.params
    fwd = gru_sequence(x, p[f"gru{layer}.fwd.wx"], p[f"gru{layer}.fwd.wh"], p[f"gru{layer}.fwd.b"])
    bwd = gru_sequence(x, p[f"gru{layer}.bwd.wx"], p[f"gru{layer}.bwd.wh"], p[f"gru{layer}.bwd.b"], reverse=True)
    return concat([fwd, bwd], axis=1)


def gru_stack_log_probs(x: Tensor, model: GruStack) -> Tensor:
    """Recorded forward pass: (T, input_dim) features to (T, n_out) log-probabilities"""

    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"GRU stack needs a non-empty (T, dim) input, got shape {x.shape}")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"Feature dim {x.shape[1]} does not match model input dim {model.input_dim}")

    h = x
    for layer in range(model.n_layers):
        h = bidirectional_gru(h, model, layer)
    logits = h @ model.params["classifier.w"]
    if model.classifier_bias:
        logits = logits + model.params["classifier.b"]
    return log_softmax(logits)


def forward_gru_stack(features: FeatureSequence | np.ndarray, model: GruStack, blank_index: int | None = 0) -> PosteriorSequence:
    """
    Phoneme posteriors for a feature sequence, no graph recorded.

    Args:
        - features (FeatureSequence | np.ndarray): (T, input_dim) rows
        - model (GruStack): Extractor snapshot
        - blank_index (int | None): Blank symbol attached to the result

    Returns:
        - PosteriorSequence: (T, n_out) log-probabilities, each row log-sum-exps to 0
    """

    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features, dtype=np.float64)
    frozen = GruStack(
        {name: Tensor(p.data) for name, p in model.params.items()},
        model.input_dim,
        model.hidden,
        model.n_out,
        model.n_layers,
        model.classifier_bias,
    )
    log_probs = gru_stack_log_probs(Tensor(frames), frozen)
    return PosteriorSequence(log_probs.data, blank_index)


def gru_stack_ops(input_dim: int, hidden: int, n_out: int, n_layers: int = 2) -> int:
    """Multiply-adds per feature row: 3 gates x (input and recurrent matmuls) per direction, plus the classifier"""

    total = 0
    in_dim = input_dim
    for _ in range(n_layers):
        total += 2 * 3 * (in_dim * hidden + hidden * hidden)
        in_dim = 2 * hidden
    return total + in_dim * n_out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One Adam update.

    Moments decay everywhere; parameters move only where the gradient is non-zero.

    Returns:
        - tuple[dict[str, np.ndarray], AdamState]: New parameter arrays and the new optimizer state
    """

    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError(f"Gradient for {name} has shape {g.shape}, parameter has {value.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        update = np.where(g != 0, lr * m_hat / (np.sqrt(v_hat) + eps), 0.0)
        new_params[name] = value - update
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


class Adam:
    """Adam over a dict of named parameter tensors"""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        values = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        new_values, self.state = adam_step(values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for name, p in self.params.items():
            p.data = new_values[name]

    def state_arrays(self) -> dict:
        return {"t": self.state.t, "m": {k: v.copy() for k, v in self.state.m.items()}, "v": {k: v.copy() for k, v in self.state.v.items()}}

    def restore(self, arrays: dict) -> None:
        self.state = AdamState({k: v.copy() for k, v in arrays["m"].items()}, {k: v.copy() for k, v in arrays["v"].items()}, arrays["t"])
