"""Dense multilayer-perceptron engine.

Forward pass with trace retention, softmax cross-entropy, reverse-mode
gradients for parameters and vector-Jacobian products with respect to the
input.  The vector-Jacobian product can also be recorded as a tape so that
the squared norm of ``v J`` can itself be differentiated with respect to the
parameters; that is all the higher-order machinery the Jacobian regularizer
needs.

Arrays are plain ``numpy.ndarray`` in row-major order, float64 by default.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionError(ValueError):
    """Shapes do not chain or do not match the model."""


class StateError(RuntimeError):
    """A trace was used with a model it was not produced by."""


class CheckpointError(ValueError):
    """A checkpoint file could not be parsed."""


def activate(kind: str, zhat: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(zhat)
    if kind == "relu":
        return np.maximum(zhat, 0.0)
    if kind == "identity":
        return zhat
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivs(kind: str, zhat: np.ndarray, z: np.ndarray | None = None):
    """Return ``(sigma', sigma'')`` evaluated at the preactivation.

    ``z`` may be passed to reuse ``tanh(zhat)``.  relu uses ``sigma'(0) = 0``
    and ``sigma'' = 0`` everywhere.
    """
    if kind == "tanh":
        t = np.tanh(zhat) if z is None else z
        d1 = 1.0 - t * t
        return d1, -2.0 * t * d1
    if kind == "relu":
        return (zhat > 0).astype(zhat.dtype), np.zeros_like(zhat)
    if kind == "identity":
        return np.ones_like(zhat), np.zeros_like(zhat)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    W: np.ndarray  # (n_out, n_in)
    b: np.ndarray  # (n_out,)
    activation: str = "tanh"

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class Mlp:
    """Fully connected classifier; the last layer emits logits."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("an Mlp needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.W.ndim != 2 or layer.b.shape != (layer.W.shape[0],):
                raise DimensionError(f"layer {i}: W {layer.W.shape} vs b {layer.b.shape}")
            if i and layer.n_in != self.layers[i - 1].n_out:
                raise DimensionError(
                    f"layer {i} expects {layer.n_in} inputs but layer {i - 1} "
                    f"emits {self.layers[i - 1].n_out}"
                )
        if self.layers[-1].activation != "identity":
            raise DimensionError("the final layer must be identity (logits)")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def dtype(self):
        return self.layers[0].W.dtype

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the order W1, b1, W2, b2, ... (live views)."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def astype(self, dtype) -> "Mlp":
        return Mlp(
            [Layer(l.W.astype(dtype), l.b.astype(dtype), l.activation) for l in self.layers]
        )

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class ParamGrads:
    """One gradient array per weight matrix and bias vector."""

    dW: list[np.ndarray]
    db: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: Mlp) -> "ParamGrads":
        return cls(
            [np.zeros_like(l.W) for l in model.layers],
            [np.zeros_like(l.b) for l in model.layers],
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.dW, self.db):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def scaled(self, s: float) -> "ParamGrads":
        return ParamGrads([s * w for w in self.dW], [s * b for b in self.db])

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            [a + b for a, b in zip(self.dW, other.dW)],
            [a + b for a, b in zip(self.db, other.db)],
        )

    def max_abs_diff(self, other: "ParamGrads") -> float:
        return float(np.max(np.abs(self.flat() - other.flat())))


@dataclass
class ForwardTrace:
    """Everything a backward pass needs from one forward pass.

    ``inputs[l]`` is the array actually multiplied by layer ``l`` (after
    dropout), ``zhat[l]``/``z[l]`` its pre- and post-activation, and
    ``masks[l]`` the scaled dropout mask applied to ``inputs[l]`` or None.
    """

    inputs: list[np.ndarray]
    zhat: list[np.ndarray]
    z: list[np.ndarray]
    masks: list[np.ndarray | None]
    model_id: int = field(default=0, repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def logits(self) -> np.ndarray:
        return self.z[-1]

    @property
    def batch_size(self) -> int | None:
        """Rows in the trace (None for a tiled trace that kept no arrays)."""
        return next((a.shape[0] for a in self.zhat if a is not None), None)

    def repeat(self, k: int, include_output: bool = True) -> "ForwardTrace":
        """Trace of the batch tiled ``k`` times along axis 0 (block-major).

        Layer inputs are not tiled; the copy only serves vector-Jacobian tapes.
        With ``include_output=False`` the output layer's arrays are left as
        None, which suffices for tapes with one-hot projections.
        """
        tile = lambda a: None if a is None else np.tile(a, (k, 1))  # noqa: E731
        zhat = [tile(a) for a in self.zhat]
        z = [tile(a) for a in self.z]
        if not include_output:
            zhat[-1] = z[-1] = None
        return ForwardTrace(
            [None] * len(self.inputs),
            zhat,
            z,
            [tile(m) for m in self.masks],
            self.model_id,
        )


def xavier_init(
    layer_dims: Sequence[int],
    activations: Sequence[str] | str = "tanh",
    seed: int = 0,
    dtype=np.float64,
) -> Mlp:
    """Uniform Xavier initialization with zero biases.

    ``activations`` may be a single hidden-layer kind or one entry per layer;
    the last layer is forced to identity when a single kind is given.
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise DimensionError("layer_dims needs an input and at least one output width")
    if any(int(d) < 1 for d in dims):
        raise DimensionError(f"non-positive width in {dims}")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        acts = [activations] * (n_layers - 1) + ["identity"]
    else:
        acts = list(activations)
        if len(acts) != n_layers:
            raise DimensionError(f"{len(acts)} activations for {n_layers} layers")
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out, act in zip(dims[:-1], dims[1:], acts):
        a = np.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-a, a, size=(n_out, n_in)).astype(dtype)
        layers.append(Layer(W, np.zeros(n_out, dtype=dtype), act))
    return Mlp(layers)


def forward(
    model: Mlp,
    X: np.ndarray,
    dropout_rate: float = 0.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on a batch ``X`` of shape ``(B, n_in)``.

    Inverted dropout is applied, in train mode only, to the input of every
    layer after the first (the hidden activations).  Returns the logits and
    the trace.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise DimensionError(f"input shape {X.shape} does not match width {model.n_in}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    use_dropout = train_mode and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - dropout_rate
    inputs, zhats, zs, masks = [], [], [], []
    a = X
    for i, layer in enumerate(model.layers):
        mask = None
        if use_dropout and i > 0:
            mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
            a = a * mask
        zhat = a @ layer.W.T + layer.b
        z = activate(layer.activation, zhat)
        inputs.append(a)
        zhats.append(zhat)
        zs.append(z)
        masks.append(mask)
        a = z
    return a, ForwardTrace(inputs, zhats, zs, masks, id(model))


def predict(model: Mlp, X: np.ndarray, batch: int = 2000) -> np.ndarray:
    """Argmax class per row (ties go to the lowest index)."""
    X = np.atleast_2d(X)
    out = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], batch):
        logits, _ = forward(model, X[s : s + batch])
        out[s : s + batch] = np.argmax(logits, axis=1)
    return out


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    s = logits / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, temperature: float = 1.0
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if labels.shape[0] != B:
        raise DimensionError(f"{labels.shape[0]} labels for {B} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"labels must lie in [0, {C})")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = logits / temperature
    s = s - s.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(s).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsumexp - s[rows, labels]))
    p = np.exp(s - logsumexp[:, None])
    p[rows, labels] -= 1.0
    return loss, p / (B * temperature)


def _check_trace(model: Mlp, trace: ForwardTrace) -> None:
    if trace.model_id and trace.model_id != id(model):
        raise StateError("trace was produced by a different model")
    if len(trace.zhat) != len(model.layers):
        raise StateError(
            f"trace has {len(trace.zhat)} layers, model has {len(model.layers)}"
        )
    for layer, zhat in zip(model.layers, trace.zhat):
        if zhat is not None and zhat.shape[1] != layer.n_out:
            raise StateError("trace widths do not match the model")


def backward(
    model: Mlp,
    trace: ForwardTrace,
    zhat_bars: Sequence[np.ndarray | None],
    grads: ParamGrads | None = None,
    need_input: bool = False,
    need_params: bool = True,
):
    """Reverse pass given adjoints injected at each layer's preactivation.

    ``zhat_bars[l]`` is the direct contribution to dLoss/dzhat[l] (or None).
    Gradients are accumulated into ``grads`` when given.  Returns
    ``(grads, x_bar)`` where ``x_bar`` is None unless ``need_input``.
    """
    _check_trace(model, trace)
    if grads is None and need_params:
        grads = ParamGrads.zeros_like(model)
    L = len(model.layers)
    carry = None
    x_bar = None
    for i in range(L - 1, -1, -1):
        layer = model.layers[i]
        g = zhat_bars[i]
        if carry is not None:
            g = carry if g is None else g + carry
        if g is None:
            carry = None
            continue
        if need_params:
            grads.dW[i] += g.T @ trace.inputs[i]
            grads.db[i] += g.sum(axis=0)
        if i == 0 and not need_input:
            break
        a_bar = g @ layer.W
        if trace.masks[i] is not None:
            a_bar = a_bar * trace.masks[i]
        if i == 0:
            x_bar = a_bar
            break
        prev = model.layers[i - 1]
        d1, _ = activation_derivs(prev.activation, trace.zhat[i - 1], trace.z[i - 1])
        carry = a_bar * d1
    return grads, x_bar


def backprop_params(model: Mlp, trace: ForwardTrace, dlogits: np.ndarray) -> ParamGrads:
    """Exact parameter gradients of a loss whose logit-gradient is ``dlogits``."""
    _check_trace(model, trace)
    if dlogits.shape != trace.logits.shape:
        raise DimensionError(f"dlogits {dlogits.shape} vs logits {trace.logits.shape}")
    bars = [None] * len(model.layers)
    bars[-1] = dlogits
    grads, _ = backward(model, trace, bars)
    return grads


class VjpTape:
    """Differentiable record of ``G = V J(x)`` row by row.

    Built by :func:`vjp_tape`.  ``G[alpha]`` is ``v^alpha . J(x^alpha)``; calling
    :meth:`zhat_adjoints` with an adjoint ``G_bar`` returns the gradient of
    ``sum(G_bar * G)`` split into direct weight terms and injections at each
    preactivation, ready for :func:`backward`.
    """

    def __init__(self, model: Mlp, trace: ForwardTrace, V: np.ndarray, onehot=None):
        _check_trace(model, trace)
        L = len(model.layers)
        if onehot is not None:
            # V is implied by the class indices and never materialized
            if model.layers[-1].activation != "identity":
                raise DimensionError("one-hot projections need an identity output layer")
            if trace.batch_size is not None and len(onehot) != trace.batch_size:
                raise DimensionError(f"{len(onehot)} class indices for {trace.batch_size} rows")
            V = None
        else:
            V = np.asarray(V, dtype=trace.logits.dtype)
            if V.shape != trace.logits.shape:
                raise DimensionError(f"V {V.shape} vs logits {trace.logits.shape}")
        self.model = model
        self.trace = trace
        # class index per row when V is one-hot: the output layer becomes a row gather
        self.onehot = None if onehot is None else np.asarray(onehot)
        self.p = [None] * L  # adjoint w.r.t. z[l]
        self.d1 = [None] * L
        self.d2 = [None] * L
        self.delta = [None] * L  # adjoint w.r.t. zhat[l]
        p = V
        for i in range(L - 1, -1, -1):
            layer = model.layers[i]
            if i == L - 1 and self.onehot is not None:
                u = layer.W[self.onehot]
            else:
                d1, d2 = activation_derivs(layer.activation, trace.zhat[i], trace.z[i])
                delta = p if layer.activation == "identity" else p * d1
                self.p[i], self.d1[i], self.d2[i], self.delta[i] = p, d1, d2, delta
                u = delta @ layer.W
            if trace.masks[i] is not None:
                u = u * trace.masks[i]
            p = u
        self.G = p

    def zhat_adjoints(self, G_bar: np.ndarray, grads: ParamGrads):
        """Reverse the recorded chain; returns per-layer preactivation injections."""
        model, trace = self.model, self.trace
        L = len(model.layers)
        inj: list[np.ndarray | None] = [None] * L
        u_bar = G_bar
        for i in range(L):
            layer = model.layers[i]
            if trace.masks[i] is not None:
                u_bar = u_bar * trace.masks[i]
            if i == L - 1 and self.onehot is not None:
                np.add.at(grads.dW[i], self.onehot, u_bar)
            else:
                grads.dW[i] += self.delta[i].T @ u_bar
            if i == L - 1 and layer.activation == "identity":
                break  # nothing upstream of the logits consumes this adjoint
            delta_bar = u_bar @ layer.W.T
            if layer.activation != "identity":
                if layer.activation == "tanh":
                    inj[i] = delta_bar * self.p[i] * self.d2[i]
                p_bar = delta_bar * self.d1[i]
            else:
                p_bar = delta_bar
            u_bar = p_bar
        return inj

    def param_grads(self, G_bar: np.ndarray) -> ParamGrads:
        grads = ParamGrads.zeros_like(self.model)
        inj = self.zhat_adjoints(G_bar, grads)
        backward(self.model, self.trace, inj, grads)
        return grads


def vjp_tape(model: Mlp, trace: ForwardTrace, V: np.ndarray, onehot=None) -> VjpTape:
    return VjpTape(model, trace, V, onehot)


def vjp_input(model: Mlp, trace: ForwardTrace, V: np.ndarray) -> np.ndarray:
    """Rows ``v^alpha J(x^alpha)``: backpropagate ``v . z`` to the input."""
    _check_trace(model, trace)
    V = np.asarray(V)
    if V.shape != trace.logits.shape:
        raise DimensionError(f"V {V.shape} vs logits {trace.logits.shape}")
    bars = [None] * len(model.layers)
    bars[-1] = V
    _, x_bar = backward(model, trace, bars, need_input=True, need_params=False)
    return x_bar


def input_jacobian(model: Mlp, x: np.ndarray) -> np.ndarray:
    """Exact ``C x I`` Jacobian of the logits at a single input."""
    x = np.asarray(x, dtype=model.dtype).reshape(1, -1)
    C = model.n_out
    _, trace = forward(model, np.repeat(x, C, axis=0))
    return vjp_input(model, trace, np.eye(C, dtype=model.dtype))


def finite_diff_jacobian(model: Mlp, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference ``C x I`` Jacobian (test oracle)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.n_in:
        raise DimensionError(f"x has {x.shape[0]} entries, model expects {model.n_in}")
    I = x.shape[0]
    steps = np.eye(I) * h
    plus, _ = forward(model, x[None, :] + steps)
    minus, _ = forward(model, x[None, :] - steps)
    return ((plus - minus) / (2 * h)).T


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Little-endian layout, version 1:
#   magic  b"JRLBMLP\0"        8 bytes
#   u32    version (=1)
#   u32    number of layers L
#   L x { u32 n_out, u32 n_in, u8 activation code (0 tanh, 1 relu, 2 identity) }
#   L x { n_out*n_in f64 weights row-major, n_out f64 biases }

_MAGIC = b"JRLBMLP\0"
_VERSION = 1


def dumps_model(model: Mlp) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(model.layers)))
    for layer in model.layers:
        buf.write(
            struct.pack("<IIB", layer.n_out, layer.n_in, ACTIVATIONS.index(layer.activation))
        )
    for layer in model.layers:
        buf.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(data: bytes) -> Mlp:
    if data[:8] != _MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        version, L = struct.unpack_from("<II", data, 8)
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        shapes = []
        for _ in range(L):
            n_out, n_in, code = struct.unpack_from("<IIB", data, off)
            off += 9
            shapes.append((n_out, n_in, ACTIVATIONS[code]))
        layers = []
        for n_out, n_in, act in shapes:
            W = np.frombuffer(data, "<f8", n_out * n_in, off).reshape(n_out, n_in)
            off += 8 * n_out * n_in
            b = np.frombuffer(data, "<f8", n_out, off)
            off += 8 * n_out
            layers.append(Layer(W.astype(np.float64), b.astype(np.float64), act))
    except (struct.error, ValueError, IndexError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in checkpoint")
    return Mlp(layers)


def save_model(model: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> Mlp:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
