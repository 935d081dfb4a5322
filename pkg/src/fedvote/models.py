"""Small classifiers over flat parameter vectors.

Every model is described by a :class:`ModelSpec` and its weights live in a
single 1-D float64 array (the "parameter vector"). That array is what agents
exchange with the coordinator, so all arithmetic done by the attacks,
detector and aggregator is plain vector arithmetic on it.

Supported layers: ``dense``, ``relu``, ``conv``, ``maxpool``, ``dropout``,
``flatten`` and a terminal ``softmax``. Gradients are computed analytically
by backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError

LAYER_KINDS = ("dense", "relu", "conv", "maxpool", "dropout", "flatten", "softmax")

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class Layer:
    """One layer of a :class:`ModelSpec`.

    Only the fields relevant to ``kind`` are used: ``units`` for dense,
    ``channels``/``kernel``/``stride`` for conv, ``size`` for maxpool and
    ``rate`` for dropout.
    """

    kind: str
    units: Optional[int] = None
    channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    size: Optional[int] = None
    rate: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        for key, value in asdict(self).items():
            if key == "kind" or value is None:
                continue
            if key == "stride" and (self.kind != "conv" or value == 1):
                continue
            out[key] = value
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Layer":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown layer field(s): {sorted(unknown)}")
        return cls(**data)


def _out_shape(layer: Layer, shape: Shape) -> Shape:
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1:
            raise ConfigError(f"dense layer needs a flat input, got shape {shape}")
        if not layer.units or layer.units < 1:
            raise ConfigError("dense layer needs units >= 1")
        return (layer.units,)
    if kind in ("relu", "dropout", "softmax"):
        if kind == "dropout" and not (layer.rate is not None and 0 <= layer.rate < 1):
            raise ConfigError(f"dropout rate must be in [0, 1), got {layer.rate}")
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "conv":
        if len(shape) != 3:
            raise ConfigError(f"conv layer needs a (channels, height, width) input, got {shape}")
        if not layer.channels or not layer.kernel or layer.stride < 1:
            raise ConfigError("conv layer needs channels, kernel and stride >= 1")
        _, h, w = shape
        if layer.kernel > h or layer.kernel > w:
            raise ConfigError(f"conv kernel {layer.kernel} larger than input {shape}")
        ho = (h - layer.kernel) // layer.stride + 1
        wo = (w - layer.kernel) // layer.stride + 1
        return (layer.channels, ho, wo)
    if kind == "maxpool":
        if len(shape) != 3:
            raise ConfigError(f"maxpool needs a (channels, height, width) input, got {shape}")
        if not layer.size or layer.size < 1 or layer.size > min(shape[1:]):
            raise ConfigError(f"invalid maxpool size {layer.size} for input {shape}")
        return (shape[0], shape[1] // layer.size, shape[2] // layer.size)
    raise ConfigError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def _param_shapes(layer: Layer, shape: Shape) -> List[Shape]:
    if layer.kind == "dense":
        return [(shape[0], layer.units), (layer.units,)]
    if layer.kind == "conv":
        return [(layer.channels, shape[0], layer.kernel, layer.kernel), (layer.channels,)]
    return []


def _fan_in(layer: Layer, shape: Shape) -> int:
    if layer.kind == "dense":
        return shape[0]
    return shape[0] * layer.kernel * layer.kernel


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    Attributes:
        input_shape: Shape of one feature example, e.g. ``(784,)`` or ``(1, 28, 28)``.
        layers: Layer sequence; the last one must be ``softmax``.
        n_classes: Number of labels |C|.
        dropout: When true, dropout layers draw seeded masks during training.
            Otherwise they are the identity everywhere.
    """

    input_shape: Shape
    layers: Tuple[Layer, ...]
    n_classes: int
    dropout: bool = False
    shapes: Tuple[Shape, ...] = field(init=False, repr=False, compare=False)
    param_shapes: Tuple[Tuple[Shape, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ConfigError("the last layer must be softmax")
        if any(layer.kind == "softmax" for layer in self.layers[:-1]):
            raise ConfigError("softmax is only allowed as the output layer")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        shapes = [self.input_shape]
        pshapes = []
        for layer in self.layers:
            pshapes.append(tuple(_param_shapes(layer, shapes[-1])) if layer.kind in ("dense", "conv") else ())
            shapes.append(_out_shape(layer, shapes[-1]))
        if shapes[-1] != (self.n_classes,):
            raise ConfigError(f"model output shape {shapes[-1]} does not match n_classes={self.n_classes}")
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "param_shapes", tuple(pshapes))

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for layer_shapes in self.param_shapes for s in layer_shapes)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "n_classes": self.n_classes,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelSpec":
        unknown = set(data) - {"input_shape", "layers", "n_classes", "dropout"}
        if unknown:
            raise ConfigError(f"unknown model field(s): {sorted(unknown)}")
        try:
            return cls(
                input_shape=tuple(data["input_shape"]),
                layers=tuple(Layer.from_dict(dict(d)) for d in data["layers"]),
                n_classes=int(data["n_classes"]),
                dropout=bool(data.get("dropout", False)),
            )
        except KeyError as exc:
            raise ConfigError(f"model is missing field {exc.args[0]!r}") from None


def mlp(input_dim: int, hidden: Sequence[int], n_classes: int) -> ModelSpec:
    """Dense ReLU network ``input_dim -> hidden... -> n_classes``."""
    layers: List[Layer] = []
    for units in hidden:
        layers += [Layer("dense", units=units), Layer("relu")]
    layers += [Layer("dense", units=n_classes), Layer("softmax")]
    return ModelSpec((input_dim,), tuple(layers), n_classes)


def mnist_cnn() -> ModelSpec:
    """The two-conv MNIST network (1.2M parameters), for full-scale runs."""
    return ModelSpec(
        (1, 28, 28),
        (
            Layer("conv", channels=32, kernel=3),
            Layer("relu"),
            Layer("conv", channels=64, kernel=3),
            Layer("relu"),
            Layer("maxpool", size=2),
            Layer("dropout", rate=0.25),
            Layer("flatten"),
            Layer("dense", units=128),
            Layer("relu"),
            Layer("dropout", rate=0.5),
            Layer("dense", units=10),
            Layer("softmax"),
        ),
        10,
    )


@dataclass
class ModelState:
    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 1 or self.params.size != self.spec.n_params:
            raise InputError(
                f"parameter vector has shape {self.params.shape}, spec needs ({self.spec.n_params},)"
            )


def unflatten(spec: ModelSpec, params: np.ndarray) -> List[List[np.ndarray]]:
    """Split a flat vector into per-layer weight arrays (views, not copies)."""
    out: List[List[np.ndarray]] = []
    offset = 0
    for layer_shapes in spec.param_shapes:
        arrays = []
        for shape in layer_shapes:
            n = int(np.prod(shape))
            arrays.append(params[offset:offset + n].reshape(shape))
            offset += n
        out.append(arrays)
    return out


def flatten(arrays: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`unflatten`."""
    parts = [np.ravel(a) for layer in arrays for a in layer]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts).astype(np.float64, copy=False)


def param_scales(spec: ModelSpec) -> np.ndarray:
    """Per-coordinate initialization scale ``1/sqrt(fan_in)`` of the owning layer."""
    scales = np.empty(spec.n_params)
    offset = 0
    for layer, shape, layer_shapes in zip(spec.layers, spec.shapes, spec.param_shapes):
        for pshape in layer_shapes:
            n = int(np.prod(pshape))
            scales[offset:offset + n] = 1.0 / math.sqrt(_fan_in(layer, shape))
            offset += n
    return scales


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform in ``[-s, s]`` with ``s = 1/sqrt(fan_in)``, weights and biases alike."""
    return rng.uniform(-1.0, 1.0, spec.n_params) * param_scales(spec)


# ---------------------------------------------------------------------------
# layer kernels: forward returns (output, cache); backward returns (dx, [dparams])


def _conv_windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]


def _forward_layer(layer: Layer, p: List[np.ndarray], x: np.ndarray,
                   rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, Any]:
    kind = layer.kind
    if kind == "dense":
        return x @ p[0] + p[1], x
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "dropout":
        if rng is None or layer.rate == 0:
            return x, None
        keep = 1.0 - layer.rate
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask
    if kind == "conv":
        k, s = layer.kernel, layer.stride
        win = _conv_windows(x, k, s)
        out = np.einsum("nchwij,ocij->nohw", win, p[0], optimize=True)
        return out + p[1][None, :, None, None], (x.shape, win)
    if kind == "maxpool":
        q = layer.size
        n, c, h, w = x.shape
        ho, wo = h // q, w // q
        blocks = x[:, :, :ho * q, :wo * q].reshape(n, c, ho, q, wo, q)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, q * q)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)
    raise InputError(f"cannot evaluate layer kind {kind!r}")


def _backward_layer(layer: Layer, p: List[np.ndarray], cache: Any,
                    dout: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    kind = layer.kind
    if kind == "dense":
        x = cache
        return dout @ p[0].T, [x.T @ dout, dout.sum(axis=0)]
    if kind == "relu":
        return dout * cache, []
    if kind == "flatten":
        return dout.reshape(cache), []
    if kind == "dropout":
        return (dout if cache is None else dout * cache), []
    if kind == "conv":
        x_shape, win = cache
        k, s = layer.kernel, layer.stride
        dw = np.einsum("nchwij,nohw->ocij", win, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        dx = np.zeros(x_shape)
        ho, wo = dout.shape[2], dout.shape[3]
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.einsum(
                    "nohw,oc->nchw", dout, p[0][:, :, i, j], optimize=True
                )
        return dx, [dw, db]
    if kind == "maxpool":
        x_shape, arg = cache
        q = layer.size
        n, c, h, w = x_shape
        ho, wo = h // q, w // q
        blocks = np.zeros((n, c, ho, wo, q * q))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, q, q).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, :ho * q, :wo * q] = blocks.reshape(n, c, ho * q, wo * q)
        return dx, []
    raise InputError(f"cannot differentiate layer kind {kind!r}")


def _as_batch(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim >= 1 and X.shape[1:] == spec.input_shape:
        return X
    if X.ndim == 2 and X.shape[1] == spec.input_dim:
        return X.reshape((X.shape[0],) + spec.input_shape)
    raise InputError(f"input batch of shape {X.shape} does not match model input {spec.input_shape}")


def _logits(model: ModelState, X: np.ndarray, rng=None):
    plist = unflatten(model.spec, model.params)
    a = _as_batch(model.spec, X)
    caches = []
    for layer, p in zip(model.spec.layers[:-1], plist):
        a, cache = _forward_layer(layer, p, a, rng)
        caches.append(cache)
    return a, caches, plist


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def predict_proba(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch, shape ``(n, n_classes)``."""
    z, _, _ = _logits(model, X)
    return np.exp(_log_softmax(z))


def forward(model: ModelState, x: np.ndarray) -> np.ndarray:
    """Class-score vector (softmax probabilities) for one example."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.spec.input_shape and x.shape != (model.spec.input_dim,):
        raise InputError(f"input of shape {x.shape} does not match model input {model.spec.input_shape}")
    return predict_proba(model, x.reshape((1,) + model.spec.input_shape))[0]


def predict(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Argmax labels; ties go to the lowest class index."""
    z, _, _ = _logits(model, X)
    return np.argmax(z, axis=1)


def loss_and_gradient(model: ModelState, X: np.ndarray, y: np.ndarray,
                      rng: Optional[np.random.Generator] = None) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient.

    ``rng`` is only consulted for dropout masks when ``spec.dropout`` is set.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise InputError("empty batch")
    spec = model.spec
    z, caches, plist = _logits(model, X, rng if spec.dropout else None)
    if z.shape[0] != y.size:
        raise InputError(f"{z.shape[0]} examples but {y.size} labels")
    logp = _log_softmax(z)
    n = y.size
    loss = -float(logp[np.arange(n), y].mean())

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n

    grad = np.empty(spec.n_params)
    gviews = unflatten(spec, grad)
    d = dz
    for idx in range(len(spec.layers) - 2, -1, -1):
        d, dparams = _backward_layer(spec.layers[idx], plist[idx], caches[idx], d)
        for view, g in zip(gviews[idx], dparams):
            view[...] = g
    return loss, grad


def local_train(model: ModelState, X: np.ndarray, y: np.ndarray, steps: int, lr: float,
                batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Plain mini-batch SGD starting from ``model.params``.

    Batches are consecutive slices of a random permutation of the shard, which
    is reshuffled whenever it is exhausted; the last batch of a pass may be short.

    Returns:
        The updated parameter vector (``model`` is left untouched).
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(y)
    if n == 0:
        raise InputError("empty shard")
    params = model.params.copy()
    state = ModelState(model.spec, params)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        _, grad = loss_and_gradient(state, X[idx], y[idx], rng)
        params -= lr * grad
    return params


def evaluate(model: ModelState, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction of misclassified examples."""
    if len(y) == 0:
        raise InputError("empty test set")
    return float(np.mean(predict(model, X) != np.asarray(y)))
