"""Classifier families (MLP, CNN, LSTM, TABL) and the embedding head.

A :class:`Network` is split into three parts:

* ``F`` -- the feature map from an input window to the representation ``z``,
* ``C`` -- one dense softmax layer from ``z`` to class probabilities,
* ``Q`` -- an optional stack of dense layers from ``z`` to a 2-D point.

Inputs are batched as ``[B, D, T]`` (or ``[B, D]`` for the MLP); single samples
without the batch axis are accepted by :func:`forward_features`,
:func:`forward_logits` and the layer functions.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, StateError

LAYER_KINDS = ("dense", "conv1d", "maxpool", "flatten", "lstm", "tabl", "dropout")
PRESETS = ("mlp", "cnn", "lstm", "tabl")
N_FEATURES = 40
WINDOW = 10


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: int = 0
    shape: tuple = ()
    activation: str = "linear"
    rate: float = 0.0
    return_sequence: bool = False

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(d["shape"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(**d)


@dataclass
class ModelSpec:
    """Declarative architecture: feature layers, class count, embedder widths."""

    name: str
    input_shape: tuple
    layers: list
    n_classes: int = 3
    head_layers: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_text(self):
        return json.dumps(
            {
                "name": self.name,
                "input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers],
                "n_classes": self.n_classes,
                "head_layers": list(self.head_layers),
                "meta": self.meta,
            },
            sort_keys=True,
        )

    @classmethod
    def from_text(cls, text):
        try:
            d = json.loads(text)
            layers = [LayerSpec.from_dict(x) for x in d["layers"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model spec: {exc}") from None
        for layer in layers:
            if layer.kind not in LAYER_KINDS:
                raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=layers,
            n_classes=d.get("n_classes", 3),
            head_layers=tuple(d.get("head_layers", ())),
            meta=d.get("meta", {}),
        )


def glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _batched(x, sample_ndim):
    x = ad.as_tensor(x)
    if x.ndim == sample_ndim:
        return ad.reshape(x, (1, *x.shape)), True
    return x, False


# ---------------------------------------------------------------- layer functions


def dense_forward(x, weight, bias, activation="linear"):
    """``activation(W x + b)`` for ``x[D_in]`` or ``x[B, D_in]``."""
    x, single = _batched(x, 1)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = ad.apply_activation(ad.matmul(x, ad.transpose(weight)) + bias, activation)
    return ad.reshape(out, out.shape[1:]) if single else out


def lstm_layer_forward(X, params, return_sequence=False):
    """Run one LSTM layer over ``X[D, T]`` (or ``X[B, D, T]``) from a zero state.

    ``params`` maps ``W_f W_i W_c W_o`` (units x D), ``R_f R_i R_c R_o``
    (units x units) and ``b_f b_i b_c b_o`` (units) to tensors.
    """
    X, single = _batched(X, 2)
    batch, dim, steps = X.shape
    if steps == 0:
        raise DimensionError("LSTM input has no time steps")
    units = params["R_f"].shape[0]
    if params["W_f"].shape != (units, dim):
        raise DimensionError(f"LSTM input width {dim} does not match W_f {params['W_f'].shape}")
    # input projections for every step at once: [B, units, T]
    proj = {g: ad.matmul(params["W_" + g], X) for g in "fico"}
    h = Tensor(np.zeros((batch, units)))
    c = Tensor(np.zeros((batch, units)))
    outputs = []
    for t in range(steps):
        pre = {g: proj[g][:, :, t] + ad.matmul(h, ad.transpose(params["R_" + g])) + params["b_" + g] for g in "fico"}
        f = ad.sigmoid(pre["f"])
        i = ad.sigmoid(pre["i"])
        cand = ad.tanh(pre["c"])
        c = f * c + i * cand
        o = ad.sigmoid(pre["o"])
        h = o * ad.tanh(c)
        outputs.append(h)
    out = ad.stack(outputs, axis=-1) if return_sequence else h
    return ad.reshape(out, out.shape[1:]) if single else out


def tabl_forward(X, params, activation="relu", return_attention=False):
    """Temporal attention-augmented bilinear layer on ``X[D, T]`` (or batched).

    ``params``: ``W1[D', D]``, ``W[T, T]``, ``W2[T, T']``, ``B[D', T']``,
    ``lam[1]``. The attention is a softmax over the time axis of every row of
    ``(W1 X) W``; it is mixed into ``W1 X`` with weight ``lam``.
    """
    X, single = _batched(X, 2)
    lam = params["lam"]
    if not 0.0 <= lam.item() <= 1.0:
        raise ContractError(f"TABL mixing weight must lie in [0, 1], got {lam.item()}")
    W1, W, W2, B = params["W1"], params["W"], params["W2"], params["B"]
    if X.shape[-2] != W1.shape[1] or X.shape[-1] != W.shape[0]:
        raise DimensionError(f"TABL input {X.shape[1:]} does not match W1 {W1.shape} / W {W.shape}")
    xbar = ad.matmul(W1, X)
    energy = ad.matmul(xbar, W)
    attention = ad.softmax(energy, axis=-1)
    mixed = lam * (xbar * attention) + (1.0 - lam) * xbar
    out = ad.apply_activation(ad.matmul(mixed, W2) + B, activation)
    if single:
        out = ad.reshape(out, out.shape[1:])
        attention = ad.reshape(attention, attention.shape[1:])
    return (out, attention) if return_attention else out


# ---------------------------------------------------------------- layer objects


class Layer:
    spec: LayerSpec
    params: dict

    def __init__(self, spec, in_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.params = {}

    def init(self, rng):
        pass

    def forward(self, x, mode="infer", rng=None):
        raise NotImplementedError

    def constrain(self):
        pass


class Dense(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if len(in_shape) != 1:
            raise ConfigurationError(f"dense layer needs a flat input, got {in_shape}; add a flatten layer")
        self.out_shape = (spec.units,)

    def init(self, rng):
        n_in, n_out = self.in_shape[0], self.spec.units
        self.params = {
            "weight": Tensor(glorot(rng, (n_out, n_in), n_in, n_out)),
            "bias": Tensor(np.zeros(n_out)),
        }

    def forward(self, x, mode="infer", rng=None):
        return dense_forward(x, self.params["weight"], self.params["bias"], self.spec.activation)


class Conv1D(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if len(in_shape) != 2:
            raise ConfigurationError(f"conv1d needs a [channels, time] input, got {in_shape}")
        if spec.kernel < 1:
            raise ConfigurationError("conv1d kernel must be >= 1")
        self.out_shape = (spec.units, in_shape[1])

    def init(self, rng):
        c_in, s, c_out = self.in_shape[0], self.spec.kernel, self.spec.units
        self.params = {
            "filters": Tensor(glorot(rng, (c_out, s, c_in), s * c_in, s * c_out)),
            "bias": Tensor(np.zeros(c_out)),
        }

    def forward(self, x, mode="infer", rng=None):
        out = ad.conv1d_causal(x, self.params["filters"]) + ad.reshape(self.params["bias"], (-1, 1))
        return ad.apply_activation(out, self.spec.activation)


class MaxPool(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if len(in_shape) != 2 or in_shape[1] < spec.kernel or spec.kernel < 1:
            raise ConfigurationError(f"maxpool of size {spec.kernel} incompatible with input {in_shape}")
        self.out_shape = (in_shape[0], in_shape[1] // spec.kernel)

    def forward(self, x, mode="infer", rng=None):
        return ad.maxpool1d(x, self.spec.kernel)


class Flatten(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x, mode="infer", rng=None):
        # channel-major: row-major flatten of [C, T]
        return ad.reshape(x, (x.shape[0], -1))


class LSTM(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if len(in_shape) != 2:
            raise ConfigurationError(f"lstm needs a [features, time] input, got {in_shape}")
        self.out_shape = (spec.units, in_shape[1]) if spec.return_sequence else (spec.units,)

    def init(self, rng):
        dim, units = self.in_shape[0], self.spec.units
        p = {}
        for g in "fico":
            p["W_" + g] = Tensor(glorot(rng, (units, dim), dim, units))
        for g in "fico":
            p["R_" + g] = Tensor(glorot(rng, (units, units), units, units))
        for g in "fico":
            p["b_" + g] = Tensor(np.full(units, 1.0 if g == "f" else 0.0))
        self.params = p

    def forward(self, x, mode="infer", rng=None):
        return lstm_layer_forward(x, self.params, self.spec.return_sequence)


class TABL(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if len(in_shape) != 2 or len(spec.shape) != 2:
            raise ConfigurationError(f"tabl maps [D, T] to [D', T'], got input {in_shape}, output {spec.shape}")
        self.out_shape = tuple(spec.shape)

    def init(self, rng):
        (d, t), (d2, t2) = self.in_shape, self.out_shape
        w = glorot(rng, (t, t), t, t)
        np.fill_diagonal(w, 1.0 / t)
        self.params = {
            "W1": Tensor(glorot(rng, (d2, d), d, d2)),
            "W": Tensor(w),
            "W2": Tensor(glorot(rng, (t, t2), t, t2)),
            "B": Tensor(np.zeros((d2, t2))),
            "lam": Tensor(np.array([0.5])),
        }

    def forward(self, x, mode="infer", rng=None):
        return tabl_forward(x, self.params, self.spec.activation)

    def constrain(self):
        w = self.params["W"].data
        np.fill_diagonal(w, 1.0 / w.shape[0])
        lam = self.params["lam"].data
        np.clip(lam, 0.0, 1.0, out=lam)


class Dropout(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if not 0.0 <= spec.rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {spec.rate}")
        self.out_shape = tuple(in_shape)

    def forward(self, x, mode="infer", rng=None):
        return ad.dropout(x, self.spec.rate, mode, rng)


_LAYER_TYPES = {
    "dense": Dense,
    "conv1d": Conv1D,
    "maxpool": MaxPool,
    "flatten": Flatten,
    "lstm": LSTM,
    "tabl": TABL,
    "dropout": Dropout,
}


def make_layer(spec, in_shape):
    try:
        cls = _LAYER_TYPES[spec.kind]
    except KeyError:
        raise ConfigurationError(f"unknown layer kind {spec.kind!r}") from None
    return cls(spec, in_shape)


# ---------------------------------------------------------------- network


class Network:
    def __init__(self, spec, features, head, embedder=None):
        self.spec = spec
        self.features = features
        self.head = head
        self.embedder = embedder
        self.trained = False

    @property
    def d(self):
        return self.head.in_shape[0]

    @property
    def n_classes(self):
        return self.head.out_shape[0]

    def parameters(self, parts="FCQ"):
        """Named parameter tensors, in a fixed order, for the requested parts."""
        out = {}
        if "F" in parts:
            for i, layer in enumerate(self.features):
                for k, v in layer.params.items():
                    out[f"F.{i}.{layer.spec.kind}.{k}"] = v
        if "C" in parts:
            for k, v in self.head.params.items():
                out[f"C.{k}"] = v
        if "Q" in parts and self.embedder:
            for i, layer in enumerate(self.embedder):
                for k, v in layer.params.items():
                    out[f"Q.{i}.{k}"] = v
        return out

    def n_parameters(self, parts="FC"):
        return int(sum(t.size for t in self.parameters(parts).values()))

    def apply_constraints(self):
        for layer in self.features:
            layer.constrain()

    def state_dict(self, parts="FCQ"):
        return {k: v.data.copy() for k, v in self.parameters(parts).items()}

    def load_state_dict(self, state):
        params = self.parameters()
        for k, v in state.items():
            if k not in params:
                raise StateError(f"unknown parameter {k!r}")
            if params[k].shape != v.shape:
                raise DimensionError(f"parameter {k!r}: expected {params[k].shape}, got {v.shape}")
            params[k].data = np.array(v, dtype=np.float64)

    def clone(self):
        return copy.deepcopy(self)

    def _prepare(self, X):
        X = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
        shape = tuple(self.spec.input_shape)
        if X.shape == shape:
            return Tensor(X.reshape((1, *shape))), True
        if X.shape[1:] == shape:
            return Tensor(X), False
        if len(shape) == 1 and X.ndim >= 2 and int(np.prod(X.shape[1:])) == shape[0]:
            return Tensor(X.reshape(X.shape[0], -1)), False
        if len(shape) == 1 and X.ndim == 3 and X.shape[1] == shape[0]:
            # single-event model fed with windows: use the most recent event
            return Tensor(np.ascontiguousarray(X[:, :, -1])), False
        raise DimensionError(f"network {self.spec.name!r} expects input {shape}, got {X.shape}")

    def forward_F(self, X, mode="infer", rng=None):
        """Batched representation ``z[B, d]`` for a prepared ``[B, ...]`` input tensor."""
        x = X
        for layer in self.features:
            x = layer.forward(x, mode, rng)
        return x

    def forward_C(self, z):
        return self.head.forward(z)

    def forward_Q(self, z):
        if not self.embedder:
            raise StateError("network has no embedding head; attach and train one first")
        y = z
        for layer in self.embedder:
            y = layer.forward(y)
        return y


def forward_features(net, X, mode="infer", rng=None):
    x, single = net._prepare(X)
    z = net.forward_F(x, mode, rng)
    return ad.reshape(z, (net.d,)) if single else z


def forward_logits(net, X, mode="infer", rng=None):
    """Class probabilities ``C(F(X))``; rows sum to one."""
    x, single = net._prepare(X)
    s = net.forward_C(net.forward_F(x, mode, rng))
    return ad.reshape(s, (net.n_classes,)) if single else s


def forward_embedding(net, X):
    x, single = net._prepare(X)
    y = net.forward_Q(net.forward_F(x))
    return ad.reshape(y, (y.shape[-1],)) if single else y


# ---------------------------------------------------------------- building


def _scaled(width, divisor):
    return max(1, int(round(width / divisor)))


def preset_spec(name, width_divisor=1, window=1, dropout_rate=0.1, n_classes=3):
    """Architecture presets. ``width_divisor`` shrinks every hidden width (incl. ``d``).

    ``window`` only affects the MLP, which by default sees a single 40-value event;
    with ``window > 1`` it sees the flattened ``40 x window`` matrix instead.
    """
    w = lambda n: _scaled(n, width_divisor)  # noqa: E731
    if name == "mlp":
        layers = []
        for n in (400, 800, 500, 60):
            layers += [LayerSpec("dense", units=w(n), activation="relu"), LayerSpec("dropout", rate=dropout_rate)]
        return ModelSpec("mlp", (N_FEATURES * window,), layers, n_classes, meta={"window": window})
    if name == "lstm":
        layers = [
            LayerSpec("lstm", units=w(128), return_sequence=True),
            LayerSpec("dropout", rate=dropout_rate),
            LayerSpec("lstm", units=w(60), return_sequence=False),
            LayerSpec("dropout", rate=dropout_rate),
        ]
        return ModelSpec("lstm", (N_FEATURES, WINDOW), layers, n_classes)
    if name == "cnn":
        layers = [LayerSpec("conv1d", units=w(n), kernel=3, activation="relu") for n in (8, 16, 32)]
        layers += [LayerSpec("maxpool", kernel=2), LayerSpec("flatten"), LayerSpec("dense", units=w(60), activation="relu")]
        return ModelSpec("cnn", (N_FEATURES, WINDOW), layers, n_classes)
    if name == "tabl":
        layers = [
            LayerSpec("tabl", shape=(w(60), 10), activation="relu"),
            LayerSpec("tabl", shape=(w(120), 5), activation="relu"),
            LayerSpec("tabl", shape=(w(60), 1), activation="relu"),
            LayerSpec("flatten"),
        ]
        return ModelSpec("tabl", (N_FEATURES, WINDOW), layers, n_classes)
    raise ConfigurationError(f"unknown preset {name!r}; expected one of {PRESETS}")


def _embedder_layers(head_layers, d):
    if not head_layers or head_layers[-1] != 2:
        raise ConfigurationError(f"embedding head must end in 2 units, got {tuple(head_layers)}")
    layers, shape = [], (d,)
    for i, n in enumerate(head_layers):
        act = "linear" if i == len(head_layers) - 1 else "relu"
        layer = Dense(LayerSpec("dense", units=int(n), activation=act), shape)
        layers.append(layer)
        shape = layer.out_shape
    return layers


def build_network(spec, seed=0, **preset_kwargs):
    """Instantiate a network from a :class:`ModelSpec` or a preset name.

    Weights are Glorot-uniform, biases zero (LSTM forget gate 1.0), TABL mixing
    weight 0.5 with the attention diagonal fixed at ``1/T``. F and C draw from
    one generator, Q from another, so adding a head never changes F or C.
    """
    if isinstance(spec, str):
        spec = preset_spec(spec, **preset_kwargs)
    elif preset_kwargs:
        raise ConfigurationError("preset options only apply to preset names")
    shape = tuple(spec.input_shape)
    if not shape or any(int(s) < 1 for s in shape):
        raise ConfigurationError(f"invalid input shape {shape}")
    rng = np.random.default_rng([seed, 0])
    features = []
    for layer_spec in spec.layers:
        layer = make_layer(layer_spec, shape)
        layer.init(rng)
        features.append(layer)
        shape = layer.out_shape
    if len(shape) != 1:
        raise ConfigurationError(f"feature map must end in a flat representation, got {shape}")
    head = Dense(LayerSpec("dense", units=spec.n_classes, activation="softmax"), shape)
    head.init(rng)
    net = Network(spec, features, head)
    if spec.head_layers:
        attach_embedder(net, spec.head_layers, seed)
    return net


def attach_embedder(net, head_layers, seed=0):
    """Attach a freshly initialised Q head (ReLU hidden layers, linear 2-D output)."""
    layers = _embedder_layers(tuple(head_layers), net.d)
    rng = np.random.default_rng([seed, 1])
    for layer in layers:
        layer.init(rng)
    net.embedder = layers
    net.spec = replace(net.spec, head_layers=tuple(int(n) for n in head_layers))
    return net


def layer_output_shapes(net):
    return [layer.out_shape for layer in net.features] + [net.head.out_shape]
