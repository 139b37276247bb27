"""Trainable layers, network descriptions and APL parameter containers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from aplnet import autodiff as ad
from aplnet import functional as F
from aplnet.functional import DomainError, ShapeError
from aplnet.pwl import AplParams1D

# re-exported kernels with the layer-level names
leaky_relu_forward = F.leaky_relu_forward
maxout_forward = F.maxout_forward
dropout_mask = F.dropout_mask


class ConfigError(ValueError):
    pass


# -- APL parameters -------------------------------------------------------------------

@dataclass(frozen=True)
class InitScheme:
    a_low: float = -0.25
    a_high: float = 0.25
    b_low: float = -1.0
    b_high: float = 1.0


@dataclass
class AplLayerParams:
    """Hinge slopes ``a`` and locations ``b``, both ``(M, S)``; row ``i`` is neuron ``i``."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape != self.b.shape:
            raise ShapeError(f"a and b must be matching (M, S) matrices, got {self.a.shape}, {self.b.shape}")

    @property
    def M(self) -> int:
        return self.a.shape[0]

    @property
    def S(self) -> int:
        return self.a.shape[1]

    @property
    def n_params(self) -> int:
        return 2 * self.S * self.M

    def row(self, i: int) -> AplParams1D:
        return AplParams1D(tuple(self.a[i]), tuple(self.b[i]))


def init_apl(M: int, S: int, seed, scheme: InitScheme = InitScheme()) -> AplLayerParams:
    """Random APL parameters: ``a ~ U(a_low, a_high)``, ``b ~ U(b_low, b_high)``.

    ``seed`` may be an int or a Generator; equal seeds give identical draws.
    """
    if S < 0:
        raise DomainError(f"S must be >= 0, got {S}")
    if M < 1:
        raise DomainError(f"M must be >= 1, got {M}")
    rng = np.random.default_rng(seed)
    a = rng.uniform(scheme.a_low, scheme.a_high, size=(M, S))
    b = rng.uniform(scheme.b_low, scheme.b_high, size=(M, S))
    return AplLayerParams(a, b)


def apl_forward(x: np.ndarray, p: AplLayerParams) -> np.ndarray:
    return F.apl_forward(np.asarray(x), p.a, p.b)


def apl_backward(x: np.ndarray, p: AplLayerParams, dy: np.ndarray):
    """Returns ``(dx, da, db)``."""
    return F.apl_backward(np.asarray(x), p.a, p.b, np.asarray(dy))


def softmax_xent(logits: np.ndarray, labels) -> float:
    return F.softmax_xent_forward(np.asarray(logits, dtype=np.float64), labels)[0]


# -- network description ----------------------------------------------------------------

LAYER_KINDS = ("dense", "conv2d", "maxpool", "avgpool", "dropout", "activation", "flatten")
ACTIVATION_KINDS = ("relu", "leaky_relu", "apl", "maxout")


@dataclass
class LayerSpec:
    kind: str
    options: dict[str, Any] = field(default_factory=dict)

    def to_text(self) -> str:
        if self.kind == "activation":
            opts = {k: v for k, v in self.options.items() if k != "kind"}
            head = f"activation {self.options['kind']}"
        else:
            opts, head = self.options, self.kind
        return " ".join([head] + [f"{k}={v}" for k, v in opts.items()])


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def activation_spec(kind: str, **options) -> LayerSpec:
    return LayerSpec("activation", {"kind": kind, **options})


def parse_activation(text: str) -> dict[str, Any]:
    """Parse ``relu``, ``leaky_relu:0.05``, ``apl:2``, ``apl:2:per_neuron`` or ``maxout:2``."""
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "relu" and len(parts) == 1:
            return {"kind": "relu"}
        if kind == "leaky_relu" and len(parts) == 2:
            return {"kind": "leaky_relu", "k": float(parts[1])}
        if kind == "apl" and len(parts) in (2, 3):
            sharing = parts[2] if len(parts) == 3 else "shared"
            return {"kind": "apl", "S": int(parts[1]), "sharing": sharing}
        if kind == "maxout" and len(parts) == 2:
            return {"kind": "maxout", "K": int(parts[1])}
    except ValueError as exc:
        raise ConfigError(f"bad activation {text!r}: {exc}") from None
    raise ConfigError(f"bad activation {text!r}")


@dataclass
class NetworkSpec:
    """Input feature shape plus an ordered list of layers."""

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]

    def shapes(self) -> list[tuple[int, ...]]:
        """Feature shape after each layer (index 0 is the input); raises on mismatch."""
        shape = tuple(self.input_shape)
        out = [shape]
        for t, layer in enumerate(self.layers):
            try:
                shape = _next_shape(shape, layer)
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"layer {t} ({layer.kind}): missing/invalid option {exc}") from None
            except (ShapeError, ConfigError, DomainError) as exc:
                raise type(exc)(f"layer {t} ({layer.kind}): {exc}") from None
            out.append(shape)
        return out

    def validate(self) -> None:
        self.shapes()

    def with_activation(self, act: dict[str, Any]) -> "NetworkSpec":
        """Copy with every activation layer replaced by ``act``."""
        layers = [activation_spec(**act) if l.kind == "activation" else LayerSpec(l.kind, dict(l.options))
                  for l in self.layers]
        return NetworkSpec(tuple(self.input_shape), layers)

    def to_text(self) -> str:
        lines = ["input " + " ".join(str(n) for n in self.input_shape)]
        lines += [layer.to_text() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        input_shape = None
        layers = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            words = line.split()
            if words[0] == "input":
                input_shape = tuple(int(w) for w in words[1:])
                continue
            if words[0] not in LAYER_KINDS:
                raise ConfigError(f"line {lineno}: unknown layer kind {words[0]!r}")
            opts: dict[str, Any] = {}
            rest = words[1:]
            if words[0] == "activation":
                if not rest:
                    raise ConfigError(f"line {lineno}: activation kind missing")
                opts["kind"] = rest[0]
                rest = rest[1:]
            for w in rest:
                if "=" not in w:
                    raise ConfigError(f"line {lineno}: expected key=value, got {w!r}")
                k, v = w.split("=", 1)
                opts[k] = _coerce(v)
            layers.append(LayerSpec(words[0], opts))
        if input_shape is None:
            raise ConfigError("network description has no 'input' line")
        return cls(input_shape, layers)


def _next_shape(shape: tuple[int, ...], layer: LayerSpec) -> tuple[int, ...]:
    o = layer.options
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"dense needs a flat input, got {shape}; insert a flatten layer")
        return (int(o["units"]),)
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "dropout":
        rate = float(o["rate"])
        if not 0.0 <= rate < 1.0:
            raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
        return shape
    if kind in ("conv2d", "maxpool", "avgpool"):
        if len(shape) != 3:
            raise ShapeError(f"{kind} needs a (C, H, W) input, got {shape}")
        k, stride = int(o["k"]), int(o.get("stride", 1 if kind == "conv2d" else o["k"]))
        pad = int(o.get("pad", 0)) if kind == "conv2d" else 0
        h = (shape[1] + 2 * pad - k) // stride + 1
        w = (shape[2] + 2 * pad - k) // stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"window {k} does not fit {shape}")
        channels = int(o["filters"]) if kind == "conv2d" else shape[0]
        return (channels, h, w)
    if kind == "activation":
        act = o["kind"]
        if act not in ACTIVATION_KINDS:
            raise ConfigError(f"unknown activation {act!r}")
        if act == "maxout":
            K = int(o["K"])
            if K < 1 or shape[0] % K:
                raise ShapeError(f"maxout K={K} does not divide width {shape[0]}")
            return (shape[0] // K,) + shape[1:]
        if act == "apl":
            if int(o["S"]) < 0:
                raise DomainError("APL S must be >= 0")
            if o.get("sharing", "shared") not in ("shared", "per_neuron"):
                raise ConfigError(f"APL sharing must be 'shared' or 'per_neuron', got {o['sharing']!r}")
        if act == "leaky_relu":
            float(o["k"])
        return shape
    raise ConfigError(f"unknown layer kind {kind!r}")


def mlp_spec(sizes, activation: dict[str, Any] | str = "relu", dropout: float = 0.0) -> NetworkSpec:
    """Dense net ``sizes[0] -> ... -> sizes[-1]`` with an activation after each hidden layer.

    For maxout the preceding dense layer is widened by ``K``.
    """
    act = parse_activation(activation) if isinstance(activation, str) else dict(activation)
    widen = act["K"] if act["kind"] == "maxout" else 1
    layers = []
    for width in sizes[1:-1]:
        layers.append(LayerSpec("dense", {"units": width * widen}))
        layers.append(activation_spec(**act))
        if dropout:
            layers.append(LayerSpec("dropout", {"rate": dropout}))
    layers.append(LayerSpec("dense", {"units": sizes[-1]}))
    return NetworkSpec((sizes[0],), layers)


def small_convnet_spec(input_shape=(1, 28, 28), activation: dict[str, Any] | str = "relu",
                       filters=(16, 32), hidden: int = 128, classes: int = 10,
                       pool_dropout: float = 0.0, fc_dropout: float = 0.0) -> NetworkSpec:
    """Desk-scale stand-in for the CIFAR conv nets: conv5x5/pad2 + pool(3, 2) blocks, then dense."""
    act = parse_activation(activation) if isinstance(activation, str) else dict(activation)
    widen = act["K"] if act["kind"] == "maxout" else 1
    layers = []
    for i, f in enumerate(filters):
        layers.append(LayerSpec("conv2d", {"filters": f * widen, "k": 5, "stride": 1, "pad": 2}))
        layers.append(activation_spec(**act))
        if pool_dropout:
            layers.append(LayerSpec("dropout", {"rate": pool_dropout}))
        layers.append(LayerSpec("maxpool" if i == 0 else "avgpool", {"k": 3, "stride": 2}))
        if pool_dropout:
            layers.append(LayerSpec("dropout", {"rate": pool_dropout}))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", {"units": hidden * widen}))
    layers.append(activation_spec(**act))
    if fc_dropout:
        layers.append(LayerSpec("dropout", {"rate": fc_dropout}))
    layers.append(LayerSpec("dense", {"units": classes}))
    return NetworkSpec(tuple(input_shape), layers)


# -- network ----------------------------------------------------------------------------

WEIGHT, BIAS, APL_A, APL_B = "weight", "bias", "apl_a", "apl_b"


class Network:
    """A network instantiated from a :class:`NetworkSpec`.

    Parameters are named ``L<index>.<role>``. Weight and APL initialisation use
    independent random streams derived from ``seed``, so two networks that
    differ only in activation get identical weights.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, init: InitScheme = InitScheme(),
                 dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.shapes = spec.shapes()
        self.params: dict[str, ad.Tensor] = {}
        self.roles: dict[str, str] = {}
        w_rng = np.random.default_rng([seed, 0])
        a_rng = np.random.default_rng([seed, 1])
        for t, layer in enumerate(spec.layers):
            in_shape = self.shapes[t]
            o = layer.options
            if layer.kind == "dense":
                fan_in = in_shape[0]
                w = w_rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, int(o["units"])))
                self._add(f"L{t}.W", w, WEIGHT)
                self._add(f"L{t}.b", np.zeros(int(o["units"])), BIAS)
            elif layer.kind == "conv2d":
                c, k, f = in_shape[0], int(o["k"]), int(o["filters"])
                w = w_rng.normal(0.0, math.sqrt(2.0 / (c * k * k)), size=(f, c, k, k))
                self._add(f"L{t}.W", w, WEIGHT)
                self._add(f"L{t}.b", np.zeros(f), BIAS)
            elif layer.kind == "activation" and o["kind"] == "apl":
                M = apl_unit_count(in_shape, o.get("sharing", "shared"))
                p = init_apl(M, int(o["S"]), a_rng, init)
                self._add(f"L{t}.apl_a", p.a, APL_A)
                self._add(f"L{t}.apl_b", p.b, APL_B)

    def _add(self, name: str, value: np.ndarray, role: str):
        self.params[name] = ad.parameter(np.asarray(value, dtype=self.dtype), name)
        self.roles[name] = role

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def apl_layers(self) -> list[int]:
        return [t for t, l in enumerate(self.spec.layers)
                if l.kind == "activation" and l.options["kind"] == "apl"]

    def apl_params(self, t: int) -> AplLayerParams:
        return AplLayerParams(self.params[f"L{t}.apl_a"].data, self.params[f"L{t}.apl_b"].data)

    def apl_names(self) -> list[str]:
        return [n for n, r in self.roles.items() if r in (APL_A, APL_B)]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n, p in self.params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            if state[n].shape != p.data.shape:
                raise ShapeError(f"parameter {n}: shape {state[n].shape} != {p.data.shape}")
            p.data = np.array(state[n], dtype=self.dtype)

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                record: dict | None = None) -> ad.Tensor:
        """Run the network; ``rng`` drives dropout masks in train mode.

        If ``record`` is a dict, the input to every activation layer is stored
        in it under the layer index (used for kink-distance bookkeeping).
        """
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=self.dtype))
        for t, layer in enumerate(self.spec.layers):
            o = layer.options
            kind = layer.kind
            if kind == "dense":
                h = ad.dense(h, self.params[f"L{t}.W"], self.params[f"L{t}.b"])
            elif kind == "conv2d":
                h = ad.conv2d(h, self.params[f"L{t}.W"], self.params[f"L{t}.b"],
                              int(o.get("stride", 1)), int(o.get("pad", 0)))
            elif kind == "maxpool":
                h = ad.maxpool2d(h, int(o["k"]), int(o.get("stride", o["k"])))
            elif kind == "avgpool":
                h = ad.avgpool2d(h, int(o["k"]), int(o.get("stride", o["k"])))
            elif kind == "flatten":
                h = ad.flatten(h)
            elif kind == "dropout":
                if train and float(o["rate"]) > 0:
                    if rng is None:
                        raise ValueError("train-mode dropout needs an rng")
                    h = ad.dropout(h, F.dropout_mask(h.shape, float(o["rate"]), rng, "train", self.dtype))
            elif kind == "activation":
                if record is not None:
                    record[t] = h.data
                h = self._activate(t, h, o)
        return h

    def _activate(self, t: int, h: ad.Tensor, o: dict) -> ad.Tensor:
        act = o["kind"]
        if act == "relu":
            return ad.relu(h)
        if act == "leaky_relu":
            return ad.leaky_relu(h, float(o["k"]))
        if act == "maxout":
            return ad.maxout(h, int(o["K"]))
        a, b = self.params[f"L{t}.apl_a"], self.params[f"L{t}.apl_b"]
        if o.get("sharing", "shared") == "per_neuron" and h.data.ndim > 2:
            shape = h.shape
            return ad.reshape(ad.apl(ad.flatten(h), a, b), shape)
        return ad.apl(h, a, b)

    def predict(self, x, batch_size: int = 1000) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


def apl_unit_count(feature_shape, sharing: str = "shared") -> int:
    """M for an APL layer: channels (or width) when shared, every element when per-neuron."""
    if sharing == "per_neuron":
        return math.prod(feature_shape)
    return feature_shape[0]


def expected_apl_param_count(spec: NetworkSpec) -> int:
    """Sum of 2*S*M over the APL layers of ``spec``, computed from shapes alone."""
    shapes = spec.shapes()
    total = 0
    for t, layer in enumerate(spec.layers):
        if layer.kind == "activation" and layer.options["kind"] == "apl":
            M = apl_unit_count(shapes[t], layer.options.get("sharing", "shared"))
            total += 2 * int(layer.options["S"]) * M
    return total


def kink_distances(net: Network, x) -> np.ndarray:
    """Signed distances of every activation input to every kink it can cross."""
    record: dict[int, np.ndarray] = {}
    net.forward(x, record=record)
    parts = []
    for t, pre in record.items():
        o = net.spec.layers[t].options
        if o["kind"] in ("relu", "leaky_relu", "apl"):
            parts.append(pre.ravel())
        if o["kind"] == "apl" and int(o["S"]) > 0:
            b = net.params[f"L{t}.apl_b"].data
            flat = pre.reshape(pre.shape[0], -1) if o.get("sharing") == "per_neuron" else pre
            be = b.reshape(b.shape[0], *([1] * (flat.ndim - 2)), b.shape[1])
            parts.append((flat[..., None] - be).ravel())
        if o["kind"] == "maxout":
            K = int(o["K"])
            g = np.sort(pre.reshape(pre.shape[0], pre.shape[1] // K, K, *pre.shape[2:]), axis=2)
            parts.append((g[:, :, -1] - g[:, :, -2]).ravel() if K > 1 else np.empty(0))
    return np.concatenate(parts) if parts else np.empty(0)
