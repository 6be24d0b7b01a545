"""Layer descriptors, forward pass and parameter registry for small classifiers.

Parametrized layers (dense and conv) are numbered 0..L-1 in network order;
that number is the ``layer_id`` used by :class:`BitLocation`. Within a layer,
weights are addressed by their flat row-major index into the code array.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .quant import BitLocation, QuantizedTensor, flip_codes, quantize
from .tensor import ContractError, DimensionError, Tensor


class ConfigError(ValueError):
    """Unknown or invalid model configuration."""


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    @property
    def weight_shape(self) -> tuple:
        return (self.in_features, self.out_features)

    @property
    def bias_shape(self) -> tuple:
        return (self.out_features,)

    def fans(self) -> Tuple[int, int]:
        return self.in_features, self.out_features

    def out_shape(self, shape: tuple) -> tuple:
        if shape != (self.in_features,):
            raise DimensionError(f"dense layer expects ({self.in_features},) features, got {shape}")
        return (self.out_features,)


@dataclass(frozen=True)
class Conv:
    out_channels: int
    in_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kh, self.kw)

    @property
    def bias_shape(self) -> tuple:
        return (self.out_channels,)

    def fans(self) -> Tuple[int, int]:
        return self.in_channels * self.kh * self.kw, self.out_channels * self.kh * self.kw

    def out_shape(self, shape: tuple) -> tuple:
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise DimensionError(f"conv layer expects ({self.in_channels}, h, w) input, got {shape}")
        _, h, w = shape
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < self.kh or wp < self.kw:
            raise DimensionError(f"conv kernel {self.kh}x{self.kw} larger than padded input {hp}x{wp}")
        return (
            self.out_channels,
            (hp - self.kh) // self.stride + 1,
            (wp - self.kw) // self.stride + 1,
        )


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, shape: tuple) -> tuple:
        return shape


@dataclass(frozen=True)
class AvgPool2:
    def out_shape(self, shape: tuple) -> tuple:
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise DimensionError(f"avgpool2 expects (c, h>=2, w>=2), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, shape: tuple) -> tuple:
        return (int(np.prod(shape)),)


Layer = Union[Dense, Conv, ReLU, AvgPool2, Flatten]
PARAM_LAYERS = (Dense, Conv)


@dataclass(frozen=True, eq=False)
class Model:
    """An ordered stack of layers plus quantized weights and real biases.

    Instances are treated as immutable; :meth:`with_weight` and
    :func:`flip_bit` return new models that share untouched tensors.
    """

    name: str
    layers: Tuple[Layer, ...]
    input_shape: Tuple[int, ...]
    weights: Tuple[QuantizedTensor, ...]
    biases: Tuple[np.ndarray, ...]
    class_count: int

    def __post_init__(self):
        shape = tuple(self.input_shape)
        param_layers = [layer for layer in self.layers if isinstance(layer, PARAM_LAYERS)]
        if len(param_layers) != len(self.weights) or len(param_layers) != len(self.biases):
            raise ConfigError("weights/biases do not match the parametrized layers")
        k = 0
        for idx, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {idx} ({type(layer).__name__}): {exc}") from None
            if isinstance(layer, PARAM_LAYERS):
                if self.weights[k].shape != layer.weight_shape:
                    raise DimensionError(f"layer {idx}: weight shape {self.weights[k].shape} != {layer.weight_shape}")
                if np.shape(self.biases[k]) != layer.bias_shape:
                    raise DimensionError(f"layer {idx}: bias shape {np.shape(self.biases[k])} != {layer.bias_shape}")
                k += 1
        if shape != (self.class_count,):
            raise DimensionError(f"network output shape {shape} != ({self.class_count},)")

    # registry ----------------------------------------------------------
    @property
    def param_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if isinstance(layer, PARAM_LAYERS)]

    @property
    def num_param_layers(self) -> int:
        return len(self.weights)

    @property
    def weight_count(self) -> int:
        return sum(w.size for w in self.weights)

    @property
    def bit_count(self) -> int:
        return 8 * self.weight_count

    @property
    def parameter_count(self) -> int:
        return self.weight_count + sum(b.size for b in self.biases)

    def bit_locations(self) -> Iterator[BitLocation]:
        """Every flippable bit, in layer order, then flat weight index, then bit."""
        for layer_id, w in enumerate(self.weights):
            for idx in range(w.size):
                for bit in range(8):
                    yield BitLocation(layer_id, idx, bit)

    def with_weight(self, layer_id: int, q: QuantizedTensor) -> "Model":
        weights = list(self.weights)
        weights[layer_id] = q
        return dataclasses.replace(self, weights=tuple(weights))

    def with_params(self, weights: Sequence[QuantizedTensor], biases: Sequence[np.ndarray]) -> "Model":
        return dataclasses.replace(
            self,
            weights=tuple(weights),
            biases=tuple(np.array(b, dtype=np.float64) for b in biases),
        )

    def param_tensors(self, requires_grad: bool = False) -> List[Tuple[Tensor, Tensor]]:
        """Dequantized (weight, bias) leaf tensors, one pair per parametrized layer."""
        return [
            (Tensor(w.dequantize(), requires_grad=requires_grad), Tensor(b, requires_grad=requires_grad))
            for w, b in zip(self.weights, self.biases)
        ]

    def same_state(self, other: "Model") -> bool:
        """Bit-exact equality of architecture, codes, scales and biases."""
        return (
            self.name == other.name
            and self.layers == other.layers
            and tuple(self.input_shape) == tuple(other.input_shape)
            and self.class_count == other.class_count
            and len(self.weights) == len(other.weights)
            and all(a == b for a, b in zip(self.weights, other.weights))
            and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.biases, other.biases))
        )

    def forward(self, batch, params: Optional[Sequence[Tuple[Tensor, Tensor]]] = None) -> Tensor:
        return forward(self, batch, params)


def _coerce_batch(model: Model, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    want = tuple(model.input_shape)
    if x.shape[1:] == want:
        return x
    if x.data.ndim >= 1 and int(np.prod(x.shape[1:])) == int(np.prod(want)):
        return T.reshape(x, (x.shape[0],) + want)
    first = model.layers[0] if model.layers else None
    raise DimensionError(
        f"batch sample shape {x.shape[1:]} does not match input {want} of layer 0 ({type(first).__name__})"
    )


def forward(model: Model, batch, params: Optional[Sequence[Tuple[Tensor, Tensor]]] = None) -> Tensor:
    """Logits for ``batch``; weights default to the dequantized codes.

    Pass ``params`` (e.g. from ``model.param_tensors(requires_grad=True)``) to
    differentiate with respect to the dequantized weights and biases.
    """
    x = _coerce_batch(model, batch)
    if params is None:
        params = model.param_tensors()
    k = 0
    for idx, layer in enumerate(model.layers):
        try:
            if isinstance(layer, Dense):
                w, b = params[k]
                x = T.add(T.matmul(x, w), b)
                k += 1
            elif isinstance(layer, Conv):
                w, b = params[k]
                x = T.conv2d(x, w, layer.stride, layer.padding)
                x = T.add(x, T.reshape(b, (1, -1, 1, 1)))
                k += 1
            elif isinstance(layer, ReLU):
                x = T.relu(x)
            elif isinstance(layer, AvgPool2):
                x = T.avgpool2(x)
            elif isinstance(layer, Flatten):
                x = T.flatten(x)
            else:
                raise ConfigError(f"unknown layer type {type(layer).__name__}")
        except DimensionError as exc:
            raise DimensionError(f"layer {idx} ({type(layer).__name__}): {exc}") from None
    return x


def predict(model: Model, batch) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    with T.no_grad():
        return np.argmax(forward(model, batch).data, axis=1)


def flip_bit(model: Model, loc: BitLocation) -> Model:
    """New model with exactly one weight bit toggled."""
    layer_id, weight_index, bit_index = loc
    if not 0 <= layer_id < model.num_param_layers:
        raise ContractError(f"layer id {layer_id} outside [0, {model.num_param_layers})")
    return model.with_weight(layer_id, flip_codes(model.weights[layer_id], weight_index, bit_index))


def apply_flips(model: Model, locs: Sequence[BitLocation]) -> Model:
    """Toggle a sequence of bits, copying each touched tensor once."""
    codes = {}
    for layer_id, weight_index, bit_index in locs:
        if not 0 <= layer_id < model.num_param_layers:
            raise ContractError(f"layer id {layer_id} outside [0, {model.num_param_layers})")
        q = model.weights[layer_id]
        if not 0 <= weight_index < q.size or not 0 <= bit_index < 8:
            raise ContractError(f"invalid bit location {(layer_id, weight_index, bit_index)}")
        if layer_id not in codes:
            codes[layer_id] = q.codes.copy()
        flat = codes[layer_id].reshape(-1).view(np.uint8)
        flat[weight_index] ^= np.uint8(1 << bit_index)
    weights = list(model.weights)
    for layer_id, c in codes.items():
        weights[layer_id] = QuantizedTensor(c, model.weights[layer_id].params)
    return dataclasses.replace(model, weights=tuple(weights))


# architectures -----------------------------------------------------------

ARCHITECTURES = {
    "mlp2": ((784,), (Dense(784, 256), ReLU(), Dense(256, 10))),
    "lenet3": (
        (1, 28, 28),
        (
            Conv(8, 1, 5, 5), ReLU(), AvgPool2(),
            Conv(16, 8, 5, 5), ReLU(), AvgPool2(),
            Flatten(), Dense(256, 10),
        ),
    ),
    "lenet5": (
        (1, 28, 28),
        (
            Conv(6, 1, 5, 5, padding=2), ReLU(), AvgPool2(),
            Conv(16, 6, 5, 5), ReLU(), AvgPool2(),
            Flatten(), Dense(400, 120), ReLU(), Dense(120, 84), ReLU(), Dense(84, 10),
        ),
    ),
}


def init_params(layers: Sequence[Layer], rng: np.random.Generator):
    weights, biases = [], []
    for layer in layers:
        if isinstance(layer, PARAM_LAYERS):
            fan_in, fan_out = layer.fans()
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(quantize(rng.uniform(-limit, limit, size=layer.weight_shape)))
            biases.append(np.zeros(layer.bias_shape))
    return weights, biases


def make_model(name: str, layers: Sequence[Layer], input_shape: Sequence[int], seed: int = 0) -> Model:
    """Glorot-uniform initialized, quantized model for an arbitrary layer stack."""
    layers = tuple(layers)
    weights, biases = init_params(layers, np.random.default_rng(seed))
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    return Model(name, layers, tuple(input_shape), tuple(weights), tuple(biases), shape[0])


def build_model(spec_name: str, seed: int = 0) -> Model:
    if spec_name not in ARCHITECTURES:
        raise ConfigError(f"unknown model {spec_name!r}; choose one of {sorted(ARCHITECTURES)}")
    input_shape, layers = ARCHITECTURES[spec_name]
    return make_model(spec_name, layers, input_shape, seed)
