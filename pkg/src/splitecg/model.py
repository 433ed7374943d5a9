"""Declarative 1D CNN configurations and their client/server parts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

CONV = "Conv1D"
LEAKY = "LeakyReLU"
POOL = "MaxPool2"
FLATTEN = "Flatten"
DENSE = "Dense"
SOFTMAX = "SoftmaxOutput"
KINDS = (CONV, LEAKY, POOL, FLATTEN, DENSE, SOFTMAX)

INPUT_LENGTH = 128
NUM_CLASSES = 5
FILTERS = 16
HIDDEN_UNITS = 128
MIN_DEPTH, MAX_DEPTH = 2, 8

# streams for parameter initialisation; keeps the server's weights
# independent of how many layers the client holds
CLIENT_STREAM, SERVER_STREAM = 1, 2


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    filter_size: int = 0
    units: int = 0
    alpha: float = T.LEAKY_SLOPE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in (CONV, DENSE)


def conv(filters: int, filter_size: int) -> LayerSpec:
    return LayerSpec(CONV, filters=filters, filter_size=filter_size)


def leaky(alpha: float = T.LEAKY_SLOPE) -> LayerSpec:
    return LayerSpec(LEAKY, alpha=alpha)


def dense(units: int) -> LayerSpec:
    return LayerSpec(DENSE, units=units)


POOL_LAYER = LayerSpec(POOL)
FLATTEN_LAYER = LayerSpec(FLATTEN)
SOFTMAX_LAYER = LayerSpec(SOFTMAX)


@dataclass(frozen=True)
class ModelConfig:
    """Ordered layer list plus the split index.

    ``split_index`` is the number of layers held by the client: layers
    ``[0, split_index)`` form part A, the rest part B.
    """

    layers: tuple[LayerSpec, ...]
    split_index: int
    input_length: int = INPUT_LENGTH
    in_channels: int = 1
    num_classes: int = NUM_CLASSES
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def depth(self) -> int:
        """Number of convolutional layers on the client."""
        return sum(1 for spec in self.layers[: self.split_index] if spec.kind == CONV)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shape after each layer, preceded by the input shape."""
        shape: tuple[int, ...] = (self.in_channels, self.input_length)
        out = [shape]
        for i, spec in enumerate(self.layers):
            if spec.kind == CONV:
                if len(shape) != 2:
                    raise ConfigError(f"layer {i}: Conv1D needs (C, L) input, got {shape}")
                if spec.filters < 1 or spec.filter_size < 1 or spec.filter_size % 2 == 0:
                    raise ConfigError(f"layer {i}: bad conv parameters {spec}")
                if shape[1] < spec.filter_size:
                    raise ConfigError(f"layer {i}: length {shape[1]} < filter {spec.filter_size}")
                shape = (spec.filters, shape[1])
            elif spec.kind == POOL:
                if len(shape) != 2 or shape[1] % 2:
                    raise ConfigError(f"layer {i}: MaxPool2 needs even length, got {shape}")
                shape = (shape[0], shape[1] // 2)
            elif spec.kind == FLATTEN:
                shape = (int(np.prod(shape)),)
            elif spec.kind == DENSE:
                if len(shape) != 1:
                    raise ConfigError(f"layer {i}: Dense needs flat input, got {shape}")
                if spec.units < 1:
                    raise ConfigError(f"layer {i}: Dense needs units >= 1")
                shape = (spec.units,)
            elif spec.kind == LEAKY:
                if not 0.0 < spec.alpha < 1.0:
                    raise ConfigError(f"layer {i}: leaky slope must be in (0, 1)")
            out.append(shape)
        return out

    def validate(self) -> None:
        n = len(self.layers)
        if n == 0:
            raise ConfigError("empty layer list")
        softmax_at = [i for i, s in enumerate(self.layers) if s.kind == SOFTMAX]
        if softmax_at != [n - 1]:
            raise ConfigError("SoftmaxOutput must appear exactly once, as the last layer")
        if not 1 <= self.split_index < n:
            raise ConfigError(f"split index {self.split_index} outside [1, {n})")
        # the transmitted tensor must be an activation (optionally pooled)
        j = self.split_index - 1
        while j >= 0 and self.layers[j].kind == POOL:
            j -= 1
        if j < 0 or self.layers[j].kind != LEAKY:
            raise ConfigError("split must fall right after an activation (or its pooling)")
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise ConfigError(f"output shape {shapes[-1]} != ({self.num_classes},)")

    @property
    def split_shape(self) -> tuple[int, ...]:
        return self.shapes()[self.split_index]

    @property
    def prepool_index(self) -> int:
        """Number of client layers up to the last activation before the split."""
        j = self.split_index
        while self.layers[j - 1].kind == POOL:
            j -= 1
        return j

    def client_layers(self) -> tuple[LayerSpec, ...]:
        return self.layers[: self.split_index]

    def server_layers(self) -> tuple[LayerSpec, ...]:
        return self.layers[self.split_index:]

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"name = {self.name}",
            f"input_length = {self.input_length}",
            f"in_channels = {self.in_channels}",
            f"num_classes = {self.num_classes}",
            f"split_index = {self.split_index}",
        ]
        for spec in self.layers:
            lines.append("")
            lines.append("[layer]")
            lines.append(f"kind = {spec.kind}")
            if spec.kind == CONV:
                lines.append(f"filters = {spec.filters}")
                lines.append(f"filter_size = {spec.filter_size}")
            elif spec.kind == DENSE:
                lines.append(f"units = {spec.units}")
            elif spec.kind == LEAKY:
                lines.append(f"alpha = {spec.alpha!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        header: dict[str, str] = {}
        layers: list[dict[str, str]] = []
        current = header
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[layer]":
                current = {}
                layers.append(current)
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            current[key] = value
        specs = []
        for fields in layers:
            kind = fields.pop("kind", None)
            if kind is None:
                raise ConfigError("layer without kind")
            kwargs = {k: (float(v) if k == "alpha" else int(v)) for k, v in fields.items()}
            specs.append(LayerSpec(kind, **kwargs))
        try:
            return cls(
                layers=tuple(specs),
                split_index=int(header["split_index"]),
                input_length=int(header.get("input_length", INPUT_LENGTH)),
                in_channels=int(header.get("in_channels", 1)),
                num_classes=int(header.get("num_classes", NUM_CLASSES)),
                name=header.get("name", "custom"),
            )
        except KeyError as exc:
            raise ConfigError(f"missing header key {exc}") from None


def _server_head() -> list[LayerSpec]:
    return [FLATTEN_LAYER, dense(HIDDEN_UNITS), leaky(), dense(NUM_CLASSES), SOFTMAX_LAYER]


def build_depth_k(k: int) -> ModelConfig:
    """Two-layer base with ``k - 2`` extra Conv(16, 5) + LeakyReLU blocks on the client.

    The extra blocks sit between the second activation and the final pool, so
    the pre-pool activation stays 16x64 and the wire tensor 16x32 for every k.
    """
    if not MIN_DEPTH <= k <= MAX_DEPTH:
        raise ConfigError(f"depth must be in [{MIN_DEPTH}, {MAX_DEPTH}], got {k}")
    client = [conv(FILTERS, 7), leaky(), POOL_LAYER, conv(FILTERS, 5), leaky()]
    for _ in range(k - 2):
        client += [conv(FILTERS, 5), leaky()]
    client.append(POOL_LAYER)
    name = {2: "two-layer", 3: "three-layer"}.get(k, f"depth-{k}")
    return ModelConfig(layers=tuple(client + _server_head()), split_index=len(client), name=name)


def build_two_layer() -> ModelConfig:
    return build_depth_k(2)


def build_three_layer() -> ModelConfig:
    return build_depth_k(3)


def build_model(name: str, depth: int | None = None) -> ModelConfig:
    if name in ("two-layer", "two"):
        return build_two_layer()
    if name in ("three-layer", "three"):
        return build_three_layer()
    if name in ("depth-k", "depth"):
        if depth is None:
            raise ConfigError("depth-k model needs a depth")
        return build_depth_k(depth)
    raise ConfigError(f"unknown model {name!r}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _init_layers(layers, input_shape, seed: int, stream: int) -> dict[int, list[np.ndarray]]:
    """Glorot-uniform weights and zero biases, one splitmix64 stream per layer."""
    params: dict[int, list[np.ndarray]] = {}
    shape = input_shape
    for i, spec in enumerate(layers):
        if spec.kind == CONV:
            c_in = shape[0]
            rng = T.SplitMix64(T.derive_seed(seed, stream, i))
            w = T.glorot_uniform((spec.filters, c_in, spec.filter_size),
                                 c_in * spec.filter_size, spec.filters * spec.filter_size, rng)
            params[i] = [w, np.zeros(spec.filters)]
            shape = (spec.filters, shape[1])
        elif spec.kind == DENSE:
            rng = T.SplitMix64(T.derive_seed(seed, stream, i))
            w = T.glorot_uniform((spec.units, shape[0]), shape[0], spec.units, rng)
            params[i] = [w, np.zeros(spec.units)]
            shape = (spec.units,)
        elif spec.kind == POOL:
            shape = (shape[0], shape[1] // 2)
        elif spec.kind == FLATTEN:
            shape = (int(np.prod(shape)),)
    return params


class ModelPart:
    """A contiguous run of layers with its own parameters.

    ``forward`` caches what ``backward`` needs; each cache is consumed by
    exactly one backward call.
    """

    def __init__(self, layers, input_shape, params: dict[int, list[np.ndarray]], offset: int = 0):
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.params = params
        self.offset = offset
        self._cache: list | None = None

    # parameters are exposed as a flat list in layer order (weight, bias, ...)
    def parameters(self) -> list[np.ndarray]:
        return [p for i in sorted(self.params) for p in self.params[i]]

    def param_layers(self) -> list[int]:
        return sorted(self.params)

    @property
    def ends_in_softmax(self) -> bool:
        return self.layers[-1].kind == SOFTMAX

    def forward(self, x: np.ndarray, tap: int | None = None) -> np.ndarray:
        """Run the part on a batch ``(B, *input_shape)``.

        With ``tap`` set, also record the output of local layer ``tap - 1``
        in ``self.tapped``.  For a softmax-terminated part the return value is
        the probability matrix; the logits stay cached for the loss.
        """
        a = np.asarray(x, dtype=np.float64)
        if a.shape[1:] != self.input_shape:
            raise T.ShapeError(f"part expects (B, {self.input_shape}), got {a.shape}")
        cache = []
        self.tapped = None
        for i, spec in enumerate(self.layers):
            if tap is not None and i == tap:
                self.tapped = a
            if spec.kind == CONV:
                w, b = self.params[i]
                cache.append(a)
                a = T.conv1d_forward(a, w, b)
            elif spec.kind == LEAKY:
                cache.append(a)
                a = T.leaky_relu(a, spec.alpha)
            elif spec.kind == POOL:
                a, idx = T.maxpool2(a)
                cache.append(idx)
            elif spec.kind == FLATTEN:
                cache.append(a.shape)
                a = np.ascontiguousarray(a.reshape(a.shape[0], -1))
            elif spec.kind == DENSE:
                w, b = self.params[i]
                cache.append(a)
                a = T.dense_forward(a, w, b)
            elif spec.kind == SOFTMAX:
                cache.append(a)
                a = T.softmax(a)
        if tap is not None and tap == len(self.layers):
            self.tapped = a
        self._cache = cache
        return a

    def _backward_layers(self, grad: np.ndarray, start: int, need_input_grad: bool):
        cache = self._cache
        grads: dict[int, list[np.ndarray]] = {}
        for i in range(start, -1, -1):
            spec = self.layers[i]
            saved = cache[i]
            last = i == 0 and not need_input_grad
            if spec.kind == CONV:
                w, _ = self.params[i]
                dw, db = T.conv1d_backward_weights(grad, saved, spec.filter_size)
                grads[i] = [dw, db]
                if not last:
                    grad = T.conv1d_backward_input(grad, w)
            elif spec.kind == LEAKY:
                grad = T.leaky_relu_grad(saved, grad, spec.alpha)
            elif spec.kind == POOL:
                grad = T.maxpool2_grad(grad, saved, 2 * grad.shape[-1])
            elif spec.kind == FLATTEN:
                grad = grad.reshape(saved)
            elif spec.kind == DENSE:
                w, _ = self.params[i]
                gin, dw, db = T.dense_backward(grad, saved, w)
                grads[i] = [dw, db]
                grad = gin
        ordered = [g for i in sorted(grads) for g in grads[i]]
        return ordered, (grad if need_input_grad else None)

    def _take_cache(self):
        if self._cache is None:
            raise StateError("backward called without a pending forward pass")
        return self._cache

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        """Backpropagate ``dE/d(output)``.  Returns (param_grads, grad_in)."""
        self._take_cache()
        if self.ends_in_softmax:
            raise StateError("use loss_backward on a softmax-terminated part")
        try:
            return self._backward_layers(np.asarray(grad_out, dtype=np.float64),
                                         len(self.layers) - 1, need_input_grad)
        finally:
            self._cache = None

    def loss_backward(self, labels, need_input_grad: bool = True):
        """Cross-entropy against ``labels`` and backprop from the logits.

        Returns (loss, probs, param_grads, grad_in).
        """
        cache = self._take_cache()
        if not self.ends_in_softmax:
            raise StateError("part has no softmax output")
        try:
            loss, probs, grad = T.softmax_cross_entropy(cache[-1], labels)
            grads, grad_in = self._backward_layers(grad, len(self.layers) - 2, need_input_grad)
            return loss, probs, grads, grad_in
        finally:
            self._cache = None

    def clear(self) -> None:
        self._cache = None


def init_params(config: ModelConfig, seed: int) -> dict[int, list[np.ndarray]]:
    """Parameters for the whole model keyed by global layer index."""
    shapes = config.shapes()
    client = _init_layers(config.client_layers(), shapes[0], seed, CLIENT_STREAM)
    server = _init_layers(config.server_layers(), shapes[config.split_index], seed, SERVER_STREAM)
    params = dict(client)
    params.update({config.split_index + i: p for i, p in server.items()})
    return params


def full_model(config: ModelConfig, params: dict[int, list[np.ndarray]]) -> ModelPart:
    return ModelPart(config.layers, config.shapes()[0], params)


def split(config: ModelConfig, params: dict[int, list[np.ndarray]]) -> tuple[ModelPart, ModelPart]:
    """Partition parameters into client part A and server part B.

    The parts get copies, so training them never aliases ``params``.
    """
    l = config.split_index
    shapes = config.shapes()
    client = {i: [p.copy() for p in ps] for i, ps in params.items() if i < l}
    server = {i - l: [p.copy() for p in ps] for i, ps in params.items() if i >= l}
    return (ModelPart(config.client_layers(), shapes[0], client),
            ModelPart(config.server_layers(), shapes[l], server, offset=l))


def build_parts(config: ModelConfig, seed: int) -> tuple[ModelPart, ModelPart]:
    return split(config, init_params(config, seed))


def client_part(config: ModelConfig, seed: int) -> ModelPart:
    shapes = config.shapes()
    return ModelPart(config.client_layers(), shapes[0],
                     _init_layers(config.client_layers(), shapes[0], seed, CLIENT_STREAM))


def server_part(config: ModelConfig, seed: int) -> ModelPart:
    shapes = config.shapes()
    l = config.split_index
    return ModelPart(config.server_layers(), shapes[l],
                     _init_layers(config.server_layers(), shapes[l], seed, SERVER_STREAM), offset=l)


def merge(client: ModelPart, server: ModelPart) -> dict[int, list[np.ndarray]]:
    params = {i: ps for i, ps in client.params.items()}
    params.update({i + server.offset: ps for i, ps in server.params.items()})
    return params


def predict(parts, x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Class predictions of a chain of parts, evaluated in chunks."""
    preds = []
    for start in range(0, len(x), batch):
        a = x[start:start + batch]
        for part in parts:
            a = part.forward(a)
            part.clear()
        preds.append(np.argmax(a, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)
