"""Network builders: extractor, classifier, conditional generator, discriminator.

The extractor/classifier pair is the classic LeNet-5 split: two conv+pool
stages in front, three dense layers behind. The generator and discriminator
are a small DCGAN-style pair whose kernel sizes and strides are pinned so
the generator's output shape equals the extractor's feature map exactly.
All builders are pure functions of (spec, seed).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters shared by the four network roles."""

    image_channels: int = 3
    image_size: int = 32
    classes: int = 10
    noise_dim: int = 100
    extractor_channels: tuple[int, int] = (6, 16)
    classifier_widths: tuple[int, int] = (120, 84)
    generator_channels: tuple[int, int, int] = (64, 32, 32)
    discriminator_channels: tuple[int, int] = (32, 64)

    def __post_init__(self):
        if self.image_size != 32:
            raise ShapeError("builders are pinned to 32x32 inputs")
        if self.classes < 2:
            raise ShapeError("need at least 2 classes")
        if self.noise_dim < 1:
            raise ShapeError("noise dimension must be >= 1")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        # 32 -> conv5 -> 28 -> pool -> 14 -> conv5 -> 10 -> pool -> 5
        return (self.extractor_channels[1], 5, 5)

    @property
    def feature_dim(self) -> int:
        c, h, w = self.feature_shape
        return c * h * w


def one_hot(labels: np.ndarray, classes: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise T.DomainError(f"labels out of range [0, {classes})")
    out = np.zeros((labels.shape[0], classes), dtype=dtype or T.default_dtype())
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias_uniform(rng: np.random.Generator, size: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


class Network:
    """Ordered named-parameter container with (de)serialization helpers."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add_conv(self, rng, name: str, cout: int, cin: int, k: int) -> None:
        fan_in = cin * k * k
        self.params[f"{name}.weight"] = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), fan_in),
                                               requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(_bias_uniform(rng, cout, fan_in), requires_grad=True)

    def _add_conv_transpose(self, rng, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        self.params[f"{name}.weight"] = Tensor(_kaiming_uniform(rng, (cin, cout, k, k), fan_in),
                                               requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(_bias_uniform(rng, cout, fan_in), requires_grad=True)

    def _add_affine(self, rng, name: str, dout: int, din: int) -> None:
        self.params[f"{name}.weight"] = Tensor(_kaiming_uniform(rng, (dout, din), din),
                                               requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(_bias_uniform(rng, dout, din), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ShapeError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter '{name}' shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag


class Extractor(Network):
    """LeNet front half: conv5-relu-avgpool twice, 32x32 images to feature maps."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        c1, c2 = spec.extractor_channels
        self._add_conv(rng, "conv1", c1, spec.image_channels, 5)
        self._add_conv(rng, "conv2", c2, c1, 5)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
        h = T.avg_pool2d(h, 2)
        h = T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"]))
        return T.avg_pool2d(h, 2)


class Classifier(Network):
    """LeNet back half: three dense layers over flattened features, returns logits."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        w1, w2 = spec.classifier_widths
        self._add_affine(rng, "fc1", w1, spec.feature_dim)
        self._add_affine(rng, "fc2", w2, w1)
        self._add_affine(rng, "fc3", spec.classes, w2)

    def __call__(self, features: Tensor) -> Tensor:
        p = self.params
        if features.data.ndim == 4:
            features = T.reshape(features, (features.shape[0], -1))
        h = T.relu(T.affine(features, p["fc1.weight"], p["fc1.bias"]))
        h = T.relu(T.affine(h, p["fc2.weight"], p["fc2.bias"]))
        return T.affine(h, p["fc3.weight"], p["fc3.bias"])


class Generator(Network):
    """Conditional generator mapping (noise, one-hot label) to feature maps.

    concat(z, onehot) -> dense to a 2x2 seed volume -> two transposed-conv
    stages -> plain conv head with linear output. Output range is unsquashed
    because extractor features (post-relu) are nonnegative but unbounded.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        g1, g2, g3 = spec.generator_channels
        self.seed_channels = g1
        self._add_affine(rng, "fc", g1 * 2 * 2, spec.noise_dim + spec.classes)
        self._add_conv_transpose(rng, "deconv1", g1, g2, 3)   # 2 -> 3 (stride 2, pad 1)
        self._add_conv_transpose(rng, "deconv2", g2, g3, 3)   # 3 -> 5 (stride 1, pad 0)
        self._add_conv(rng, "conv_out", spec.feature_shape[0], g3, 3)  # 5 -> 5 (pad 1)

    def __call__(self, z: Tensor, labels: np.ndarray) -> Tensor:
        p = self.params
        onehot = Tensor(one_hot(labels, self.spec.classes))
        h = T.concat([z, onehot], axis=1)
        h = T.affine(h, p["fc.weight"], p["fc.bias"])
        h = T.relu(T.reshape(h, (z.shape[0], self.seed_channels, 2, 2)))
        h = T.relu(T.conv_transpose2d(h, p["deconv1.weight"], p["deconv1.bias"], stride=2, padding=1))
        h = T.relu(T.conv_transpose2d(h, p["deconv2.weight"], p["deconv2.bias"], stride=1, padding=0))
        return T.conv2d(h, p["conv_out.weight"], p["conv_out.bias"], stride=1, padding=1)


class Discriminator(Network):
    """Real-versus-generated feature critic conditioned on the class label.

    The one-hot label is broadcast over the spatial grid and concatenated as
    extra input channels; two strided conv stages with leaky relu feed a
    dense sigmoid head returning one scalar in (0, 1) per sample.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        d1, d2 = spec.discriminator_channels
        fc, fh, fw = spec.feature_shape
        self._add_conv(rng, "conv1", d1, fc + spec.classes, 3)  # 5 -> 3 (stride 2, pad 1)
        self._add_conv(rng, "conv2", d2, d1, 3)                 # 3 -> 1
        self._add_affine(rng, "fc", 1, d2)

    def __call__(self, features: Tensor, labels: np.ndarray) -> Tensor:
        p = self.params
        n = features.shape[0]
        fc, fh, fw = self.spec.feature_shape
        onehot = one_hot(labels, self.spec.classes)
        label_maps = Tensor(np.broadcast_to(onehot[:, :, None, None], (n, self.spec.classes, fh, fw)).copy())
        h = T.concat([features, label_maps], axis=1)
        h = T.leaky_relu(T.conv2d(h, p["conv1.weight"], p["conv1.bias"], stride=2, padding=1), 0.2)
        h = T.leaky_relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"]), 0.2)
        h = T.reshape(h, (n, -1))
        return T.sigmoid(T.affine(h, p["fc.weight"], p["fc.bias"]))


def _builder_rng(seed: int, role: str) -> np.random.Generator:
    role_tag = {"E": 1, "C": 2, "G": 3, "D": 4}[role]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), role_tag])))


def build_extractor(spec: ModelSpec, seed: int) -> Extractor:
    return Extractor(spec, _builder_rng(seed, "E"))


def build_classifier(spec: ModelSpec, seed: int) -> Classifier:
    return Classifier(spec, _builder_rng(seed, "C"))


def build_generator(spec: ModelSpec, seed: int) -> Generator:
    return Generator(spec, _builder_rng(seed, "G"))


def build_discriminator(spec: ModelSpec, seed: int) -> Discriminator:
    return Discriminator(spec, _builder_rng(seed, "D"))


@dataclass
class NetworkBundle:
    """A client's four networks plus the spec that shaped them."""

    extractor: Extractor
    classifier: Classifier
    generator: Generator
    discriminator: Discriminator
    spec: ModelSpec = field(repr=False)

    @classmethod
    def build(cls, spec: ModelSpec, seed: int) -> "NetworkBundle":
        return cls(
            extractor=build_extractor(spec, seed),
            classifier=build_classifier(spec, seed),
            generator=build_generator(spec, seed),
            discriminator=build_discriminator(spec, seed),
            spec=spec,
        )

    def named_state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net in (("E", self.extractor), ("C", self.classifier),
                            ("G", self.generator), ("D", self.discriminator)):
            for name, value in net.state().items():
                out[f"{prefix}.{name}"] = value
        return out

    def load_named_state(self, state: dict[str, np.ndarray]) -> None:
        for prefix, net in (("E", self.extractor), ("C", self.classifier),
                            ("G", self.generator), ("D", self.discriminator)):
            sub = {name[len(prefix) + 1:]: value for name, value in state.items()
                   if name.startswith(prefix + ".")}
            net.load_state(sub)

    def save(self, path) -> None:
        serialize.save_file(path, self.named_state())

    @classmethod
    def load(cls, path, spec: ModelSpec) -> "NetworkBundle":
        bundle = cls.build(spec, seed=0)
        bundle.load_named_state(serialize.load_file(path))
        return bundle
