"""Meta-model network: a four-layer strided conv trunk plus a linear head.

Parameters live in plain ``dict[str, Tensor]`` so the meta-learner can swap
in adapted copies (``features(params, images)`` is purely functional).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, conv2d, linear, mean_pool, no_grad, relu, softmax
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, DimensionError

KERNEL = 3
STRIDE = 2


def spatial_trace(image_size: int, layers: int = 4) -> list[int]:
    """Spatial side length after each valid stride-2 3x3 conv, input first."""
    sizes = [image_size]
    for _ in range(layers):
        if sizes[-1] < KERNEL:
            raise DimensionError(f"image size {image_size} too small for {layers} conv layers")
        sizes.append((sizes[-1] - KERNEL) // STRIDE + 1)
    return sizes


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


@dataclass
class FeatureNet:
    params: dict[str, Tensor]
    feature_dim: int
    image_size: int
    in_channels: int = 1
    filters: int = 64
    layers: int = 4

    def copy(self) -> "FeatureNet":
        fresh = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return FeatureNet(fresh, self.feature_dim, self.image_size, self.in_channels,
                          self.filters, self.layers)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def header(self) -> dict:
        return {"feature_dim": self.feature_dim, "image_size": self.image_size,
                "in_channels": self.in_channels, "filters": self.filters, "layers": self.layers}


def init_feature_net(rng: np.random.Generator, feature_dim: int = 64, image_size: int = 84,
                     in_channels: int = 1, filters: int = 64, layers: int = 4) -> FeatureNet:
    spatial_trace(image_size, layers)
    params: dict[str, Tensor] = {}
    c_in = in_channels
    for i in range(1, layers + 1):
        fan_in = c_in * KERNEL * KERNEL
        params[f"conv{i}.w"] = _uniform(rng, (filters, c_in, KERNEL, KERNEL), fan_in)
        params[f"conv{i}.b"] = _uniform(rng, (filters,), fan_in)
        c_in = filters
    params["proj.w"] = _uniform(rng, (filters, feature_dim), filters)
    params["proj.b"] = _uniform(rng, (feature_dim,), filters)
    return FeatureNet(params, feature_dim, image_size, in_channels, filters, layers)


def features(params: dict[str, Tensor], images, layers: int = 4) -> Tensor:
    """Batched trunk: (N, C, H, W) images -> (N, feature_dim) features."""
    x = as_tensor(images)
    if x.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) images, got {x.shape}")
    n, c, h, w = x.shape
    if c == 1:
        x = x.reshape(n, h, w, 1)
    else:
        x = x.transpose(0, 2, 3, 1)
    for i in range(1, layers + 1):
        x = relu(conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=STRIDE,
                        channels_last=True))
    pooled = mean_pool(x, channels_last=True)
    return linear(pooled, params["proj.w"], params["proj.b"])


def _check_images(net: FeatureNet, shape: tuple[int, ...]) -> None:
    expected = (net.in_channels, net.image_size, net.image_size)
    if tuple(shape[-3:]) != expected:
        raise DimensionError(f"image shape {tuple(shape[-3:])} does not match network input {expected}")


def extract_features(net: FeatureNet, image) -> Tensor:
    """Single (C, H, W) image -> feature vector of length ``net.feature_dim``."""
    image = as_tensor(image)
    if image.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {image.shape}")
    _check_images(net, image.shape)
    return features(net.params, image.reshape((1,) + image.shape), net.layers).reshape(net.feature_dim)


def extract_features_batch(net: FeatureNet, images) -> Tensor:
    images = as_tensor(images)
    _check_images(net, images.shape)
    return features(net.params, images, net.layers)


def embed(net: FeatureNet, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Features for many images at once, outside any gradient tape."""
    _check_images(net, images.shape)
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(features(net.params, images[start:start + batch_size], net.layers).data)
    if not chunks:
        return np.zeros((0, net.feature_dim), np.float32)
    return np.concatenate(chunks)


@dataclass
class ClassifierHead:
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.params["head.w"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.params["head.w"].shape[1]


def zero_head(feature_dim: int, num_classes: int) -> ClassifierHead:
    return ClassifierHead({
        "head.w": Tensor(np.zeros((feature_dim, num_classes), np.float32), requires_grad=True),
        "head.b": Tensor(np.zeros(num_classes, np.float32), requires_grad=True),
    })


def init_head(rng: np.random.Generator, feature_dim: int, num_classes: int) -> ClassifierHead:
    return ClassifierHead({
        "head.w": _uniform(rng, (feature_dim, num_classes), feature_dim),
        "head.b": _uniform(rng, (num_classes,), feature_dim),
    })


def head_logits(params: dict[str, Tensor], feats: Tensor) -> Tensor:
    return linear(feats, params["head.w"], params["head.b"])


def classify(head: ClassifierHead, feature) -> tuple[np.ndarray, int]:
    """Softmax probabilities and argmax label; ties go to the lowest index."""
    feature = as_tensor(feature)
    if feature.shape[-1] != head.feature_dim:
        raise DimensionError(f"feature width {feature.shape[-1]} does not match head width {head.feature_dim}")
    probs = softmax(head_logits(head.params, feature).data)
    return probs, int(np.argmax(probs))


def save_feature_net(path, net: FeatureNet, extra: dict | None = None) -> None:
    save_checkpoint(path, net.params, {**net.header(), **(extra or {})})


def load_feature_net(path) -> tuple[FeatureNet, dict[str, str]]:
    arrays, meta = load_checkpoint(path)
    try:
        shape = {k: int(meta[k]) for k in ("feature_dim", "image_size", "in_channels", "filters", "layers")}
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint header missing {exc}") from None
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    return FeatureNet(params, **shape), meta
