"""Downstream classifier over concatenated meta-model features plus a context vector."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, concat, grad, linear, no_grad, softmax, softmax_cross_entropy
from .errors import ConfigError, ContractError, DimensionError
from .fileio import atomic_write_text
from .maml import Adam
from .network import FeatureNet, embed, features
from .synthetic import DownstreamSet, context_vectors


@dataclass(frozen=True)
class DownstreamConfig:
    epochs: int = 30
    lr: float = 0.001
    batch_size: int = 32
    freeze: bool = False

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("downstream needs epochs >= 0, batch_size >= 1 and lr > 0")


@dataclass
class DownstreamModel:
    nets: list[FeatureNet]
    context_dim: int
    num_answers: int
    classifier: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.nets)

    @property
    def fused_dim(self) -> int:
        return sum(net.feature_dim for net in self.nets)

    def param_count(self) -> int:
        return sum(net.param_count() for net in self.nets) + sum(p.size for p in self.classifier.values())

    def parameters(self) -> dict[str, Tensor]:
        out = {f"net{i}.{k}": v for i, net in enumerate(self.nets) for k, v in net.params.items()}
        out.update(self.classifier)
        return out

    def load_parameters(self, params: dict[str, Tensor]) -> None:
        for i, net in enumerate(self.nets):
            net.params = {k: params[f"net{i}.{k}"] for k in net.params}
        self.classifier = {k: params[k] for k in self.classifier}


def build_model(nets: list[FeatureNet], context_dim: int, num_answers: int,
                rng: np.random.Generator) -> DownstreamModel:
    """Private copies of ``nets`` plus a uniformly initialised linear classifier."""
    if not nets:
        raise ContractError("the downstream model needs at least one meta-model")
    sizes = {(net.image_size, net.in_channels) for net in nets}
    if len(sizes) != 1:
        raise DimensionError(f"meta-models disagree on input shape: {sorted(sizes)}")
    copies = [net.copy() for net in nets]
    width = sum(net.feature_dim for net in copies) + context_dim
    bound = 1.0 / np.sqrt(width)
    classifier = {
        "cls.w": Tensor(rng.uniform(-bound, bound, (width, num_answers)).astype(np.float32), requires_grad=True),
        "cls.b": Tensor(np.zeros(num_answers, np.float32), requires_grad=True),
    }
    return DownstreamModel(copies, context_dim, num_answers, classifier)


def fused_features(model: DownstreamModel, images) -> Tensor:
    """f_v: per-model features concatenated in model order, (N, n * feature_dim)."""
    images = as_tensor(images)
    return concat([features(net.params, images, net.layers) for net in model.nets], axis=1)


def _logits(model: DownstreamModel, f_v: Tensor, context) -> Tensor:
    context = as_tensor(context)
    if context.shape[-1] != model.context_dim:
        raise DimensionError(f"context width {context.shape[-1]} does not match {model.context_dim}")
    return linear(concat([f_v, context], axis=1), model.classifier["cls.w"], model.classifier["cls.b"])


def forward(model: DownstreamModel, image, context) -> np.ndarray:
    """Answer probabilities for one (C, H, W) image or a batch of them."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    context = np.asarray(context, dtype=np.float32)
    single = image.ndim == 3
    if single:
        image, context = image[None], context[None]
    net = model.nets[0]
    if image.shape[1:] != (net.in_channels, net.image_size, net.image_size):
        raise DimensionError(f"image shape {image.shape[1:]} does not match network input")
    with no_grad():
        probs = softmax(_logits(model, fused_features(model, image), context).data)
    return probs[0] if single else probs


def _arrays(examples, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([ex.image for ex in examples]).astype(np.float32)
    context = context_vectors(np.array([ex.question_type for ex in examples]), width)
    answers = np.array([ex.answer for ex in examples], dtype=np.int64)
    return images, context, answers


def accuracy(model: DownstreamModel, examples, batch_size: int = 128) -> float:
    if not examples:
        return 0.0
    images, context, answers = _arrays(examples, model.context_dim)
    correct = 0
    for start in range(0, len(examples), batch_size):
        sl = slice(start, start + batch_size)
        correct += int(np.sum(np.argmax(forward(model, images[sl], context[sl]), axis=1) == answers[sl]))
    return correct / len(examples)


@dataclass
class FinetuneResult:
    model: DownstreamModel
    train_acc: float
    test_acc: float
    losses: list[float]
    seconds: float


def finetune(model: DownstreamModel, dset: DownstreamSet, config: DownstreamConfig,
             rng: np.random.Generator) -> FinetuneResult:
    """Cross-entropy training with Adam minibatches, end to end unless ``config.freeze``."""
    config.validate()
    if not dset.train:
        raise ContractError("downstream training set is empty")
    answers_seen = {ex.answer for ex in dset.train + dset.test}
    if min(answers_seen) < 0 or max(answers_seen) >= model.num_answers:
        raise ContractError(f"answers must lie in [0, {model.num_answers})")
    started = time.perf_counter()
    images, context, answers = _arrays(dset.train, model.context_dim)
    frozen = None
    if config.freeze:
        frozen = np.concatenate([embed(net, images) for net in model.nets], axis=1)
    params = model.classifier if config.freeze else model.parameters()
    optimizer = Adam(config.lr)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(answers))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            model.load_parameters({**model.parameters(), **params})
            f_v = Tensor(frozen[idx]) if frozen is not None else fused_features(model, images[idx])
            loss, _ = softmax_cross_entropy(_logits(model, f_v, context[idx]), answers[idx])
            keys = list(params)
            grads = grad(loss, [params[k] for k in keys])
            params = optimizer.step(params, {k: g.data for k, g in zip(keys, grads)})
            losses.append(loss.item())
    model.load_parameters({**model.parameters(), **params})
    return FinetuneResult(model, accuracy(model, dset.train), accuracy(model, dset.test), losses,
                          time.perf_counter() - started)


RESULT_COLUMNS = ("config_hash", "m", "n", "seed", "train_acc", "test_acc", "wall_time")


def append_result(path, config_hash: str, m: int, n: int, seed: int, result: FinetuneResult) -> None:
    """Append one row to the results file, creating it with a header if absent."""
    path = Path(path)
    existing = path.read_text() if path.exists() else "# " + "\t".join(RESULT_COLUMNS) + "\n"
    row = f"{config_hash}\t{m}\t{n}\t{seed}\t{result.train_acc!r}\t{result.test_acc!r}\t{result.seconds:.3f}\n"
    atomic_write_text(path, existing + row)
