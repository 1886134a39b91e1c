"""MAML meta-training: single-step inner adaptation and the summed outer update.

Tasks are duck-typed objects exposing ``init_params()`` (task-local
parameters such as a freshly zeroed head), ``train_loss(params)`` and
``val_loss(params)``; meta-parameters are a ``dict[str, Tensor]``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad, softmax, softmax_cross_entropy
from .data import DataPool, EpisodeProtocol, Task, sample_episode
from .errors import ConfigError, ContractError
from .fileio import atomic_write_text
from .network import FeatureNet, features, head_logits, init_feature_net, init_head, zero_head
from .rng import stream

log = logging.getLogger(__name__)

GRADIENT_MODES = ("exact", "first_order")


@dataclass(frozen=True)
class TrainConfig:
    inner_lr: float = 0.01
    meta_lr: float = 0.001
    iterations: int = 200
    gradient_mode: str = "first_order"
    outer_optimizer: str = "adam"
    inner_steps: int = 1
    tasks: int = 5
    ways: int = 3
    shots: int = 6
    update_shots: int = 3
    feature_dim: int = 64
    head_init: str = "zero"

    def validate(self) -> None:
        if self.inner_lr <= 0 or self.meta_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ConfigError("outer_optimizer must be 'sgd' or 'adam'")
        if self.head_init not in ("zero", "uniform"):
            raise ConfigError("head_init must be 'zero' or 'uniform'")
        if self.iterations < 0 or self.inner_steps < 1 or self.feature_dim < 1:
            raise ConfigError("iterations >= 0, inner_steps >= 1 and feature_dim >= 1 required")
        self.protocol()

    def protocol(self) -> EpisodeProtocol:
        return EpisodeProtocol(self.tasks, self.ways, self.shots, self.update_shots)


@dataclass
class IterationRecord:
    iteration: int
    task_losses: list[float]
    meta_loss: float


@dataclass
class MetaModel:
    net: FeatureNet
    round: int = 0
    training_log: list[IterationRecord] = field(default_factory=list)
    train_seconds: float = 0.0


class FunctionTask:
    """A task defined directly by loss callables; used for analytic objectives."""

    def __init__(self, train_fn: Callable | None, val_fn: Callable | None, init: Callable | None = None):
        self.train_fn, self.val_fn, self.init = train_fn, val_fn, init

    @property
    def train_size(self) -> int:
        return 0 if self.train_fn is None else 1

    @property
    def val_size(self) -> int:
        return 0 if self.val_fn is None else 1

    def init_params(self) -> dict[str, Tensor]:
        return self.init() if self.init else {}

    def train_loss(self, params):
        return self.train_fn(params)

    def val_loss(self, params):
        return self.val_fn(params)


class ClassificationTask:
    """A few-shot task over the meta-model trunk plus a task-local head."""

    def __init__(self, task: Task, feature_dim: int, layers: int = 4, head_init: str = "zero",
                 rng: np.random.Generator | None = None):
        self.ways = len(task.classes)
        self.feature_dim = feature_dim
        self.layers = layers
        self.head_init = head_init
        self.rng = rng
        self.x_train = task.train_images if task.train else None
        self.y_train = task.local_labels(task.train)
        self.x_val = task.val_images if task.val else None
        self.y_val = task.local_labels(task.val)

    @property
    def train_size(self) -> int:
        return len(self.y_train)

    @property
    def val_size(self) -> int:
        return len(self.y_val)

    def init_params(self) -> dict[str, Tensor]:
        if self.head_init == "zero":
            return zero_head(self.feature_dim, self.ways).params
        return init_head(self.rng, self.feature_dim, self.ways).params

    def logits(self, params, images) -> Tensor:
        return head_logits(params, features(params, images, self.layers))

    def train_loss(self, params) -> Tensor:
        return softmax_cross_entropy(self.logits(params, self.x_train), self.y_train)[0]

    def val_loss(self, params) -> Tensor:
        return softmax_cross_entropy(self.logits(params, self.x_val), self.y_val)[0]

    def val_accuracy(self, params) -> float:
        probs = softmax(self.logits(params, self.x_val).data)
        return float(np.mean(np.argmax(probs, axis=1) == self.y_val))


def inner_adapt(theta: dict[str, Tensor], task, alpha: float, create_graph: bool = False,
                steps: int = 1) -> dict[str, Tensor]:
    """theta' = theta - alpha * grad L_train(theta), over meta and task-local parameters.

    ``theta`` itself is never modified. Without ``create_graph`` the result is a
    set of fresh leaves, detached from ``theta``.
    """
    if task.train_size == 0:
        raise ContractError("inner_adapt needs a non-empty task training set")
    params = {**theta, **{k: v for k, v in task.init_params().items() if k not in theta}}
    for _ in range(steps):
        keys = list(params)
        loss = task.train_loss(params)
        grads = grad(loss, [params[k] for k in keys], create_graph=create_graph)
        if create_graph:
            params = {k: params[k] - alpha * g for k, g in zip(keys, grads)}
        else:
            params = {k: Tensor(params[k].data - alpha * g.data, requires_grad=True)
                      for k, g in zip(keys, grads)}
    return params


def meta_gradient(theta: dict[str, Tensor], tasks, alpha: float, mode: str = "exact",
                  steps: int = 1) -> tuple[dict[str, np.ndarray], float, list[float]]:
    """Gradient of sum_i L_val_i(theta'_i) with respect to theta.

    ``first_order`` treats d theta'/d theta as the identity.
    """
    if mode not in GRADIENT_MODES:
        raise ConfigError(f"unknown gradient mode {mode!r}")
    if not tasks:
        raise ContractError("meta update needs at least one task")
    keys = list(theta)
    total = {k: np.zeros_like(theta[k].data) for k in keys}
    task_losses = []
    for task in tasks:
        if task.val_size == 0:
            raise ContractError("meta update needs a non-empty validation set for every task")
        adapted = inner_adapt(theta, task, alpha, create_graph=(mode == "exact"), steps=steps)
        loss = task.val_loss(adapted)
        wrt = [theta[k] for k in keys] if mode == "exact" else [adapted[k] for k in keys]
        for k, g in zip(keys, grad(loss, wrt)):
            total[k] += g.data
        task_losses.append(loss.item())
    return total, float(sum(task_losses)), task_losses


def meta_update(theta: dict[str, Tensor], tasks, alpha: float, beta: float,
                mode: str = "exact", steps: int = 1) -> dict[str, Tensor]:
    """One plain gradient step of the outer objective: theta - beta * meta_gradient."""
    grads, _, _ = meta_gradient(theta, tasks, alpha, mode, steps)
    return {k: Tensor(theta[k].data - beta * grads[k], requires_grad=True) for k in theta}


class Adam:
    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        b1, b2 = self.betas
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, np.zeros_like(g)) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            out[k] = Tensor((p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype),
                            requires_grad=True)
        return out


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        return {k: Tensor(p.data - self.lr * grads[k], requires_grad=True) for k, p in params.items()}


def build_tasks(episode, config: TrainConfig, rng: np.random.Generator | None = None):
    return [ClassificationTask(t, config.feature_dim, head_init=config.head_init, rng=rng)
            for t in episode.tasks]


def meta_train(pool: DataPool, config: TrainConfig, seed: int, round_index: int = 0,
               image_size: int | None = None, in_channels: int = 1) -> MetaModel:
    """Meta-train a freshly initialised network on the meta split of ``pool``."""
    config.validate()
    if image_size is None:
        if not pool.meta:
            raise ContractError("cannot infer image size from an empty meta split")
        image_size = pool.meta[0].image.shape[-1]
    net = init_feature_net(stream(seed, "init", f"round{round_index}"), config.feature_dim,
                           image_size, in_channels)
    episode_rng = stream(seed, "episodes", f"round{round_index}")
    head_rng = stream(seed, "heads", f"round{round_index}")
    optimizer = Adam(config.meta_lr) if config.outer_optimizer == "adam" else SGD(config.meta_lr)
    theta = net.params
    history = []
    started = time.perf_counter()
    for it in range(config.iterations):
        episode = sample_episode(pool, config.tasks, config.ways, config.shots, episode_rng,
                                 config.update_shots)
        tasks = build_tasks(episode, config, head_rng)
        grads, meta_loss, task_losses = meta_gradient(theta, tasks, config.inner_lr,
                                                      config.gradient_mode, config.inner_steps)
        theta = optimizer.step(theta, grads)
        history.append(IterationRecord(it, task_losses, meta_loss))
        if it % 50 == 0:
            log.debug("round %d iteration %d meta loss %.4f", round_index, it, meta_loss)
    net.params = theta
    return MetaModel(net, round_index, history, time.perf_counter() - started)


def evaluate_adaptation(net: FeatureNet, pool: DataPool, config: TrainConfig, episodes: int,
                        rng: np.random.Generator) -> float:
    """Mean post-adaptation accuracy on the validation halves of sampled tasks."""
    accs = []
    for _ in range(episodes):
        episode = sample_episode(pool, config.tasks, config.ways, config.shots, rng, config.update_shots)
        for task in build_tasks(episode, config, rng):
            adapted = inner_adapt(net.params, task, config.inner_lr, steps=config.inner_steps)
            accs.append(task.val_accuracy(adapted))
    return float(np.mean(accs))


def write_metrics(path, model: MetaModel, config_hash: str) -> None:
    """Line-oriented loss log: iteration, comma-joined task losses, meta loss."""
    lines = [f"# mmq-metrics v1 config_hash={config_hash} round={model.round}",
             "# iteration\ttask_losses\tmeta_loss"]
    for rec in model.training_log:
        losses = ",".join(repr(x) for x in rec.task_losses)
        lines.append(f"{rec.iteration}\t{losses}\t{rec.meta_loss!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
