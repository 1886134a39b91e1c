"""Uncertainty-driven pool refinement.

Each round scores every pool sample with heads adapted on few-shot support
sets, demotes meta samples whose label is predicted only with low confidence,
and promotes confidently predicted unlabeled samples into the meta split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad, softmax, softmax_cross_entropy
from .data import DataPool, Sample, Task, sample_task, stack_images
from .errors import CapacityError, ConfigError, ContractError
from .fileio import atomic_write_text
from .maml import MetaModel, TrainConfig, meta_train
from .network import ClassifierHead, FeatureNet, embed, head_logits, zero_head
from .rng import stream

log = logging.getLogger(__name__)

DEMOTE_RULES = ("predicted", "gt_score")


@dataclass(frozen=True)
class ScoreEntry:
    task_id: int
    confidence: float
    label: int
    meta_score: float | None = None  # probability of the sample's meta label, if in the task


@dataclass
class ScoreRecord:
    sample_id: str
    entries: list[ScoreEntry] = field(default_factory=list)


@dataclass(frozen=True)
class RefineConfig:
    tau_low: float = 0.5
    tau_high: float = 0.9
    score_passes: int = 2
    demote_rule: str = "predicted"

    def validate(self) -> None:
        if not 0.0 < self.tau_low <= self.tau_high < 1.0:
            raise ConfigError(f"thresholds must satisfy 0 < tau_low <= tau_high < 1, "
                              f"got {self.tau_low}, {self.tau_high}")
        if self.demote_rule not in DEMOTE_RULES:
            raise ConfigError(f"demote_rule must be one of {DEMOTE_RULES}")
        if self.score_passes < 1:
            raise ConfigError("score_passes must be >= 1")


def adapt_head(support: np.ndarray, labels: np.ndarray, ways: int, alpha: float,
               steps: int = 1) -> ClassifierHead:
    """Inner-loop SGD on a zero-initialised head over fixed support features.

    For a single step this equals full inner adaptation: with a zero head the
    trunk's training gradient vanishes.
    """
    head = zero_head(support.shape[1], ways)
    params = head.params
    feats = Tensor(support)
    for _ in range(steps):
        loss, _ = softmax_cross_entropy(head_logits(params, feats), labels)
        grads = grad(loss, list(params.values()))
        params = {k: Tensor(p.data - alpha * g.data, requires_grad=True)
                  for (k, p), g in zip(params.items(), grads)}
    return ClassifierHead(params)


def class_partitions(classes: list[int], ways: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Shuffle classes into groups of ``ways``; a short last group is topped up
    with other classes so every group is a full task."""
    order = [classes[i] for i in rng.permutation(len(classes))]
    groups = []
    for start in range(0, len(order), ways):
        group = order[start:start + ways]
        if len(group) < ways:
            rest = [c for c in order if c not in group]
            group += [rest[i] for i in rng.choice(len(rest), size=ways - len(group), replace=False)]
        groups.append(tuple(group))
    return groups


def scoring_tasks(pool: DataPool, ways: int, support_shots: int, passes: int,
                  rng: np.random.Generator) -> list[Task]:
    """Support-only tasks whose class groups cover every supportable class each pass."""
    groups = pool.by_class()
    eligible = sorted(c for c, members in groups.items() if len(members) >= support_shots)
    if len(eligible) < ways:
        raise CapacityError(f"only {len(eligible)} classes have {support_shots} meta samples; "
                            f"scoring tasks need {ways}")
    tasks = []
    for _ in range(passes):
        for classes in class_partitions(eligible, ways, rng):
            tasks.append(sample_task(groups, classes, support_shots, support_shots, rng))
    return tasks


def score_pool(model: MetaModel | FeatureNet, pool: DataPool, ways: int, support_shots: int,
               seed, alpha: float = 0.01, passes: int = 1, steps: int = 1) -> list[ScoreRecord]:
    """Classify every sample of M and U with every scoring task's adapted head."""
    net = model.net if isinstance(model, MetaModel) else model
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    samples = pool.samples
    if not samples:
        return []
    feats = embed(net, stack_images(list(samples)))
    row = {s.id: i for i, s in enumerate(samples)}
    records = [ScoreRecord(s.id) for s in samples]
    for task_id, task in enumerate(scoring_tasks(pool, ways, support_shots, passes, rng)):
        support = feats[[row[s.id] for s in task.train]]
        head = adapt_head(support, task.local_labels(task.train), len(task.classes), alpha, steps)
        probs = softmax(feats @ head.params["head.w"].data + head.params["head.b"].data)
        local = np.argmax(probs, axis=1)
        position = {c: i for i, c in enumerate(task.classes)}
        for i, s in enumerate(samples):
            meta_pos = position.get(s.meta_label) if s.meta_label is not None else None
            records[i].entries.append(ScoreEntry(
                task_id, float(probs[i, local[i]]), int(task.classes[local[i]]),
                None if meta_pos is None else float(probs[i, meta_pos])))
    return records


@dataclass
class RefineResult:
    pool: DataPool
    demoted: tuple[str, ...]
    promoted: dict[str, int]


def _should_demote(sample: Sample, entries: list[ScoreEntry], config: RefineConfig) -> bool:
    if config.demote_rule == "predicted":
        return any(e.label == sample.meta_label and e.confidence < config.tau_low for e in entries)
    return any(e.meta_score is not None and e.meta_score < config.tau_low for e in entries)


def _promotion_label(entries: list[ScoreEntry], config: RefineConfig) -> int | None:
    if not any(e.confidence > config.tau_high for e in entries):
        return None
    best = max(range(len(entries)), key=lambda i: (entries[i].confidence, -i))
    return entries[best].label


def refine(pool: DataPool, records: list[ScoreRecord], config: RefineConfig) -> RefineResult:
    """M_f = M - U' + M',  U_f = U - M' + U'."""
    config.validate()
    by_id = {r.sample_id: r.entries for r in records}
    missing = [s.id for s in pool.samples if s.id not in by_id]
    if missing:
        raise ContractError(f"no score record for {len(missing)} samples, e.g. {missing[0]}")
    demoted = [s for s in pool.meta if _should_demote(s, by_id[s.id], config)]
    promoted = {}
    for s in pool.unlabeled:
        label = _promotion_label(by_id[s.id], config)
        if label is not None:
            promoted[s.id] = label
    demoted_ids = {s.id for s in demoted}
    meta = [s for s in pool.meta if s.id not in demoted_ids]
    meta += [replace(s, meta_label=promoted[s.id], noisy=promoted[s.id] != s.true_label)
             for s in pool.unlabeled if s.id in promoted]
    unlabeled = [s for s in pool.unlabeled if s.id not in promoted]
    unlabeled += [replace(s, meta_label=None) for s in demoted]
    new_pool = DataPool(tuple(meta), tuple(unlabeled), pool.num_classes)
    return RefineResult(new_pool, tuple(sorted(demoted_ids)), promoted)


@dataclass
class RoundReport:
    round: int
    demoted_count: int
    promoted_count: int
    meta_size: int
    unlabeled_size: int
    noisy_in_meta: float
    noisy_before: int
    demoted_noisy: int
    demoted_clean: int
    promoted_correct: int

    @property
    def noisy_demotion_rate(self) -> float:
        return self.demoted_noisy / self.noisy_before if self.noisy_before else 0.0

    @property
    def clean_demotion_rate(self) -> float:
        clean = self.meta_size + self.demoted_count - self.promoted_count - self.noisy_before
        return self.demoted_clean / clean if clean else 0.0


def round_report(round_index: int, before: DataPool, result: RefineResult) -> RoundReport:
    truth = {s.id: s for s in before.samples}
    noisy_ids = {s.id for s in before.meta if s.meta_label != s.true_label}
    demoted_noisy = sum(i in noisy_ids for i in result.demoted)
    return RoundReport(
        round=round_index,
        demoted_count=len(result.demoted),
        promoted_count=len(result.promoted),
        meta_size=len(result.pool.meta),
        unlabeled_size=len(result.pool.unlabeled),
        noisy_in_meta=round(result.pool.noisy_fraction(), 6),
        noisy_before=len(noisy_ids),
        demoted_noisy=demoted_noisy,
        demoted_clean=len(result.demoted) - demoted_noisy,
        promoted_correct=sum(truth[i].true_label == lab for i, lab in result.promoted.items()),
    )


@dataclass
class LoopResult:
    models: list[MetaModel]
    pool: DataPool
    reports: list[RoundReport]
    pools: list[DataPool]


def refinement_loop(pool: DataPool, m: int, train_config: TrainConfig, refine_config: RefineConfig,
                    seed: int, on_round: Callable[[int, MetaModel, DataPool], None] | None = None) -> LoopResult:
    """Train meta-model r on the pool left by refinement r-1; refine between trainings."""
    if m < 1:
        raise ConfigError("the refinement loop needs m >= 1")
    refine_config.validate()
    models, reports, pools = [], [], [pool]
    current = pool
    for r in range(m):
        try:
            model = meta_train(current, train_config, seed, round_index=r)
        except CapacityError as exc:
            raise CapacityError(f"round {r}: {exc}") from None
        models.append(model)
        if on_round is not None:
            on_round(r, model, current)
        if r == m - 1:
            break
        try:
            records = score_pool(model, current, train_config.ways, train_config.update_shots,
                                 stream(seed, "score", f"round{r}"), train_config.inner_lr,
                                 refine_config.score_passes, train_config.inner_steps)
        except CapacityError as exc:
            raise CapacityError(f"round {r}: {exc}") from None
        result = refine(current, records, refine_config)
        reports.append(round_report(r, current, result))
        log.info("round %d: demoted %d, promoted %d, |M|=%d |U|=%d", r, len(result.demoted),
                 len(result.promoted), len(result.pool.meta), len(result.pool.unlabeled))
        current = result.pool
        pools.append(current)
    return LoopResult(models, current, reports, pools)


REPORT_COLUMNS = ("round", "demoted_count", "promoted_count", "meta_size", "unlabeled_size",
                  "noisy_in_meta", "noisy_before", "demoted_noisy", "demoted_clean", "promoted_correct")


def write_refinement_report(path, reports: list[RoundReport], config_hash: str) -> None:
    lines = [f"# mmq-refinement v1 config_hash={config_hash}", "# " + "\t".join(REPORT_COLUMNS)]
    for rep in reports:
        lines.append("\t".join(str(getattr(rep, c)) for c in REPORT_COLUMNS))
    atomic_write_text(path, "\n".join(lines) + "\n")
