"""Meta-model quantifying: rank candidates by accumulated fuse score, keep the top n.

Per held-out sample, a candidate's fuse score mixes its confidence at the
ground-truth label with how dissimilar its feature vector is from every
other candidate's feature for the same sample:

    S_F = gamma * S_P + (1 - gamma) * sum_{t != c} (1 - cos(F_c, F_t))
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import softmax
from .data import DataPool, stack_images
from .errors import ConfigError, DegeneracyError
from .fileio import atomic_write_text
from .maml import MetaModel
from .network import embed
from .refinement import adapt_head, scoring_tasks


@dataclass(frozen=True)
class FuseConfig:
    gamma: float = 0.5
    n: int = 3
    quantify_fraction: float = 0.1

    def validate(self, m: int | None = None) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if m is not None and self.n >= m:
            raise ConfigError(f"n must be smaller than the number of candidates (n={self.n}, m={m})")
        if not 0.0 < self.quantify_fraction < 1.0:
            raise ConfigError("quantify_fraction must be in (0, 1)")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegeneracyError("cosine similarity of a zero-norm feature is undefined")
    if np.array_equal(a, b):
        return 1.0  # exact, so duplicated candidates tie exactly
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def diversity(own: np.ndarray, others) -> float:
    return float(sum(1.0 - cosine(own, other) for other in others))


def fuse_score(s_p: float, own_feature, other_features, gamma: float) -> float:
    own = np.asarray(own_feature, dtype=np.float64)
    if np.linalg.norm(own) == 0.0:
        raise DegeneracyError("own feature has zero norm")
    div = diversity(own, [np.asarray(f, dtype=np.float64) for f in other_features])
    return gamma * float(s_p) + (1.0 - gamma) * div


@dataclass
class QuantifyRecord:
    sample_id: str
    scores: list[float]  # S_P per candidate
    features: list[np.ndarray]  # F per candidate


@dataclass
class QuantifyRow:
    round: int
    sum_sp: float
    sum_diversity: float
    sum_fuse: float
    selected: bool = False


@dataclass
class QuantifyResult:
    selected: list[MetaModel]
    rows: list[QuantifyRow]
    records: list[QuantifyRecord] = field(repr=False, default_factory=list)


def quantify_records(models: list[MetaModel], pool: DataPool, quantify_pool: DataPool, ways: int,
                     support_shots: int, alpha: float, seed, steps: int = 1) -> list[QuantifyRecord]:
    """Score each held-out sample once per candidate.

    Support sets come from ``pool``'s meta split and are shared by all
    candidates; a held-out sample is scored by the task whose classes contain
    its label. Samples whose label no task covers are skipped.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tasks = scoring_tasks(pool, ways, support_shots, 1, rng)
    owner = {}
    for t_idx, task in enumerate(tasks):
        for c in task.classes:
            owner.setdefault(c, t_idx)
    targets = [s for s in quantify_pool.meta if s.meta_label in owner]
    if not targets:
        return []
    target_images = stack_images(targets)
    support_ids = sorted({s.id for task in tasks for s in task.train})
    support_by_id = {s.id: s for task in tasks for s in task.train}
    support_images = stack_images([support_by_id[i] for i in support_ids])
    row = {sid: i for i, sid in enumerate(support_ids)}

    records = [QuantifyRecord(s.id, [], []) for s in targets]
    for model in models:
        feats = embed(model.net, target_images)
        support_feats = embed(model.net, support_images)
        heads = []
        for task in tasks:
            head = adapt_head(support_feats[[row[s.id] for s in task.train]],
                              task.local_labels(task.train), len(task.classes), alpha, steps)
            heads.append((head.params["head.w"].data, head.params["head.b"].data))
        for i, s in enumerate(targets):
            task = tasks[owner[s.meta_label]]
            w, b = heads[owner[s.meta_label]]
            probs = softmax(feats[i] @ w + b)
            records[i].scores.append(float(probs[task.classes.index(s.meta_label)]))
            records[i].features.append(feats[i])
    return records


def accumulate(records: list[QuantifyRecord], m: int, gamma: float) -> list[QuantifyRow]:
    sum_sp = np.zeros(m)
    sum_div = np.zeros(m)
    for rec in records:
        feats = [np.asarray(f, dtype=np.float64) for f in rec.features]
        for c in range(m):
            sum_sp[c] += rec.scores[c]
            sum_div[c] += diversity(feats[c], [feats[t] for t in range(m) if t != c])
    fuse = gamma * sum_sp + (1.0 - gamma) * sum_div
    return [QuantifyRow(c, float(sum_sp[c]), float(sum_div[c]), float(fuse[c])) for c in range(m)]


def top_n(scores, n: int) -> list[int]:
    """Indices of the n largest scores, descending; ties keep the earlier index."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:n]


def quantify(models: list[MetaModel], pool: DataPool, config: FuseConfig, quantify_pool: DataPool,
             ways: int, support_shots: int, alpha: float, seed, steps: int = 1) -> QuantifyResult:
    if len(models) < 2:
        raise ConfigError("quantifying needs at least two candidate meta-models")
    config.validate(len(models))
    ordered = sorted(models, key=lambda mm: mm.round)
    records = quantify_records(ordered, pool, quantify_pool, ways, support_shots, alpha, seed, steps)
    rows = accumulate(records, len(ordered), config.gamma)
    for row, model in zip(rows, ordered):
        row.round = model.round
    picked = top_n([r.sum_fuse for r in rows], config.n)
    for i in picked:
        rows[i].selected = True
    return QuantifyResult([ordered[i] for i in picked], rows, records)


QUANTIFY_COLUMNS = ("round", "sum_sp", "sum_diversity", "sum_fuse", "selected")


def write_quantify_report(path, result: QuantifyResult, config_hash: str) -> None:
    lines = [f"# mmq-quantify v1 config_hash={config_hash}", "# " + "\t".join(QUANTIFY_COLUMNS)]
    for row in result.rows:
        lines.append(f"{row.round}\t{row.sum_sp!r}\t{row.sum_diversity!r}\t{row.sum_fuse!r}\t{int(row.selected)}")
    atomic_write_text(path, "\n".join(lines) + "\n")
