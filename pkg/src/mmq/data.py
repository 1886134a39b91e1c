"""Meta/unlabeled data pools, episodic task sampling and label-noise injection."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CapacityError, ConfigError, DataError, ParseError
from .fileio import atomic_write_text, read_pgm, write_pgm

MANIFEST_MAGIC = "# mmq-manifest v1"


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray
    true_label: int
    meta_label: int | None = None
    noisy: bool = False


@dataclass(frozen=True, eq=False)
class DataPool:
    meta: tuple[Sample, ...]
    unlabeled: tuple[Sample, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "meta", tuple(sorted(self.meta, key=lambda s: s.id)))
        object.__setattr__(self, "unlabeled", tuple(sorted(self.unlabeled, key=lambda s: s.id)))
        meta_ids = {s.id for s in self.meta}
        if len(meta_ids) != len(self.meta):
            raise DataError("duplicate sample id in meta split")
        overlap = meta_ids.intersection(s.id for s in self.unlabeled)
        if overlap:
            raise DataError(f"samples in both splits: {sorted(overlap)[:5]}")
        for s in self.meta:
            if s.meta_label is None:
                raise DataError(f"meta sample {s.id} has no meta label")
            if not 0 <= s.meta_label < self.num_classes:
                raise DataError(f"meta label {s.meta_label} of {s.id} outside [0, {self.num_classes})")
        for s in self.unlabeled:
            if s.meta_label is not None:
                raise DataError(f"unlabeled sample {s.id} carries a meta label")

    def __len__(self) -> int:
        return len(self.meta) + len(self.unlabeled)

    @property
    def samples(self) -> tuple[Sample, ...]:
        return self.meta + self.unlabeled

    def by_class(self) -> dict[int, list[Sample]]:
        groups: dict[int, list[Sample]] = defaultdict(list)
        for s in self.meta:
            groups[s.meta_label].append(s)
        return dict(groups)

    def noisy_fraction(self) -> float:
        """Share of the meta split whose label disagrees with the hidden truth."""
        if not self.meta:
            return 0.0
        return sum(s.meta_label != s.true_label for s in self.meta) / len(self.meta)

    def stats(self) -> dict:
        return {"meta": len(self.meta), "unlabeled": len(self.unlabeled),
                "noisy_in_meta": round(self.noisy_fraction(), 6)}


def split_pool(samples: Iterable[Sample], num_classes: int, meta_fraction: float,
               rng: np.random.Generator) -> DataPool:
    """Stratified split by true class; meta samples get their true label."""
    if not 0.0 < meta_fraction <= 1.0:
        raise ConfigError(f"meta_fraction must be in (0, 1], got {meta_fraction}")
    groups: dict[int, list[Sample]] = defaultdict(list)
    for s in samples:
        groups[s.true_label].append(s)
    meta, unlabeled = [], []
    for label in sorted(groups):
        members = sorted(groups[label], key=lambda s: s.id)
        order = rng.permutation(len(members))
        cut = int(np.floor(meta_fraction * len(members) + 0.5))
        for rank, idx in enumerate(order):
            s = members[idx]
            if rank < cut:
                meta.append(replace(s, meta_label=s.true_label, noisy=False))
            else:
                unlabeled.append(replace(s, meta_label=None, noisy=False))
    return DataPool(tuple(meta), tuple(unlabeled), num_classes)


def carve_quantify(pool: DataPool, fraction: float,
                   rng: np.random.Generator) -> tuple[DataPool, DataPool]:
    """Hold out ``fraction`` of each meta class as a separate labeled pool."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"quantify fraction must be in [0, 1), got {fraction}")
    held, kept = [], []
    for label, members in sorted(pool.by_class().items()):
        take = int(np.floor(fraction * len(members) + 0.5))
        chosen = set(rng.choice(len(members), size=take, replace=False).tolist()) if take else set()
        for i, s in enumerate(members):
            (held if i in chosen else kept).append(s)
    return (DataPool(tuple(kept), pool.unlabeled, pool.num_classes),
            DataPool(tuple(held), (), pool.num_classes))


def inject_noise(pool: DataPool, noise_rate: float, rng_seed) -> DataPool:
    """Flip exactly round(rate * |M|) meta labels to a different random class."""
    if not 0.0 <= noise_rate < 1.0:
        raise ConfigError(f"noise_rate must be in [0, 1), got {noise_rate}")
    if noise_rate == 0.0:
        return pool
    if pool.num_classes < 2:
        raise ConfigError("label noise needs at least two classes")
    rng = _as_rng(rng_seed)
    count = int(np.floor(noise_rate * len(pool.meta) + 0.5))
    flip = set(rng.choice(len(pool.meta), size=count, replace=False).tolist())
    meta = []
    for i, s in enumerate(pool.meta):
        if i in flip:
            shift = int(rng.integers(1, pool.num_classes))
            meta.append(replace(s, meta_label=(s.meta_label + shift) % pool.num_classes, noisy=True))
        else:
            meta.append(s)
    return DataPool(tuple(meta), pool.unlabeled, pool.num_classes)


# -- episodes -------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeProtocol:
    """Shape of one meta-training iteration: ``tasks`` tasks of ``ways`` classes,
    ``shots`` images per class of which ``update_shots`` adapt the task model."""

    tasks: int = 5
    ways: int = 3
    shots: int = 6
    update_shots: int | None = None

    def __post_init__(self):
        if self.tasks < 1 or self.ways < 1 or self.shots < 2:
            raise ConfigError(f"invalid episode protocol {self}")
        if not 1 <= self.split < self.shots:
            raise ConfigError(f"update_shots must be in [1, {self.shots}), got {self.update_shots}")

    @property
    def split(self) -> int:
        return self.shots // 2 if self.update_shots is None else self.update_shots


VQA_RAD_PROTOCOL = EpisodeProtocol(tasks=5, ways=3, shots=6, update_shots=3)
PATHVQA_PROTOCOL = EpisodeProtocol(tasks=4, ways=5, shots=20, update_shots=5)


@dataclass
class Task:
    classes: tuple[int, ...]
    train: list[Sample]
    val: list[Sample]

    def local_labels(self, samples: list[Sample]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[s.meta_label] for s in samples], dtype=np.int64)

    @property
    def train_images(self) -> np.ndarray:
        return stack_images(self.train)

    @property
    def val_images(self) -> np.ndarray:
        return stack_images(self.val)


@dataclass
class Episode:
    tasks: list[Task]


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_task(groups: dict[int, list[Sample]], classes, shots: int, split: int,
                rng: np.random.Generator) -> Task:
    train, val = [], []
    for c in classes:
        members = groups.get(c, [])
        if len(members) < shots:
            raise CapacityError(f"class {c} has {len(members)} meta samples, task needs {shots}")
        picks = rng.choice(len(members), size=shots, replace=False)
        train.extend(members[i] for i in picks[:split])
        val.extend(members[i] for i in picks[split:])
    return Task(tuple(int(c) for c in classes), train, val)


def sample_episode(pool: DataPool, tasks: int, ways: int, shots: int, rng_seed,
                   update_shots: int | None = None) -> Episode:
    """Draw ``tasks`` few-shot tasks from the meta split only."""
    protocol = EpisodeProtocol(tasks, ways, shots, update_shots)
    rng = _as_rng(rng_seed)
    groups = pool.by_class()
    eligible = sorted(c for c, members in groups.items() if len(members) >= shots)
    if len(eligible) < ways:
        counts = {c: len(groups.get(c, [])) for c in range(pool.num_classes)}
        worst = min(counts, key=lambda c: (counts[c], c))
        raise CapacityError(
            f"need {ways} classes with >= {shots} meta samples, only {len(eligible)} qualify; "
            f"class {worst} has {counts[worst]}")
    episode = []
    for _ in range(protocol.tasks):
        classes = rng.choice(eligible, size=ways, replace=False)
        episode.append(sample_task(groups, classes, shots, protocol.split, rng))
    return Episode(episode)


# -- manifests ------------------------------------------------------------------

def write_images(samples: Iterable[Sample], image_dir) -> None:
    image_dir = Path(image_dir)
    for s in samples:
        write_pgm(image_dir / f"{s.id}.pgm", s.image)


def write_manifest(path, pool: DataPool, image_dir, config_hash: str) -> None:
    """One tab-separated line per sample:
    id, split (M/U), meta_label (- when absent), noisy (0/1), image path, true_label."""
    path = Path(path)
    rel = Path(image_dir)
    lines = [f"{MANIFEST_MAGIC} config_hash={config_hash} num_classes={pool.num_classes}",
             "# id\tsplit\tmeta_label\tnoisy\timage\ttrue_label"]
    for split, members in (("M", pool.meta), ("U", pool.unlabeled)):
        for s in members:
            label = "-" if s.meta_label is None else str(s.meta_label)
            lines.append(f"{s.id}\t{split}\t{label}\t{int(s.noisy)}\t{rel / (s.id + '.pgm')}\t{s.true_label}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest_header(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    first = path.read_text().split("\n", 1)[0]
    if not first.startswith(MANIFEST_MAGIC):
        raise ParseError(path, 1, "not an mmq manifest")
    return dict(item.split("=", 1) for item in first[len(MANIFEST_MAGIC):].split())


def read_manifest(path) -> tuple[DataPool, str]:
    """Load a pool; image paths are resolved relative to the manifest's directory."""
    path = Path(path)
    header = read_manifest_header(path)
    num_classes = int(header["num_classes"])
    meta, unlabeled = [], []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ParseError(path, line_no, f"expected 6 tab-separated fields, got {len(fields)}")
        sid, split, label, noisy, image_ref, true_label = fields
        try:
            sample = Sample(sid, read_pgm(path.parent / image_ref), int(true_label),
                            None if label == "-" else int(label), noisy == "1")
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
        if split == "M":
            meta.append(sample)
        elif split == "U":
            unlabeled.append(sample)
        else:
            raise ParseError(path, line_no, f"unknown split {split!r}")
    return DataPool(tuple(meta), tuple(unlabeled), num_classes), header.get("config_hash", "")
