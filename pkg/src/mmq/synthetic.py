"""Procedural grayscale grating classes and a context-conditioned downstream task.

Class ``c`` is a sinusoidal grating with orientation ``ORIENTATIONS[c % 3]``
and spatial frequency ``FREQUENCIES[(c // 3) % 3]``, offset by ``c // 9`` so
more than nine classes stay distinct. Random phase makes every class have
the same mean image, so a linear model on raw pixels sits near chance while
a conv trunk (which sees local orientation and frequency) separates them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DataPool, Sample, split_pool
from .errors import ConfigError, DataError, ParseError
from .fileio import atomic_write_text, read_pgm, write_pgm
from .rng import stream

ORIENTATIONS = (0.0, 60.0, 120.0)
FREQUENCIES = (3.0, 6.0, 10.0)  # cycles per image width


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int = 9
    image_size: int = 84
    samples_per_class: int = 60
    angle_jitter: float = 10.0  # degrees, uniform +/-
    freq_jitter: float = 0.1  # relative, uniform +/-
    phase_jitter: float = 1.0  # fraction of a full cycle
    contrast: float = 0.8
    contrast_jitter: float = 0.2
    pixel_noise: float = 0.1
    meta_fraction: float = 0.5
    question_types: int = 8
    closed_types: int = 2
    downstream_train_per_class: int = 12
    downstream_test_per_class: int = 40
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.image_size < 31:
            raise ConfigError("image_size must be >= 31 for four stride-2 3x3 convolutions")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not 0 <= self.closed_types < self.question_types:
            raise ConfigError("closed_types must be in [0, question_types)")
        for name in ("angle_jitter", "freq_jitter", "phase_jitter", "contrast_jitter", "pixel_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.meta_fraction <= 1.0:
            raise ConfigError("meta_fraction must be in (0, 1]")

    def without_jitter(self) -> "GeneratorSpec":
        return GeneratorSpec(**{**asdict(self), "angle_jitter": 0.0, "freq_jitter": 0.0,
                                "phase_jitter": 0.0, "contrast_jitter": 0.0, "pixel_noise": 0.0})

    @property
    def num_answers(self) -> int:
        return self.num_classes + 2 * self.closed_types


def class_parameters(label: int) -> tuple[float, float]:
    """(orientation in degrees, cycles per image) of a class."""
    orientation = ORIENTATIONS[label % 3] + 20.0 * (label // 9)
    frequency = FREQUENCIES[(label // 3) % 3] * (1.0 + 0.15 * (label // 9))
    return orientation, frequency


def render(spec: GeneratorSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """One (1, S, S) image quantized to 8-bit levels in [0, 1]."""
    size = spec.image_size
    orientation, frequency = class_parameters(label)
    theta = np.deg2rad(orientation + spec.angle_jitter * rng.uniform(-1, 1))
    cycles = frequency * (1.0 + spec.freq_jitter * rng.uniform(-1, 1))
    phase = 2 * np.pi * spec.phase_jitter * rng.uniform(0, 1)
    contrast = spec.contrast * (1.0 + spec.contrast_jitter * rng.uniform(-1, 1))
    coords = np.arange(size) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    wave = np.sin(2 * np.pi * cycles * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = 0.5 + 0.5 * contrast * wave
    if spec.pixel_noise:
        img = img + rng.normal(0.0, spec.pixel_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)[None]


def answer(spec: GeneratorSpec, true_class: int, question_type: int) -> int:
    """Downstream label: open questions name the class, closed ones answer
    yes/no about a class attribute with answer tokens private to the type."""
    if not 0 <= question_type < spec.question_types:
        raise ConfigError(f"question type {question_type} outside [0, {spec.question_types})")
    open_types = spec.question_types - spec.closed_types
    if question_type < open_types:
        return true_class
    j = question_type - open_types
    attribute = (true_class >> (j % 4)) & 1 if j % 2 == 0 else int(true_class % 3 == j % 3)
    return spec.num_classes + 2 * j + attribute


@dataclass(frozen=True, eq=False)
class DownstreamExample:
    id: str
    image: np.ndarray
    question_type: int
    answer: int
    true_class: int


@dataclass(frozen=True, eq=False)
class DownstreamSet:
    train: tuple[DownstreamExample, ...]
    test: tuple[DownstreamExample, ...]
    question_types: int
    num_answers: int


def context_vectors(question_types: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(question_types), width), np.float32)
    out[np.arange(len(question_types)), question_types] = 1.0
    return out


def _downstream_split(spec: GeneratorSpec, name: str, per_class: int) -> tuple[DownstreamExample, ...]:
    rng = stream(spec.seed, "data", "downstream", name)
    examples = []
    for label in range(spec.num_classes):
        for i in range(per_class):
            qtype = int(rng.integers(0, spec.question_types))
            examples.append(DownstreamExample(
                f"{name}{label:03d}_{i:04d}", render(spec, label, rng), qtype,
                answer(spec, label, qtype), label))
    return tuple(examples)


def generate(spec: GeneratorSpec) -> tuple[DataPool, DownstreamSet]:
    """Class-balanced pool split into meta/unlabeled halves plus the downstream set."""
    spec.validate()
    rng = stream(spec.seed, "data", "pool")
    samples = []
    for label in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            samples.append(Sample(f"c{label:03d}_{i:04d}", render(spec, label, rng), label))
    pool = split_pool(samples, spec.num_classes, spec.meta_fraction, stream(spec.seed, "data", "split"))
    downstream = DownstreamSet(
        _downstream_split(spec, "train", spec.downstream_train_per_class),
        _downstream_split(spec, "test", spec.downstream_test_per_class),
        spec.question_types, spec.num_answers)
    return pool, downstream


DOWNSTREAM_MAGIC = "# mmq-downstream v1"


def write_downstream(path, dset: DownstreamSet, image_dir, config_hash: str) -> None:
    path = Path(path)
    image_dir = Path(image_dir)
    lines = [f"{DOWNSTREAM_MAGIC} config_hash={config_hash} question_types={dset.question_types} "
             f"num_answers={dset.num_answers}",
             "# id\tsplit\tquestion_type\tanswer\ttrue_class\timage"]
    for split, examples in (("train", dset.train), ("test", dset.test)):
        for ex in examples:
            write_pgm(path.parent / image_dir / f"{ex.id}.pgm", ex.image)
            lines.append(f"{ex.id}\t{split}\t{ex.question_type}\t{ex.answer}\t{ex.true_class}\t"
                         f"{image_dir / (ex.id + '.pgm')}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_downstream(path) -> tuple[DownstreamSet, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing downstream manifest {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(DOWNSTREAM_MAGIC):
        raise ParseError(path, 1, "not an mmq downstream manifest")
    header = dict(item.split("=", 1) for item in lines[0][len(DOWNSTREAM_MAGIC):].split())
    splits: dict[str, list[DownstreamExample]] = {"train": [], "test": []}
    for line_no, line in enumerate(lines, start=1):
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 6 or fields[1] not in splits:
            raise ParseError(path, line_no, "malformed downstream row")
        sid, split, qtype, ans, true_class, ref = fields
        splits[split].append(DownstreamExample(sid, read_pgm(path.parent / ref), int(qtype), int(ans),
                                               int(true_class)))
    dset = DownstreamSet(tuple(splits["train"]), tuple(splits["test"]),
                         int(header["question_types"]), int(header["num_answers"]))
    return dset, header.get("config_hash", "")
