from __future__ import annotations

import csv
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from utils.errors import ConfigError, DataError, DimensionError, ParseError, SourceAccessError
from utils.storage_utils import atomic_open


logger = logging.getLogger(__name__)

ROTATION_PLANE = (0, 1)


@dataclass(frozen=True)
class SourceConfig:
    n_classes: int = 10
    input_dim: int = 32
    samples_per_class: int = 200
    mu_sep: float = 0.8
    sigma_src: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.input_dim < 1 or self.samples_per_class < 1:
            raise ConfigError("input_dim and samples_per_class must be positive")
        if self.mu_sep <= 0 or self.sigma_src < 0:
            raise ConfigError("mu_sep must be positive and sigma_src non-negative")


class SourceDataset:
    """Labeled source samples; ``seal()`` forbids any later read."""

    def __init__(self, x: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
        self._x = np.asarray(x, dtype=np.float64)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.n_classes = int(n_classes)
        self._sealed = False
        if self._x.ndim != 2 or self._labels.shape != (self._x.shape[0],):
            raise DimensionError(f"x {self._x.shape} and labels {self._labels.shape} disagree")
        if self._labels.size and (self._labels.min() < 0 or self._labels.max() >= self.n_classes):
            raise DimensionError(f"labels must lie in [0, {self.n_classes})")

    def _guard(self) -> None:
        if self._sealed:
            raise SourceAccessError("source data was read after adaptation started")

    @property
    def x(self) -> np.ndarray:
        self._guard()
        return self._x

    @property
    def labels(self) -> np.ndarray:
        self._guard()
        return self._labels

    @property
    def sealed(self) -> bool:
        return self._sealed

    def seal(self) -> None:
        self._sealed = True

    def __len__(self) -> int:
        return self._labels.shape[0]


@dataclass(frozen=True)
class DomainSpec:
    id: int
    rotation_angle: float = 0.0
    scale: np.ndarray | float = 1.0
    shift: np.ndarray | float = 0.0
    noise_sigma: float = 0.0

    def validate(self, input_dim: int) -> None:
        scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (input_dim,))
        if np.any(scale <= 0):
            raise ConfigError(f"domain {self.id}: scale entries must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"domain {self.id}: noise_sigma must be non-negative")
        shift = np.asarray(self.shift, dtype=np.float64)
        if shift.ndim > 1 or (shift.ndim == 1 and shift.shape[0] != input_dim):
            raise ConfigError(f"domain {self.id}: shift must have length {input_dim}")
        if max(ROTATION_PLANE) >= input_dim and self.rotation_angle != 0.0:
            raise ConfigError(f"domain {self.id}: rotation needs input_dim >= 2")


IDENTITY_DOMAIN = DomainSpec(id=0)


class GroundTruth:
    """Labels and domain id of one batch; every read is counted."""

    def __init__(self, labels: np.ndarray, domain_id: int) -> None:
        self._labels = labels
        self._domain_id = domain_id
        self.reads = 0

    def read(self) -> tuple[np.ndarray, int]:
        self.reads += 1
        return self._labels, self._domain_id


@dataclass(frozen=True)
class StreamBatch:
    x: np.ndarray
    batch_index: int
    _truth: GroundTruth = field(repr=False, compare=False)


def reveal_truth(batch: StreamBatch) -> tuple[np.ndarray, int]:
    """Evaluation-only access to a batch's labels and domain id."""
    return batch._truth.read()


def class_means(config: SourceConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0])
    return rng.standard_normal((config.n_classes, config.input_dim)) * config.mu_sep


def _draw(config: SourceConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = class_means(config)
    noise = rng.standard_normal((labels.shape[0], config.input_dim)) * config.sigma_src
    return means[labels] + noise


def make_source(config: SourceConfig) -> SourceDataset:
    config.validate()
    rng = np.random.default_rng([config.seed, 1])
    labels = np.repeat(np.arange(config.n_classes), config.samples_per_class)
    return SourceDataset(_draw(config, labels, rng), labels, config.n_classes)


def _rotate(x: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0.0:
        return x
    i, j = ROTATION_PLANE
    c, s = np.cos(angle), np.sin(angle)
    out = x.copy()
    out[:, i] = c * x[:, i] - s * x[:, j]
    out[:, j] = s * x[:, i] + c * x[:, j]
    return out


def apply_domain(x: np.ndarray, domain: DomainSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    out = _rotate(x, domain.rotation_angle) * np.asarray(domain.scale) + np.asarray(domain.shift)
    if domain.noise_sigma > 0:
        if rng is None:
            raise ValueError("a noisy domain needs a random generator")
        out = out + rng.standard_normal(out.shape) * domain.noise_sigma
    return out


def invert_domain(x: np.ndarray, domain: DomainSpec) -> np.ndarray:
    """Inverse of the noiseless part of ``apply_domain``."""
    unshifted = (x - np.asarray(domain.shift)) / np.asarray(domain.scale)
    return _rotate(unshifted, -domain.rotation_angle)


def shift_direction(stream_seed: int, domain_id: int, input_dim: int) -> np.ndarray:
    u = np.random.default_rng([stream_seed, 1000 + domain_id]).standard_normal(input_dim)
    return u / np.linalg.norm(u)


def default_domains(input_dim: int = 32, seed: int = 0) -> list[DomainSpec]:
    """Eight covariate shifts; together they leave the frozen default model near 15% error."""

    def shift(domain_id: int, norm: float) -> np.ndarray:
        return norm * shift_direction(seed, domain_id, input_dim)

    return [
        DomainSpec(id=0, shift=shift(0, 6.0)),
        DomainSpec(id=1, shift=shift(1, 8.0)),
        DomainSpec(id=2, scale=0.6, shift=shift(2, 5.0)),
        DomainSpec(id=3, shift=shift(3, 10.0)),
        DomainSpec(id=4, noise_sigma=0.6),
        DomainSpec(id=5, scale=1.5, shift=shift(5, 5.0)),
        DomainSpec(id=6, shift=shift(6, 7.0), noise_sigma=0.4),
        DomainSpec(id=7, rotation_angle=1.0, shift=shift(7, 6.0)),
    ]


def make_stream(
    domains: Sequence[DomainSpec],
    batches_per_domain: int,
    batch_size: int,
    source: SourceConfig,
    seed: int,
    repeat: int = 1,
) -> list[StreamBatch]:
    """Batches in delivery order; with ``repeat > 1`` the same target data is replayed."""
    source.validate()
    if not domains:
        raise ConfigError("a stream needs at least one domain")
    if batch_size < 1 or batches_per_domain < 1 or repeat < 1:
        raise ConfigError("batch_size, batches_per_domain and repeat must be positive")
    for domain in domains:
        domain.validate(source.input_dim)

    rng = np.random.default_rng([seed, 3])
    one_pass: list[tuple[np.ndarray, np.ndarray, int]] = []
    for domain in domains:
        for _ in range(batches_per_domain):
            labels = rng.integers(0, source.n_classes, size=batch_size)
            clean = _draw(source, labels, rng)
            x = apply_domain(clean, domain, rng)
            x.flags.writeable = False
            labels.flags.writeable = False
            one_pass.append((x, labels, domain.id))

    batches: list[StreamBatch] = []
    for _ in range(repeat):
        for x, labels, domain_id in one_pass:
            batches.append(StreamBatch(x=x, batch_index=len(batches), _truth=GroundTruth(labels, domain_id)))
    logger.debug("Built stream of %d batches over %d domains", len(batches), len(domains))
    return batches


@dataclass(frozen=True)
class FeatureTable:
    values: np.ndarray
    labels: np.ndarray

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.labels >= 0))

    def as_source_dataset(self, n_classes: int | None = None) -> SourceDataset:
        if self.labels.size == 0:
            raise DataError("feature table has no rows")
        if not self.labeled:
            raise ConfigError("feature table has unlabeled rows (label -1)")
        n = int(self.labels.max()) + 1 if n_classes is None else n_classes
        return SourceDataset(self.values, self.labels, n)


def _decoded_lines(handle: BinaryIO) -> Iterator[str]:
    for line_no, raw in enumerate(handle, start=1):
        try:
            yield raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8 at byte {exc.start}", line_no) from exc


def ingest_feature_csv(path: str | Path, dims: int | None = None) -> FeatureTable:
    rows: list[list[float]] = []
    labels: list[int] = []
    width: int | None = None
    with open(path, "rb") as handle:
        reader = csv.reader(_decoded_lines(handle))
        for record in reader:
            line_no = reader.line_num
            if not record or record[0].lstrip().startswith("#"):
                continue
            if width is None:
                if record[0].strip() != "label":
                    raise ParseError("header must start with 'label'", line_no)
                width = len(record)
                if dims is not None and width - 1 != dims:
                    raise DimensionError(f"file has {width - 1} feature columns, expected {dims}")
                continue
            if len(record) != width:
                raise ParseError(f"expected {width} fields, found {len(record)}", line_no)
            try:
                label = int(record[0])
                values = [float(cell) for cell in record[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from exc
            if label < -1:
                raise ParseError(f"label {label} is below -1", line_no)
            labels.append(label)
            rows.append(values)
    if width is None:
        raise ParseError("missing header", 1)
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), width - 1)
    return FeatureTable(values=values, labels=np.asarray(labels, dtype=np.int64))


def stream_from_table(table: FeatureTable, batch_size: int, repeat: int = 1) -> list[StreamBatch]:
    """Rows in file order as a single-domain stream; the last batch may be short."""
    if batch_size < 1 or repeat < 1:
        raise ConfigError("batch_size and repeat must be positive")
    if table.labels.size == 0:
        raise DataError("feature table has no rows")
    one_pass = []
    for start in range(0, table.labels.size, batch_size):
        x = table.values[start : start + batch_size].copy()
        labels = table.labels[start : start + batch_size].copy()
        x.flags.writeable = False
        labels.flags.writeable = False
        one_pass.append((x, labels))
    batches: list[StreamBatch] = []
    for _ in range(repeat):
        for x, labels in one_pass:
            batches.append(StreamBatch(x=x, batch_index=len(batches), _truth=GroundTruth(labels, 0)))
    logger.debug("Built stream of %d batches from %d feature rows", len(batches), table.labels.size)
    return batches


def write_feature_csv(path: str | Path, table: FeatureTable) -> None:
    with atomic_open(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", *(f"f{j}" for j in range(table.values.shape[1]))])
        for label, row in zip(table.labels, table.values):
            writer.writerow([int(label), *(repr(float(v)) for v in row)])
