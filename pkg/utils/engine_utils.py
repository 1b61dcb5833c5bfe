from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import hashlib
import logging
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np
from scipy.stats import binomtest

from utils.adapter_utils import AdapterState, adapt, empty_adapter, init_adapter, set_basis, with_scale
from utils.agop_utils import AgopConfig, AgopEstimator, confident_mask, init_from_head, observe_batch, refresh_basis, spectrum
from utils.errors import (
    ConfigError,
    ContractError,
    EngineError,
    FrozenContractError,
    GoldError,
    NumericalError,
    QuarantineError,
)
from utils.linalg_utils import cumulative_spectral_energy, subspace_similarity
from utils.loss_utils import LossConfig, OptimizerState, optimizer_step, softmax, total_loss_and_grads
from utils.model_utils import (
    Backbone,
    ClassifierHead,
    EmaTeacher,
    PrototypeBank,
    apply_affine,
    backbone_activations,
    build_prototypes,
    ema_update,
    init_teacher,
    load_model,
    logits,
    pretrain_source,
    with_affine,
)
from utils.storage_utils import atomic_open, decode_array, encode_array, read_json, write_json
from utils.stream_utils import (
    DomainSpec,
    SourceConfig,
    SourceDataset,
    StreamBatch,
    default_domains,
    ingest_feature_csv,
    make_source,
    make_stream,
    reveal_truth,
    stream_from_table,
)


logger = logging.getLogger(__name__)

METRICS_HEADER = ["batch", "domain", "err", "align", "kappa_r", "loss_st", "loss_cont", "confident", "eig"]
SUBSPACE_MODES = ("agop", "static", "none")
FAULTS = ("none", "mutate_backbone", "read_source", "leak_labels")


@dataclass(frozen=True)
class StreamConfig:
    domains: tuple[DomainSpec, ...] | None = None  # None: default_domains
    batches_per_domain: int = 50
    batch_size: int = 64
    repeat: int = 1


@dataclass(frozen=True)
class EngineConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    feature_dim: int = 128
    activation: str = "tanh"
    pretrain_epochs: int = 500
    pretrain_lr: float = 0.05
    agop: AgopConfig = field(default_factory=AgopConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher_momentum: float = 0.999
    stream: StreamConfig = field(default_factory=StreamConfig)
    aug_sigma: float = 0.05
    subspace_mode: str = "agop"
    carry_scale: bool = False
    affine_trainable: bool = True
    post_step_eval: bool = False
    metrics_path: Path | None = None
    model_path: Path | None = None
    source_features: Path | None = None
    stream_features: Path | None = None
    seed: int = 0
    fault: str = "none"

    def validate(self) -> None:
        self.source.validate()
        self.agop.validate()
        self.loss.validate()
        if self.feature_dim < 1:
            raise ConfigError(f"model.feature_dim must be positive, got {self.feature_dim}")
        if self.activation not in ("identity", "tanh"):
            raise ConfigError(f"model.activation must be identity or tanh, got {self.activation!r}")
        if self.pretrain_epochs < 1 or self.pretrain_lr <= 0:
            raise ConfigError("pretrain.epochs and pretrain.lr must be positive")
        if not 0.0 <= self.teacher_momentum <= 1.0:
            raise ConfigError(f"teacher.momentum must lie in [0, 1], got {self.teacher_momentum}")
        if self.aug_sigma < 0:
            raise ConfigError(f"engine.aug_sigma must be non-negative, got {self.aug_sigma}")
        if self.subspace_mode not in SUBSPACE_MODES:
            raise ConfigError(f"engine.subspace_mode must be one of {SUBSPACE_MODES}")
        if self.fault not in FAULTS:
            raise ConfigError(f"engine.fault must be one of {FAULTS}")
        stream = self.stream
        if stream.batches_per_domain < 1 or stream.batch_size < 1 or stream.repeat < 1:
            raise ConfigError("stream.batches_per_domain, batch_size and repeat must be positive")
        self.agop.resolved_rank(self.source.n_classes, self.feature_dim)

    @property
    def batches_per_round(self) -> int:
        if self.stream_features is not None:
            rows = ingest_feature_csv(self.stream_features, self.source.input_dim).labels.size
            return -(-rows // self.stream.batch_size)
        n_domains = len(self.stream.domains) if self.stream.domains is not None else len(default_domains())
        return n_domains * self.stream.batches_per_domain


@dataclass(frozen=True)
class BatchMetrics:
    batch_index: int
    domain_id: int
    error_rate: float
    alignment: float
    kappa_r: float
    loss_st: float
    loss_cont: float
    confident_count: int
    eig_refreshed: bool
    checksum_before: str = ""
    checksum_after: str = ""

    def row(self) -> list[str]:
        return [
            str(self.batch_index),
            str(self.domain_id),
            repr(self.error_rate),
            repr(self.alignment),
            repr(self.kappa_r),
            repr(self.loss_st),
            repr(self.loss_cont),
            str(self.confident_count),
            "1" if self.eig_refreshed else "0",
        ]


@dataclass
class AdaptationState:
    """Everything the adaptation loop mutates; owned by a single thread."""

    backbone: Backbone
    adapter: AdapterState
    estimator: AgopEstimator
    teacher: EmaTeacher
    optimizer: OptimizerState = field(default_factory=OptimizerState)


@dataclass(frozen=True)
class PreparedModel:
    backbone: Backbone
    head: ClassifierHead
    prototypes: PrototypeBank
    source: SourceDataset


@dataclass
class RunResult:
    metrics: list[BatchMetrics]
    state: AdaptationState
    reference_basis: np.ndarray

    @property
    def mean_error(self) -> float:
        errors = np.asarray([m.error_rate for m in self.metrics])
        scored = errors[~np.isnan(errors)]
        return float(scored.mean()) if scored.size else float("nan")

    @property
    def final_alignment(self) -> float:
        return self.metrics[-1].alignment if self.metrics else float("nan")


class MetricsRecorder:
    """The only reader of ground truth; optionally streams rows to a CSV file."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.metrics: list[BatchMetrics] = []
        self._writer = None
        self._handle: TextIO | None = None
        self._context = None
        self._last_domain: int | None = None

    def __enter__(self) -> MetricsRecorder:
        if self.path is not None:
            self._context = atomic_open(self.path)
            self._handle = self._context.__enter__()
            self._writer = csv.writer(self._handle, lineterminator="\n")
            self._writer.writerow(METRICS_HEADER)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._context is not None:
            self._context.__exit__(exc_type, exc, tb)
            self._context = None

    def record(self, batch: StreamBatch, predictions: np.ndarray, **fields) -> BatchMetrics:
        labels, domain_id = reveal_truth(batch)
        if domain_id != self._last_domain:
            logger.info("Batch %d: domain %d begins", batch.batch_index, domain_id)
            self._last_domain = domain_id
        labeled = labels >= 0
        # rows labeled -1 are not scored
        error_rate = float(np.mean(predictions[labeled] != labels[labeled])) if labeled.any() else float("nan")
        entry = BatchMetrics(
            batch_index=batch.batch_index,
            domain_id=int(domain_id),
            error_rate=error_rate,
            **fields,
        )
        self.metrics.append(entry)
        if self._writer is not None:
            self._writer.writerow(entry.row())
            self._handle.flush()
        return entry


def param_checksum(state: AdaptationState) -> str:
    digest = hashlib.sha256()
    for arr in (state.adapter.s, state.backbone.gain, state.backbone.abias):
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()[:16]


def frozen_checksum(backbone: Backbone, head: ClassifierHead) -> str:
    digest = hashlib.sha256()
    for arr in (backbone.weight, backbone.bias, head.w, head.b):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def verify_frozen(expected: str, backbone: Backbone, head: ClassifierHead) -> None:
    """Compare the frozen weights after a run with the checksum taken before it."""
    if frozen_checksum(backbone, head) != expected:
        raise FrozenContractError("backbone weight or classifier head changed during adaptation")


def trainable_parameter_count(state: AdaptationState) -> int:
    affine = 2 * state.backbone.feature_dim if state.backbone.affine_trainable else 0
    return state.adapter.r + affine


def frozen_parameter_count(backbone: Backbone, head: ClassifierHead) -> int:
    return backbone.weight.size + backbone.bias.size + head.w.size + head.b.size


def reference_basis(head: ClassifierHead, config: EngineConfig) -> np.ndarray:
    """Top-r eigenvectors of W^T W, the warm start and the alignment target."""
    return refresh_basis(init_from_head(head, config.agop))


def _loaded_model(config: EngineConfig) -> PreparedModel:
    backbone, head, prototypes = load_model(config.model_path)
    expected = (config.source.input_dim, config.feature_dim, config.source.n_classes)
    found = (backbone.input_dim, backbone.feature_dim, head.n_classes)
    if found != expected:
        raise ConfigError(f"checkpoint {config.model_path} has dims (L_in, L, C) = {found}, config expects {expected}")
    # a checkpoint carries no source samples
    dataset = SourceDataset(np.zeros((0, backbone.input_dim)), np.zeros(0, dtype=np.int64), head.n_classes)
    dataset.seal()
    backbone = replace(backbone, affine_trainable=config.affine_trainable)
    logger.info("Model loaded from %s", config.model_path)
    return PreparedModel(backbone=backbone, head=head, prototypes=prototypes, source=dataset)


def source_dataset(config: EngineConfig) -> SourceDataset:
    if config.source_features is None:
        return make_source(replace(config.source, seed=config.seed))
    table = ingest_feature_csv(config.source_features, config.source.input_dim)
    logger.info("Source samples read from %s: %d rows", config.source_features, table.labels.size)
    return table.as_source_dataset(config.source.n_classes)


def prepare_model(config: EngineConfig) -> PreparedModel:
    """Setup phase: source data, pretraining and prototypes; the source is sealed afterwards.

    With ``model_path`` set the checkpoint replaces the whole phase.
    """
    config.validate()
    if config.model_path is not None:
        return _loaded_model(config)
    dataset = source_dataset(config)
    backbone, head = pretrain_source(
        dataset,
        epochs=config.pretrain_epochs,
        lr=config.pretrain_lr,
        feature_dim=config.feature_dim,
        activation=config.activation,
        seed=config.seed,
    )
    backbone = replace(backbone, affine_trainable=config.affine_trainable)
    prototypes = build_prototypes(backbone, dataset)
    dataset.seal()
    return PreparedModel(backbone=backbone, head=head, prototypes=prototypes, source=dataset)


def build_stream(config: EngineConfig) -> list[StreamBatch]:
    if config.stream_features is not None:
        table = ingest_feature_csv(config.stream_features, config.source.input_dim)
        return stream_from_table(table, config.stream.batch_size, config.stream.repeat)
    source_cfg = replace(config.source, seed=config.seed)
    domains = config.stream.domains
    if domains is None:
        domains = tuple(default_domains(source_cfg.input_dim, config.seed))
    return make_stream(
        domains,
        config.stream.batches_per_domain,
        config.stream.batch_size,
        source_cfg,
        seed=config.seed,
        repeat=config.stream.repeat,
    )


def initial_state(backbone: Backbone, head: ClassifierHead, config: EngineConfig) -> AdaptationState:
    estimator = init_from_head(head, config.agop)
    if config.subspace_mode == "none":
        adapter = empty_adapter(backbone.feature_dim)
    else:
        adapter = init_adapter(refresh_basis(estimator))
    return AdaptationState(
        backbone=backbone,
        adapter=adapter,
        estimator=estimator,
        teacher=init_teacher(head, backbone, config.teacher_momentum),
    )


def _kappa(estimator: AgopEstimator) -> float:
    return cumulative_spectral_energy(spectrum(estimator), estimator.r)


def _alignment(adapter: AdapterState, reference: np.ndarray) -> float:
    if adapter.r == 0 or adapter.v.shape != reference.shape:
        return 0.0
    return subspace_similarity(adapter.v, reference)


def _predict(state: AdaptationState, head: ClassifierHead, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f_pre = apply_affine(h, state.backbone.gain, state.backbone.abias)
    return f_pre, logits(head, adapt(state.adapter, f_pre))


def _update_stage(
    state: AdaptationState,
    head: ClassifierHead,
    prototypes: PrototypeBank,
    batch: StreamBatch,
    h: np.ndarray,
    f_pre: np.ndarray,
    y: np.ndarray,
    config: EngineConfig,
    rng: np.random.Generator,
) -> dict:
    probs = softmax(y)
    if config.subspace_mode == "agop":
        state.estimator, mask = observe_batch(state.estimator, head, probs, f_pre)
    else:
        mask = confident_mask(probs, config.agop.tau)

    refreshed = False
    if config.subspace_mode == "agop" and state.estimator.refresh_due:
        state.adapter = set_basis(state.adapter, refresh_basis(state.estimator), config.carry_scale)
        if not config.carry_scale:
            state.optimizer.reset("s")
        refreshed = True
        logger.info("Batch %d: subspace basis refreshed", batch.batch_index)

    if config.fault == "leak_labels":
        reveal_truth(batch)

    x_aug = batch.x + rng.standard_normal(batch.x.shape) * config.aug_sigma
    h_aug = backbone_activations(state.backbone, x_aug)
    subset = mask if config.loss.contrastive_confident_only else None
    grads = total_loss_and_grads(
        state.adapter, state.backbone, head, state.teacher, h, h_aug, prototypes, config.loss, subset
    )

    params = {"s": state.adapter.s}
    if state.backbone.affine_trainable:
        params["gain"] = state.backbone.gain
        params["bias"] = state.backbone.abias
    updated, state.optimizer = optimizer_step(params, grads, config.loss, state.optimizer)
    if not all(np.all(np.isfinite(v)) for v in updated.values()):
        raise NumericalError("adaptable parameters became non-finite")
    state.adapter = with_scale(state.adapter, updated["s"])
    if state.backbone.affine_trainable:
        state.backbone = with_affine(state.backbone, updated["gain"], updated["bias"])

    state.teacher = ema_update(state.teacher, head, (state.backbone.gain, state.backbone.abias))
    return {
        "loss_st": grads.loss_st,
        "loss_cont": grads.loss_cont,
        "confident_count": int(mask.size),
        "eig_refreshed": refreshed,
    }


def adapt_stream(
    backbone: Backbone,
    head: ClassifierHead,
    prototypes: PrototypeBank,
    stream: Sequence[StreamBatch],
    config: EngineConfig,
    recorder: MetricsRecorder | None = None,
    frozen_arm: bool = False,
) -> RunResult:
    """Predict-then-adapt over an ordered stream. Never sees source data."""
    state = initial_state(backbone, head, config)
    reference = reference_basis(head, config)
    rng = np.random.default_rng([config.seed, 4])
    idle = {"loss_st": 0.0, "loss_cont": 0.0, "confident_count": 0, "eig_refreshed": False}
    if config.fault == "mutate_backbone":
        state.backbone = replace(state.backbone, weight=state.backbone.weight + 1e-6)

    logger.info(
        "Adapting %d batches (%s): %d trainable parameters, %.4f%% of the frozen model",
        len(stream),
        "frozen" if frozen_arm else config.subspace_mode,
        trainable_parameter_count(state),
        100.0 * trainable_parameter_count(state) / frozen_parameter_count(backbone, head),
    )
    for expected, batch in enumerate(stream):
        if batch.batch_index != expected:
            raise EngineError(batch.batch_index, ValueError(f"expected batch {expected}"))
        try:
            before = param_checksum(state)
            h = backbone_activations(state.backbone, batch.x)
            f_pre, y = _predict(state, head, h)
            predictions = np.argmax(y, axis=1)
            fields = idle if frozen_arm else _update_stage(state, head, prototypes, batch, h, f_pre, y, config, rng)
            logger.debug(
                "Batch %d: loss_st=%.5f confident=%d", batch.batch_index, fields["loss_st"], fields["confident_count"]
            )
            if config.post_step_eval and not frozen_arm:
                predictions = np.argmax(_predict(state, head, h)[1], axis=1)
            if recorder is not None:
                recorder.record(
                    batch,
                    predictions,
                    alignment=_alignment(state.adapter, reference),
                    kappa_r=_kappa(state.estimator),
                    checksum_before=before,
                    checksum_after=param_checksum(state),
                    **fields,
                )
        except ContractError:
            raise
        except (GoldError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise EngineError(batch.batch_index, exc) from exc
        allowed = 1 if recorder is not None else 0
        if batch._truth.reads != allowed:
            raise QuarantineError(
                f"batch {batch.batch_index}: labels read {batch._truth.reads} times, allowed {allowed}"
            )

    return RunResult(
        metrics=recorder.metrics if recorder is not None else [],
        state=state,
        reference_basis=reference,
    )


def _execute(config: EngineConfig, frozen_arm: bool, prepared: PreparedModel | None = None) -> RunResult:
    config.validate()
    prepared = prepared or prepare_model(config)
    if config.fault == "read_source":
        _ = prepared.source.x
    stream = build_stream(config)
    expected = frozen_checksum(prepared.backbone, prepared.head)
    with MetricsRecorder(config.metrics_path) as recorder:
        result = adapt_stream(
            prepared.backbone,
            prepared.head,
            prepared.prototypes,
            stream,
            config,
            recorder=recorder,
            frozen_arm=frozen_arm,
        )
        verify_frozen(expected, result.state.backbone, prepared.head)
    logger.info("Run finished: mean error %.4f", result.mean_error)
    return result


def run(config: EngineConfig, prepared: PreparedModel | None = None) -> RunResult:
    return _execute(config, frozen_arm=False, prepared=prepared)


def run_baseline_frozen(config: EngineConfig, prepared: PreparedModel | None = None) -> RunResult:
    return _execute(config, frozen_arm=True, prepared=prepared)


@dataclass(frozen=True)
class ArmComparison:
    seeds: tuple[int, ...]
    adapted_errors: tuple[float, ...]
    frozen_errors: tuple[float, ...]
    wins: int
    p_value: float


def compare_arms(config: EngineConfig, seeds: Sequence[int]) -> ArmComparison:
    """Adapted vs frozen model on identical streams, one pair per seed, with a paired sign test."""
    adapted, frozen = [], []
    for seed in seeds:
        cfg = replace(config, seed=seed, metrics_path=None)
        prepared = prepare_model(cfg)
        adapted.append(run(cfg, prepared).mean_error)
        frozen.append(run_baseline_frozen(cfg, prepared).mean_error)
    diffs = np.asarray(frozen) - np.asarray(adapted)
    wins = int(np.sum(diffs > 0))
    decided = int(np.sum(diffs != 0))
    p_value = binomtest(wins, decided, 0.5, alternative="greater").pvalue if decided else 1.0
    return ArmComparison(
        seeds=tuple(seeds),
        adapted_errors=tuple(adapted),
        frozen_errors=tuple(frozen),
        wins=wins,
        p_value=float(p_value),
    )


def round_errors(metrics: Sequence[BatchMetrics], batches_per_round: int) -> list[float]:
    """Mean error per pass over the target data in a repeated-exposure run."""
    errors = np.asarray([m.error_rate for m in metrics])
    n_rounds = len(errors) // batches_per_round
    return [float(errors[i * batches_per_round : (i + 1) * batches_per_round].mean()) for i in range(n_rounds)]


def save_snapshot(path: str | Path, state: AdaptationState) -> None:
    write_json(
        path,
        {
            "g": encode_array(state.estimator.g),
            "v": encode_array(state.adapter.v),
            "s": encode_array(state.adapter.s),
            "gain": encode_array(state.backbone.gain),
            "abias": encode_array(state.backbone.abias),
            "batch_counter": state.estimator.batch_counter,
            "confident_total": state.estimator.confident_total,
        },
    )


def load_snapshot_matrix(path: str | Path) -> np.ndarray:
    """The G_t matrix stored in a snapshot file."""
    payload = read_json(path)
    if payload is None:
        raise ConfigError(f"snapshot {path} does not exist")
    if "g" not in payload:
        raise ConfigError(f"snapshot {path} has no 'g' entry")
    g = decode_array(payload["g"], "g")
    if g.ndim != 2 or g.size == 0 or g.shape[0] != g.shape[1]:
        raise ConfigError(f"snapshot {path} holds an empty or non-square matrix {g.shape}")
    return g


SWEEP_VALUES: dict[str, tuple[float, ...]] = {
    "tau": (0.5, 0.6, 0.7, 0.8, 0.9),
    "batch_size": (16, 32, 64, 128),
    "rank": (2, 4, 6, 8, 10),
    "alpha": (0.02, 0.05, 0.1, 0.2, 0.4, 0.8),
    "t_eig": (1, 5, 10, 20, 50),
}
_INTEGER_PARAMS = ("batch_size", "rank", "t_eig")


def sweep_config(config: EngineConfig, param: str, value: float) -> EngineConfig:
    """``config`` with one hyper-parameter replaced; the result is validated."""
    if param not in SWEEP_VALUES:
        raise ConfigError(f"cannot sweep {param!r}; choose from {tuple(SWEEP_VALUES)}")
    if param in _INTEGER_PARAMS:
        if float(value) != int(value):
            raise ConfigError(f"{param} takes integers, got {value}")
        value = int(value)
    if param == "batch_size":
        swept = replace(config, stream=replace(config.stream, batch_size=value))
    else:
        swept = replace(config, agop=replace(config.agop, **{param: value}))
    swept.validate()
    return swept
