from __future__ import annotations

from dataclasses import dataclass, replace
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from utils.errors import DataError, DimensionError, DivergenceError
from utils.linalg_utils import as_matrix, frozen_copy
from utils.storage_utils import decode_array, encode_array, read_json, write_json

if TYPE_CHECKING:
    from utils.stream_utils import SourceDataset


logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class Backbone:
    """Frozen affine map plus the trainable per-feature (gain, bias) pair."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str
    gain: np.ndarray
    abias: np.ndarray
    affine_trainable: bool = True

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ClassifierHead:
    w: np.ndarray
    b: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class PrototypeBank:
    p: np.ndarray
    counts: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return self.counts > 0


@dataclass(frozen=True)
class EmaTeacher:
    head: ClassifierHead
    gain: np.ndarray
    abias: np.ndarray
    momentum: float


def make_backbone(
    weight: np.ndarray,
    bias: np.ndarray,
    activation: str = "tanh",
    affine_trainable: bool = True,
) -> Backbone:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    weight = as_matrix(weight, "backbone.weight")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"backbone.bias shape {bias.shape} != ({weight.shape[0]},)")
    dim = weight.shape[0]
    return Backbone(
        weight=frozen_copy(weight),
        bias=frozen_copy(bias),
        activation=activation,
        gain=np.ones(dim),
        abias=np.zeros(dim),
        affine_trainable=affine_trainable,
    )


def make_head(w: np.ndarray, b: np.ndarray | None = None) -> ClassifierHead:
    w = as_matrix(w, "head.w")
    if w.shape[0] < 2:
        raise DimensionError(f"head needs at least 2 classes, got {w.shape[0]}")
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    if b.shape != (w.shape[0],):
        raise DimensionError(f"head.b shape {b.shape} != ({w.shape[0]},)")
    return ClassifierHead(w=frozen_copy(w), b=frozen_copy(b))


def with_affine(backbone: Backbone, gain: np.ndarray, abias: np.ndarray) -> Backbone:
    gain = np.asarray(gain, dtype=np.float64)
    abias = np.asarray(abias, dtype=np.float64)
    if gain.shape != backbone.gain.shape or abias.shape != backbone.abias.shape:
        raise DimensionError("affine parameters do not match the backbone width")
    return replace(backbone, gain=gain.copy(), abias=abias.copy())


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(pre)
    return pre


def backbone_activations(backbone: Backbone, x: np.ndarray) -> np.ndarray:
    """Frozen part of the backbone: activation(x W^T + bias), before (gain, abias)."""
    x = as_matrix(x, "x")
    if x.shape[1] != backbone.input_dim:
        raise DimensionError(f"x has {x.shape[1]} columns, backbone expects {backbone.input_dim}")
    return _activate(x @ backbone.weight.T + backbone.bias, backbone.activation)


def apply_affine(h: np.ndarray, gain: np.ndarray, abias: np.ndarray) -> np.ndarray:
    return h * gain + abias


def extract_features(backbone: Backbone, x: np.ndarray) -> np.ndarray:
    return apply_affine(backbone_activations(backbone, x), backbone.gain, backbone.abias)


def logits(head: ClassifierHead, f: np.ndarray) -> np.ndarray:
    f = as_matrix(f, "features")
    if f.shape[1] != head.w.shape[1]:
        raise DimensionError(f"features have {f.shape[1]} columns, head expects {head.w.shape[1]}")
    return f @ head.w.T + head.b


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(backbone: Backbone, head: ClassifierHead, x: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(logits(head, extract_features(backbone, x)), axis=1)
    return float(np.mean(pred == labels))


def pretrain_source(
    dataset: SourceDataset,
    epochs: int = 500,
    lr: float = 0.05,
    feature_dim: int = 128,
    activation: str = "tanh",
    seed: int = 0,
) -> tuple[Backbone, ClassifierHead]:
    """Full-batch gradient descent on softmax cross-entropy over all four weight blocks."""
    x, labels = dataset.x, dataset.labels
    if x.shape[0] == 0:
        raise DataError("source dataset is empty")
    n_classes = dataset.n_classes
    present = np.bincount(labels, minlength=n_classes)
    if n_classes < 2 or np.any(present == 0):
        missing = np.flatnonzero(present == 0).tolist()
        raise DataError(f"source dataset misses classes {missing}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")

    rng = np.random.default_rng(seed)
    n, input_dim = x.shape
    # Data-dependent scale keeps pre-activations O(1).
    x_scale = float(x.std()) or 1.0
    wb = rng.standard_normal((feature_dim, input_dim)) / (np.sqrt(input_dim) * x_scale)
    bb = np.zeros(feature_dim)
    w = rng.standard_normal((n_classes, feature_dim)) / np.sqrt(feature_dim)
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]

    loss = float("nan")
    for epoch in range(epochs):
        pre = x @ wb.T + bb
        h = _activate(pre, activation)
        z = h @ w.T + b
        p = _softmax_rows(z)
        loss = float(-np.mean(np.log(np.clip(p[np.arange(n), labels], 1e-300, None))))
        if not np.isfinite(loss):
            raise DivergenceError(f"source loss is {loss} at epoch {epoch}")

        dz = (p - onehot) / n
        dw = dz.T @ h
        db = dz.sum(axis=0)
        dh = dz @ w
        dpre = dh * (1.0 - h * h) if activation == "tanh" else dh
        wb -= lr * (dpre.T @ x)
        bb -= lr * dpre.sum(axis=0)
        w -= lr * dw
        b -= lr * db

    backbone = make_backbone(wb, bb, activation)
    head = make_head(w, b)
    logger.info(
        "Source model trained: loss=%.4f accuracy=%.4f",
        loss,
        accuracy(backbone, head, x, labels),
    )
    return backbone, head


def build_prototypes(backbone: Backbone, dataset: SourceDataset) -> PrototypeBank:
    features = extract_features(backbone, dataset.x)
    n_classes = dataset.n_classes
    counts = np.bincount(dataset.labels, minlength=n_classes)[:n_classes]
    sums = np.zeros((n_classes, features.shape[1]))
    np.add.at(sums, dataset.labels, features)
    p = np.zeros_like(sums)
    present = counts > 0
    p[present] = sums[present] / counts[present, None]
    return PrototypeBank(p=frozen_copy(p), counts=frozen_copy(counts.astype(np.float64)))


def init_teacher(head: ClassifierHead, backbone: Backbone, momentum: float = 0.999) -> EmaTeacher:
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"teacher momentum must lie in [0, 1], got {momentum}")
    return EmaTeacher(
        head=ClassifierHead(w=head.w.copy(), b=head.b.copy()),
        gain=backbone.gain.copy(),
        abias=backbone.abias.copy(),
        momentum=momentum,
    )


def ema_update(
    teacher: EmaTeacher,
    student_head: ClassifierHead,
    student_affine: tuple[np.ndarray, np.ndarray],
) -> EmaTeacher:
    gain, abias = student_affine
    if (
        student_head.w.shape != teacher.head.w.shape
        or student_head.b.shape != teacher.head.b.shape
        or np.shape(gain) != teacher.gain.shape
        or np.shape(abias) != teacher.abias.shape
    ):
        raise DimensionError("student parameters do not match the teacher")
    m = teacher.momentum

    def blend(old: np.ndarray, new: np.ndarray) -> np.ndarray:
        return m * old + (1.0 - m) * np.asarray(new, dtype=np.float64)

    return EmaTeacher(
        head=ClassifierHead(w=blend(teacher.head.w, student_head.w), b=blend(teacher.head.b, student_head.b)),
        gain=blend(teacher.gain, gain),
        abias=blend(teacher.abias, abias),
        momentum=m,
    )


def teacher_logits(teacher: EmaTeacher, h: np.ndarray) -> np.ndarray:
    """Teacher prediction on un-adapted features built from frozen activations ``h``."""
    return logits(teacher.head, apply_affine(h, teacher.gain, teacher.abias))


def save_model(path: str | Path, backbone: Backbone, head: ClassifierHead, prototypes: PrototypeBank) -> None:
    payload = {
        "dims": {
            "L_in": backbone.input_dim,
            "L": backbone.feature_dim,
            "C": head.n_classes,
        },
        "activation": backbone.activation,
        "affine_trainable": backbone.affine_trainable,
        "arrays": {
            "backbone.weight": encode_array(backbone.weight),
            "backbone.bias": encode_array(backbone.bias),
            "backbone.gain": encode_array(backbone.gain),
            "backbone.abias": encode_array(backbone.abias),
            "head.w": encode_array(head.w),
            "head.b": encode_array(head.b),
            "prototypes.p": encode_array(prototypes.p),
            "prototypes.counts": encode_array(prototypes.counts),
        },
    }
    write_json(path, payload)


def load_model(path: str | Path) -> tuple[Backbone, ClassifierHead, PrototypeBank]:
    payload = read_json(path)
    if payload is None:
        raise DataError(f"model checkpoint {path} does not exist")
    try:
        arrays = {name: decode_array(entry, name) for name, entry in payload["arrays"].items()}
        dims = payload["dims"]
        backbone = make_backbone(
            arrays["backbone.weight"],
            arrays["backbone.bias"],
            payload.get("activation", "tanh"),
            bool(payload.get("affine_trainable", True)),
        )
        backbone = with_affine(backbone, arrays["backbone.gain"], arrays["backbone.abias"])
        head = make_head(arrays["head.w"], arrays["head.b"])
        prototypes = PrototypeBank(
            p=frozen_copy(arrays["prototypes.p"]),
            counts=frozen_copy(arrays["prototypes.counts"]),
        )
    except KeyError as exc:
        raise DataError(f"model checkpoint {path} misses entry {exc}") from exc
    expected = (dims.get("L_in"), dims.get("L"), dims.get("C"))
    if expected != (backbone.input_dim, backbone.feature_dim, head.n_classes):
        raise DataError(f"model checkpoint {path} dims {expected} disagree with its arrays")
    return backbone, head, prototypes
