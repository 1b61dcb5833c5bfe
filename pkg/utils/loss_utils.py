from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from utils.adapter_utils import AdapterState, adapt
from utils.errors import ConfigError, DegenerateError, DimensionError
from utils.model_utils import (
    Backbone,
    ClassifierHead,
    EmaTeacher,
    PrototypeBank,
    apply_affine,
    logits,
    teacher_logits,
)


PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class LossConfig:
    lambda_trg: float = 1.0
    lambda_cont: float = 1.0
    temperature: float = 0.1
    lr: float = 1e-2
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    sce_weights: tuple[float, float] = (1.0, 1.0)
    contrastive_confident_only: bool = False

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"loss.temperature must be positive, got {self.temperature}")
        if self.lr <= 0:
            raise ConfigError(f"loss.lr must be positive, got {self.lr}")
        if self.lambda_trg < 0 or self.lambda_cont < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"loss.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"loss.adam_betas must lie in [0, 1), got {self.adam_betas}")


@dataclass(frozen=True)
class GradBundle:
    d_s: np.ndarray
    d_gain: np.ndarray
    d_bias: np.ndarray
    loss_st: float
    loss_cont: float
    loss_total: float


@dataclass
class OptimizerState:
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)

    def reset(self, name: str) -> None:
        self.moments.pop(name, None)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b) or np.ndim(a) != 2:
        raise DimensionError(f"logit shapes differ: {np.shape(a)} vs {np.shape(b)}")


def _softmax_backward(p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    return p * (d_p - np.sum(p * d_p, axis=1, keepdims=True))


def _sce_rows(ps: np.ndarray, pt: np.ndarray, weights: tuple[float, float]) -> np.ndarray:
    w_fwd, w_rev = weights
    return -np.sum(
        w_fwd * pt * np.log(np.maximum(ps, PROB_FLOOR)) + w_rev * ps * np.log(np.maximum(pt, PROB_FLOOR)),
        axis=1,
    )


def _sce_parts(student: np.ndarray, teacher: np.ndarray, weights: tuple[float, float]) -> tuple[float, np.ndarray]:
    """Mean SCE over the batch and its gradient w.r.t. the student logits."""
    w_fwd, w_rev = weights
    ps, pt = softmax(student), softmax(teacher)
    loss = float(np.mean(_sce_rows(ps, pt, weights)))
    ps_c = np.maximum(ps, PROB_FLOOR)
    d_ps = w_fwd * np.where(ps > PROB_FLOOR, -pt / ps_c, 0.0) - w_rev * np.log(np.maximum(pt, PROB_FLOOR))
    return loss, _softmax_backward(ps, d_ps) / student.shape[0]


def sce(student_logits: np.ndarray, teacher_logits: np.ndarray, weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """CE(p_t || p_s) + CE(p_s || p_t) averaged over rows; exactly symmetric for equal weights."""
    _check_pair(student_logits, teacher_logits)
    return float(np.mean(_sce_rows(softmax(student_logits), softmax(teacher_logits), weights)))


def self_training_loss(y: np.ndarray, y_aug: np.ndarray, y_ema: np.ndarray, weights: tuple[float, float] = (1.0, 1.0)) -> float:
    _check_pair(y, y_ema)
    _check_pair(y_aug, y_ema)
    return 0.5 * sce(y, y_ema, weights) + 0.5 * sce(y_aug, y_ema, weights)


def _unit_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=1)
    safe = np.where(norms >= NORM_FLOOR, norms, 1.0)
    return a / safe[:, None], norms


def _active_prototypes(protos: PrototypeBank) -> tuple[np.ndarray, np.ndarray]:
    active = np.flatnonzero((protos.counts > 0) & (np.linalg.norm(protos.p, axis=1) >= NORM_FLOOR))
    if active.size == 0:
        raise DegenerateError("every prototype is zero")
    p_hat, _ = _unit_rows(protos.p[active])
    return active, p_hat


def prototype_assignment(f: np.ndarray, protos: PrototypeBank) -> np.ndarray:
    """Nearest active prototype by cosine similarity, as an index into ``protos.p``."""
    active, p_hat = _active_prototypes(protos)
    f_hat, _ = _unit_rows(np.asarray(f, dtype=np.float64))
    return active[np.argmax(f_hat @ p_hat.T, axis=1)]


def _contrastive_parts(
    f: np.ndarray,
    f_aug: np.ndarray,
    protos: PrototypeBank,
    temperature: float,
    subset: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradients w.r.t. both views; assignments are held constant."""
    if f.shape != f_aug.shape or f.ndim != 2:
        raise DimensionError(f"view shapes differ: {f.shape} vs {f_aug.shape}")
    if f.shape[1] != protos.p.shape[1]:
        raise DimensionError(f"features have {f.shape[1]} columns, prototypes have {protos.p.shape[1]}")
    active, p_hat = _active_prototypes(protos)
    f_hat, f_norm = _unit_rows(f)
    a_hat, a_norm = _unit_rows(f_aug)

    keep = (f_norm >= NORM_FLOOR) & (a_norm >= NORM_FLOOR)
    if subset is not None:
        chosen = np.zeros_like(keep)
        chosen[np.asarray(subset, dtype=np.int64)] = True
        keep &= chosen
    rows = np.flatnonzero(keep)
    grad_f = np.zeros_like(f)
    grad_a = np.zeros_like(f_aug)
    if rows.size == 0:
        return 0.0, grad_f, grad_a

    target = np.searchsorted(active, prototype_assignment(f[rows], protos))
    onehot = np.eye(active.size)[target]
    scale = 1.0 / (2.0 * rows.size)
    total = 0.0
    for unit, norm, grad in ((f_hat, f_norm, grad_f), (a_hat, a_norm, grad_a)):
        cos = unit[rows] @ p_hat.T
        q = cos / temperature
        q_max = q.max(axis=1, keepdims=True)
        log_z = q_max[:, 0] + np.log(np.sum(np.exp(q - q_max), axis=1))
        total += float(np.sum(log_z - q[np.arange(rows.size), target]))
        d_q = (softmax(q) - onehot) * scale / temperature
        # d cos_c / d f = (p_hat_c - cos_c * f_hat) / |f|
        d_unit = d_q @ p_hat - np.sum(d_q * cos, axis=1, keepdims=True) * unit[rows]
        grad[rows] = d_unit / norm[rows, None]
    return total * scale, grad_f, grad_a


def prototype_contrastive_loss(
    f: np.ndarray,
    f_aug: np.ndarray,
    protos: PrototypeBank,
    temperature: float,
    subset: np.ndarray | None = None,
) -> float:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return _contrastive_parts(np.asarray(f, np.float64), np.asarray(f_aug, np.float64), protos, temperature, subset)[0]


def total_loss_and_grads(
    state: AdapterState,
    backbone: Backbone,
    head: ClassifierHead,
    teacher: EmaTeacher,
    h: np.ndarray,
    h_aug: np.ndarray,
    protos: PrototypeBank,
    cfg: LossConfig,
    contrastive_subset: np.ndarray | None = None,
) -> GradBundle:
    """Loss and exact gradients w.r.t. (s, gain, bias).

    ``h`` and ``h_aug`` are the frozen backbone activations of the clean and
    augmented views; the pre-adaptation features are ``h * gain + abias``.
    Teacher logits come from the clean view's un-adapted activations and,
    like the prototype assignments, are constants.
    """
    if h.shape != h_aug.shape or h.shape[1] != state.feature_dim:
        raise DimensionError(f"activation shapes {h.shape}, {h_aug.shape} do not fit the adapter")
    y_ema = teacher_logits(teacher, h)

    views = []
    for act in (h, h_aug):
        f_pre = apply_affine(act, backbone.gain, backbone.abias)
        adapted = adapt(state, f_pre)
        views.append((act, f_pre, adapted, logits(head, adapted)))

    loss_st = 0.0
    d_adapted = [np.zeros_like(views[0][2]), np.zeros_like(views[1][2])]
    for i, (_, _, _, y) in enumerate(views):
        part, d_y = _sce_parts(y, y_ema, cfg.sce_weights)
        loss_st += 0.5 * part
        d_adapted[i] += cfg.lambda_trg * 0.5 * (d_y @ head.w)

    loss_cont, d_f, d_f_aug = _contrastive_parts(
        views[0][2], views[1][2], protos, cfg.temperature, contrastive_subset
    )
    d_adapted[0] += cfg.lambda_cont * d_f
    d_adapted[1] += cfg.lambda_cont * d_f_aug

    d_s = np.zeros(state.r)
    d_gain = np.zeros(state.feature_dim)
    d_bias = np.zeros(state.feature_dim)
    for (act, f_pre, _, _), d_a in zip(views, d_adapted):
        d_coord = d_a @ state.v
        d_s += np.sum((f_pre @ state.v) * d_coord, axis=0)
        d_f_pre = d_a + (d_coord * state.s) @ state.v.T
        d_gain += np.sum(d_f_pre * act, axis=0)
        d_bias += np.sum(d_f_pre, axis=0)

    return GradBundle(
        d_s=d_s,
        d_gain=d_gain,
        d_bias=d_bias,
        loss_st=loss_st,
        loss_cont=loss_cont,
        loss_total=cfg.lambda_trg * loss_st + cfg.lambda_cont * loss_cont,
    )


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: GradBundle | dict[str, np.ndarray],
    cfg: LossConfig,
    opt_state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One step of SGD or bias-corrected Adam over named parameter arrays.

    Adam keeps a step count per parameter so a reset moment restarts its own
    bias correction.
    """
    if isinstance(grads, GradBundle):
        grads = {"s": grads.d_s, "gain": grads.d_gain, "bias": grads.d_bias}
    updated: dict[str, np.ndarray] = {}
    b1, b2 = cfg.adam_betas
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        if np.shape(grad) != np.shape(value):
            raise DimensionError(f"gradient for {name} has shape {np.shape(grad)}, parameter {np.shape(value)}")
        if cfg.optimizer == "sgd":
            updated[name] = value - cfg.lr * grad
            continue
        m, v, t = opt_state.moments.get(name, (np.zeros_like(value), np.zeros_like(value), 0))
        t += 1
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        opt_state.moments[name] = (m, v, t)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        updated[name] = value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    opt_state.step += 1
    return updated, opt_state
