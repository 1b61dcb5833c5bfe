from __future__ import annotations

import csv
from dataclasses import dataclass, replace
import logging
from pathlib import Path

import numpy as np

from utils.errors import ConfigError, DimensionError, EmptyMaskError, ProbabilityError
from utils.linalg_utils import as_matrix, spectral_energy_curve, sym_eig, sym_eigvals
from utils.model_utils import ClassifierHead
from utils.storage_utils import atomic_open


logger = logging.getLogger(__name__)

PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AgopConfig:
    alpha: float = 0.1
    tau: float = 0.8
    t_eig: int = 10
    rank: int | None = None  # None: min(64, C)

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"agop.alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"agop.tau must lie in [0, 1), got {self.tau}")
        if self.t_eig < 1:
            raise ConfigError(f"agop.t_eig must be positive, got {self.t_eig}")
        if self.rank is not None and self.rank < 1:
            raise ConfigError(f"agop.rank must be positive, got {self.rank}")

    def resolved_rank(self, n_classes: int, feature_dim: int) -> int:
        rank = min(64, n_classes) if self.rank is None else self.rank
        if rank > feature_dim:
            raise ConfigError(f"agop.rank {rank} exceeds feature dimension {feature_dim}")
        return rank


@dataclass(frozen=True)
class AgopEstimator:
    g: np.ndarray
    alpha: float
    tau: float
    t_eig: int
    r: int
    batch_counter: int = 0
    confident_total: int = 0

    @property
    def refresh_due(self) -> bool:
        return self.batch_counter > 0 and self.batch_counter % self.t_eig == 0


def init_from_head(head: ClassifierHead, config: AgopConfig) -> AgopEstimator:
    config.validate()
    w = head.w
    return AgopEstimator(
        g=w.T @ w,
        alpha=config.alpha,
        tau=config.tau,
        t_eig=config.t_eig,
        r=config.resolved_rank(w.shape[0], w.shape[1]),
    )


def confident_mask(probs: np.ndarray, tau: float) -> np.ndarray:
    probs = as_matrix(probs, "probs")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_SUM_TOL)
    if bad.size:
        raise ProbabilityError(f"row {bad[0]} sums to {sums[bad[0]]:.8f}, not 1")
    return np.flatnonzero(probs.max(axis=1) >= tau)


def top_class(head: ClassifierHead, f: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(f @ head.w.T + head.b, axis=1)


def gradient_surrogate(head: ClassifierHead, f: np.ndarray) -> np.ndarray:
    """Gradient of the top logit w.r.t. the feature: for a linear head, row w_argmax."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (head.w.shape[1],):
        raise DimensionError(f"feature has shape {f.shape}, head expects ({head.w.shape[1]},)")
    return head.w[top_class(head, f[None, :])[0]].copy()


def batch_agop(head: ClassifierHead, f_pre: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMaskError("no confident samples in this batch")
    f_pre = as_matrix(f_pre, "f_pre")
    if f_pre.shape[1] != head.w.shape[1]:
        raise DimensionError(f"features have {f_pre.shape[1]} columns, head expects {head.w.shape[1]}")
    grads = head.w[top_class(head, f_pre[mask])]
    g = grads.T @ grads / mask.size
    return 0.5 * (g + g.T)


def ema_step(est: AgopEstimator, g_batch: np.ndarray) -> AgopEstimator:
    g_batch = as_matrix(g_batch, "g_batch")
    if g_batch.shape != est.g.shape:
        raise DimensionError(f"batch AGOP shape {g_batch.shape} != {est.g.shape}")
    return replace(est, g=(1.0 - est.alpha) * est.g + est.alpha * g_batch)


def observe_batch(
    est: AgopEstimator,
    head: ClassifierHead,
    probs: np.ndarray,
    f_pre: np.ndarray,
) -> tuple[AgopEstimator, np.ndarray]:
    """Confidence filter, batch AGOP and EMA for one batch; the counter always advances.

    Returns the updated estimator and the confident row indices.
    """
    mask = confident_mask(probs, est.tau)
    if mask.size:
        est = ema_step(est, batch_agop(head, f_pre, mask))
    return (
        replace(
            est,
            batch_counter=est.batch_counter + 1,
            confident_total=est.confident_total + int(mask.size),
        ),
        mask,
    )


def refresh_basis(est: AgopEstimator) -> np.ndarray:
    eig = sym_eig(est.g)
    logger.debug(
        "Eigendecomposition at batch %d: top eigenvalue %.4g, r-th %.4g",
        est.batch_counter,
        eig.values[0],
        eig.values[est.r - 1],
    )
    return eig.vectors[:, : est.r]


def spectrum(est: AgopEstimator) -> np.ndarray:
    return sym_eigvals(est.g)


def write_spectrum_csv(path: str | Path, values: np.ndarray) -> None:
    """Rows ``k,lambda,kappa`` for k = 1..L."""
    kappa = spectral_energy_curve(values)
    with atomic_open(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["k", "lambda", "kappa"])
        for k, (lam, kap) in enumerate(zip(values, kappa), start=1):
            writer.writerow([k, repr(float(lam)), repr(float(kap))])
