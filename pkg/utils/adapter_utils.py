from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from utils.errors import DimensionError
from utils.linalg_utils import as_matrix, check_orthonormal, modified_gram_schmidt


@dataclass(frozen=True)
class AdapterState:
    """Residual adapter f -> f + V (s * (V^T f)) restricted to span(V)."""

    v: np.ndarray
    s: np.ndarray

    @property
    def r(self) -> int:
        return self.v.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.v.shape[0]


def init_adapter(v: np.ndarray) -> AdapterState:
    v = modified_gram_schmidt(check_orthonormal(v, "v"))
    return AdapterState(v=v, s=np.zeros(v.shape[1]))


def empty_adapter(feature_dim: int) -> AdapterState:
    """Rank-0 adapter: the identity map, used when no subspace is maintained."""
    return AdapterState(v=np.zeros((feature_dim, 0)), s=np.zeros(0))


def with_scale(state: AdapterState, s: np.ndarray) -> AdapterState:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != state.s.shape:
        raise DimensionError(f"scaling vector shape {s.shape} != {state.s.shape}")
    return AdapterState(v=state.v, s=s.copy())


def adapt(state: AdapterState, f: np.ndarray) -> np.ndarray:
    f = as_matrix(f, "features")
    if f.shape[1] != state.feature_dim:
        raise DimensionError(f"features have {f.shape[1]} columns, adapter expects {state.feature_dim}")
    if not np.any(state.s):
        return f.copy()
    return f + ((f @ state.v) * state.s) @ state.v.T


def set_basis(state: AdapterState, v_new: np.ndarray, carry_scale: bool = False) -> AdapterState:
    """Install a new basis; the scaling vector restarts at zero unless ``carry_scale``."""
    v_new = check_orthonormal(v_new, "v_new")
    if v_new.shape[0] != state.feature_dim:
        raise DimensionError(f"basis has {v_new.shape[0]} rows, adapter expects {state.feature_dim}")
    v_new = modified_gram_schmidt(v_new)
    if carry_scale and state.r:
        # diag of V_new^T (V_old S V_old^T) V_new
        overlap = v_new.T @ state.v
        s_new = np.einsum("ij,j,ij->i", overlap, state.s, overlap)
    else:
        s_new = np.zeros(v_new.shape[1])
    return AdapterState(v=v_new, s=s_new)


def residual_norm(state: AdapterState, f: np.ndarray) -> float:
    return float(np.linalg.norm(adapt(state, f) - f))

