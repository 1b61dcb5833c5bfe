from __future__ import annotations

import csv

import numpy as np
import pytest

from utils.agop_utils import (
    AgopConfig,
    batch_agop,
    confident_mask,
    ema_step,
    gradient_surrogate,
    init_from_head,
    observe_batch,
    refresh_basis,
    write_spectrum_csv,
)
from utils.errors import ConfigError, DimensionError, EmptyMaskError, ProbabilityError
from utils.linalg_utils import subspace_similarity, sym_eig
from utils.loss_utils import softmax
from utils.model_utils import make_head
from utils.oracle_utils import alignment_trial


def test_init_from_head_uses_classifier_gram(rng):
    head = make_head(rng.standard_normal((3, 7)))
    est = init_from_head(head, AgopConfig())
    np.testing.assert_allclose(est.g, head.w.T @ head.w)
    assert est.r == 3
    assert est.batch_counter == 0


def test_rank_resolution():
    assert AgopConfig().resolved_rank(10, 128) == 10
    assert AgopConfig().resolved_rank(100, 128) == 64
    with pytest.raises(ConfigError):
        AgopConfig(rank=20).resolved_rank(10, 16)


@pytest.mark.parametrize(
    "kwargs",
    [{"alpha": 0.0}, {"alpha": 1.5}, {"tau": 1.0}, {"tau": -0.1}, {"t_eig": 0}],
)
def test_config_bounds(kwargs):
    with pytest.raises(ConfigError):
        AgopConfig(**kwargs).validate()


def test_confident_mask_threshold_and_validation():
    probs = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
    np.testing.assert_array_equal(confident_mask(probs, 0.8), [0, 2])
    np.testing.assert_array_equal(confident_mask(probs, 0.0), [0, 1, 2])
    with pytest.raises(ProbabilityError):
        confident_mask(np.array([[0.6, 0.6]]), 0.5)


def test_gradient_surrogate_breaks_ties_to_lowest_index():
    head = make_head(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(gradient_surrogate(head, np.array([1.0, 0.0])), [1.0, 0.0])
    np.testing.assert_array_equal(gradient_surrogate(head, np.array([0.0, 2.0])), [0.0, 1.0])
    with pytest.raises(DimensionError):
        gradient_surrogate(head, np.ones(3))


def test_batch_agop_is_mean_outer_product(rng):
    head = make_head(rng.standard_normal((4, 6)))
    f = rng.standard_normal((10, 6))
    mask = np.array([0, 3, 4, 9])
    expected = np.zeros((6, 6))
    for i in mask:
        g = gradient_surrogate(head, f[i])
        expected += np.outer(g, g)
    np.testing.assert_allclose(batch_agop(head, f, mask), expected / mask.size)
    with pytest.raises(EmptyMaskError):
        batch_agop(head, f, np.array([], dtype=np.int64))


def test_ema_step_blends(rng):
    head = make_head(rng.standard_normal((3, 5)))
    est = init_from_head(head, AgopConfig(alpha=0.25))
    g_batch = np.eye(5)
    np.testing.assert_allclose(ema_step(est, g_batch).g, 0.75 * est.g + 0.25 * g_batch)
    with pytest.raises(DimensionError):
        ema_step(est, np.eye(4))


def test_observe_batch_without_confident_rows_only_counts(rng):
    head = make_head(rng.standard_normal((3, 5)))
    est = init_from_head(head, AgopConfig(tau=0.99))
    probs = np.full((4, 3), 1.0 / 3.0)
    updated, mask = observe_batch(est, head, probs, rng.standard_normal((4, 5)))
    assert mask.size == 0
    assert updated.batch_counter == 1
    assert updated.confident_total == 0
    np.testing.assert_array_equal(updated.g, est.g)


def test_refresh_schedule(rng):
    head = make_head(rng.standard_normal((3, 5)))
    est = init_from_head(head, AgopConfig(t_eig=3, tau=0.0))
    due = []
    for _ in range(7):
        f = rng.standard_normal((4, 5))
        est, _ = observe_batch(est, head, softmax(f @ head.w.T), f)
        due.append(est.refresh_due)
    assert due == [False, False, True, False, False, True, False]


def test_refresh_basis_spans_classifier_rows(rng):
    head = make_head(rng.standard_normal((3, 9)))
    est = init_from_head(head, AgopConfig(tau=0.0, alpha=0.5))
    for _ in range(5):
        f = rng.standard_normal((8, 9))
        est, _ = observe_batch(est, head, softmax(f @ head.w.T), f)
    reference = sym_eig(head.w.T @ head.w).vectors[:, :3]
    assert subspace_similarity(refresh_basis(est), reference) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_linear_head_alignment_property(seed):
    passed, detail = alignment_trial(np.random.default_rng(seed))
    assert passed, detail


def test_write_spectrum_csv(tmp_path):
    path = tmp_path / "spectrum.csv"
    write_spectrum_csv(path, np.array([4.0, 1.0, 0.0, 0.0]))
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["k"] for row in rows] == ["1", "2", "3", "4"]
    assert [float(row["kappa"]) for row in rows] == pytest.approx([0.8, 1.0, 1.0, 1.0])


def test_gradient_surrogate_matches_finite_differences(rng):
    head = make_head(rng.standard_normal((5, 7)), rng.standard_normal(5))
    step = 1e-6
    for _ in range(10):
        f = rng.standard_normal(7)
        top = lambda v: np.max(head.w @ v + head.b)
        numeric = np.array([(top(f + step * e) - top(f - step * e)) / (2.0 * step) for e in np.eye(7)])
        np.testing.assert_allclose(gradient_surrogate(head, f), numeric, atol=1e-6)


def test_ema_step_decays_geometrically(rng):
    head = make_head(rng.standard_normal((3, 5)))
    est = init_from_head(head, AgopConfig(alpha=0.2))
    target = np.diag(np.arange(1.0, 6.0))
    start = est.g.copy()
    for n in range(1, 13):
        est = ema_step(est, target)
        np.testing.assert_allclose(est.g - target, 0.8**n * (start - target), atol=1e-12)
