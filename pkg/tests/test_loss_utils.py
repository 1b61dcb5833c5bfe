from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from utils.adapter_utils import with_scale
from utils.errors import ConfigError, DegenerateError, DimensionError
from utils.loss_utils import (
    LossConfig,
    OptimizerState,
    optimizer_step,
    prototype_assignment,
    prototype_contrastive_loss,
    sce,
    self_training_loss,
    softmax,
    total_loss_and_grads,
)
from utils.model_utils import PrototypeBank, with_affine
from utils.oracle_utils import GRAD_RTOL, finite_difference_errors, gradient_instance


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.standard_normal((5, 4)) * 50.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


def test_sce_is_symmetric_and_minimal_on_agreement(rng):
    a = rng.standard_normal((6, 4))
    b = rng.standard_normal((6, 4))
    assert sce(a, b) == sce(b, a)
    p = softmax(a)
    entropy = -np.mean(np.sum(p * np.log(p), axis=1))
    assert sce(a, a) == pytest.approx(2.0 * entropy)
    with pytest.raises(DimensionError):
        sce(a, b[:, :3])


def test_sce_stays_finite_for_saturated_logits():
    student = np.array([[1000.0, -1000.0]])
    teacher = np.array([[-1000.0, 1000.0]])
    assert np.isfinite(sce(student, teacher))


def test_self_training_loss_averages_two_views(rng):
    y, y_aug, y_ema = (rng.standard_normal((4, 3)) for _ in range(3))
    assert self_training_loss(y, y_aug, y_ema) == pytest.approx(0.5 * sce(y, y_ema) + 0.5 * sce(y_aug, y_ema))


def test_prototype_assignment_skips_empty_prototypes():
    protos = PrototypeBank(p=np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 0.1]]), counts=np.array([3.0, 2.0, 0.0]))
    np.testing.assert_array_equal(prototype_assignment(np.array([[2.0, 0.1], [0.1, 3.0]]), protos), [0, 1])
    with pytest.raises(DegenerateError):
        prototype_assignment(np.ones((1, 2)), PrototypeBank(p=np.zeros((2, 2)), counts=np.zeros(2)))


def test_contrastive_loss_prefers_aligned_views():
    protos = PrototypeBank(p=np.eye(3), counts=np.ones(3))
    aligned = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    blurred = aligned + np.array([[0.0, 0.8, 0.8], [0.8, 0.0, 0.8]])
    assert prototype_contrastive_loss(aligned, aligned, protos, 0.1) < prototype_contrastive_loss(
        aligned, blurred, protos, 0.1
    )


def test_contrastive_loss_ignores_zero_norm_rows():
    protos = PrototypeBank(p=np.eye(2), counts=np.ones(2))
    f = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert prototype_contrastive_loss(f, f, protos, 0.5) == pytest.approx(
        prototype_contrastive_loss(f[:1], f[:1], protos, 0.5)
    )
    assert prototype_contrastive_loss(np.zeros((2, 2)), np.zeros((2, 2)), protos, 0.5) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_analytic_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    lambdas = [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0), (0.7, 2.0)][seed % 4]
    errors = finite_difference_errors(gradient_instance(rng, *lambdas))
    for name, err in errors.items():
        assert err < GRAD_RTOL, f"d_{name}: {err:.3e}"


def test_zero_weights_give_zero_gradients(rng):
    instance = gradient_instance(rng, 0.0, 0.0)
    grads = total_loss_and_grads(*instance)
    assert grads.loss_total == 0.0
    np.testing.assert_array_equal(grads.d_s, 0.0)
    np.testing.assert_array_equal(grads.d_gain, 0.0)


def test_sgd_step():
    cfg = LossConfig(optimizer="sgd", lr=0.1)
    updated, state = optimizer_step({"s": np.array([1.0, 2.0])}, {"s": np.array([1.0, -1.0])}, cfg, OptimizerState())
    np.testing.assert_allclose(updated["s"], [0.9, 2.1])
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    cfg = LossConfig(lr=0.01)
    updated, state = optimizer_step(
        {"s": np.zeros(2), "gain": np.ones(2)},
        {"s": np.array([3.0, -0.5]), "gain": np.array([1e-3, 0.0])},
        cfg,
        OptimizerState(),
    )
    np.testing.assert_allclose(updated["s"], [-0.01, 0.01], rtol=1e-6)
    assert updated["gain"][1] == 1.0
    assert state.moments["s"][2] == 1


def test_adam_reset_restarts_bias_correction():
    cfg = LossConfig(lr=0.01)
    state = OptimizerState()
    params = {"s": np.zeros(1), "gain": np.zeros(1)}
    grads = {"s": np.ones(1), "gain": np.ones(1)}
    for _ in range(3):
        params, state = optimizer_step(params, grads, cfg, state)
    state.reset("s")
    params, state = optimizer_step(params, grads, cfg, state)
    assert state.moments["s"][2] == 1
    assert state.moments["gain"][2] == 4


def test_optimizer_rejects_mismatched_gradient():
    with pytest.raises(DimensionError):
        optimizer_step({"s": np.zeros(2)}, {"s": np.zeros(3)}, LossConfig(), OptimizerState())


@pytest.mark.parametrize("kwargs", [{"temperature": 0.0}, {"lr": -1.0}, {"optimizer": "rmsprop"}, {"lambda_cont": -1}])
def test_loss_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs).validate()


def test_softmax_shift_invariance_and_saturation(rng):
    z = rng.standard_normal((4, 5))
    np.testing.assert_allclose(softmax(z + 123.4), softmax(z), rtol=1e-12)
    np.testing.assert_array_equal(softmax(np.array([[1000.0, 0.0]])), [[1.0, 0.0]])


def test_contrastive_closed_form():
    protos = PrototypeBank(p=np.eye(2), counts=np.ones(2))
    f = np.array([[1.0, 0.0]])
    # cosines (1, 0) at temperature 1
    assert prototype_contrastive_loss(f, f, protos, 1.0) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)
    assert np.log1p(np.exp(-1.0)) == pytest.approx(0.3133, abs=1e-4)


def test_contrastive_bounded_by_log_prototype_count(rng):
    protos = PrototypeBank(p=rng.standard_normal((5, 6)), counts=np.array([3.0, 1.0, 0.0, 2.0, 4.0]))
    for temperature in (0.05, 0.5, 5.0):
        f = rng.standard_normal((8, 6))
        # both views share the assignment, so the target is the top logit
        assert prototype_contrastive_loss(f, 3.0 * f, protos, temperature) <= np.log(4) + 1e-12


def test_contrastive_ignores_feature_scale(rng):
    protos = PrototypeBank(p=rng.standard_normal((3, 4)), counts=np.ones(3))
    f, f_aug = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    base = prototype_contrastive_loss(f, f_aug, protos, 0.1)
    assert prototype_contrastive_loss(7.5 * f, 0.02 * f_aug, protos, 0.1) == pytest.approx(base, rel=1e-10)


def test_small_enough_step_does_not_increase_loss():
    for seed in range(5):
        state, backbone, head, teacher, h, h_aug, protos, cfg = gradient_instance(np.random.default_rng(seed))
        before = total_loss_and_grads(state, backbone, head, teacher, h, h_aug, protos, cfg)
        params = {"s": state.s, "gain": backbone.gain, "bias": backbone.abias}
        lr = 0.1
        for _ in range(20):
            updated, _ = optimizer_step(params, before, replace(cfg, optimizer="sgd", lr=lr), OptimizerState())
            after = total_loss_and_grads(
                with_scale(state, updated["s"]),
                with_affine(backbone, updated["gain"], updated["bias"]),
                head,
                teacher,
                h,
                h_aug,
                protos,
                cfg,
            )
            if after.loss_total <= before.loss_total:
                break
            lr /= 2.0
        else:
            pytest.fail(f"seed {seed}: loss rose for every step size down to {lr:.1e}")
