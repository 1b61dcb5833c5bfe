from __future__ import annotations

import numpy as np
import pytest

from utils.errors import DataError, DimensionError
from utils.model_utils import (
    accuracy,
    build_prototypes,
    ema_update,
    extract_features,
    init_teacher,
    load_model,
    logits,
    make_backbone,
    make_head,
    pretrain_source,
    save_model,
    teacher_logits,
    with_affine,
)
from utils.stream_utils import SourceConfig, SourceDataset, make_source


def _tiny_backbone(rng, activation="tanh"):
    return make_backbone(rng.standard_normal((6, 4)), rng.standard_normal(6), activation)


def test_make_backbone_freezes_weights(rng):
    backbone = _tiny_backbone(rng)
    assert backbone.input_dim == 4
    assert backbone.feature_dim == 6
    np.testing.assert_array_equal(backbone.gain, np.ones(6))
    np.testing.assert_array_equal(backbone.abias, np.zeros(6))
    with pytest.raises(ValueError):
        backbone.weight[0, 0] = 1.0


def test_make_head_validates_shapes():
    with pytest.raises(DimensionError):
        make_head(np.ones((1, 3)))
    with pytest.raises(DimensionError):
        make_head(np.ones((2, 3)), np.ones(3))
    np.testing.assert_array_equal(make_head(np.ones((2, 3))).b, np.zeros(2))


def test_extract_features_applies_affine_pair(rng):
    backbone = _tiny_backbone(rng, activation="identity")
    x = rng.standard_normal((3, 4))
    tuned = with_affine(backbone, np.full(6, 2.0), np.full(6, 0.5))
    expected = 2.0 * (x @ backbone.weight.T + backbone.bias) + 0.5
    np.testing.assert_allclose(extract_features(tuned, x), expected)
    with pytest.raises(DimensionError):
        extract_features(backbone, rng.standard_normal((3, 5)))


def test_pretrain_source_fits_separable_blobs():
    dataset = make_source(SourceConfig(n_classes=4, input_dim=8, samples_per_class=50, mu_sep=1.5))
    backbone, head = pretrain_source(dataset, epochs=300, feature_dim=16)
    assert head.w.shape == (4, 16)
    assert accuracy(backbone, head, dataset.x, dataset.labels) > 0.75


def test_pretrain_source_rejects_missing_class(rng):
    dataset = SourceDataset(rng.standard_normal((6, 3)), np.array([0, 0, 1, 1, 0, 1]), n_classes=3)
    with pytest.raises(DataError):
        pretrain_source(dataset, epochs=5, feature_dim=4)


def test_build_prototypes_are_class_means(rng):
    backbone = _tiny_backbone(rng)
    x = rng.standard_normal((6, 4))
    dataset = SourceDataset(x, np.array([0, 0, 1, 1, 1, 0]), n_classes=3)
    protos = build_prototypes(backbone, dataset)
    features = extract_features(backbone, x)
    np.testing.assert_allclose(protos.p[0], features[[0, 1, 5]].mean(axis=0))
    np.testing.assert_allclose(protos.p[1], features[[2, 3, 4]].mean(axis=0))
    np.testing.assert_array_equal(protos.p[2], np.zeros(6))
    np.testing.assert_array_equal(protos.active, [True, True, False])


def test_ema_update_momentum_extremes(rng):
    backbone = _tiny_backbone(rng)
    head = make_head(rng.standard_normal((3, 6)))
    student = make_head(rng.standard_normal((3, 6)), rng.standard_normal(3))
    affine = (np.full(6, 1.5), np.full(6, -0.2))

    frozen = ema_update(init_teacher(head, backbone, momentum=1.0), student, affine)
    np.testing.assert_array_equal(frozen.head.w, head.w)
    np.testing.assert_array_equal(frozen.gain, backbone.gain)

    copied = ema_update(init_teacher(head, backbone, momentum=0.0), student, affine)
    np.testing.assert_array_equal(copied.head.w, student.w)
    np.testing.assert_array_equal(copied.abias, affine[1])

    with pytest.raises(DimensionError):
        ema_update(init_teacher(head, backbone), student, (np.ones(5), np.ones(6)))


def test_teacher_logits_use_teacher_affine(rng):
    backbone = _tiny_backbone(rng)
    head = make_head(rng.standard_normal((3, 6)))
    teacher = init_teacher(head, backbone)
    h = rng.standard_normal((2, 6))
    np.testing.assert_allclose(teacher_logits(teacher, h), h @ head.w.T + head.b)


def test_model_checkpoint_restores_arrays(tmp_path, rng):
    backbone = with_affine(_tiny_backbone(rng), np.full(6, 1.1), np.full(6, 0.3))
    head = make_head(rng.standard_normal((3, 6)), rng.standard_normal(3))
    dataset = SourceDataset(rng.standard_normal((6, 4)), np.array([0, 1, 2, 0, 1, 2]), n_classes=3)
    protos = build_prototypes(backbone, dataset)

    path = tmp_path / "model.json"
    save_model(path, backbone, head, protos)
    loaded_backbone, loaded_head, loaded_protos = load_model(path)
    np.testing.assert_array_equal(loaded_backbone.weight, backbone.weight)
    np.testing.assert_array_equal(loaded_backbone.gain, backbone.gain)
    np.testing.assert_array_equal(loaded_head.b, head.b)
    np.testing.assert_array_equal(loaded_protos.p, protos.p)


def test_load_model_reports_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_model(tmp_path / "absent.json")


def test_logits_match_explicit_loops(rng):
    head = make_head(rng.standard_normal((4, 6)), rng.standard_normal(4))
    f = rng.standard_normal((5, 6))
    expected = np.zeros((5, 4))
    for i in range(5):
        for c in range(4):
            expected[i, c] = sum(f[i, j] * head.w[c, j] for j in range(6)) + head.b[c]
    np.testing.assert_allclose(logits(head, f), expected, rtol=1e-12)
    with pytest.raises(DimensionError):
        logits(head, rng.standard_normal((2, 5)))


def test_teacher_closes_gap_geometrically(rng):
    backbone = _tiny_backbone(rng)
    head = make_head(rng.standard_normal((3, 6)))
    teacher = init_teacher(head, backbone, momentum=0.999)
    student = (np.full(6, 2.0), np.zeros(6))
    for _ in range(1000):
        teacher = ema_update(teacher, head, student)
    gap = 2.0 - teacher.gain
    np.testing.assert_allclose(gap, 0.999**1000, rtol=1e-9)
    assert gap[0] == pytest.approx(0.3677, abs=1e-3)


@pytest.mark.slow
def test_default_source_model_reaches_95_percent():
    dataset = make_source(SourceConfig())
    backbone, head = pretrain_source(dataset)
    assert accuracy(backbone, head, dataset.x, dataset.labels) >= 0.95
