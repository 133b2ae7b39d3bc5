import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import oracles
from green import tensor as T
from green.backbone import (MLPExtractor, Model, TinyConvExtractor, classify, extract_and_pool,
                            forward, run)
from green.errors import ParameterError, ShapeError
from green.head import ClassDependencyHead
from green.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_mlp_identity_and_zero(rng):
    ext = MLPExtractor(Tensor(np.eye(4)), Tensor(np.zeros(4)))
    model = Model(ext, Tensor(np.ones((4, 3))), Tensor(np.zeros(3)))
    v = np.array([[1.0, -2.0, 3.0, 0.5]])
    assert_array_equal(extract_and_pool(model, v).data, np.maximum(v, 0))
    assert_array_equal(extract_and_pool(model, np.zeros((2, 4))).data, np.zeros((2, 4)))


def test_tinyconv_resolution_invariance_on_constant_image(rng):
    model = Model.build("tinyconv", 1, n_classes=5, feature_dim=6, seed=1)
    small = extract_and_pool(model, np.full((1, 1, 8, 8), 0.7)).data
    large = extract_and_pool(model, np.full((1, 1, 16, 16), 0.7)).data
    assert small.shape == large.shape == (1, 6)
    assert_allclose(small, large, rtol=0, atol=1e-12)


def test_tinyconv_output_width_independent_of_resolution():
    model = Model.build("tinyconv", 1, n_classes=5, feature_dim=7, seed=2)
    rng = np.random.default_rng(0)
    for h, w in [(5, 5), (9, 13), (16, 8)]:
        assert extract_and_pool(model, rng.standard_normal((3, 1, h, w))).shape == (3, 7)


def test_constant_image_gives_equal_features_with_1x1_kernels():
    ext = TinyConvExtractor(Tensor(np.full((2, 1, 1, 1), 0.5)), Tensor(np.full((3, 2, 1, 1), -0.25)))
    model = Model(ext, Tensor(np.ones((3, 5))), Tensor(np.zeros(5)))
    a = extract_and_pool(model, np.full((1, 1, 8, 8), 2.0)).data
    b = extract_and_pool(model, np.full((1, 1, 16, 16), 2.0)).data
    assert_array_equal(a, b)


def test_tinyconv_vs_loop_oracle():
    model = Model.build("tinyconv", 1, n_classes=3, feature_dim=4, seed=3, conv_channels=2)
    x = np.random.default_rng(1).standard_normal((2, 1, 5, 6))
    ext = model.extractor
    h1 = oracles.conv2d(x.tolist(), ext.kernel1.data.tolist(), 1, 0)
    h1 = [[oracles.relu(ch) for ch in s] for s in h1]
    h2 = oracles.conv2d(h1, ext.kernel2.data.tolist(), 1, 0)
    assert_allclose(extract_and_pool(model, x).data, oracles.gap(h2), rtol=0, atol=1e-12)


def test_extractor_rank_errors():
    with pytest.raises(ShapeError):
        extract_and_pool(Model.build("mlp", 4, seed=0), np.ones((2, 1, 2, 2)))
    with pytest.raises(ShapeError):
        extract_and_pool(Model.build("tinyconv", 1, seed=0), np.ones((2, 4)))


def test_classify_examples(rng):
    model = Model(MLPExtractor(Tensor(np.eye(3)), Tensor(np.zeros(3))),
                  Tensor(np.zeros((3, 4))), Tensor([1.0, 2.0, 3.0, 4.0]))
    S = classify(Tensor(np.zeros((2, 3))), model).data
    assert_array_equal(S, [[1, 2, 3, 4], [1, 2, 3, 4]])
    S = classify(Tensor(rng.standard_normal((5, 3))), model).data
    assert_array_equal(S.argmax(axis=1), 3)
    W, b, G = rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal((5, 3))
    model = Model(model.extractor, Tensor(W), Tensor(b))
    expect = [[v + bb for v, bb in zip(row, b)] for row in oracles.matmul(G.tolist(), W.tolist())]
    assert_allclose(classify(Tensor(G), model).data, expect, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        classify(Tensor(np.ones((2, 4))), model)


def test_forward_baseline_rows_sum_to_one(rng):
    model = Model.build("mlp", 6, n_classes=5, feature_dim=8, seed=0)
    P = forward(model, rng.standard_normal((7, 6))).data
    assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_forward_green_is_softmax_of_rerank_logits(rng):
    model = Model.build("mlp", 6, n_classes=5, feature_dim=8, mode="green", seed=0)
    out = run(model, rng.standard_normal((4, 6)))
    assert_array_equal(out.P.data, T.softmax_rows(out.logits).data)
    assert_array_equal(out.logits.data, out.R.data * out.S.data + out.S.data)


def test_green_with_zero_features_matches_baseline_argmax(rng):
    # zero extractor weights force G = 0, so R = 1/2 everywhere
    ext = MLPExtractor(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
    fc_w, fc_b = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal(5))
    head = ClassDependencyHead.initialize(5, 3, 4, rng=rng)
    base = Model(ext, fc_w, fc_b)
    green = Model(ext, fc_w, fc_b, head=head, mode="green")
    x = rng.standard_normal((6, 3))
    assert_array_equal(forward(green, x).data.argmax(axis=1), forward(base, x).data.argmax(axis=1))


def test_green_reproduces_derived_rerank_example():
    ext = MLPExtractor(Tensor([[1.0]]), Tensor([0.0]))
    head = ClassDependencyHead(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor([[1.0], [0.0]])).replace(
        cached_prior=Tensor([[1.0], [-1.0]]), frozen=True)
    model = Model(ext, Tensor([[0.0, 0.0]]), Tensor([1.0, 1.0]), head=head, mode="green")
    P = forward(model, np.array([[1.0]])).data
    assert P[0].tolist() == pytest.approx([0.6135, 0.3865], abs=1e-4)


def test_baseline_and_green_share_backbone_bits():
    base = Model.build("mlp", 6, mode="baseline", seed=17).named_parameters()
    green = Model.build("mlp", 6, mode="green", seed=17).named_parameters()
    for name, t in base.items():
        assert_array_equal(green[name].data, t.data)
    assert {"head.A", "head.W1", "head.W2"} <= set(green)


def test_model_validation():
    with pytest.raises(ParameterError):
        Model.build("mlp", 4, mode="fancy")
    with pytest.raises(ParameterError):
        Model.build("resnet", 4)
    base = Model.build("mlp", 4, seed=0)
    with pytest.raises(ParameterError):
        Model(base.extractor, base.fc_weight, base.fc_bias, mode="green")
    head = ClassDependencyHead.initialize(4, 2, base.feature_dim)
    with pytest.raises(ShapeError):
        Model(base.extractor, base.fc_weight, base.fc_bias, head=head, mode="green")


def test_with_parameters_round_trip():
    model = Model.build("mlp", 4, mode="green", seed=0)
    params = model.named_parameters()
    bumped = model.with_parameters({k: Tensor(v.data + 1) for k, v in params.items()})
    for k, v in bumped.named_parameters().items():
        assert_array_equal(v.data, params[k].data + 1)
    with pytest.raises(ShapeError):
        model.with_parameters({"fc.bias": Tensor(np.zeros(9))})
    with pytest.raises(ParameterError):
        model.with_parameters({"fc.nope": Tensor(np.zeros(5))})
