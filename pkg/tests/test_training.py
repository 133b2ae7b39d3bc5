import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from green import binfmt
from green import training as TR
from green.backbone import Model, forward, run
from green.data import Dataset, SynthConfig, generate_synthetic
from green.errors import ContractError, FormatError, NumericalError, ParameterError
from green.tensor import Tape, Tensor


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SynthConfig(samples_per_class=20, feature_dim=6, seed=2))


def quick(**kw):
    return TR.TrainConfig.desk(**{"epochs": 3, "feature_dim": 6, "hidden": 4, **kw})


# sgd ---------------------------------------------------------------------------

def test_sgd_step_known_value():
    out = TR.sgd_step({"w": Tensor([1.0])}, {"w": np.array([0.5])}, 1e-3)
    assert out["w"].data[0] == 0.9995


def test_zero_gradient_and_zero_lr_leave_parameters():
    p = {"w": Tensor(np.arange(4.0).reshape(2, 2))}
    assert_array_equal(TR.sgd_step(p, {"w": np.zeros((2, 2))}, 0.1)["w"].data, p["w"].data)
    assert_array_equal(TR.sgd_step(p, {"w": np.ones((2, 2))}, 0.0)["w"].data, p["w"].data)


def test_sgd_step_rejects_mismatch():
    with pytest.raises(ContractError):
        TR.sgd_step({"w": Tensor([1.0])}, {"v": np.array([1.0])}, 0.1)
    with pytest.raises(ContractError):
        TR.sgd_step({"w": Tensor([1.0])}, {"w": np.array([1.0, 2.0])}, 0.1)


def test_two_half_steps_differ_from_one_full_step():
    # f(w) = w^4 has a gradient that changes between steps
    def grad(w):
        return {"w": 4 * w["w"].data ** 3}

    w0 = {"w": Tensor([1.5])}
    full = TR.sgd_step(w0, grad(w0), 0.1)
    half = TR.sgd_step(w0, grad(w0), 0.05)
    half = TR.sgd_step(half, grad(half), 0.05)
    assert abs(full["w"].item() - half["w"].item()) > 1e-3


def test_lr_zero_training_keeps_model(small):
    cfg = quick(learning_rate=0.0, mode="baseline")
    model = TR.build_model(cfg, small)
    trained = TR.fit(model, small, cfg).model
    for name, t in model.named_parameters().items():
        assert_array_equal(trained.named_parameters()[name].data, t.data)


def test_single_sample_overfits():
    ds = Dataset(np.array([[0.3, -1.2, 0.8]]), [2], 4)
    cfg = TR.TrainConfig(learning_rate=0.5, epochs=200, batch_size=1, feature_dim=4, hidden=3)
    res = TR.fit(TR.build_model(cfg, ds), ds, cfg)
    assert res.log[-1]["mean_loss"] < 1e-3
    assert res.log[-1]["mean_loss"] < res.log[0]["mean_loss"]


@pytest.mark.parametrize("mode", ["baseline", "green"])
def test_loss_decreases(small, mode):
    cfg = quick(mode=mode, epochs=15, learning_rate=0.05)
    log = TR.fit(TR.build_model(cfg, small), small, cfg).log
    assert len(log) == 15
    assert log[-1]["mean_loss"] < log[0]["mean_loss"]


def test_every_parameter_moves_after_one_step(small):
    cfg = quick(mode="green", epochs=1, batch_size=len(small), learning_rate=0.1)
    model = TR.build_model(cfg, small)
    tape = Tape()
    loss = TR.loss_on_batch(model, small.features, small.observed_labels, cfg, tape)
    grads = tape.backward(loss)
    for name, t in model.named_parameters().items():
        assert np.any(grads[t] != 0), name
    after = TR.fit(model, small, cfg).model
    for name, t in model.named_parameters().items():
        assert not np.array_equal(after.named_parameters()[name].data, t.data), name


def test_fit_freezes_green_head(small):
    cfg = quick()
    model = TR.fit(TR.build_model(cfg, small), small, cfg).model
    assert model.head.frozen
    baseline = forward(model, small.features).data
    noisy = model.head.replace(A=Tensor(model.head.A.data + 5.0), W1=Tensor(model.head.W1.data * -2),
                               W2=Tensor(model.head.W2.data + 1.0))
    assert_array_equal(forward(dataclasses.replace(model, head=noisy), small.features).data, baseline)


def test_green_starts_from_baseline_backbone(small):
    b = TR.build_model(quick(mode="baseline"), small)
    g = TR.build_model(quick(mode="green"), small)
    for name, t in b.named_parameters().items():
        assert_array_equal(g.named_parameters()[name].data, t.data)


def test_fit_is_deterministic(small):
    cfg = quick()
    a = TR.fit(TR.build_model(cfg, small), small, cfg)
    b = TR.fit(TR.build_model(cfg, small), small, cfg)
    assert TR.encode_checkpoint(a.model, cfg, a.log) == TR.encode_checkpoint(b.model, cfg, b.log)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_location(small):
    cfg = quick(learning_rate=1e250, mode="baseline")
    with pytest.raises(NumericalError, match="epoch"):
        TR.fit(TR.build_model(cfg, small), small, cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_features_abort():
    ds = Dataset(np.array([[np.inf, 1.0], [0.0, 1.0]]), [0, 1], 2)
    cfg = quick(mode="baseline", feature_dim=3)
    with pytest.raises(NumericalError, match="epoch 0, batch 0"):
        TR.fit(TR.build_model(cfg, ds), ds, cfg)


def test_val_metrics_logged(small):
    cfg = quick(epochs=2)
    log = TR.fit(TR.build_model(cfg, small), small, cfg, val=small).log
    assert {"val_kappa", "val_accuracy", "val_f1"} <= log[0].keys()


def test_lr_schedule():
    cfg = TR.TrainConfig(learning_rate=1.0, lr_decay_every=10, lr_decay_factor=0.5)
    assert [cfg.lr_at(e) for e in (0, 9, 10, 25)] == [1.0, 1.0, 0.5, 0.25]
    assert TR.TrainConfig().lr_at(59) == 1e-3


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(folds=1),
                                    dict(mode="other"), dict(learning_rate=-1.0),
                                    dict(learning_rate=float("nan")), dict(extractor="resnet")])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        TR.TrainConfig(**kwargs)


# k-fold ----------------------------------------------------------------------

def test_kfold_sizes():
    assert [len(v) for _, v in TR.kfold_split(10, 5)] == [2] * 5
    assert sorted(len(v) for _, v in TR.kfold_split(11, 5)) == [2, 2, 2, 2, 3]


@pytest.mark.parametrize("size", range(2, 51))
def test_kfold_partitions(size):
    for folds in range(2, min(size, 10) + 1):
        splits = TR.kfold_split(size, folds, seed=size)
        vals = np.concatenate([v for _, v in splits])
        assert sorted(vals.tolist()) == list(range(size))
        sizes = [len(v) for _, v in splits]
        assert max(sizes) - min(sizes) <= 1
        for tr, va in splits:
            assert set(tr.tolist()).isdisjoint(va.tolist())
            assert len(tr) + len(va) == size


def test_kfold_rejects_too_many_folds():
    with pytest.raises(ParameterError):
        TR.kfold_split(3, 5)
    with pytest.raises(ParameterError):
        TR.kfold_split(10, 1)


def test_kfold_seeded():
    a, b = TR.kfold_split(30, 3, seed=1), TR.kfold_split(30, 3, seed=1)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    c = TR.kfold_split(30, 3, seed=2)
    assert not all(np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_cross_validate_scores_held_out_folds(small):
    folds = TR.cross_validate(small, quick(folds=3, epochs=2))
    assert [f.fold for f in folds] == [0, 1, 2]
    assert all({"observed", "true"} == f.metrics.keys() for f in folds)
    assert sum(len(f.val_idx) for f in folds) == len(small)


# checkpoints --------------------------------------------------------------------

@pytest.fixture(scope="module", params=["baseline", "green"])
def trained(request, small):
    cfg = quick(mode=request.param)
    return cfg, TR.fit(TR.build_model(cfg, small), small, cfg)


def test_checkpoint_round_trip_is_bit_exact(trained, small, tmp_path):
    cfg, res = trained
    TR.save_checkpoint(res.model, tmp_path / "m.ckpt", cfg, res.log)
    ck = TR.read_checkpoint(tmp_path / "m.ckpt")
    a, b = run(res.model, small.features), run(ck.model, small.features)
    for x, y in zip(a, b):
        if x is not None:
            assert x.data.tobytes() == y.data.tobytes()
    assert ck.log == res.log
    assert ck.config["learning_rate"] == cfg.learning_rate
    if cfg.mode == "green":
        assert ck.model.head.frozen
        assert_array_equal(ck.model.head.cached_prior.data, res.model.head.cached_prior.data)
    assert TR.encode_checkpoint(ck.model, cfg, ck.log) == (tmp_path / "m.ckpt").read_bytes()


def test_tinyconv_checkpoint_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(image_size=6, samples_per_class=4))
    cfg = quick(extractor="tinyconv", epochs=1, conv_channels=3, feature_dim=4)
    model = TR.fit(TR.build_model(cfg, ds), ds, cfg).model
    TR.save_checkpoint(model, tmp_path / "c.ckpt")
    back = TR.load_checkpoint(tmp_path / "c.ckpt")
    assert_array_equal(forward(back, ds.features).data, forward(model, ds.features).data)


def test_truncated_checkpoint(trained, tmp_path):
    cfg, res = trained
    blob = TR.encode_checkpoint(res.model, cfg)
    with pytest.raises(FormatError):
        TR.decode_checkpoint(blob[:-5])


def test_checkpoint_with_inconsistent_shapes(trained):
    cfg, res = trained
    broken = res.model.named_parameters()
    blob = TR.encode_checkpoint(res.model, cfg)
    d, n = broken["fc.weight"].shape
    # a wider classifier keeps the manifest valid but not the model
    meta, arrays = binfmt.decode(blob, "checkpoint")
    arrays["fc.weight"] = np.zeros((d + 1, n))
    with pytest.raises(FormatError, match="inconsistent"):
        TR.decode_checkpoint(binfmt.encode("checkpoint", meta, arrays))
