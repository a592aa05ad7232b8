import dataclasses
import threading

import numpy as np
import pandas as pd
import pytest

from motiontools.data import PREFETCH_THREAD, SceneSpec, VideoDataset, generate_dataset, split_dataset
from motiontools.encoder import EncoderConfig
from motiontools.evaluation import evaluate_dataset
from motiontools.general import ConfigError, DatasetError, TrainingDivergedError
from motiontools.model import flatten_parameters, init_model, load_checkpoint
from motiontools.motion_transformer import TransformerConfig
from motiontools.numerics import Tensor, check_gradients
from motiontools.trainer import (
    LOG_COLUMNS,
    Adam,
    TrainConfig,
    drop_epochs,
    fit,
    learning_rate,
    model_forward,
    train_step,
)


@pytest.fixture
def tiny_dataset():
    return generate_dataset(0, 2, SceneSpec(size=32, frames=3, num_parts=2, supersample=1))


def test_learning_rate_schedule():
    config = TrainConfig(epochs=100)
    assert drop_epochs(config) == [60, 90]
    assert learning_rate(config, 0) == 2e-4
    assert learning_rate(config, 59) == 2e-4
    assert learning_rate(config, 60) == pytest.approx(2e-5, rel=1e-12)
    assert learning_rate(config, 89) == pytest.approx(2e-5, rel=1e-12)
    assert learning_rate(config, 90) == pytest.approx(2e-6, rel=1e-12)
    assert drop_epochs(TrainConfig(epochs=10)) == [6, 9]


@pytest.mark.parametrize(
    "overrides",
    [
        {"epochs": 0},
        {"learning_rate": 0.0},
        {"lr_drop_fractions": (0.5, 1.5)},
        {"betas": (0.9, 1.0)},
        {"grad_clip": -1.0},
        {"pairs_per_epoch": 0},
        {"lam": -0.1},
    ],
)
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_train_config_dict_round_trip():
    config = TrainConfig(epochs=3, grad_clip=5.0, pairs_per_epoch=7)
    assert TrainConfig.from_dict(config.to_dict()) == config


def reference_adam(values, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    m = np.zeros_like(values)
    v = np.zeros_like(values)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        values = values - lr * (m / (1 - betas[0] ** t)) / (np.sqrt(v / (1 - betas[1] ** t)) + eps)
    return values


def test_adam_matches_reference(rng):
    start = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    param = Tensor(start.copy(), requires_grad=True)
    optimizer = Adam([param])
    for g in grads:
        param.grad = g.copy()
        optimizer.step(1e-2)
        optimizer.zero_grad()
    np.testing.assert_allclose(param.data, reference_adam(start, grads, 1e-2), atol=1e-15)


def test_adam_first_step_moves_by_lr():
    param = Tensor(np.array([1.0]), requires_grad=True)
    optimizer = Adam([param])
    param.grad = np.array([0.5])
    optimizer.step(0.1)
    assert param.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_gradient_clipping():
    param = Tensor(np.zeros(2), requires_grad=True)
    optimizer = Adam([param], grad_clip=1.0)
    param.grad = np.array([6.0, 8.0])
    assert optimizer.grad_norm() == pytest.approx(10.0)
    optimizer.step(0.1)
    # clipping rescales uniformly; Adam's first step is sign-like either way
    np.testing.assert_allclose(param.data, [-0.1, -0.1], atol=1e-7)
    np.testing.assert_allclose(optimizer.first[0], [0.06, 0.08], atol=1e-12)


def test_model_forward_reports_every_term(tiny_model, tiny_train_config, tiny_dataset, make_config):
    video = tiny_dataset.videos[0]
    report, generated, dense = model_forward(tiny_model, video.frames[0], video.frames[1], np.random.default_rng(0), tiny_train_config)
    assert generated.shape == (3, 32, 32)
    assert dense.masks.shape == (4, 8, 8)
    assert report.mask == 0.0 and report.concentration == 0.0
    assert report.total == pytest.approx(report.perceptual + report.equivariance, abs=1e-12)
    assert report.equivariance >= 0.0

    with_bg = init_model(make_config(background_enabled=True))
    report, _, _ = model_forward(with_bg, video.frames[0], video.frames[1], np.random.default_rng(0), tiny_train_config)
    assert report.mask > 0.0 and report.concentration > 0.0
    expected = report.perceptual + report.equivariance + 0.1 * (report.mask + report.concentration)
    assert report.total == pytest.approx(expected, abs=1e-12)


def test_train_step_updates_weights(tiny_model, tiny_train_config, tiny_dataset):
    params = flatten_parameters(tiny_model.params)
    before = {name: t.data.copy() for name, t in params.items()}
    optimizer = Adam(params.values())
    video = tiny_dataset.videos[1]
    batch = [(video.frames[0], video.frames[2])]
    report = train_step(tiny_model, batch, tiny_train_config, optimizer, np.random.default_rng(0), 1e-3)
    assert np.isfinite(report.total)
    assert report.total_tensor is None
    assert any(not np.array_equal(before[name], t.data) for name, t in params.items())
    assert all(t.grad is None for t in params.values())


def test_non_finite_loss_stops_training(tiny_model, tiny_train_config, tiny_dataset):
    bias = tiny_model.params["generator"]["final"]["bias"]
    bias.assign(np.full(bias.shape, np.nan))
    video = tiny_dataset.videos[0]
    optimizer = Adam(flatten_parameters(tiny_model.params).values())
    with pytest.raises(TrainingDivergedError) as info:
        train_step(tiny_model, [(video.frames[0], video.frames[1])], tiny_train_config, optimizer,
                   np.random.default_rng(0), 1e-3, step=7, last_checkpoint="ckpt_epoch_001.mforge")
    assert info.value.step == 7
    assert "ckpt_epoch_001.mforge" in str(info.value)


def test_fit_writes_checkpoints_and_log(tmp_path, tiny_config, tiny_train_config, tiny_dataset):
    final = fit(tiny_dataset, tiny_train_config, tiny_config, tmp_path / "run")
    assert final.name == "final.mforge"
    assert (tmp_path / "run" / "ckpt_epoch_000.mforge").exists()
    assert (tmp_path / "run" / "ckpt_epoch_001.mforge").exists()

    log = pd.read_csv(tmp_path / "run" / "loss_log.csv")
    assert list(log.columns) == LOG_COLUMNS
    assert list(log["step"]) == [0, 1]
    assert list(log["epoch"]) == [0, 1]
    assert np.all(np.isfinite(log["total"]))

    _, metadata = load_checkpoint(final, expected=tiny_config)
    assert metadata["epoch"] == 1
    assert TrainConfig.from_dict(metadata["train_config"]) == tiny_train_config


def test_fit_is_reproducible(tmp_path, tiny_config, tiny_dataset):
    config = TrainConfig(epochs=1, batch_size=2, pairs_per_epoch=2, seed=3, prefetch=2)
    fit(tiny_dataset, config, tiny_config, tmp_path / "a")
    fit(tiny_dataset, config, tiny_config, tmp_path / "b")
    first = (tmp_path / "a" / "loss_log.csv").read_text()
    assert first == (tmp_path / "b" / "loss_log.csv").read_text()

    other = dataclasses.replace(config, seed=4)
    fit(tiny_dataset, other, tiny_config, tmp_path / "c")
    assert first != (tmp_path / "c" / "loss_log.csv").read_text()


def test_fit_input_errors(tmp_path, tiny_config, tiny_train_config):
    with pytest.raises(DatasetError):
        fit(VideoDataset([]), tiny_train_config, tiny_config, tmp_path)
    small = generate_dataset(0, 1, SceneSpec(size=16, frames=2, num_parts=1, supersample=1))
    with pytest.raises(ConfigError, match="image size"):
        fit(small, tiny_train_config, tiny_config, tmp_path)


def test_diverged_fit_stops_the_prefetch_worker(tmp_path, tiny_model, tiny_dataset):
    bias = tiny_model.params["generator"]["final"]["bias"]
    bias.assign(np.full(bias.shape, np.nan))
    config = TrainConfig(epochs=1, batch_size=1, pairs_per_epoch=4, prefetch=1, seed=0)
    with pytest.raises(TrainingDivergedError):
        fit(tiny_dataset, config, out_dir=tmp_path, model=tiny_model)
    assert not any(thread.name == PREFETCH_THREAD for thread in threading.enumerate())


@pytest.mark.slow
def test_training_improves_loss_and_held_out_reconstruction(tmp_path, tiny_config):
    dataset = generate_dataset(1, 10, SceneSpec(size=32, frames=6, num_parts=2, supersample=2))
    train, held_out = split_dataset(dataset, 2)
    model = init_model(tiny_config, seed=0)
    before = evaluate_dataset(model, held_out)

    config = TrainConfig(epochs=5, batch_size=2, pairs_per_epoch=20, learning_rate=3e-3, seed=0)
    final = fit(train, config, out_dir=tmp_path, model=model)

    log = pd.read_csv(tmp_path / "loss_log.csv").set_index("step")
    assert log.groupby("epoch").size().min() >= 10
    moving = log["total"].rolling(10).mean()
    last_step = log.reset_index().groupby("epoch")["step"].max()
    assert moving[last_step[4]] < moving[last_step[0]]

    trained, _ = load_checkpoint(final, expected=tiny_config)
    after = evaluate_dataset(trained, held_out)
    assert after.l1 < before.l1


def _variant(make_config, name):
    if name == "no-pe":
        return make_config(encoder=EncoderConfig(channels=4, residual_blocks=1, patch_size=4, dim=8, positional_encoding=False))
    options = {"layers": {"layers": 3}, "split": {"attention_mode": "split"}, "paper-literal": {"block_form": "paper-literal"}}
    return make_config(transformer=TransformerConfig(heads=2, dim=8, num_motion_tokens=3, **{"layers": 2, **options[name]}))


def test_architecture_variants_train(tmp_path, make_config, tiny_train_config, tiny_dataset):
    fit(tiny_dataset, tiny_train_config, make_config(), tmp_path / "base")
    baseline = pd.read_csv(tmp_path / "base" / "loss_log.csv")["total"].to_numpy()
    for name in ("no-pe", "layers", "split", "paper-literal"):
        fit(tiny_dataset, tiny_train_config, _variant(make_config, name), tmp_path / name)
        trace = pd.read_csv(tmp_path / name / "loss_log.csv")["total"].to_numpy()
        assert len(trace) == 2 and np.all(np.isfinite(trace))
        assert not np.array_equal(trace, baseline), name


def test_composite_gradients(make_config, tiny_dataset):
    model = init_model(make_config(), seed=1)
    rng = np.random.default_rng(5)
    head = model.params["transformer"]["head"]
    head["weight"].assign(rng.normal(scale=0.05, size=head["weight"].shape))
    video = tiny_dataset.videos[0]
    config = TrainConfig(epochs=1)
    checked = [head["weight"], model.params["generator"]["final"]["weight"], model.params["encoder"]["proj"]["weight"]]

    def fn(*_):
        report, _, _ = model_forward(model, video.frames[0], video.frames[2], np.random.default_rng(0), config)
        return report.total_tensor

    assert check_gradients(fn, checked, max_entries=6) < 1e-4
