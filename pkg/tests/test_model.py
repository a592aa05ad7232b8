import dataclasses

import numpy as np
import pytest

from motiontools.encoder import EncoderConfig
from motiontools.general import CheckpointError, CheckpointMismatchError, ConfigError
from motiontools.model import (
    ModelConfig,
    check_frame_size,
    count_parameters,
    default_config_dict,
    detector,
    estimate,
    flatten_parameters,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from motiontools.motion_transformer import TransformerConfig
from motiontools.numerics import save_named_tensors
from motiontools.trainer import TrainConfig


def test_default_configuration():
    config = ModelConfig()
    assert config.transformer.dim == 192
    assert config.transformer.heads == 3
    assert config.transformer.layers == 12
    assert config.transformer.ffn_dim == 768
    assert config.num_parts == 10
    assert config.encoder.patch_size == 4
    assert config.encoder.positional_encoding
    assert config.transformer.attention_mode == "unified"
    assert not config.background_enabled

    train = TrainConfig()
    assert train.learning_rate == 2e-4
    assert train.lr_drop_fractions == (0.6, 0.9)
    assert train.lr_drop_factor == 10.0
    assert train.lam == 0.1


def test_config_dict_round_trip(tiny_config):
    assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()
    values = default_config_dict()
    assert set(values) == {"model", "train"}
    assert values["model"]["transformer"]["num_motion_tokens"] == 10


def test_config_validation(tiny_config):
    with pytest.raises(ConfigError, match="token dim"):
        dataclasses.replace(tiny_config, encoder=EncoderConfig(dim=16))
    with pytest.raises(ConfigError, match="divisible by 16"):
        dataclasses.replace(tiny_config, image_size=40)


def test_init_is_seeded(tiny_config):
    a, b, c = init_model(tiny_config, 3), init_model(tiny_config, 3), init_model(tiny_config, 4)
    for name, tensor in flatten_parameters(a.params).items():
        np.testing.assert_array_equal(tensor.data, flatten_parameters(b.params)[name].data)
    differs = [
        not np.array_equal(t.data, flatten_parameters(c.params)[n].data) for n, t in flatten_parameters(a.params).items()
    ]
    assert any(differs)


def test_parameter_names_and_count(tiny_model):
    flat = flatten_parameters(tiny_model.params)
    names = list(flat)
    assert len(names) == len(set(names))
    assert names[0].startswith("encoder.")
    assert any(name.startswith("generator.up.0.") for name in names)
    assert count_parameters(tiny_model) == sum(t.size for t in flat.values())


def test_background_adds_predictor_weights(make_config):
    with_bg = init_model(make_config(background_enabled=True))
    names = flatten_parameters(with_bg.params)
    assert "dense_motion.background.fc.weight" in names
    assert count_parameters(with_bg) > count_parameters(init_model(make_config()))


def test_fresh_model_detects_identity_motion(tiny_model, image):
    motion, _ = estimate(tiny_model, image)
    np.testing.assert_array_equal(motion.keypoints.data, 0.0)
    np.testing.assert_array_equal(motion.affines.data, np.tile(np.eye(2), (3, 1, 1)))
    assert detector(tiny_model)(image).num_parts == 3


def test_checkpoint_round_trip(tmp_path, tiny_model, tiny_train_config, image):
    for tensor in flatten_parameters(tiny_model.params).values():
        tensor.assign(tensor.data + 0.01)
    path = save_checkpoint(tmp_path / "model.mforge", tiny_model, epoch=4, train_config=tiny_train_config)
    restored, metadata = load_checkpoint(path, expected=tiny_model.config)

    assert metadata["epoch"] == 4
    assert metadata["feature_seed"] == tiny_model.feature_seed
    assert TrainConfig.from_dict(metadata["train_config"]) == tiny_train_config
    for name, tensor in flatten_parameters(tiny_model.params).items():
        np.testing.assert_array_equal(flatten_parameters(restored.params)[name].data, tensor.data)
    np.testing.assert_array_equal(estimate(restored, image)[0].keypoints.data, estimate(tiny_model, image)[0].keypoints.data)

    again = save_checkpoint(
        tmp_path / "again.mforge", restored, epoch=metadata["epoch"],
        train_config=TrainConfig.from_dict(metadata["train_config"]),
    )
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_config_mismatch(tmp_path, tiny_model, make_config):
    path = save_checkpoint(tmp_path / "model.mforge", tiny_model)
    other = make_config(transformer=TransformerConfig(layers=3, heads=2, dim=8, num_motion_tokens=3))
    with pytest.raises(CheckpointMismatchError) as info:
        load_checkpoint(path, expected=other)
    assert info.value.fields == ["transformer.layers"]
    assert "transformer.layers" in str(info.value)


def test_checkpoint_rejects_foreign_files(tmp_path, tiny_model):
    junk = tmp_path / "junk.mforge"
    junk.write_bytes(b"hello")
    with pytest.raises(CheckpointError, match="junk.mforge"):
        load_checkpoint(junk)

    other = tmp_path / "other.mforge"
    save_named_tensors(other, {"x": np.zeros(2)}, {"format": "something-else"})
    with pytest.raises(CheckpointError, match="not a motiontools checkpoint"):
        load_checkpoint(other)

    partial = tmp_path / "partial.mforge"
    flat = flatten_parameters(tiny_model.params)
    first = next(iter(flat))
    save_named_tensors(partial, {first: flat[first].data}, {
        "format": "motiontools-checkpoint-1",
        "model_config": tiny_model.config.to_dict(),
        "feature_seed": tiny_model.feature_seed,
        "epoch": None,
    })
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(partial)


def test_frame_size_check(tiny_model):
    check_frame_size(tiny_model, (3, 32, 32))
    with pytest.raises(CheckpointMismatchError) as info:
        check_frame_size(tiny_model, (3, 64, 64))
    assert info.value.fields == ["image_size"]
