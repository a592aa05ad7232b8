"""
Model Module

Assembles the motion estimator, dense motion network and generator into one
model object, and saves/loads it as an MFORGE1 checkpoint.

Functions:
    init_model: Fresh model for a configuration and seed
    estimate: Image -> (MotionSet, AttentionMaps) with a model's weights
    detector: The estimator as an image -> MotionSet callable
    flatten_parameters: Ordered {dotted.name: Tensor} view of all learnable weights
    count_parameters: Number of learnable scalars
    save_checkpoint / load_checkpoint: Weights, configuration, feature seed, epoch
    default_config_dict: Every default setting as a JSON-able dict

Classes:
    ModelConfig: Aggregated architecture configuration
    MotionModel: Configuration, weights and the frozen perceptual extractor
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from motiontools.dense_motion import DenseMotionConfig, init_dense_motion_params
from motiontools.encoder import EncoderConfig, init_encoder_params
from motiontools.general import CheckpointError, CheckpointMismatchError, ConfigError, get_logger
from motiontools.generator import GeneratorConfig, init_generator_params
from motiontools.losses import PerceptualConfig, extractor_for
from motiontools.motion_transformer import TransformerConfig, estimate_motion, init_transformer_params
from motiontools.numerics import Tensor, load_named_tensors, save_named_tensors

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "motiontools-checkpoint-1"


@dataclass(frozen=True)
class ModelConfig:
    """
    Full architecture configuration.

    Attributes:
        image_size (int): Square frame side (default 64).
        encoder (EncoderConfig): Image-token pathway.
        transformer (TransformerConfig): Motion transformer.
        dense_motion (DenseMotionConfig): Mask/occlusion network.
        generator (GeneratorConfig): Image generator.
        perceptual (PerceptualConfig): Perceptual loss pyramid and extractor.
        background_enabled (bool): Predict background motion and train the
            mask and concentration losses.
    """

    image_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    dense_motion: DenseMotionConfig = field(default_factory=DenseMotionConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    background_enabled: bool = False

    def __post_init__(self):
        if self.encoder.dim != self.transformer.dim:
            raise ConfigError(f"encoder token dim {self.encoder.dim} differs from transformer dim {self.transformer.dim}")
        multiples = {
            "encoder": self.encoder.size_multiple,
            "dense motion": 4 * self.dense_motion.scale_factor,
            "generator": 2 ** self.generator.stages,
            "perceptual pyramid": max(self.perceptual.scales),
        }
        for name, multiple in multiples.items():
            if self.image_size % multiple:
                raise ConfigError(f"image size must be divisible by {multiple} ({name}), got {self.image_size}")

    @property
    def num_parts(self):
        return self.transformer.num_motion_tokens

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, values):
        return cls(
            image_size=int(values["image_size"]),
            encoder=EncoderConfig(**values["encoder"]),
            transformer=TransformerConfig(**values["transformer"]),
            dense_motion=DenseMotionConfig(**values["dense_motion"]),
            generator=GeneratorConfig(**values["generator"]),
            perceptual=PerceptualConfig(**values["perceptual"]),
            background_enabled=bool(values["background_enabled"]),
        )


@dataclass
class MotionModel:
    """Configuration, nested parameter dicts and the frozen feature extractor."""

    config: ModelConfig
    params: dict
    extractor: object

    @property
    def feature_seed(self):
        return self.extractor.seed


def init_model(config=None, seed=0):
    """
    Build a fresh model.

    The decode head starts at the identity motion, so an untrained model
    predicts A = I, t = 0 for every part and an identity dense flow.

    Args:
        config (ModelConfig, optional): Architecture (defaults throughout).
        seed (int, optional): Weight seed.

    Returns:
        MotionModel
    """
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    params = {
        "encoder": init_encoder_params(rng, config.encoder),
        "transformer": init_transformer_params(rng, config.transformer),
        "dense_motion": init_dense_motion_params(
            rng, config.num_parts, config.dense_motion, config.background_enabled
        ),
        "generator": init_generator_params(rng, config.generator),
    }
    return MotionModel(config, params, extractor_for(config.perceptual))


def estimate(model, image):
    """Run the motion transformer of ``model`` on a (3, H, W) Tensor."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    return estimate_motion(model.params, image, model.config.encoder, model.config.transformer)


def detector(model):
    return lambda image: estimate(model, image)[0]


def flatten_parameters(params, prefix=""):
    """
    Ordered mapping of dotted names to learnable Tensors.

    Examples:
        >>> names = list(flatten_parameters(init_model().params))
        >>> names[0]
        'encoder.stem1.weight'
    """
    flat = {}
    if isinstance(params, Tensor):
        flat[prefix] = params
    elif isinstance(params, dict):
        for key, value in params.items():
            flat.update(flatten_parameters(value, f"{prefix}.{key}" if prefix else str(key)))
    elif isinstance(params, (list, tuple)):
        for index, value in enumerate(params):
            flat.update(flatten_parameters(value, f"{prefix}.{index}" if prefix else str(index)))
    return flat


def count_parameters(model):
    return int(sum(t.size for t in flatten_parameters(model.params).values()))


def save_checkpoint(path, model, epoch=None, train_config=None):
    """
    Write all weights with the model configuration, feature seed and epoch.

    Raises:
        CheckpointError: On disk errors (message names the path).
    """
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "feature_seed": model.feature_seed,
        "epoch": epoch,
    }
    save_named_tensors(path, flatten_parameters(model.params), metadata)
    logger.debug("saved checkpoint %s", path)
    return path


def _flatten_dict(values, prefix=""):
    flat = {}
    for key, value in values.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(_flatten_dict(value, name))
        else:
            flat[name] = value
    return flat


def config_differences(found, expected):
    """Dotted names of configuration fields that differ, with descriptions."""
    found_flat, expected_flat = _flatten_dict(found.to_dict()), _flatten_dict(expected.to_dict())
    fields, details = [], []
    for name in sorted(set(found_flat) | set(expected_flat)):
        if found_flat.get(name) != expected_flat.get(name):
            fields.append(name)
            details.append(f"{name}: checkpoint {found_flat.get(name)!r} vs expected {expected_flat.get(name)!r}")
    return fields, details


def load_checkpoint(path, expected=None):
    """
    Read a checkpoint written by ``save_checkpoint``.

    Args:
        path (str or Path): Checkpoint file.
        expected (ModelConfig, optional): Configuration the caller needs.

    Returns:
        tuple: (MotionModel, metadata dict)

    Raises:
        CheckpointError: Unreadable file or a tensor set that does not match the
            stored configuration.
        CheckpointMismatchError: If ``expected`` differs from the stored
            configuration; ``fields`` lists the differing entries.
    """
    tensors, metadata = load_named_tensors(path)
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a motiontools checkpoint")
    config = ModelConfig.from_dict(metadata["model_config"])
    if expected is not None:
        fields, details = config_differences(config, expected)
        if fields:
            raise CheckpointMismatchError(fields, details)
    model = init_model(config, seed=0)
    model.extractor = extractor_for(
        PerceptualConfig(**{**asdict(config.perceptual), "seed": metadata["feature_seed"]})
    )
    slots = flatten_parameters(model.params)
    if set(slots) != set(tensors):
        missing = sorted(set(slots) - set(tensors))
        extra = sorted(set(tensors) - set(slots))
        raise CheckpointError(f"{path}: weights do not match the configuration (missing {missing}, unexpected {extra})")
    for name, tensor in slots.items():
        tensor.assign(tensors[name])
    return model, metadata


def check_frame_size(model, frame_shape):
    """
    Raise CheckpointMismatchError when frames do not match the model's image size.
    """
    _, height, width = frame_shape
    size = model.config.image_size
    if (height, width) != (size, size):
        raise CheckpointMismatchError(
            ["image_size"], [f"image_size: checkpoint {size} vs input frames {height}x{width}"]
        )


def default_config_dict():
    """Every default, model and training, as nested JSON-able dicts."""
    from motiontools.trainer import TrainConfig

    return {
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
    }
