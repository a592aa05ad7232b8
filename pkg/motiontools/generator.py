"""
Generator Module

Encoder-decoder that renders the driving frame from the source image. Source
features at every scale are sampled at the dense flow and multiplied by the
occlusion map; the decoder upsamples with skip connections to the warped
features and ends in a sigmoid, so outputs lie in (0, 1).

Functions:
    init_generator_params: Fresh encoder/decoder weights
    encode_source: Multi-scale source features
    warp_features: Flow sampling and occlusion gating of one feature map
    decode: Bottleneck residual blocks and the upsampling path
    generate: Full warp-and-decode pass
    autoencode: The same network with no warping
"""

from dataclasses import dataclass

from motiontools import numerics as nx
from motiontools.dense_motion import upsample_flow, upsample_map
from motiontools.general import ConfigError
from motiontools.geometry import resize

MAX_CHANNELS = 256


@dataclass(frozen=True)
class GeneratorConfig:
    """Base width (32), downsampling stages (2) and bottleneck residual blocks (3)."""

    base_channels: int = 32
    stages: int = 2
    residual_blocks: int = 3

    def __post_init__(self):
        if self.base_channels < 1 or self.stages < 0 or self.residual_blocks < 0:
            raise ConfigError(
                f"generator needs base_channels >= 1, stages >= 0, residual_blocks >= 0, got "
                f"{self.base_channels}, {self.stages}, {self.residual_blocks}"
            )

    def widths(self):
        return [min(self.base_channels * 2 ** i, MAX_CHANNELS) for i in range(self.stages + 1)]


def init_generator_params(rng, config):
    widths = config.widths()
    bottleneck = widths[-1]
    return {
        "first": nx.conv_params(rng, 3, widths[0]),
        "down": [nx.conv_params(rng, widths[i], widths[i + 1]) for i in range(config.stages)],
        "blocks": [
            {"conv_a": nx.conv_params(rng, bottleneck, bottleneck), "conv_b": nx.conv_params(rng, bottleneck, bottleneck)}
            for _ in range(config.residual_blocks)
        ],
        "up": [nx.conv_params(rng, widths[i + 1] + widths[i], widths[i]) for i in range(config.stages)],
        "final": nx.conv_params(rng, widths[0], 3),
    }


def encode_source(params, source, config):
    """Return the list of feature maps, full resolution first."""
    _, height, width = source.shape
    factor = 2 ** config.stages
    if height % factor or width % factor:
        raise ConfigError(f"image size must be divisible by {factor} for {config.stages} generator stages, got {height}x{width}")
    features = [nx.relu(nx.apply_conv(params["first"], source))]
    for conv in params["down"]:
        features.append(nx.avg_pool2d(nx.relu(nx.apply_conv(conv, features[-1])), 2))
    return features


def warp_features(features, flow, occlusion):
    """Sample (C, h, w) features at the flow resized to (h, w) and gate by occlusion."""
    _, height, width = features.shape
    warped = nx.grid_sample(features, upsample_flow(flow, height, width))
    if occlusion is None:
        return warped
    return warped * upsample_map(occlusion, height, width)


def decode(params, skips):
    x = skips[-1]
    for block in params["blocks"]:
        x = x + nx.apply_conv(block["conv_b"], nx.relu(nx.apply_conv(block["conv_a"], x)))
    for level in reversed(range(len(params["up"]))):
        skip = skips[level]
        x = resize(x, skip.shape[1], skip.shape[2])
        x = nx.relu(nx.apply_conv(params["up"][level], nx.concat([x, skip], axis=0)))
    return nx.sigmoid(nx.apply_conv(params["final"], x))


def generate(params, source, dense_motion, config):
    """
    Render the driving frame.

    Args:
        params (dict): Generator weights.
        source (Tensor): (3, H, W) source image.
        dense_motion (DenseMotion): Flow and occlusion, any resolution.
        config (GeneratorConfig): Architecture.

    Returns:
        Tensor: (3, H, W) image with values in (0, 1).
    """
    features = encode_source(params, source, config)
    warped = [warp_features(f, dense_motion.flow, dense_motion.occlusion) for f in features]
    return decode(params, warped)


def autoencode(params, source, config):
    """Reconstruct the source without any warping."""
    return decode(params, encode_source(params, source, config))
