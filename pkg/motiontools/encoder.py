"""
Encoder Module

The image-token pathway: a small stem CNN downsamples the image by 4, the
feature map is cut into non-overlapping patches, each patch is projected to
the token dimension and a 2-D sine positional encoding is added.

Functions:
    init_encoder_params: Fresh backbone and projection weights
    backbone: Stem CNN, (3, H, W) -> (C, H/4, W/4)
    patchify_project: Patches -> projected, position-encoded tokens
    sine_positional_encoding: Weight-free 2-D separable encoding
    encode_image: backbone + patchify_project

Dependencies:
    - numpy
    - motiontools.numerics

Notes:
    With the default 4 x 4 patches an H x W input yields (H/16)(W/16) tokens:
    16 tokens at 64 x 64, 256 at 256 x 256 and 576 at 384 x 384.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from motiontools import numerics as nx
from motiontools.general import ConfigError, ShapeError
from motiontools.numerics import Tensor

BACKBONE_STRIDE = 4


@dataclass(frozen=True)
class EncoderConfig:
    """Backbone width and depth, patch size, token dimension and PE flag."""

    channels: int = 64
    residual_blocks: int = 2
    patch_size: int = 4
    dim: int = 192
    positional_encoding: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.residual_blocks < 0 or self.patch_size < 1:
            raise ConfigError(
                f"encoder needs channels >= 1, residual_blocks >= 0 and patch_size >= 1, got "
                f"{self.channels}, {self.residual_blocks}, {self.patch_size}"
            )
        if self.dim % 4:
            raise ConfigError(f"token dim must be divisible by 4 for the 2-D sine encoding, got {self.dim}")

    @property
    def size_multiple(self):
        return BACKBONE_STRIDE * self.patch_size


@dataclass
class ImageTokens:
    """Projected patch tokens (N, d) and the (rows, cols) patch lattice."""

    tokens: Tensor
    grid_shape: tuple

    @property
    def count(self):
        return self.grid_shape[0] * self.grid_shape[1]


def init_encoder_params(rng, config):
    channels = config.channels
    patch_features = channels * config.patch_size ** 2
    return {
        "stem1": nx.conv_params(rng, 3, channels),
        "stem2": nx.conv_params(rng, channels, channels),
        "blocks": [
            {"conv_a": nx.conv_params(rng, channels, channels), "conv_b": nx.conv_params(rng, channels, channels)}
            for _ in range(config.residual_blocks)
        ],
        "proj": nx.linear_params(rng, patch_features, config.dim),
    }


def check_image_size(height, width, config):
    multiple = config.size_multiple
    if height % multiple or width % multiple:
        raise ConfigError(
            f"image size must be divisible by {multiple} (backbone x{BACKBONE_STRIDE}, "
            f"patches x{config.patch_size}), got {height}x{width}"
        )


def backbone(params, image, config):
    """
    Stem CNN: two stride-2 3x3 convolutions with ReLU, then residual blocks
    x + conv(relu(conv(x))).

    Args:
        params (dict): Weights from ``init_encoder_params``.
        image (Tensor): (3, H, W) image in [0, 1].
        config (EncoderConfig): Architecture.

    Returns:
        Tensor: (C, H/4, W/4) features.

    Raises:
        ConfigError: If H or W is not a multiple of 4 x patch size.
    """
    check_image_size(image.shape[1], image.shape[2], config)
    x = nx.relu(nx.apply_conv(params["stem1"], image, stride=2))
    x = nx.relu(nx.apply_conv(params["stem2"], x, stride=2))
    for block in params["blocks"]:
        x = x + nx.apply_conv(block["conv_b"], nx.relu(nx.apply_conv(block["conv_a"], x)))
    return x


@lru_cache(maxsize=16)
def _sine_table(rows, cols, dim):
    half = dim // 2
    exponents = np.arange(half // 2) * 2.0 / half
    omega = 1.0 / 10000.0 ** exponents

    def encode(positions):
        angles = positions[:, None] * omega[None, :]
        table = np.empty((positions.size, half))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        return table

    ys, xs = np.divmod(np.arange(rows * cols), cols)
    table = np.concatenate([encode(xs.astype(np.float64)), encode(ys.astype(np.float64))], axis=1)
    table.setflags(write=False)
    return table


def sine_positional_encoding(rows, cols, dim):
    """
    2-D separable sine encoding of a patch lattice.

    The first dim/2 channels encode the column (x) index and the last dim/2 the
    row (y) index, each as interleaved sin/cos pairs at frequencies
    10000^(-2i / (dim/2)). Token n sits at row n // cols, column n % cols.

    Args:
        rows (int): Patch rows.
        cols (int): Patch columns.
        dim (int): Token dimension, divisible by 4.

    Returns:
        numpy.ndarray: (rows * cols, dim) encoding.

    Raises:
        ConfigError: If ``dim`` is not divisible by 4.
    """
    if dim % 4:
        raise ConfigError(f"positional encoding dim must be divisible by 4, got {dim}")
    return np.array(_sine_table(int(rows), int(cols), int(dim)))


def patchify_project(features, proj, patch_size=4, pe=None):
    """
    Flatten non-overlapping patches, project them and add a positional encoding.

    Args:
        features (Tensor): (C, h, w) feature map.
        proj (dict): Linear weights, ``weight`` (C * p * p, d) and ``bias`` (d,).
        patch_size (int, optional): Patch side p (default 4).
        pe (numpy.ndarray, optional): (N, d) encoding to add, or None.

    Returns:
        ImageTokens: Row-major tokens over the patch lattice.

    Raises:
        ShapeError: If h or w is not divisible by p.
    """
    channels, height, width = features.shape
    p = patch_size
    if height % p or width % p:
        raise ShapeError(f"feature map {height}x{width} is not divisible into {p}x{p} patches")
    rows, cols = height // p, width // p
    patches = nx.reshape(features, (channels, rows, p, cols, p))
    patches = nx.transpose(patches, (1, 3, 0, 2, 4))
    patches = nx.reshape(patches, (rows * cols, channels * p * p))
    tokens = nx.linear(patches, proj["weight"], proj["bias"])
    if pe is not None:
        tokens = tokens + pe
    return ImageTokens(tokens, (rows, cols))


def encode_image(params, image, config):
    """Backbone, patchify, projection and (optionally) positional encoding."""
    features = backbone(params, image, config)
    rows = features.shape[1] // config.patch_size
    cols = features.shape[2] // config.patch_size
    pe = sine_positional_encoding(rows, cols, config.dim) if config.positional_encoding else None
    return patchify_project(features, params["proj"], config.patch_size, pe)
