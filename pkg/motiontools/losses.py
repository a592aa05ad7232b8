"""
Losses Module

Training objectives of the motion model:

    perceptual      multi-resolution feature L1 between generated and target
    equivariance    keypoints must follow a known geometric transform
    mask            background mask near 1, foreground masks near 0
    concentration   mask-weighted spread of each foreground mask
    total           perceptual + equivariance + lambda (mask + concentration)

All L1 norms are means over elements, so magnitudes do not depend on the
image resolution. The perceptual features come from a frozen, randomly
initialized CNN whose seed is recorded with the model.

Functions:
    make_feature_extractor: Frozen random CNN for a given seed
    extract_features: Raw pixels plus the four CNN layers
    embed: Global pooled embedding of an image (used by AED_sub)
    perceptual_loss, equivariance_loss, mask_loss, concentration_loss, total_loss
"""

from dataclasses import dataclass, field

import numpy as np

from motiontools import numerics as nx
from motiontools.general import ConfigError, ShapeError
from motiontools.geometry import apply_affine, identity_grid, invert_transform, warp_image_by_affine
from motiontools.numerics import Tensor

PERCEPTUAL_SEED = 1234
EMBEDDING_SEED = 4321
MASS_EPS = 1e-8
DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class PerceptualConfig:
    """
    Attributes:
        scales (tuple): Pyramid downsampling factors (1, 2, 4).
        layers (tuple): Feature layers compared; 0 is the raw image.
        channels (tuple): Widths of the four extractor convolutions.
        strides (tuple): Strides of the four extractor convolutions.
        seed (int): Seed of the frozen extractor weights.
    """

    scales: tuple = (1, 2, 4)
    layers: tuple = (0, 1, 2, 3, 4)
    channels: tuple = (8, 16, 16, 32)
    strides: tuple = (1, 2, 1, 2)
    seed: int = PERCEPTUAL_SEED

    def __post_init__(self):
        for name in ("scales", "layers", "channels", "strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.channels) != len(self.strides):
            raise ConfigError(f"{len(self.channels)} extractor widths but {len(self.strides)} strides")
        if not self.scales or min(self.scales) < 1:
            raise ConfigError(f"pyramid scales must be positive, got {self.scales}")
        depth = len(self.channels)
        if not self.layers or min(self.layers) < 0 or max(self.layers) > depth:
            raise ConfigError(f"feature layers must lie in 0..{depth}, got {self.layers}")


@dataclass
class FeatureExtractor:
    """Frozen convolution weights of the perceptual network."""

    seed: int
    convs: list
    strides: tuple

    @property
    def depth(self):
        return len(self.convs)


def make_feature_extractor(seed=PERCEPTUAL_SEED, channels=(8, 16, 16, 32), strides=(1, 2, 1, 2)):
    """
    Build the frozen random CNN (3x3 convolutions, ReLU, He-scaled normal weights).

    Args:
        seed (int, optional): Weight seed (default 1234).
        channels (tuple, optional): Output widths.
        strides (tuple, optional): Strides, one per convolution.

    Returns:
        FeatureExtractor
    """
    rng = np.random.default_rng(seed)
    convs, width = [], 3
    for out in channels:
        fan_in = width * 9
        convs.append({
            "weight": Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out, width, 3, 3))),
            "bias": Tensor(np.zeros(out)),
        })
        width = out
    return FeatureExtractor(int(seed), convs, tuple(strides))


def extractor_for(config):
    return make_feature_extractor(config.seed, config.channels, config.strides)


def extract_features(extractor, image):
    """Return ``[image, layer1, ..., layerN]``."""
    features = [image]
    x = image
    for conv, stride in zip(extractor.convs, extractor.strides):
        x = nx.relu(nx.apply_conv(conv, x, stride=stride))
        features.append(x)
    return features


def embed(extractor, image):
    """Concatenated global means of every feature layer, as a numpy vector."""
    with nx.no_grad():
        image = image if isinstance(image, Tensor) else Tensor(image)
        return np.concatenate([f.data.mean(axis=(1, 2)) for f in extract_features(extractor, image)])


def _pyramid(image, scale):
    return image if scale == 1 else nx.avg_pool2d(image, scale)


def perceptual_loss(generated, target, extractor, config=None):
    """
    Sum over pyramid scales and feature layers of mean |phi_l(g_s) - phi_l(t_s)|.

    Args:
        generated (Tensor): (3, H, W) generated image.
        target (Tensor): (3, H, W) target image.
        extractor (FeatureExtractor): Frozen feature network.
        config (PerceptualConfig, optional): Scales and layers.

    Returns:
        Tensor: Scalar loss, 0 when the images are equal.

    Raises:
        ShapeError: If the images differ in size.
    """
    config = config or PerceptualConfig()
    if generated.shape != target.shape:
        raise ShapeError(f"perceptual loss on images of shape {generated.shape} and {target.shape}")
    terms = []
    for scale in config.scales:
        g_feats = extract_features(extractor, _pyramid(generated, scale))
        t_feats = extract_features(extractor, _pyramid(target, scale))
        for layer in config.layers:
            terms.append(nx.mean(nx.absolute(g_feats[layer] - t_feats[layer])))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def equivariance_loss(detector, image, transform, reference=None):
    """
    Keypoint equivariance under a known transform T.

    The image is resampled so that content at p moves to T(p); the keypoints
    detected there are compared with T applied to the keypoints of the
    original image: sum_k |T(t_k) - t'_k|_1.

    Args:
        detector (callable): Image -> MotionSet.
        image (Tensor): (3, H, W) image Z.
        transform (AffineTransform2D): T.
        reference (MotionSet, optional): Motion already detected on Z; skips
            the first detector call.

    Returns:
        Tensor: Scalar loss.
    """
    reference = reference if reference is not None else detector(image)
    transformed = warp_image_by_affine(image, invert_transform(transform))
    detected = detector(transformed)
    expected = apply_affine(transform, reference.keypoints)
    return nx.tensor_sum(nx.absolute(expected - detected.keypoints))


def mask_loss(masks):
    """mean |M0 - 1| + sum_k mean |Mk| over (K+1, h, w) masks."""
    background = nx.mean(nx.absolute(masks[0] - 1.0))
    foreground = nx.tensor_sum(nx.mean(nx.absolute(masks[1:]), axis=(1, 2)))
    return background + foreground


def concentration_loss(masks, grid=None, eps=MASS_EPS):
    """
    Mask-weighted squared distance to the mask centroid, summed over parts.

    Args:
        masks (Tensor): (K, h, w) foreground masks.
        grid (Grid, optional): Coordinates (identity grid of the mask size).
        eps (float, optional): Parts with total mass <= eps contribute 0.

    Returns:
        Tensor: Scalar loss, invariant to scaling any mask by a positive factor.
    """
    masks = masks if isinstance(masks, Tensor) else Tensor(masks)
    count, height, width = masks.shape
    grid = grid or identity_grid(height, width)
    mass = nx.tensor_sum(masks, axis=(1, 2))
    valid = (mass.data > eps).astype(np.float64)
    safe_mass = mass * valid + (1.0 - valid)
    weights = masks / nx.reshape(safe_mass, (count, 1, 1))
    coords = grid.coords
    weights4 = nx.reshape(weights, (count, height, width, 1))
    centroids = nx.tensor_sum(weights4 * coords, axis=(1, 2))
    offsets = coords - nx.reshape(centroids, (count, 1, 1, 2))
    spread = nx.tensor_sum(weights4 * offsets * offsets, axis=(1, 2, 3))
    return nx.tensor_sum(spread * valid)


@dataclass
class LossReport:
    """
    Per-term values of one step.

    ``total`` equals perceptual + equivariance + lambda (mask + concentration),
    with the last two terms absent when background handling is disabled.
    ``total_tensor`` is the differentiable total (None after averaging).
    """

    perceptual: float
    equivariance: float
    mask: float
    concentration: float
    total: float
    weights: dict = field(default_factory=dict)
    total_tensor: Tensor = None

    def as_row(self):
        return {
            "perceptual": self.perceptual,
            "equivariance": self.equivariance,
            "mask": self.mask,
            "concentration": self.concentration,
            "total": self.total,
        }

    @classmethod
    def average(cls, reports):
        """Mean of each term; the total tensor is the mean of the sample totals."""
        count = len(reports)
        values = {name: sum(getattr(r, name) for r in reports) / count for name in reports[0].as_row()}
        tensors = [r.total_tensor for r in reports if r.total_tensor is not None]
        total_tensor = None
        if len(tensors) == count:
            total_tensor = tensors[0]
            for tensor in tensors[1:]:
                total_tensor = total_tensor + tensor
            total_tensor = total_tensor * (1.0 / count)
            values["total"] = total_tensor.item()
        return cls(weights=dict(reports[0].weights), total_tensor=total_tensor, **values)


def _value(term):
    return term.item() if isinstance(term, Tensor) else float(term)


def total_loss(perceptual, equivariance, mask=None, concentration=None, lam=DEFAULT_LAMBDA, background_enabled=False):
    """
    Combine the loss terms.

    Args:
        perceptual (Tensor or float): Perceptual term.
        equivariance (Tensor or float): Equivariance term.
        mask (Tensor or float, optional): Mask term (needed when background is on).
        concentration (Tensor or float, optional): Concentration term.
        lam (float, optional): Weight of mask + concentration (default 0.1).
        background_enabled (bool, optional): Include the mask terms.

    Returns:
        LossReport

    Examples:
        >>> total_loss(1.0, 2.0, 3.0, 4.0, lam=0.5, background_enabled=True).total
        6.5
    """
    total = perceptual + equivariance
    mask_value = concentration_value = 0.0
    if background_enabled:
        if mask is None or concentration is None:
            raise ConfigError("background losses enabled but mask or concentration term missing")
        total = total + lam * (mask + concentration)
        mask_value, concentration_value = _value(mask), _value(concentration)
    return LossReport(
        perceptual=_value(perceptual),
        equivariance=_value(equivariance),
        mask=mask_value,
        concentration=concentration_value,
        total=_value(total),
        weights={"lambda": float(lam), "background_enabled": bool(background_enabled)},
        total_tensor=total if isinstance(total, Tensor) else None,
    )
