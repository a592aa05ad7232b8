"""
Dense Motion Module

Turns two MotionSets into a DenseMotion: K part flows are computed on a
reduced grid, the source is warped by each of them (plus the background
flow), a small U-Net predicts (K+1) masks and an occlusion map from those
warped copies and the keypoint heatmaps, and the flows are mixed by the
masks.

Functions:
    init_dense_motion_params: Fresh U-Net, head and background predictor weights
    mask_predictor_input: The stacked warped sources and heatmap differences
    predict_masks_occlusion: U-Net -> softmax masks and sigmoid occlusion
    predict_background: Background affine from a source/driving pair
    attach_background: Driving MotionSet with its background transform set
    build_dense_motion: Full assembly at flow resolution
    upsample_flow / upsample_map: Bilinear resize of flows and maps

Notes:
    Masks are a partition of unity by construction (softmax over the mask
    channel). Flow and masks live at 1/scale_factor of the image resolution.
"""

from dataclasses import dataclass

import numpy as np

from motiontools import numerics as nx
from motiontools.general import ConfigError, ShapeError
from motiontools.geometry import AffineTransform2D, DEFAULT_SIGMA, gaussian_heatmaps, identity_grid, resize
from motiontools.motion_model import DenseMotion, MotionSet, background_flow, dense_flow, part_flows

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class DenseMotionConfig:
    """
    Attributes:
        channels (tuple): U-Net widths at the three scales.
        heatmap_sigma (float): Keypoint heatmap width, normalized units.
        scale_factor (int): Image-to-flow downsampling factor (default 4).
        background_channels (tuple): Widths of the three stride-2 background convs.
    """

    channels: tuple = (32, 64, 128)
    heatmap_sigma: float = DEFAULT_SIGMA
    scale_factor: int = 4
    background_channels: tuple = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "background_channels", tuple(int(c) for c in self.background_channels))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"dense motion U-Net needs three positive widths, got {self.channels}")
        if len(self.background_channels) != 3 or min(self.background_channels) < 1:
            raise ConfigError(f"background predictor needs three positive widths, got {self.background_channels}")
        if self.heatmap_sigma <= 0:
            raise ConfigError(f"heatmap_sigma must be positive, got {self.heatmap_sigma}")
        if self.scale_factor < 1:
            raise ConfigError(f"scale_factor must be >= 1, got {self.scale_factor}")


def input_channels(num_parts):
    return (num_parts + 1) * 3 + num_parts


def init_dense_motion_params(rng, num_parts, config, background_enabled=False):
    c0, c1, c2 = config.channels
    params = {
        "unet": {
            "enc0": nx.conv_params(rng, input_channels(num_parts), c0),
            "enc1": nx.conv_params(rng, c0, c1),
            "enc2": nx.conv_params(rng, c1, c2),
            "dec1": nx.conv_params(rng, c2 + c1, c1),
            "dec0": nx.conv_params(rng, c1 + c0, c0),
        },
        "mask": nx.conv_params(rng, c0, num_parts + 1),
        "occlusion": nx.conv_params(rng, c0, 1),
    }
    if background_enabled:
        widths = (6,) + config.background_channels
        params["background"] = {
            "convs": [nx.conv_params(rng, widths[i], widths[i + 1]) for i in range(3)],
            "fc": {
                "weight": nx.zeros_parameter((widths[-1], 6)),
                "bias": nx.parameter(np.array(IDENTITY_AFFINE)),
            },
        }
    return params


def _flow_size(image, config):
    _, height, width = image.shape
    factor = config.scale_factor
    if height % (4 * factor) or width % (4 * factor):
        raise ConfigError(f"image size must be divisible by {4 * factor} for the dense motion U-Net, got {height}x{width}")
    return height // factor, width // factor


def _downsample(image, factor):
    return image if factor == 1 else nx.avg_pool2d(image, factor)


def mask_predictor_input(source_small, src_set, drv_set, flows, background, sigma):
    """
    Stack (K+1) warped copies of the source with K heatmap differences.

    Args:
        source_small (Tensor): (3, h, w) source at flow resolution.
        src_set (MotionSet): Source motion.
        drv_set (MotionSet): Driving motion.
        flows (Tensor): (K, h, w, 2) part flows.
        background (Tensor): (h, w, 2) background flow.
        sigma (float): Heatmap width.

    Returns:
        Tensor: ((K+1) * 3 + K, h, w) input.
    """
    count, height, width, _ = flows.shape
    warped = [nx.grid_sample(source_small, background)]
    warped += [nx.grid_sample(source_small, flows[k]) for k in range(count)]
    heatmaps = gaussian_heatmaps(drv_set.keypoints, height, width, sigma) - gaussian_heatmaps(
        src_set.keypoints, height, width, sigma
    )
    return nx.concat(warped + [heatmaps], axis=0)


def predict_masks_occlusion(params, features):
    """
    Three-scale U-Net followed by the mask and occlusion heads.

    Returns:
        tuple: (masks Tensor (K+1, h, w) summing to 1 per pixel,
        occlusion Tensor (h, w) in (0, 1)).
    """
    unet = params["unet"]
    _, height, width = features.shape
    if height % 4 or width % 4:
        raise ShapeError(f"mask predictor input {height}x{width} must be divisible by 4")
    e0 = nx.relu(nx.apply_conv(unet["enc0"], features))
    e1 = nx.relu(nx.apply_conv(unet["enc1"], nx.avg_pool2d(e0, 2)))
    e2 = nx.relu(nx.apply_conv(unet["enc2"], nx.avg_pool2d(e1, 2)))
    d1 = resize(e2, height // 2, width // 2)
    d1 = nx.relu(nx.apply_conv(unet["dec1"], nx.concat([d1, e1], axis=0)))
    d0 = resize(d1, height, width)
    d0 = nx.relu(nx.apply_conv(unet["dec0"], nx.concat([d0, e0], axis=0)))
    masks = nx.softmax(nx.apply_conv(params["mask"], d0), axis=0)
    occlusion = nx.sigmoid(nx.apply_conv(params["occlusion"], d0))[0]
    return masks, occlusion


def predict_background(params, source, driving):
    """
    Regress the background transform from the 6-channel source/driving stack.

    Args:
        params (dict): Dense motion weights holding a ``background`` entry.
        source (Tensor): (3, H, W) source frame.
        driving (Tensor): (3, H, W) driving frame.

    Returns:
        AffineTransform2D: Differentiable A (2, 2) and b (2,). The identity for
        a freshly initialized predictor.

    Raises:
        ShapeError: If the frames differ in size.
        ConfigError: If the model has no background predictor.
    """
    if source.shape != driving.shape:
        raise ShapeError(f"source {source.shape} and driving {driving.shape} frames differ")
    if "background" not in params:
        raise ConfigError("background prediction requested but the background predictor is disabled")
    weights = params["background"]
    x = nx.concat([source, driving], axis=0)
    for conv in weights["convs"]:
        x = nx.relu(nx.apply_conv(conv, x, stride=2))
    pooled = nx.reshape(nx.mean(x, axis=(1, 2)), (1, x.shape[0]))
    out = nx.reshape(nx.linear(pooled, weights["fc"]["weight"], weights["fc"]["bias"]), (6,))
    return AffineTransform2D(nx.reshape(out[:4], (2, 2)), out[4:6])


def attach_background(params, source, driving, motion_set):
    """Return ``motion_set`` carrying the predicted background transform."""
    transform = predict_background(params, source, driving)
    return MotionSet(motion_set.keypoints, motion_set.affines, transform)


def build_dense_motion(params, source, src_set, drv_set, config, mask_override=None):
    """
    Assemble the dense motion of a source/driving pair at flow resolution.

    Args:
        params (dict): Dense motion weights.
        source (Tensor): (3, H, W) source image.
        src_set (MotionSet): Source motion.
        drv_set (MotionSet): Driving motion; its ``background`` (if any) is the
            background transform T^0.
        config (DenseMotionConfig): Architecture and resolution.
        mask_override (Tensor, optional): (K+1, h, w) masks used instead of the
            predicted ones.

    Returns:
        DenseMotion: Flow, masks and occlusion on an (H / s) x (W / s) grid.

    Raises:
        SingularAffineError: If a driving affine is singular.
    """
    height, width = _flow_size(source, config)
    grid = identity_grid(height, width)
    flows = part_flows(src_set, drv_set, grid)
    background = background_flow(drv_set.background, grid)
    source_small = _downsample(source, config.scale_factor)
    features = mask_predictor_input(source_small, src_set, drv_set, flows, background, config.heatmap_sigma)
    masks, occlusion = predict_masks_occlusion(params, features)
    if mask_override is not None:
        if mask_override.shape != masks.shape:
            raise ShapeError(f"mask override {mask_override.shape} does not match masks {masks.shape}")
        masks = mask_override if isinstance(mask_override, nx.Tensor) else nx.Tensor(mask_override)
    flow = dense_flow(flows, background, masks)
    return DenseMotion(flow, masks, occlusion, flows)


def upsample_flow(flow, height, width):
    """Bilinear resize of an (h, w, 2) flow; identity flows stay identity."""
    channels_first = nx.transpose(flow, (2, 0, 1))
    return nx.transpose(resize(channels_first, height, width), (1, 2, 0))


def upsample_map(values, height, width):
    """Bilinear resize of an (h, w) map."""
    h, w = values.shape
    return resize(nx.reshape(values, (1, h, w)), height, width)[0]
