"""
motiontools: Motion-transformer image animation on a numpy autograd core.

This package animates a source image with the motion of a driving video. A
transformer with learnable motion tokens estimates one local affine motion per
token, a dense motion network blends the part motions into a per-pixel flow
with an occlusion map, and a generator warps the source features to render the
driving pose. Everything runs on numpy through the package's own reverse-mode
autograd.

Modules:
    numerics: Tensor with reverse-mode autograd, convolutions, grid sampling,
        gradient checking and the MFORGE1 tensor container
    geometry: Normalized grids, affine transforms, warping and heatmaps
    motion_model: MotionSet, part flows, dense flow blending and motion transfer
    encoder: Convolutional backbone, patch projection and sine positional encoding
    motion_transformer: Motion tokens, unified/split attention, decode head
    dense_motion: Mask/occlusion U-Net and the background motion predictor
    generator: Warp-and-decode image generator
    losses: Perceptual, equivariance, mask and concentration losses
    data: Synthetic moving-parts videos and frame-folder datasets
    model: Model assembly and checkpoints
    trainer: Adam, learning-rate schedule and the training loop
    evaluation: Reconstruction, animation, metrics and visual dumps
    cli: The ``motiontools`` command line front end
    general: Errors, console and logging helpers

Key Features:
    - Deterministic training given a seed
    - Attention maps of every motion token for inspection
    - Ablation switches for positional encoding, depth, attention mode and block form
    - Synthetic data with ground-truth part motion for keypoint metrics

Dependencies:
    - numpy: Tensor storage and computation
    - scipy: Hungarian matching for keypoint metrics
    - pandas: Loss logs and metrics tables
    - matplotlib: PNG input/output and attention figures
    - rich: Console output and log handler

Notes:
    Coordinates are normalized to [-1, 1] with (x, y) order on the last axis
    and align-corners convention. Images are (3, H, W) float arrays in [0, 1].

License: See LICENSE.txt for details
"""

__version__ = "0.1.0"
