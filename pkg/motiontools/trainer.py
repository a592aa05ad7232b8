"""
Trainer Module

End-to-end optimization of the motion model: one forward pass per
(source, driving) pair, Adam updates of every learnable weight, a stepwise
learning-rate schedule, per-epoch checkpoints and a CSV loss log.

Functions:
    learning_rate: Scheduled learning rate for an epoch
    model_forward: Losses and generated frame for one pair
    train_step: One batch: forward, backward, Adam update
    fit: The epoch loop, checkpoints and loss log

Classes:
    TrainConfig: Optimization settings
    Adam: Bias-corrected Adam with optional global-norm clipping

Dependencies:
    - numpy
    - pandas for the loss log

Notes:
    Randomness is split into independent streams (weights, pairs and
    equivariance transforms) spawned from the run seed, so identical seeds and
    configurations reproduce the loss log bit for bit.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from motiontools.data import BatchPrefetcher, epoch_pairs
from motiontools.dense_motion import attach_background, build_dense_motion
from motiontools.general import CheckpointError, ConfigError, DatasetError, NonFiniteError, TrainingDivergedError, get_logger
from motiontools.generator import generate
from motiontools.geometry import TransformRanges, random_geometric_transform
from motiontools.losses import LossReport, concentration_loss, equivariance_loss, mask_loss, perceptual_loss, total_loss
from motiontools.model import detector, estimate, flatten_parameters, init_model, save_checkpoint
from motiontools.numerics import Tensor

logger = get_logger(__name__)

LOG_COLUMNS = ["step", "epoch", "lr", "perceptual", "equivariance", "mask", "concentration", "total"]
LOSS_LOG = "loss_log.csv"
FINAL_CHECKPOINT = "final.mforge"


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings.

    Attributes:
        epochs (int): Number of epochs (default 20).
        learning_rate (float): Initial learning rate (default 2e-4).
        lr_drop_factor (float): Divisor applied at each drop (default 10).
        lr_drop_fractions (tuple): Fractions of the run at which the rate drops
            (default 60 % and 90 %).
        batch_size (int): Pairs per step (default 8).
        betas (tuple): Adam moment decay rates.
        eps (float): Adam denominator offset.
        lam (float): Weight of the mask and concentration losses (default 0.1).
        seed (int): Run seed.
        grad_clip (float or None): Global gradient-norm limit, off by default.
        transforms_per_sample (int): Equivariance transforms per pair.
        pairs_per_epoch (int or None): Pairs per epoch (default: one per video).
        prefetch (int): Depth of the batch prefetch queue.
        transform_ranges (TransformRanges): Equivariance transform ranges.
    """

    epochs: int = 20
    learning_rate: float = 2e-4
    lr_drop_factor: float = 10.0
    lr_drop_fractions: tuple = (0.6, 0.9)
    batch_size: int = 8
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lam: float = 0.1
    seed: int = 0
    grad_clip: float = None
    transforms_per_sample: int = 1
    pairs_per_epoch: int = None
    prefetch: int = 2
    transform_ranges: TransformRanges = field(default_factory=TransformRanges)

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_fractions", tuple(float(f) for f in self.lr_drop_fractions))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if isinstance(self.transform_ranges, dict):
            object.__setattr__(self, "transform_ranges", TransformRanges(**self.transform_ranges))
        if self.epochs < 1 or self.batch_size < 1 or self.transforms_per_sample < 1 or self.prefetch < 1:
            raise ConfigError("epochs, batch_size, transforms_per_sample and prefetch must be positive")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not self.lr_drop_factor > 0:
            raise ConfigError(f"lr_drop_factor must be positive, got {self.lr_drop_factor}")
        if any(not 0 < f <= 1 for f in self.lr_drop_fractions):
            raise ConfigError(f"lr drop fractions must lie in (0, 1], got {self.lr_drop_fractions}")
        if len(self.betas) != 2 or any(not 0 <= b < 1 for b in self.betas):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ConfigError(f"pairs_per_epoch must be positive when set, got {self.pairs_per_epoch}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def drop_epochs(config):
    """Epoch indices (0-based) from which each learning-rate drop applies."""
    return [int(round(fraction * config.epochs)) for fraction in config.lr_drop_fractions]


def learning_rate(config, epoch):
    """
    Learning rate for a 0-based epoch index.

    Examples:
        >>> learning_rate(TrainConfig(epochs=100), 60)
        2e-05
    """
    drops = sum(epoch >= boundary for boundary in drop_epochs(config))
    return config.learning_rate / config.lr_drop_factor ** drops


class Adam:
    """
    Adam with bias correction.

    Args:
        params (iterable[Tensor]): Learnable tensors.
        betas (tuple, optional): Moment decay rates (default (0.9, 0.999)).
        eps (float, optional): Denominator offset (default 1e-8).
        grad_clip (float, optional): Rescale gradients whose global L2 norm
            exceeds this value.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, grad_clip=None):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.steps = 0
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self, lr):
        self.steps += 1
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for index, param in enumerate(self.params):
            if param.grad is None:
                continue
            grad = param.grad * scale
            self.first[index] = self.beta1 * self.first[index] + (1.0 - self.beta1) * grad
            self.second[index] = self.beta2 * self.second[index] + (1.0 - self.beta2) * grad * grad
            m_hat = self.first[index] / correction1
            v_hat = self.second[index] / correction2
            param.assign(param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()


def model_forward(model, source, driving, rng, config):
    """
    Forward pass for one (source, driving) pair.

    Estimates both motion sets, optionally attaches the background transform,
    builds the dense motion, generates the driving frame and evaluates every
    loss (with ``config.transforms_per_sample`` fresh equivariance transforms
    on the driving frame, averaged).

    Args:
        model (MotionModel): Model to run.
        source (array-like or Tensor): (3, H, W) source frame.
        driving (array-like or Tensor): (3, H, W) driving frame.
        rng (numpy.random.Generator): Draws the equivariance transforms.
        config (TrainConfig): Loss weights and transform ranges.

    Returns:
        tuple: (LossReport, generated Tensor, DenseMotion)
    """
    source = source if isinstance(source, Tensor) else Tensor(source)
    driving = driving if isinstance(driving, Tensor) else Tensor(driving)
    model_config = model.config
    src_set, _ = estimate(model, source)
    drv_set, _ = estimate(model, driving)
    if model_config.background_enabled:
        drv_set = attach_background(model.params["dense_motion"], source, driving, drv_set)
    dense = build_dense_motion(model.params["dense_motion"], source, src_set, drv_set, model_config.dense_motion)
    generated = generate(model.params["generator"], source, dense, model_config.generator)

    perceptual = perceptual_loss(generated, driving, model.extractor, model_config.perceptual)
    detect = detector(model)
    equivariance = None
    for _ in range(config.transforms_per_sample):
        transform = random_geometric_transform(rng, config.transform_ranges)
        term = equivariance_loss(detect, driving, transform, reference=drv_set)
        equivariance = term if equivariance is None else equivariance + term
    equivariance = equivariance * (1.0 / config.transforms_per_sample)

    mask = concentration = None
    if model_config.background_enabled:
        mask = mask_loss(dense.masks)
        concentration = concentration_loss(dense.masks[1:])
    report = total_loss(perceptual, equivariance, mask, concentration, config.lam, model_config.background_enabled)
    return report, generated, dense


def train_step(model, batch, config, optimizer, rng, lr, step=0, last_checkpoint=None):
    """
    One optimization step on a batch of (source, driving) pairs.

    The batch loss is the mean of the per-pair totals.

    Returns:
        LossReport: Batch-mean terms.

    Raises:
        TrainingDivergedError: If the loss is not finite.
    """
    try:
        reports = [model_forward(model, source, driving, rng, config)[0] for source, driving in batch]
    except NonFiniteError as exc:
        raise TrainingDivergedError(step, last_checkpoint) from exc
    report = LossReport.average(reports)
    if not np.isfinite(report.total):
        raise TrainingDivergedError(step, last_checkpoint)
    report.total_tensor.backward()
    optimizer.step(lr)
    optimizer.zero_grad()
    report.total_tensor = None
    return report


def _batches(pairs, size):
    for start in range(0, len(pairs), size):
        yield pairs[start:start + size]


def write_loss_log(rows, path):
    try:
        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(path, index=False, float_format="%.17g")
    except OSError as exc:
        raise CheckpointError(f"cannot write loss log {path}: {exc}") from exc


def fit(dataset, config=None, model_config=None, out_dir=".", model=None):
    """
    Train a model end to end.

    Args:
        dataset (VideoDataset): Training videos.
        config (TrainConfig, optional): Optimization settings.
        model_config (ModelConfig, optional): Architecture for a fresh model.
        out_dir (str or Path, optional): Receives ``ckpt_epoch_XXX.mforge``
            after every epoch, ``final.mforge`` and ``loss_log.csv``.
        model (MotionModel, optional): Continue from this model instead.

    Returns:
        pathlib.Path: The final checkpoint.

    Raises:
        DatasetError: On an empty dataset.
        CheckpointError: On disk errors (message names the path).
        TrainingDivergedError: On a non-finite loss.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output folder {out_dir}: {exc}") from exc

    weight_seed, pair_seed, transform_seed = np.random.SeedSequence(config.seed).spawn(3)
    if model is None:
        model = init_model(model_config, seed=int(weight_seed.generate_state(1)[0]))
    if dataset.frame_shape[1:] != (model.config.image_size, model.config.image_size):
        raise ConfigError(f"frames of shape {dataset.frame_shape} do not match image size {model.config.image_size}")
    pair_rng = np.random.default_rng(pair_seed)
    transform_rng = np.random.default_rng(transform_seed)
    optimizer = Adam(flatten_parameters(model.params).values(), config.betas, config.eps, config.grad_clip)

    rows, step, last_checkpoint = [], 0, None
    log_path = out_dir / LOSS_LOG
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        pairs = epoch_pairs(dataset, pair_rng, config.pairs_per_epoch)
        totals = []
        with BatchPrefetcher(_batches(pairs, config.batch_size), config.prefetch) as batches:
            for batch in batches:
                report = train_step(model, batch, config, optimizer, transform_rng, lr, step, last_checkpoint)
                rows.append({"step": step, "epoch": epoch, "lr": lr, **report.as_row()})
                totals.append(report.total)
                logger.debug("step %d total %.6f", step, report.total)
                step += 1
        last_checkpoint = save_checkpoint(out_dir / f"ckpt_epoch_{epoch:03d}.mforge", model, epoch, config)
        write_loss_log(rows, log_path)
        logger.info("epoch %d/%d lr %.2e mean loss %.6f -> %s", epoch + 1, config.epochs, lr, np.mean(totals), last_checkpoint)
    final = save_checkpoint(out_dir / FINAL_CHECKPOINT, model, config.epochs - 1, config)
    logger.info("training finished, final checkpoint %s", final)
    return final
