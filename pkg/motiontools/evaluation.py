"""
Evaluation Module

Reconstruction and animation drivers, desk-scale metrics and the attention and
motion dumps.

Metrics:
    L1: Mean absolute pixel difference between generated and true frames
    AKD_px: Mean distance in pixels between predicted keypoints and ground-truth
        part centroids, with a Hungarian matching fixed on frame 0
    coverage_rate: Fraction of matched keypoints within 0.25 normalized units of
        their centroid
    AED_sub: Mean Euclidean distance between frozen random-CNN embeddings
        (seed 4321) of generated and true frames

These are desk-scale substitutes and are reported under their own names.

Functions:
    reconstruct: Re-render a video from its first frame
    animate: Drive a source image with another video's motion
    match_keypoints: Hungarian assignment of predictions to ground truth
    compute_metrics: Metrics of one video
    evaluate_dataset: Reconstruct and score every video of a dataset
    dump_attention: Attention PNG grids and an overview figure
    dump_motion: MotionSet JSON plus mask and occlusion heatmaps

Dependencies:
    - numpy
    - pandas for the per-video table
    - scipy.optimize.linear_sum_assignment for keypoint matching
    - matplotlib for PNG heatmaps and the overview figure
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from motiontools import numerics as nx
from motiontools.data import write_image
from motiontools.dense_motion import attach_background, build_dense_motion
from motiontools.general import ContractError, ShapeError, get_logger
from motiontools.generator import generate
from motiontools.geometry import resize
from motiontools.losses import EMBEDDING_SEED, embed, make_feature_extractor
from motiontools.model import check_frame_size, estimate
from motiontools.motion_model import motion_set_to_json, transfer_motion
from motiontools.numerics import Tensor

logger = get_logger(__name__)

COVERAGE_RADIUS = 0.25


@dataclass
class Rendering:
    """
    Output of ``reconstruct`` and ``animate``.

    Attributes:
        frames (numpy.ndarray): (T, 3, H, W) generated frames.
        keypoints (numpy.ndarray): (T, K, 2) keypoints detected on the generated
            frames; these are the keypoints AKD scores.
        driving_keypoints (numpy.ndarray): (T, K, 2) keypoints of the driving frames.
        flows (numpy.ndarray or None): (T, h, w, 2) dense flows when requested.
    """

    frames: np.ndarray
    keypoints: np.ndarray
    driving_keypoints: np.ndarray
    flows: np.ndarray = None


@dataclass
class MetricsReport:
    """
    Desk-scale reconstruction metrics.

    ``akd_px`` and ``coverage_rate`` are None when no ground truth is available;
    ``notes`` then says so.
    """

    l1: float
    aed_sub: float
    akd_px: float = None
    coverage_rate: float = None
    notes: list = field(default_factory=list)
    per_video: list = field(default_factory=list)

    def to_dict(self):
        return {
            "L1": self.l1,
            "AKD_px": self.akd_px,
            "coverage_rate": self.coverage_rate,
            "AED_sub": self.aed_sub,
            "notes": list(self.notes),
            "per_video": list(self.per_video),
        }


def _render(model, source, driving_frames, motion_for, keep_flows):
    frames, keypoints, driving_keypoints, flows = [], [], [], []
    source = Tensor(source)
    dm_params = model.params["dense_motion"]
    with nx.no_grad():
        src_set, _ = estimate(model, source)
        for frame in driving_frames:
            driving = Tensor(frame)
            drv_set, _ = estimate(model, driving)
            if model.config.background_enabled:
                drv_set = attach_background(dm_params, source, driving, drv_set)
            motion = motion_for(src_set, drv_set)
            dense = build_dense_motion(dm_params, source, src_set, motion, model.config.dense_motion)
            generated = generate(model.params["generator"], source, dense, model.config.generator)
            gen_set, _ = estimate(model, generated)
            frames.append(generated.data)
            keypoints.append(gen_set.keypoints.data)
            driving_keypoints.append(drv_set.keypoints.data)
            if keep_flows:
                flows.append(dense.flow.data)
    return Rendering(
        np.stack(frames), np.stack(keypoints), np.stack(driving_keypoints), np.stack(flows) if keep_flows else None
    )


def reconstruct(model, video, keep_flows=False):
    """
    Re-render every frame of a video from its first frame.

    Keypoints are detected again on each generated frame, so AKD measures
    whether the rendered parts sit where the ground truth puts them.

    Args:
        model (MotionModel): Trained or freshly initialized model.
        video (Video or numpy.ndarray): Video (or (T, 3, H, W) frames).
        keep_flows (bool, optional): Also return the dense flows.

    Returns:
        Rendering

    Raises:
        CheckpointMismatchError: If the frame size differs from the model's.
    """
    frames = video.frames if hasattr(video, "frames") else np.asarray(video)
    check_frame_size(model, frames.shape[1:])
    return _render(model, frames[0], frames, lambda src, drv: drv, keep_flows)


def animate(model, source_image, driving_video, mode="relative", keep_flows=False):
    """
    Animate ``source_image`` with the motion of ``driving_video``.

    As in ``reconstruct``, ``keypoints`` are detected on the generated frames.

    Args:
        model (MotionModel): Trained model.
        source_image (numpy.ndarray): (3, H, W) image.
        driving_video (Video or numpy.ndarray): Driving frames.
        mode (str, optional): "relative" (default) or "absolute".
        keep_flows (bool, optional): Also return the dense flows.

    Returns:
        Rendering
    """
    frames = driving_video.frames if hasattr(driving_video, "frames") else np.asarray(driving_video)
    check_frame_size(model, np.shape(source_image))
    check_frame_size(model, frames.shape[1:])
    with nx.no_grad():
        initial, _ = estimate(model, Tensor(frames[0]))

    def motion_for(src_set, drv_set):
        return transfer_motion(src_set, drv_set, initial, mode)

    return _render(model, source_image, frames, motion_for, keep_flows)


def match_keypoints(predicted, truth):
    """
    Hungarian matching of K predicted keypoints to P ground-truth centroids.

    Args:
        predicted (numpy.ndarray): (K, 2) keypoints.
        truth (numpy.ndarray): (P, 2) centroids.

    Returns:
        tuple: (predicted indices, truth indices), min(K, P) pairs minimizing
        the summed Euclidean distance.
    """
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    cost = np.linalg.norm(predicted[:, None, :] - truth[None, :, :], axis=-1)
    return linear_sum_assignment(cost)


def compute_metrics(generated, truth, keypoints=None, gt=None, extractor=None):
    """
    Metrics of one video.

    Args:
        generated (numpy.ndarray): (T, 3, H, W) generated frames.
        truth (numpy.ndarray): (T, 3, H, W) true frames.
        keypoints (numpy.ndarray, optional): (T, K, 2) predicted keypoints.
        gt (dict, optional): Ground truth with ``centroids`` (T, P, 2).
        extractor (FeatureExtractor, optional): Embedding network (default:
            the seed-4321 extractor).

    Returns:
        MetricsReport

    Raises:
        ShapeError: If the videos differ in length or frame size.

    Examples:
        >>> frames = np.zeros((1, 3, 16, 16))
        >>> compute_metrics(frames, frames).l1
        0.0
    """
    generated, truth = np.asarray(generated), np.asarray(truth)
    if generated.shape != truth.shape:
        raise ShapeError(f"generated video {generated.shape} and ground truth {truth.shape} differ")
    extractor = extractor or make_feature_extractor(EMBEDDING_SEED)
    l1 = float(np.mean(np.abs(generated - truth)))
    aed = float(np.mean([np.linalg.norm(embed(extractor, g) - embed(extractor, t)) for g, t in zip(generated, truth)]))
    report = MetricsReport(l1=l1, aed_sub=aed)

    if keypoints is None or gt is None:
        report.notes.append("no keypoints or ground truth: AKD_px and coverage_rate omitted")
        return report
    centroids = np.asarray(gt["centroids"])
    keypoints = np.asarray(keypoints)
    if centroids.shape[0] != keypoints.shape[0]:
        raise ShapeError(f"{keypoints.shape[0]} keypoint frames but {centroids.shape[0]} ground-truth frames")
    rows, cols = match_keypoints(keypoints[0], centroids[0])
    distances = np.linalg.norm(keypoints[:, rows] - centroids[:, cols], axis=-1)
    pixels_per_unit = (truth.shape[-1] - 1) / 2.0
    report.akd_px = float(distances.mean(axis=1).mean() * pixels_per_unit)
    report.coverage_rate = float(np.mean(distances <= COVERAGE_RADIUS))
    return report


def evaluate_dataset(model, dataset):
    """
    Reconstruct every video from its first frame and score it.

    Returns:
        MetricsReport: Means over videos, with one ``per_video`` row each.
    """
    extractor = make_feature_extractor(EMBEDDING_SEED)
    rows = []
    for video in dataset.videos:
        rendering = reconstruct(model, video)
        metrics = compute_metrics(rendering.frames, video.frames, rendering.keypoints, video.gt, extractor)
        rows.append({"video": video.name, **{k: v for k, v in metrics.to_dict().items() if k not in ("notes", "per_video")}})
        logger.debug("%s: L1 %.4f", video.name, metrics.l1)
    table = pd.DataFrame(rows)
    report = MetricsReport(l1=float(table["L1"].mean()), aed_sub=float(table["AED_sub"].mean()))
    if table["AKD_px"].notna().all():
        report.akd_px = float(table["AKD_px"].mean())
        report.coverage_rate = float(table["coverage_rate"].mean())
    else:
        report.notes.append("ground truth missing for some videos: AKD_px and coverage_rate omitted")
    report.per_video = table.to_dict(orient="records")
    return report


def write_report(report, path):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
    return path


def _normalize(values):
    low, high = values.min(), values.max()
    return np.zeros_like(values) if high - low < 1e-12 else (values - low) / (high - low)


def attention_images(maps, height, width):
    """
    Motion-token attention over image tokens as (L, K, height, width) maps.

    Each map is reshaped to the patch lattice and resized bilinearly.
    """
    rows, cols = maps.grid_shape
    layers, count, _ = maps.image.shape
    lattice = maps.image.reshape(layers, count, rows, cols)
    out = np.empty((layers, count, height, width))
    for layer in range(layers):
        with nx.no_grad():
            out[layer] = resize(Tensor(lattice[layer]), height, width).data
    return out


def dump_attention(model, image, out_dir):
    """
    Write the attention of every motion token over the image tokens.

    Produces ``layer_XX.png`` (one grayscale tile per motion token, side by side)
    for every layer and ``overview.png`` (rows = motion tokens, columns =
    layers, first column the input image).

    Returns:
        list[pathlib.Path]: Files written.
    """
    check_frame_size(model, np.shape(image))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with nx.no_grad():
        _, maps = estimate(model, Tensor(image))
    _, height, width = np.shape(image)
    images = attention_images(maps, height, width)
    layers, count = images.shape[:2]
    written = []
    for layer in range(layers):
        grid = np.concatenate([_normalize(images[layer, k]) for k in range(count)], axis=1)
        path = out_dir / f"layer_{layer:02d}.png"
        plt.imsave(path, grid, cmap="gray", vmin=0.0, vmax=1.0)
        written.append(path)

    fig, axes = plt.subplots(count, layers + 1, figsize=(1.5 * (layers + 1), 1.5 * count), squeeze=False)
    picture = np.clip(np.asarray(image).transpose(1, 2, 0), 0.0, 1.0)
    for k in range(count):
        axes[k, 0].imshow(picture)
        axes[k, 0].set_ylabel(f"token {k}")
        for layer in range(layers):
            axes[k, layer + 1].imshow(picture)
            axes[k, layer + 1].imshow(images[layer, k], cmap="jet", alpha=0.5)
            if k == 0:
                axes[k, layer + 1].set_title(f"layer {layer + 1}")
        for ax in axes[k]:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    overview = out_dir / "overview.png"
    fig.savefig(overview, dpi=100)
    plt.close(fig)
    written.append(overview)
    return written


def dump_motion(model, image, out_json):
    """
    Write the detected MotionSet as JSON, with ``<stem>_mask_XX.png`` heatmaps
    (index 0 background) and ``<stem>_occlusion.png`` beside it.

    The masks are those predicted for the image paired with itself.

    Returns:
        list[pathlib.Path]: Files written, JSON first.
    """
    check_frame_size(model, np.shape(image))
    out_json = Path(out_json)
    if out_json.suffix.lower() != ".json":
        raise ContractError(f"motion dump target must be a .json file, got {out_json}")
    out_json.parent.mkdir(parents=True, exist_ok=True)
    source = Tensor(image)
    with nx.no_grad():
        motion, _ = estimate(model, source)
        dense = build_dense_motion(model.params["dense_motion"], source, motion, motion, model.config.dense_motion)
    out_json.write_text(json.dumps(motion_set_to_json(motion), indent=2))
    written = [out_json]
    for index, mask in enumerate(dense.masks.data):
        path = out_json.with_name(f"{out_json.stem}_mask_{index:02d}.png")
        plt.imsave(path, mask, cmap="viridis", vmin=0.0, vmax=1.0)
        written.append(path)
    path = out_json.with_name(f"{out_json.stem}_occlusion.png")
    plt.imsave(path, dense.occlusion.data, cmap="gray", vmin=0.0, vmax=1.0)
    written.append(path)
    return written


def write_frames(frames, out_dir):
    """Write (T, 3, H, W) frames as ``frame_%05d.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(frames):
        write_image(out_dir / f"frame_{index:05d}.png", frame)
    return out_dir
