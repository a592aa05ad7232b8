"""
Data Module

Synthetic articulated-shape videos with ground-truth part motion, reading and
writing of frame-folder datasets, and training-pair sampling.

Each synthetic part is an ellipse or rectangle with a striped texture that
moves rigidly: a sinusoidal translation, rotation and mild isotropic scaling
around its frame-0 pose. Ground truth stores, per frame and part, the centroid
and the affine A(t) relative to frame 0, so that frame-0 content at u maps to
centroid(t) + A(t) (u - centroid(0)).

Functions:
    generate_scene: One synthetic video from a seed
    generate_dataset: Many videos from independent spawned seeds
    render_frame: Supersampled rasterization of posed parts over a background
    write_video_folder: Save a dataset as <root>/<video>/frame_%05d.png + gt.json
    load_video_folder: Read such a layout back (frames sorted lexicographically)
    split_dataset: Deterministic train/held-out split
    sample_pair: Uniform video, two distinct frames
    epoch_pairs: The training pairs of one epoch

Classes:
    SceneSpec, PartSpec, SyntheticScene, Video, VideoDataset, BatchPrefetcher

Dependencies:
    - numpy
    - matplotlib.image for PNG reading and writing
"""

import json
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib.image as mpimg
import numpy as np

from motiontools.general import ConfigError, DatasetError, get_logger, mat_build
from motiontools.geometry import identity_grid

logger = get_logger(__name__)

SHAPES = ("ellipse", "rectangle")
FRAME_PATTERN = "frame_{:05d}.png"
GT_FILE = "gt.json"
PREFETCH_THREAD = "motiontools-prefetch"


@dataclass(frozen=True)
class SceneSpec:
    """
    Parameters of a synthetic scene.

    Attributes:
        size (int): Frame side in pixels (default 64).
        frames (int): Frames per video (default 20).
        num_parts (int): Moving parts, 1-5 (default 3).
        translation_amplitude (float): Peak translation per axis, normalized units.
        rotation_amplitude (float): Peak rotation in radians.
        scale_amplitude (float): Peak relative scale change, below 0.5.
        radius_range (tuple): Semi-axis range of the parts.
        background_contrast (float): Amplitude of the background noise.
        supersample (int): Subsamples per pixel side for anti-aliasing.
    """

    size: int = 64
    frames: int = 20
    num_parts: int = 3
    translation_amplitude: float = 0.2
    rotation_amplitude: float = 0.5
    scale_amplitude: float = 0.1
    radius_range: tuple = (0.15, 0.3)
    background_contrast: float = 0.05
    supersample: int = 4

    def __post_init__(self):
        if not 1 <= self.num_parts <= 5:
            raise ConfigError(f"num_parts must be between 1 and 5, got {self.num_parts}")
        if self.frames < 2:
            raise ConfigError(f"a video needs at least 2 frames, got {self.frames}")
        if self.size < 2 or self.supersample < 1:
            raise ConfigError(f"size must be >= 2 and supersample >= 1, got {self.size}, {self.supersample}")
        for name in ("translation_amplitude", "rotation_amplitude", "scale_amplitude", "background_contrast"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.scale_amplitude >= 0.5:
            raise ConfigError(f"scale_amplitude must stay below 0.5, got {self.scale_amplitude}")
        low, high = self.radius_range
        if not 0 < low <= high:
            raise ConfigError(f"radius_range must satisfy 0 < low <= high, got {self.radius_range}")


@dataclass
class PartSpec:
    """Shape, reference pose, appearance and trajectory of one part."""

    shape: str
    centre: np.ndarray
    radii: np.ndarray
    colour: np.ndarray
    stripe_frequency: float
    translation_amplitude: np.ndarray
    rotation_amplitude: float
    scale_amplitude: float
    omega: float
    phases: np.ndarray

    def pose(self, t):
        """Centroid (2,) and affine (2, 2) relative to frame 0 at frame ``t``."""

        def wave(amplitude, phase):
            return amplitude * (np.sin(self.omega * t + phase) - np.sin(phase))

        shift = np.array([
            wave(self.translation_amplitude[0], self.phases[0]),
            wave(self.translation_amplitude[1], self.phases[1]),
        ])
        theta = wave(self.rotation_amplitude, self.phases[2])
        scale = 1.0 + wave(self.scale_amplitude, self.phases[3])
        cos, sin = np.cos(theta), np.sin(theta)
        return self.centre + shift, scale * np.array([[cos, -sin], [sin, cos]])


@dataclass
class SyntheticScene:
    """
    A generated video with ground truth.

    Attributes:
        frames (numpy.ndarray): (T, 3, H, W) floats in [0, 1].
        centroids (numpy.ndarray): (T, P, 2) part centroids.
        affines (numpy.ndarray): (T, P, 2, 2) part affines relative to frame 0.
        background (numpy.ndarray): (3, H, W) static background.
        coverage (numpy.ndarray): (T, P, H, W) visible area fraction per pixel.
        parts (list[PartSpec]): Part descriptions.
    """

    frames: np.ndarray
    centroids: np.ndarray
    affines: np.ndarray
    background: np.ndarray
    coverage: np.ndarray
    parts: list

    def gt_json(self):
        return {
            "parts": [
                {"centroids": self.centroids[:, p].tolist(), "affines": self.affines[:, p].tolist()}
                for p in range(self.centroids.shape[1])
            ]
        }

    def to_video(self, name):
        return Video(name, self.frames, {"centroids": self.centroids, "affines": self.affines})


@dataclass
class Video:
    """Ordered frames (T, 3, H, W) and optional ground truth arrays."""

    name: str
    frames: np.ndarray
    gt: dict = None

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass
class VideoDataset:
    """Videos sharing one frame size."""

    videos: list = field(default_factory=list)

    def __post_init__(self):
        sizes = {video.frames.shape[1:] for video in self.videos}
        if len(sizes) > 1:
            raise DatasetError(f"videos have mixed frame shapes: {sorted(sizes)}")

    def __len__(self):
        return len(self.videos)

    @property
    def frame_shape(self):
        if not self.videos:
            raise DatasetError("dataset is empty")
        return self.videos[0].frames.shape[1:]


def _random_part(rng, spec):
    shape = SHAPES[rng.integers(len(SHAPES))]
    centre = rng.uniform(-0.5, 0.5, size=2)
    radii = rng.uniform(*spec.radius_range, size=2)
    colour = rng.uniform(0.2, 1.0, size=3)
    stripe_frequency = rng.uniform(8.0, 16.0)
    translation = spec.translation_amplitude * rng.uniform(0.5, 1.0, size=2)
    rotation = spec.rotation_amplitude * rng.uniform(0.5, 1.0)
    scale = spec.scale_amplitude * rng.uniform(0.5, 1.0)
    omega = rng.uniform(0.15, 0.4)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    return PartSpec(shape, centre, radii, colour, stripe_frequency, translation, rotation, scale, omega, phases)


def _background(rng, spec):
    noise = rng.uniform(-1.0, 1.0, size=(spec.size, spec.size))
    tint = rng.uniform(-0.02, 0.02, size=(3, 1, 1))
    return np.clip(0.45 + tint + spec.background_contrast * noise[None], 0.0, 1.0)


def _subpixel_coords(size, supersample):
    pixel = identity_grid(size, size).coords
    step = 2.0 / (size - 1)
    offsets = ((np.arange(supersample) + 0.5) / supersample - 0.5) * step
    ox, oy = np.meshgrid(offsets, offsets)
    sub = np.stack([ox, oy], axis=-1)
    # (H, W, s, s, 2)
    return pixel[:, :, None, None, :] + sub[None, None]


def render_frame(parts, poses, background, size, supersample=4):
    """
    Rasterize posed parts over a background with s x s supersampling.

    Args:
        parts (list[PartSpec]): Parts, painted in order (later on top).
        poses (list[tuple]): (centroid, affine) per part.
        background (numpy.ndarray): (3, size, size) background.
        size (int): Frame side.
        supersample (int, optional): Subsamples per pixel side (default 4).

    Returns:
        tuple: (frame (3, size, size), coverage (P, size, size)).
    """
    coords = _subpixel_coords(size, supersample)
    image = np.broadcast_to(background.transpose(1, 2, 0)[:, :, None, None, :], coords.shape[:4] + (3,)).copy()
    owner = np.full(coords.shape[:4], -1)
    for index, (part, (centroid, affine)) in enumerate(zip(parts, poses)):
        local = (coords - centroid) @ np.linalg.inv(affine).T
        u = local[..., 0] / part.radii[0]
        v = local[..., 1] / part.radii[1]
        if part.shape == "ellipse":
            inside = u * u + v * v <= 1.0
        else:
            inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        texture = 0.75 + 0.25 * np.cos(part.stripe_frequency * local[..., 0])
        image[inside] = (part.colour * texture[..., None])[inside]
        owner[inside] = index
    frame = image.mean(axis=(2, 3)).transpose(2, 0, 1)
    coverage = np.stack([(owner == p).mean(axis=(2, 3)) for p in range(len(parts))])
    return np.clip(frame, 0.0, 1.0), coverage


def generate_scene(seed, spec=None):
    """
    Generate one synthetic video.

    Args:
        seed (int or numpy.random.SeedSequence): Randomness source; equal seeds
            give bit-identical scenes.
        spec (SceneSpec, optional): Scene parameters.

    Returns:
        SyntheticScene

    Examples:
        >>> scene = generate_scene(0, SceneSpec(size=32, frames=4, num_parts=2))
        >>> scene.frames.shape, scene.centroids.shape
        ((4, 3, 32, 32), (4, 2, 2))
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    parts = [_random_part(rng, spec) for _ in range(spec.num_parts)]
    background = _background(rng, spec)
    frames, centroids, affines, coverage = [], [], [], []
    for t in range(spec.frames):
        poses = [part.pose(t) for part in parts]
        frame, cover = render_frame(parts, poses, background, spec.size, spec.supersample)
        frames.append(frame)
        coverage.append(cover)
        centroids.append([pose[0] for pose in poses])
        affines.append([pose[1] for pose in poses])
    return SyntheticScene(
        frames=np.stack(frames),
        centroids=np.array(centroids),
        affines=np.array(affines),
        background=background,
        coverage=np.stack(coverage),
        parts=parts,
    )


def generate_dataset(seed, videos, spec=None):
    """Generate ``videos`` scenes from seeds spawned off one SeedSequence."""
    if videos < 1:
        raise ConfigError(f"number of videos must be positive, got {videos}")
    children = np.random.SeedSequence(seed).spawn(videos)
    scenes = [generate_scene(child, spec) for child in children]
    logger.info("generated %d synthetic videos", videos)
    return VideoDataset([scene.to_video(f"video_{i:04d}") for i, scene in enumerate(scenes)])


def write_video_folder(dataset, root):
    """
    Write ``<root>/<video>/frame_%05d.png`` and, when present, ``gt.json``.

    Raises:
        DatasetError: If a file cannot be written (message names the file).
    """
    root = Path(root)
    for video in dataset.videos:
        folder = root / video.name
        folder.mkdir(parents=True, exist_ok=True)
        for index, frame in enumerate(video.frames):
            path = folder / FRAME_PATTERN.format(index)
            try:
                mpimg.imsave(path, np.clip(frame.transpose(1, 2, 0), 0.0, 1.0))
            except (OSError, ValueError) as exc:
                raise DatasetError(f"cannot write frame {path}: {exc}") from exc
        if video.gt is not None:
            gt = {
                "parts": [
                    {"centroids": video.gt["centroids"][:, p].tolist(), "affines": video.gt["affines"][:, p].tolist()}
                    for p in range(video.gt["centroids"].shape[1])
                ]
            }
            (folder / GT_FILE).write_text(json.dumps(gt))
    logger.info("wrote %d videos to %s", len(dataset), root)
    return root


def read_image(path):
    """Read a PNG as a (3, H, W) float array in [0, 1]."""
    try:
        pixels = np.asarray(mpimg.imread(path), dtype=np.float64)
    except (OSError, ValueError, SyntaxError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    if pixels.ndim != 3 or pixels.shape[-1] not in (3, 4):
        raise DatasetError(f"unsupported image layout {pixels.shape} in {path}")
    if pixels.max() > 1.0:
        pixels = pixels / 255.0
    return pixels[..., :3].transpose(2, 0, 1).copy()


def write_image(path, image):
    """Write a (3, H, W) array in [0, 1] as PNG."""
    mpimg.imsave(path, np.clip(np.asarray(image).transpose(1, 2, 0), 0.0, 1.0))


def load_gt(path):
    try:
        content = json.loads(path.read_text())
        parts = content["parts"]
        centroids = np.stack([np.asarray(p["centroids"], dtype=np.float64) for p in parts], axis=1)
        affines = np.stack(
            [np.stack([mat_build((2, 2), a) for a in p["affines"]]) for p in parts], axis=1
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot read ground truth {path}: {exc}") from exc
    return {"centroids": centroids, "affines": affines}


def load_video(folder):
    """
    Read one frame folder.

    Raises:
        DatasetError: Missing folder, no PNG frames, unreadable file or mixed
            frame sizes.
    """
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"video folder {folder} does not exist")
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise DatasetError(f"no PNG frames in {folder}")
    frames = []
    for path in paths:
        frame = read_image(path)
        if frames and frame.shape != frames[0].shape:
            raise DatasetError(f"frame {path} has shape {frame.shape}, expected {frames[0].shape}")
        frames.append(frame)
    gt_path = folder / GT_FILE
    gt = load_gt(gt_path) if gt_path.exists() else None
    if gt is not None and gt["centroids"].shape[0] != len(frames):
        raise DatasetError(f"{gt_path} describes {gt['centroids'].shape[0]} frames, folder has {len(frames)}")
    return Video(folder.name, np.stack(frames), gt)


def load_video_folder(root):
    """
    Load a dataset: each sub-folder of ``root`` is a video. A folder holding
    PNG frames directly is loaded as a single-video dataset.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset folder {root} does not exist")
    if any(p.suffix.lower() == ".png" for p in root.iterdir()):
        return VideoDataset([load_video(root)])
    folders = sorted(p for p in root.iterdir() if p.is_dir())
    if not folders:
        raise DatasetError(f"dataset folder {root} contains no videos")
    return VideoDataset([load_video(folder) for folder in folders])


def split_dataset(dataset, holdout):
    """Keep the last ``holdout`` videos apart: returns (train, held_out)."""
    if not 0 <= holdout < len(dataset):
        raise ConfigError(f"holdout must be in [0, {len(dataset)}), got {holdout}")
    cut = len(dataset) - holdout
    return VideoDataset(dataset.videos[:cut]), VideoDataset(dataset.videos[cut:])


def sample_pair(dataset, rng):
    """
    Uniformly pick a video, then two distinct frames in random order.

    Returns:
        tuple: (source frame, driving frame), each (3, H, W).

    Raises:
        DatasetError: On an empty dataset or a video shorter than 2 frames.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    video = dataset.videos[rng.integers(len(dataset))]
    return _pair_from(video, rng)


def _pair_from(video, rng):
    if video.length < 2:
        raise DatasetError(f"video {video.name} has fewer than 2 frames")
    source, driving = rng.choice(video.length, size=2, replace=False)
    return video.frames[source], video.frames[driving]


def epoch_pairs(dataset, rng, count=None):
    """
    Training pairs of one epoch: videos in a fresh random permutation (repeated
    when ``count`` exceeds the number of videos), two distinct frames each.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot draw training pairs from an empty dataset")
    count = len(dataset) if count is None else count
    pairs = []
    while len(pairs) < count:
        for index in rng.permutation(len(dataset)):
            if len(pairs) == count:
                break
            pairs.append(_pair_from(dataset.videos[index], rng))
    return pairs


class BatchPrefetcher:
    """
    Iterate over batches produced on a worker thread.

    Batches pass through a bounded queue; their arrays are made read-only
    before hand-off. An exception raised by the producer is re-raised in the
    consuming thread. Use it as a context manager (or call ``close``) so the
    worker stops when the consumer leaves the loop early.

    Args:
        batches (iterable): Yields sequences of (source, driving) pairs.
        depth (int, optional): Queue capacity (default 2).
    """

    _DONE = object()
    _POLL = 0.05

    def __init__(self, batches, depth=2):
        if depth < 1:
            raise ConfigError(f"prefetch depth must be positive, got {depth}")
        self._queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._produce, args=(iter(batches),), name=PREFETCH_THREAD, daemon=True
        )
        self._thread.start()

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=self._POLL)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self, batches):
        try:
            for batch in batches:
                if self._stop.is_set():
                    return
                frozen = []
                for source, driving in batch:
                    source, driving = np.array(source), np.array(driving)
                    source.setflags(write=False)
                    driving.setflags(write=False)
                    frozen.append((source, driving))
                if not self._put(tuple(frozen)):
                    return
        except Exception as exc:  # forwarded to the consumer
            self._put(exc)
            return
        self._put(self._DONE)

    @property
    def alive(self):
        """True while the worker thread is running."""
        return self._thread.is_alive()

    def close(self, timeout=5.0):
        """Stop the worker, drop queued batches and join the thread."""
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        self._thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False

    def __iter__(self):
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()
