"""
Geometry Module

Coordinate conventions, sampling grids, bilinear warping, Gaussian heatmaps,
affine utilities and the random geometric transforms used by the
equivariance loss.

Conventions:
    Image coordinates are normalized to [-1, 1] with x pointing right and y
    pointing down. The first and last pixel centres along an axis map to -1
    and +1 (align-corners); an axis of size 1 has the single coordinate 0.
    Points are stored as (x, y) pairs on the last axis. Out-of-range sampling
    reads zeros.

Functions:
    identity_grid: Normalized per-pixel coordinates of an h x w image
    bilinear_sample: Differentiable bilinear sampling at a grid
    resize: Align-corners bilinear resize
    gaussian_heatmap / gaussian_heatmaps: Keypoint heatmaps on the identity grid
    apply_affine: A p + b for a set of points
    affine_grid: The sampling grid T(c) of a transform over an image
    warp_image_by_affine: Inverse-warp an image so output at c reads input at T(c)
    random_geometric_transform: Random rotation, scale, shear and translation
    invert_affine: Inverse of one or many 2 x 2 matrices via the adjugate
    invert_transform / compose_affine: Algebra on AffineTransform2D

Dependencies:
    - numpy
    - motiontools.numerics for differentiable Tensor operations
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from motiontools import numerics as nx
from motiontools.general import ConfigError, ShapeError, SingularAffineError
from motiontools.numerics import Tensor

SINGULAR_DET = 1e-8
DEFAULT_SIGMA = 0.1


@dataclass(frozen=True)
class Grid:
    """Per-pixel normalized (x, y) coordinates, shape (height, width, 2)."""

    height: int
    width: int
    coords: np.ndarray

    def as_tensor(self):
        return Tensor(self.coords)


@dataclass
class AffineTransform2D:
    """
    The map p -> A p + b.

    ``A`` (2 x 2) and ``b`` (2,) may be numpy arrays or Tensors; Tensors keep
    the transform differentiable (e.g. the predicted background motion).
    """

    A: object
    b: object

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @property
    def det(self):
        data = self.A.data if isinstance(self.A, Tensor) else np.asarray(self.A)
        return float(data[0, 0] * data[1, 1] - data[0, 1] * data[1, 0])

    def numpy(self):
        """Return (A, b) as plain float arrays."""
        a = self.A.data if isinstance(self.A, Tensor) else self.A
        b = self.b.data if isinstance(self.b, Tensor) else self.b
        return np.array(a, dtype=np.float64), np.array(b, dtype=np.float64)


@dataclass(frozen=True)
class TransformRanges:
    """
    Sampling ranges of ``random_geometric_transform``.

    Each field is a (low, high) pair. Rotation is in radians, scale is sampled
    as a log factor per axis. Zero-width ranges give the identity transform.
    """

    rotation: tuple = (-np.pi / 6, np.pi / 6)
    log_scale: tuple = (float(np.log(0.8)), float(np.log(1.2)))
    shear: tuple = (-0.1, 0.1)
    translation: tuple = (-0.2, 0.2)

    def __post_init__(self):
        for name in ("rotation", "log_scale", "shear", "translation"):
            low, high = getattr(self, name)
            if not low <= high:
                raise ConfigError(f"TransformRanges.{name}: low {low} must not exceed high {high}")
            object.__setattr__(self, name, (float(low), float(high)))


@lru_cache(maxsize=64)
def _identity_coords(height, width):
    def axis(n):
        if n == 1:
            return np.zeros(1)
        return -1.0 + 2.0 * np.arange(n) / (n - 1)

    xs, ys = np.meshgrid(axis(width), axis(height))
    coords = np.stack([xs, ys], axis=-1)
    coords.setflags(write=False)
    return coords


def identity_grid(height, width):
    """
    Align-corners normalized coordinates of an image.

    Args:
        height (int): Rows, at least 1.
        width (int): Columns, at least 1.

    Returns:
        Grid: ``coords[i, j] = (x_j, y_i)`` with ``x_j = -1 + 2 j / (width - 1)``.

    Examples:
        >>> identity_grid(3, 3).coords[1, 1]
        array([0., 0.])
    """
    if height < 1 or width < 1:
        raise ShapeError(f"grid size must be positive, got {height}x{width}")
    return Grid(int(height), int(width), _identity_coords(int(height), int(width)))


def _grid_tensor(grid):
    if isinstance(grid, Grid):
        return grid.as_tensor()
    return grid if isinstance(grid, Tensor) else Tensor(grid)


def bilinear_sample(image, grid):
    """
    Sample a (C, H, W) image at normalized grid positions.

    Args:
        image (Tensor): Source image.
        grid (Grid, Tensor or numpy.ndarray): Positions of shape (h, w, 2).

    Returns:
        Tensor: (C, h, w) samples, zero outside the image.
    """
    return nx.grid_sample(image, _grid_tensor(grid))


def resize(x, height, width):
    """Bilinear (align-corners) resize of a (C, H, W) tensor."""
    if x.shape[1] == height and x.shape[2] == width:
        return x
    return nx.grid_sample(x, identity_grid(height, width).as_tensor())


def gaussian_heatmap(t, height, width, sigma=DEFAULT_SIGMA):
    """
    Gaussian bump exp(-|c - t|^2 / (2 sigma^2)) on the identity grid.

    Args:
        t (Tensor or array-like): Keypoint (x, y) in normalized coordinates.
        height (int): Heatmap rows.
        width (int): Heatmap columns.
        sigma (float, optional): Width in normalized units (default 0.1).

    Returns:
        Tensor: (height, width) heatmap.
    """
    return gaussian_heatmaps(nx.reshape(t, (1, 2)), height, width, sigma)[0]


def gaussian_heatmaps(keypoints, height, width, sigma=DEFAULT_SIGMA):
    """Heatmaps of K keypoints (K x 2), returned as a (K, height, width) tensor."""
    if sigma <= 0:
        raise ConfigError(f"heatmap sigma must be positive, got {sigma}")
    keypoints = keypoints if isinstance(keypoints, Tensor) else Tensor(keypoints)
    count = keypoints.shape[0]
    coords = identity_grid(height, width).coords[None]
    diff = coords - nx.reshape(keypoints, (count, 1, 1, 2))
    dist2 = nx.tensor_sum(diff * diff, axis=-1)
    return nx.exp(dist2 * (-0.5 / sigma ** 2))


def _as_array_or_tensor(value):
    return value if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def apply_affine(transform, points):
    """
    Apply p -> A p + b to points stored on the last axis.

    Args:
        transform (AffineTransform2D): The map.
        points (Tensor or array-like): Shape (..., 2).

    Returns:
        Tensor or numpy.ndarray: Same shape as ``points``. A Tensor whenever
        any input is a Tensor.

    Examples:
        >>> rot = AffineTransform2D(np.array([[0., -1.], [1., 0.]]), np.zeros(2))
        >>> apply_affine(rot, np.array([1., 0.]))
        array([0., 1.])
    """
    A, b = _as_array_or_tensor(transform.A), _as_array_or_tensor(transform.b)
    points = _as_array_or_tensor(points)
    if not any(isinstance(v, Tensor) for v in (A, b, points)):
        return points @ A.T + b
    shape = points.shape
    flat = nx.reshape(points, (-1, 2))
    out = nx.matmul(flat, nx.transpose(A)) + b
    return nx.reshape(out, shape)


def affine_grid(transform, height, width):
    """Sampling grid whose entry at pixel c holds T(c)."""
    coords = identity_grid(height, width).coords
    out = apply_affine(transform, coords)
    return out if isinstance(out, Tensor) else Tensor(out)


def _check_invertible(transform):
    det = transform.det
    if not abs(det) > SINGULAR_DET:
        raise SingularAffineError(det)


def warp_image_by_affine(image, transform):
    """
    Inverse-warp an image: the output at coordinate c reads the input at T(c).

    Content located at p in the input therefore appears at T^-1(p) in the
    output.

    Args:
        image (Tensor): (C, H, W) image.
        transform (AffineTransform2D): The sampling transform.

    Returns:
        Tensor: Warped (C, H, W) image.

    Raises:
        SingularAffineError: If |det A| <= 1e-8.
    """
    _check_invertible(transform)
    _, height, width = image.shape
    return nx.grid_sample(image, affine_grid(transform, height, width))


def random_geometric_transform(rng, ranges=None):
    """
    Draw a random invertible affine transform.

    Draw order (fixed for reproducibility): rotation, log scale x, log scale y,
    shear, translation x, translation y. The matrix is rotation @ scale @ shear.

    Args:
        rng (numpy.random.Generator): Seeded generator.
        ranges (TransformRanges, optional): Parameter ranges (defaults: rotation
            +/- pi/6, scale 0.8-1.2 per axis, shear +/- 0.1, translation
            +/- 0.2).

    Returns:
        AffineTransform2D: With |det A| >= 0.64 under the default ranges.
    """
    ranges = ranges or TransformRanges()
    theta = rng.uniform(*ranges.rotation)
    log_sx = rng.uniform(*ranges.log_scale)
    log_sy = rng.uniform(*ranges.log_scale)
    shear = rng.uniform(*ranges.shear)
    tx = rng.uniform(*ranges.translation)
    ty = rng.uniform(*ranges.translation)

    cos, sin = np.cos(theta), np.sin(theta)
    rotation = np.array([[cos, -sin], [sin, cos]])
    scale = np.diag([np.exp(log_sx), np.exp(log_sy)])
    shear_matrix = np.array([[1.0, shear], [0.0, 1.0]])
    return AffineTransform2D(rotation @ scale @ shear_matrix, np.array([tx, ty]))


def invert_affine(A):
    """
    Invert one or many 2 x 2 matrices with the adjugate formula.

    Args:
        A (Tensor or array-like): Shape (..., 2, 2).

    Returns:
        Tensor or numpy.ndarray: Inverses, same type and shape as ``A``.

    Raises:
        SingularAffineError: If any |det| <= 1e-8 (carries the worst det).

    Examples:
        >>> invert_affine([[1., 1.], [0., 1.]])
        array([[ 1., -1.],
               [ 0.,  1.]])
    """
    as_array = not isinstance(A, Tensor)
    A = Tensor(A) if as_array else A
    if A.shape[-2:] != (2, 2):
        raise ShapeError(f"invert_affine expects (..., 2, 2), got {A.shape}")
    a, b = A[..., 0, 0], A[..., 0, 1]
    c, d = A[..., 1, 0], A[..., 1, 1]
    det = a * d - b * c
    det_values = np.atleast_1d(det.data)
    worst = det_values[np.argmin(np.abs(det_values))]
    if not abs(worst) > SINGULAR_DET:
        raise SingularAffineError(worst)
    adjugate = nx.stack([nx.stack([d, -b], axis=-1), nx.stack([-c, a], axis=-1)], axis=-2)
    inverse = adjugate / nx.reshape(det, det.shape + (1, 1))
    return inverse.numpy() if as_array else inverse


def invert_transform(transform):
    """Inverse map p -> A^-1 (p - b)."""
    inv_A = invert_affine(transform.A)
    b = _as_array_or_tensor(transform.b)
    if isinstance(inv_A, Tensor) or isinstance(b, Tensor):
        inv_b = -nx.reshape(nx.matmul(inv_A, nx.reshape(b, (2, 1))), (2,))
    else:
        inv_b = -(inv_A @ b)
    return AffineTransform2D(inv_A, inv_b)


def compose_affine(outer, inner):
    """The transform p -> outer(inner(p))."""
    A1, b1 = _as_array_or_tensor(outer.A), _as_array_or_tensor(outer.b)
    A2, b2 = _as_array_or_tensor(inner.A), _as_array_or_tensor(inner.b)
    if any(isinstance(v, Tensor) for v in (A1, b1, A2, b2)):
        A = nx.matmul(A1, A2)
        b = nx.reshape(nx.matmul(A1, nx.reshape(b2, (2, 1))), (2,)) + b1
        return AffineTransform2D(A, b)
    return AffineTransform2D(A1 @ A2, A1 @ b2 + b1)
