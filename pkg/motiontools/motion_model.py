"""
Motion Model Module

The first-order motion representation. Each object part k carries a keypoint
t^k and a 2 x 2 affine matrix A^k relative to a latent reference pose. A driving
coordinate c is mapped back into the source image by

    T^k(c) = t_S^k + A_S^k (A_Z^k)^-1 (c - t_Z^k)

and the per-part maps are mixed per pixel by (K+1) soft masks, index 0 being
the background map.

Functions:
    part_flow: One part's backward map over a grid
    part_flows: All K parts at once, shape (K, h, w, 2)
    background_flow: A c + b for the background transform (identity when absent)
    dense_flow: Mask-weighted mixture of background and part flows
    transfer_motion: Absolute or relative motion transfer for animation
    motion_set_to_json / motion_set_from_json: Serialization of a MotionSet

Classes:
    PartMotion: One part's (t, A) as plain arrays
    MotionSet: K parts (differentiable Tensors) plus an optional background
    DenseMotion: Flow, masks and occlusion of one source/driving pair

Notes:
    Keypoints are never clamped; out-of-frame keypoints only matter through
    zero-padded sampling.
"""

from dataclasses import dataclass

import numpy as np

from motiontools import numerics as nx
from motiontools.general import ContractError, ShapeError, SingularAffineError, mat_build
from motiontools.geometry import SINGULAR_DET, affine_grid, identity_grid
from motiontools.numerics import Tensor

TRANSFER_MODES = ("absolute", "relative")


@dataclass
class PartMotion:
    """Keypoint ``t`` (2,) and affine ``A`` (2, 2) of one part."""

    t: np.ndarray
    A: np.ndarray


@dataclass
class MotionSet:
    """
    Motion of the K parts of one image.

    Attributes:
        keypoints (Tensor): (K, 2) keypoints in normalized coordinates.
        affines (Tensor): (K, 2, 2) local affine matrices.
        background (AffineTransform2D or None): Background transform, None
            when background motion is not modelled.
    """

    keypoints: Tensor
    affines: Tensor
    background: object = None

    def __post_init__(self):
        if not isinstance(self.keypoints, Tensor):
            self.keypoints = Tensor(self.keypoints)
        if not isinstance(self.affines, Tensor):
            self.affines = Tensor(self.affines)
        count = self.keypoints.shape[0]
        if self.keypoints.shape != (count, 2) or self.affines.shape != (count, 2, 2) or count < 1:
            raise ShapeError(
                f"MotionSet needs keypoints (K,2) and affines (K,2,2) with K >= 1, "
                f"got {self.keypoints.shape} and {self.affines.shape}"
            )

    @property
    def num_parts(self):
        return self.keypoints.shape[0]

    @property
    def parts(self):
        return [PartMotion(self.keypoints.data[k].copy(), self.affines.data[k].copy()) for k in range(self.num_parts)]

    @classmethod
    def from_parts(cls, parts, background=None):
        keypoints = np.stack([np.asarray(p.t, dtype=np.float64) for p in parts])
        affines = np.stack([np.asarray(p.A, dtype=np.float64) for p in parts])
        return cls(Tensor(keypoints), Tensor(affines), background)

    def detach(self):
        background = self.background
        if background is not None:
            A, b = background.numpy()
            background = type(background)(A, b)
        return MotionSet(self.keypoints.detach(), self.affines.detach(), background)


@dataclass
class DenseMotion:
    """
    Dense motion of one source/driving pair.

    Attributes:
        flow (Tensor): (h, w, 2) source sampling coordinates per driving pixel.
        masks (Tensor): (K+1, h, w) partition of unity, index 0 background.
        occlusion (Tensor): (h, w) values in [0, 1].
        part_flows (Tensor or None): (K, h, w, 2) per-part flows, kept for dumps.
    """

    flow: Tensor
    masks: Tensor
    occlusion: Tensor
    part_flows: Tensor = None


def _check_drivable(affines):
    data = affines.data
    dets = data[..., 0, 0] * data[..., 1, 1] - data[..., 0, 1] * data[..., 1, 0]
    dets = np.atleast_1d(dets)
    worst = dets[np.argmin(np.abs(dets))]
    if not abs(worst) > SINGULAR_DET:
        raise SingularAffineError(worst)


def _entries(affines):
    return affines[..., 0, 0], affines[..., 0, 1], affines[..., 1, 0], affines[..., 1, 1]


def part_flows(source_set, driving_set, grid):
    """
    Backward maps of all K parts over a grid.

    Args:
        source_set (MotionSet): Source-frame motion (t_S, A_S).
        driving_set (MotionSet): Driving-frame motion (t_Z, A_Z).
        grid (Grid): Driving-frame coordinates.

    Returns:
        Tensor: (K, h, w, 2) with entry [k, i, j] = T^k(c_ij).

    Raises:
        ShapeError: If the part counts differ.
        SingularAffineError: If any driving affine is singular.
    """
    if source_set.num_parts != driving_set.num_parts:
        raise ShapeError(f"part counts differ: {source_set.num_parts} vs {driving_set.num_parts}")
    _check_drivable(driving_set.affines)
    count = source_set.num_parts
    a, b, c, d = _entries(driving_set.affines)
    det = nx.reshape(a * d - b * c, (count, 1, 1))
    adjugate = nx.stack([nx.stack([d, -b], axis=-1), nx.stack([-c, a], axis=-1)], axis=-2)
    jacobian = nx.matmul(source_set.affines, adjugate / det)

    coords = grid.coords.reshape(1, -1, 2)
    offsets = coords - nx.reshape(driving_set.keypoints, (count, 1, 2))
    mapped = nx.matmul(offsets, nx.swapaxes(jacobian, -1, -2))
    flows = mapped + nx.reshape(source_set.keypoints, (count, 1, 2))
    return nx.reshape(flows, (count, grid.height, grid.width, 2))


def part_flow(source, driving, grid):
    """
    Backward map of a single part: c -> t_S + A_S A_Z^-1 (c - t_Z).

    Args:
        source (PartMotion or MotionSet): Source motion (a one-part MotionSet
            keeps the result differentiable).
        driving (PartMotion or MotionSet): Driving motion.
        grid (Grid): Coordinates to map.

    Returns:
        Tensor: (h, w, 2) flow.

    Examples:
        >>> src = PartMotion(np.array([0.1, 0.2]), np.diag([2.0, 1.0]))
        >>> drv = PartMotion(np.zeros(2), np.eye(2))
        >>> part_flow(src, drv, identity_grid(3, 3)).data[2, 2]
        array([2.1, 1.2])
    """
    if isinstance(source, PartMotion):
        source = MotionSet.from_parts([source])
    if isinstance(driving, PartMotion):
        driving = MotionSet.from_parts([driving])
    return part_flows(source, driving, grid)[0]


def background_flow(transform, grid):
    """T^0(c) = A c + b over the grid, or the identity grid when ``transform`` is None."""
    if transform is None:
        return grid.as_tensor()
    return affine_grid(transform, grid.height, grid.width)


def dense_flow(flows, background, masks):
    """
    Mix the background and part flows with per-pixel mask weights.

    Args:
        flows (Tensor): (K, h, w, 2) part flows.
        background (Tensor): (h, w, 2) background flow.
        masks (Tensor): (K+1, h, w) weights, index 0 for the background.

    Returns:
        Tensor: (h, w, 2) flow equal to sum_k M^k(c) T^k(c).

    Raises:
        ShapeError: If the fields do not share a grid or K does not match.
    """
    flows = flows if isinstance(flows, Tensor) else nx.stack(list(flows))
    count, height, width, _ = flows.shape
    if background.shape != (height, width, 2) or masks.shape != (count + 1, height, width):
        raise ShapeError(
            f"dense_flow: part flows {flows.shape}, background {background.shape} and "
            f"masks {masks.shape} do not agree"
        )
    stacked = nx.concat([nx.reshape(background, (1, height, width, 2)), flows], axis=0)
    weighted = stacked * nx.reshape(masks, (count + 1, height, width, 1))
    return nx.tensor_sum(weighted, axis=0)


def transfer_motion(source_set, driving_set, driving_initial=None, mode="relative"):
    """
    Combine source and driving motion for animation.

    Modes:
        absolute: The driving motion is used as is.
        relative: Per part t = t_src + (t_drv - t_drv0) and
            A = A_drv A_drv0^-1 A_src, so a driving frame equal to the initial
            driving frame reproduces the source motion exactly.

    The driving set's background transform is kept in both modes.

    Raises:
        ContractError: On an unknown mode or a missing ``driving_initial``.
        ShapeError: If part counts differ.
        SingularAffineError: If an initial driving affine is singular.
    """
    if mode not in TRANSFER_MODES:
        raise ContractError(f"unknown transfer mode {mode!r}; expected one of {TRANSFER_MODES}")
    if mode == "absolute":
        return driving_set
    if driving_initial is None:
        raise ContractError("relative transfer needs the initial driving motion")
    counts = {source_set.num_parts, driving_set.num_parts, driving_initial.num_parts}
    if len(counts) != 1:
        raise ShapeError(f"part counts differ across motion sets: {sorted(counts)}")
    _check_drivable(driving_initial.affines)

    a, b, c, d = _entries(driving_set.affines)
    a0, b0, c0, d0 = _entries(driving_initial.affines)
    det0 = a0 * d0 - b0 * c0
    jacobian = nx.stack([
        nx.stack([(a * d0 - b * c0) / det0, (b * a0 - a * b0) / det0], axis=-1),
        nx.stack([(c * d0 - d * c0) / det0, (d * a0 - c * b0) / det0], axis=-1),
    ], axis=-2)
    affines = nx.matmul(jacobian, source_set.affines)
    keypoints = source_set.keypoints + (driving_set.keypoints - driving_initial.keypoints)
    return MotionSet(keypoints, affines, driving_set.background)


def motion_set_to_json(motion_set):
    """Plain JSON form: ``[{"t": [x, y], "A": [[a, b], [c, d]]}, ...]``."""
    return [{"t": part.t.tolist(), "A": part.A.tolist()} for part in motion_set.parts]


def motion_set_from_json(entries, background=None):
    parts = [PartMotion(mat_build((2,), entry["t"]), mat_build((2, 2), entry["A"])) for entry in entries]
    if not parts:
        raise ShapeError("a motion set needs at least one part")
    return MotionSet.from_parts(parts, background)


def identity_motion_set(num_parts):
    """K parts at the origin with identity affines."""
    return MotionSet(Tensor(np.zeros((num_parts, 2))), Tensor(np.tile(np.eye(2), (num_parts, 1, 1))))
