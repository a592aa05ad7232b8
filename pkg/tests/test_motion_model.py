import numpy as np
import pytest

from motiontools import numerics as nx
from motiontools.general import ContractError, ShapeError, SingularAffineError
from motiontools.geometry import AffineTransform2D, identity_grid
from motiontools.motion_model import (
    MotionSet,
    PartMotion,
    background_flow,
    dense_flow,
    identity_motion_set,
    motion_set_from_json,
    motion_set_to_json,
    part_flow,
    part_flows,
    transfer_motion,
)
from motiontools.numerics import Tensor, check_gradients


def random_set(rng, count, background=False):
    affines = rng.normal(scale=0.2, size=(count, 2, 2)) + np.eye(2)
    keypoints = rng.uniform(-0.8, 0.8, size=(count, 2))
    bg = AffineTransform2D(np.eye(2) + rng.normal(scale=0.1, size=(2, 2)), rng.normal(scale=0.1, size=2)) if background else None
    return MotionSet(Tensor(keypoints), Tensor(affines), bg)


def random_masks(rng, count, height, width):
    return nx.softmax(Tensor(rng.normal(size=(count + 1, height, width))), axis=0)


def test_part_flow_examples():
    grid = identity_grid(5, 5)
    src = PartMotion(np.array([0.1, 0.2]), np.diag([2.0, 1.0]))
    drv = PartMotion(np.zeros(2), np.eye(2))
    np.testing.assert_allclose(part_flow(src, drv, grid).data[3, 3], [1.1, 0.7], atol=1e-15)

    same = PartMotion(np.array([0.3, -0.4]), np.array([[1.2, 0.3], [-0.1, 0.9]]))
    np.testing.assert_allclose(part_flow(same, same, grid).data, grid.coords, atol=1e-12)


def test_driving_keypoint_maps_to_source_keypoint():
    grid = identity_grid(5, 5)
    src = PartMotion(np.array([0.25, -0.75]), np.array([[0.7, 0.2], [0.1, 1.3]]))
    drv = PartMotion(np.array([0.5, 0.0]), np.array([[1.1, -0.2], [0.3, 0.8]]))
    np.testing.assert_allclose(part_flow(src, drv, grid).data[2, 3], src.t, atol=1e-15)


def test_part_flow_rejects_singular_driving_affine():
    grid = identity_grid(3, 3)
    src = PartMotion(np.zeros(2), np.eye(2))
    with pytest.raises(SingularAffineError):
        part_flow(src, PartMotion(np.zeros(2), np.zeros((2, 2))), grid)


def test_part_flows_reject_mismatched_part_counts(rng):
    with pytest.raises(ShapeError):
        part_flows(random_set(rng, 2), random_set(rng, 3), identity_grid(4, 4))


def test_dense_flow_examples(rng):
    grid = identity_grid(4, 6)
    coords = grid.coords
    single = Tensor(rng.uniform(-1, 1, size=(1, 4, 6, 2)))
    masks = Tensor(np.stack([np.zeros((4, 6)), np.ones((4, 6))]))
    np.testing.assert_array_equal(dense_flow(single, grid.as_tensor(), masks).data, single.data[0])

    flows = Tensor(np.stack([coords + [1.0, 0.0], coords + [0.0, 1.0]]))
    halves = Tensor(np.stack([np.zeros((4, 6)), np.full((4, 6), 0.5), np.full((4, 6), 0.5)]))
    np.testing.assert_allclose(dense_flow(flows, grid.as_tensor(), halves).data, coords + 0.5, atol=1e-15)

    static = Tensor(np.stack([np.ones((4, 6)), np.zeros((4, 6)), np.zeros((4, 6))]))
    np.testing.assert_array_equal(dense_flow(flows, background_flow(None, grid), static).data, coords)


def test_dense_flow_shape_mismatch(rng):
    grid = identity_grid(4, 4)
    flows = Tensor(np.zeros((2, 4, 4, 2)))
    with pytest.raises(ShapeError):
        dense_flow(flows, grid.as_tensor(), Tensor(np.ones((2, 4, 4))))


@pytest.mark.parametrize("count", [1, 2, 3])
def test_flow_assembly_matches_per_pixel_oracle(count):
    rng = np.random.default_rng(count)
    grid = identity_grid(8, 8)
    src, drv = random_set(rng, count), random_set(rng, count, background=True)
    masks = random_masks(rng, count, 8, 8)
    flow = dense_flow(part_flows(src, drv, grid), background_flow(drv.background, grid), masks).data

    bg_A, bg_b = drv.background.numpy()
    for i in range(8):
        for j in range(8):
            x, y = grid.coords[i, j]
            m = masks.data[:, i, j]
            fx = m[0] * (bg_A[0, 0] * x + bg_A[0, 1] * y + bg_b[0])
            fy = m[0] * (bg_A[1, 0] * x + bg_A[1, 1] * y + bg_b[1])
            for k in range(count):
                (a, b), (c, d) = drv.affines.data[k]
                det = a * d - b * c
                ux, uy = x - drv.keypoints.data[k, 0], y - drv.keypoints.data[k, 1]
                vx, vy = (d * ux - b * uy) / det, (-c * ux + a * uy) / det
                (p, q), (r, s) = src.affines.data[k]
                fx += m[k + 1] * (src.keypoints.data[k, 0] + p * vx + q * vy)
                fy += m[k + 1] * (src.keypoints.data[k, 1] + r * vx + s * vy)
            assert abs(flow[i, j, 0] - fx) <= 1e-12
            assert abs(flow[i, j, 1] - fy) <= 1e-12


def test_self_reconstruction_under_any_masks(rng):
    grid = identity_grid(6, 6)
    for count in (1, 3, 10):
        motion = random_set(rng, count)
        flow = dense_flow(part_flows(motion, motion, grid), background_flow(None, grid), random_masks(rng, count, 6, 6))
        np.testing.assert_allclose(flow.data, grid.coords, atol=1e-9)


def test_dense_flow_superposition(rng):
    masks = random_masks(rng, 2, 5, 5)
    background = Tensor(np.zeros((5, 5, 2)))
    f, g = Tensor(rng.normal(size=(2, 5, 5, 2))), Tensor(rng.normal(size=(2, 5, 5, 2)))
    combined = dense_flow(f * 2.0 + g * -3.0, background, masks).data
    expected = 2.0 * dense_flow(f, background, masks).data - 3.0 * dense_flow(g, background, masks).data
    np.testing.assert_allclose(combined, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_part_flow_gradients(seed):
    rng = np.random.default_rng(seed)
    grid = identity_grid(4, 5)
    base_src, base_drv = random_set(rng, 2), random_set(rng, 2)
    inputs = [
        Tensor(base_src.keypoints.data, requires_grad=True),
        Tensor(base_src.affines.data, requires_grad=True),
        Tensor(base_drv.keypoints.data, requires_grad=True),
        Tensor(base_drv.affines.data, requires_grad=True),
        Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True),
    ]
    weights = rng.normal(size=(4, 5, 2))

    def fn(t_s, a_s, t_z, a_z, logits):
        flows = part_flows(MotionSet(t_s, a_s), MotionSet(t_z, a_z), grid)
        flow = dense_flow(flows, background_flow(None, grid), nx.softmax(logits, axis=0))
        return nx.tensor_sum(flow * weights)

    assert check_gradients(fn, inputs) < 1e-4


def test_transfer_relative_without_motion_returns_source_exactly(rng):
    source, initial = random_set(rng, 4), random_set(rng, 4)
    out = transfer_motion(source, initial, initial, "relative")
    np.testing.assert_array_equal(out.keypoints.data, source.keypoints.data)
    np.testing.assert_array_equal(out.affines.data, source.affines.data)


def test_transfer_absolute_passes_driving_through(rng):
    source, driving = random_set(rng, 3), random_set(rng, 3, background=True)
    assert transfer_motion(source, driving, mode="absolute") is driving


def test_transfer_relative_keypoint_shift(rng):
    source, initial = random_set(rng, 2), random_set(rng, 2)
    delta = np.array([[0.1, -0.05], [0.0, 0.0]])
    driving = MotionSet(Tensor(initial.keypoints.data + delta), initial.affines, initial.background)
    out = transfer_motion(source, driving, initial, "relative")
    np.testing.assert_allclose(out.keypoints.data, source.keypoints.data + delta, atol=1e-15)
    np.testing.assert_array_equal(out.affines.data, source.affines.data)


def test_transfer_relative_matches_matrix_formula(rng):
    source, driving, initial = random_set(rng, 3), random_set(rng, 3, background=True), random_set(rng, 3)
    out = transfer_motion(source, driving, initial, "relative")
    expected = driving.affines.data @ np.linalg.inv(initial.affines.data) @ source.affines.data
    np.testing.assert_allclose(out.affines.data, expected, atol=1e-12)
    assert out.background is driving.background


def test_transfer_errors(rng):
    source = random_set(rng, 2)
    with pytest.raises(ContractError):
        transfer_motion(source, source, source, mode="sideways")
    with pytest.raises(ContractError):
        transfer_motion(source, source, None, mode="relative")
    singular = MotionSet(source.keypoints, Tensor(np.zeros((2, 2, 2))))
    with pytest.raises(SingularAffineError):
        transfer_motion(source, source, singular, mode="relative")


def test_motion_set_validation_and_json(rng):
    with pytest.raises(ShapeError):
        MotionSet(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2, 2))))
    motion = random_set(rng, 3)
    restored = motion_set_from_json(motion_set_to_json(motion))
    np.testing.assert_array_equal(restored.keypoints.data, motion.keypoints.data)
    np.testing.assert_array_equal(restored.affines.data, motion.affines.data)
    assert motion_set_to_json(identity_motion_set(1)) == [{"t": [0.0, 0.0], "A": [[1.0, 0.0], [0.0, 1.0]]}]
