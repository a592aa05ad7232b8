import numpy as np
import pytest

from motiontools import numerics as nx
from motiontools.dense_motion import (
    DenseMotionConfig,
    attach_background,
    build_dense_motion,
    init_dense_motion_params,
    input_channels,
    mask_predictor_input,
    predict_background,
    predict_masks_occlusion,
    upsample_flow,
    upsample_map,
)
from motiontools.general import ConfigError, ShapeError
from motiontools.geometry import identity_grid
from motiontools.motion_model import MotionSet, background_flow, part_flows
from motiontools.numerics import Tensor, check_gradients

CONFIG = DenseMotionConfig(channels=(4, 4, 4), scale_factor=4, background_channels=(4, 4, 4))
PARTS = 2


def random_set(rng, count=PARTS):
    return MotionSet(
        Tensor(rng.uniform(-0.7, 0.7, size=(count, 2))),
        Tensor(np.eye(2) + rng.normal(scale=0.2, size=(count, 2, 2))),
    )


def source(rng, size=32):
    return Tensor(rng.uniform(size=(3, size, size)))


def test_input_channel_count(rng):
    grid = identity_grid(8, 8)
    src, drv = random_set(rng, 3), random_set(rng, 3)
    flows = part_flows(src, drv, grid)
    features = mask_predictor_input(source(rng, 8), src, drv, flows, grid.as_tensor(), 0.1)
    assert features.shape == (input_channels(3), 8, 8)
    assert input_channels(3) == 4 * 3 + 3


def test_partition_of_unity_and_occlusion_range():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = init_dense_motion_params(rng, PARTS, CONFIG)
        dense = build_dense_motion(params, source(rng), random_set(rng), random_set(rng), CONFIG)
        sums = dense.masks.data.sum(axis=0)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)
        assert dense.masks.data.min() >= 0.0
        assert 0.0 < dense.occlusion.data.min() and dense.occlusion.data.max() < 1.0


def test_zero_heads_give_uniform_masks(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG)
    for head in ("mask", "occlusion"):
        for tensor in params[head].values():
            tensor.assign(np.zeros(tensor.shape))
    features = Tensor(rng.normal(size=(input_channels(PARTS), 8, 8)))
    masks, occlusion = predict_masks_occlusion(params, features)
    np.testing.assert_allclose(masks.data, 1.0 / (PARTS + 1), atol=1e-15)
    np.testing.assert_array_equal(occlusion.data, 0.5)


def test_mask_predictor_requires_divisible_size(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG)
    with pytest.raises(ShapeError):
        predict_masks_occlusion(params, Tensor(np.zeros((input_channels(PARTS), 6, 6))))
    with pytest.raises(ConfigError, match="divisible by 16"):
        build_dense_motion(params, Tensor(np.zeros((3, 24, 24))), random_set(rng), random_set(rng), CONFIG)


def test_fresh_background_predictor_is_identity(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG, background_enabled=True)
    for _ in range(3):
        transform = predict_background(params, source(rng), source(rng))
        np.testing.assert_array_equal(transform.A.data, np.eye(2))
        np.testing.assert_array_equal(transform.b.data, np.zeros(2))


def test_background_predictor_errors(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG)
    with pytest.raises(ConfigError, match="disabled"):
        predict_background(params, source(rng), source(rng))
    enabled = init_dense_motion_params(rng, PARTS, CONFIG, background_enabled=True)
    with pytest.raises(ShapeError):
        predict_background(enabled, source(rng, 32), source(rng, 16))


def test_background_flow_matches_scalar_evaluation(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG, background_enabled=True)
    fc = params["background"]["fc"]
    fc["weight"].assign(rng.normal(scale=0.5, size=fc["weight"].shape))
    src, drv = source(rng), source(rng)
    first = predict_background(params, src, drv)
    again = predict_background(params, src, drv)
    np.testing.assert_array_equal(first.A.data, again.A.data)

    grid = identity_grid(8, 8)
    flow = background_flow(first, grid).data
    A, b = first.numpy()
    for i in range(8):
        for j in range(8):
            x, y = grid.coords[i, j]
            assert flow[i, j, 0] == pytest.approx(A[0, 0] * x + A[0, 1] * y + b[0], abs=1e-12)
            assert flow[i, j, 1] == pytest.approx(A[1, 0] * x + A[1, 1] * y + b[1], abs=1e-12)

    attached = attach_background(params, src, drv, random_set(rng))
    np.testing.assert_array_equal(attached.background.A.data, first.A.data)


def test_self_pair_gives_identity_flow(rng):
    for seed in range(5):
        params = init_dense_motion_params(np.random.default_rng(seed), PARTS, CONFIG)
        motion = random_set(rng)
        dense = build_dense_motion(params, source(rng), motion, motion, CONFIG)
        np.testing.assert_allclose(dense.flow.data, identity_grid(8, 8).coords, atol=1e-6)
        full = upsample_flow(dense.flow, 32, 32).data
        np.testing.assert_allclose(full, identity_grid(32, 32).coords, atol=1e-6)


def test_one_hot_masks_select_part_flow(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG)
    src, drv = random_set(rng), random_set(rng)
    for part in range(PARTS):
        override = np.zeros((PARTS + 1, 8, 8))
        override[part + 1] = 1.0
        dense = build_dense_motion(params, source(rng), src, drv, CONFIG, mask_override=override)
        expected = part_flows(src, drv, identity_grid(8, 8)).data[part]
        np.testing.assert_array_equal(dense.flow.data, expected)
    with pytest.raises(ShapeError):
        build_dense_motion(params, source(rng), src, drv, CONFIG, mask_override=np.zeros((PARTS, 8, 8)))


def test_two_part_flow_matches_per_pixel_oracle(rng):
    params = init_dense_motion_params(rng, PARTS, CONFIG)
    src = MotionSet(Tensor([[0.2, -0.1], [-0.5, 0.4]]), Tensor([[[1.1, 0.2], [0.0, 0.9]], [[0.8, -0.3], [0.1, 1.2]]]))
    drv = MotionSet(Tensor([[0.0, 0.3], [0.4, -0.2]]), Tensor([[[0.9, 0.0], [0.2, 1.0]], [[1.0, 0.4], [-0.2, 0.7]]]))
    dense = build_dense_motion(params, source(rng), src, drv, CONFIG)
    grid = identity_grid(8, 8)
    masks = dense.masks.data
    for i in range(8):
        for j in range(8):
            c = grid.coords[i, j]
            expected = masks[0, i, j] * c
            for k in range(PARTS):
                A_s, A_z = src.affines.data[k], drv.affines.data[k]
                det = A_z[0, 0] * A_z[1, 1] - A_z[0, 1] * A_z[1, 0]
                inv = np.array([[A_z[1, 1], -A_z[0, 1]], [-A_z[1, 0], A_z[0, 0]]]) / det
                expected = expected + masks[k + 1, i, j] * (src.keypoints.data[k] + A_s @ inv @ (c - drv.keypoints.data[k]))
            np.testing.assert_allclose(dense.flow.data[i, j], expected, atol=1e-12)


def test_upsample_map_keeps_constants():
    np.testing.assert_allclose(upsample_map(Tensor(np.full((4, 4), 0.3)), 16, 16).data, 0.3, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_dense_motion_gradients(seed):
    rng = np.random.default_rng(seed)
    base_src, base_drv = random_set(rng), random_set(rng)
    inputs = [
        Tensor(base_src.keypoints.data, requires_grad=True),
        Tensor(base_src.affines.data, requires_grad=True),
        Tensor(base_drv.keypoints.data, requires_grad=True),
        Tensor(base_drv.affines.data, requires_grad=True),
    ]
    image = source(rng, 8)
    config = DenseMotionConfig(channels=(3, 3, 3), scale_factor=1)
    weights = rng.normal(size=(8, 8, 2))
    small_params = init_dense_motion_params(rng, PARTS, config)
    occlusion_weights = rng.normal(size=(8, 8))

    def fn(t_s, a_s, t_z, a_z):
        dense = build_dense_motion(small_params, image, MotionSet(t_s, a_s), MotionSet(t_z, a_z), config)
        return nx.tensor_sum(dense.flow * weights) + nx.tensor_sum(dense.occlusion * occlusion_weights)

    # bilinear sampling is piecewise linear in the flow
    assert check_gradients(fn, inputs) < 1e-3
