import json

import numpy as np
import pytest

from motiontools import evaluation
from motiontools.data import SceneSpec, Video, generate_dataset
from motiontools.evaluation import (
    COVERAGE_RADIUS,
    animate,
    attention_images,
    compute_metrics,
    dump_attention,
    dump_motion,
    evaluate_dataset,
    match_keypoints,
    reconstruct,
    write_frames,
    write_report,
)
from motiontools.general import CheckpointMismatchError, ContractError, ShapeError
from motiontools.geometry import identity_grid
from motiontools.model import estimate
from motiontools.motion_model import MotionSet, motion_set_from_json
from motiontools.numerics import Tensor


@pytest.fixture
def clip():
    return generate_dataset(0, 1, SceneSpec(size=32, frames=3, num_parts=2, supersample=1)).videos[0]


def test_identical_videos_score_zero(rng):
    frames = rng.uniform(size=(2, 3, 16, 16))
    report = compute_metrics(frames, frames.copy())
    assert report.l1 == 0.0
    assert report.aed_sub == 0.0
    assert report.akd_px is None and report.coverage_rate is None
    assert report.notes


def test_akd_ignores_keypoint_order(rng):
    frames = np.zeros((4, 3, 16, 16))
    centroids = rng.uniform(-0.8, 0.8, size=(4, 3, 2))
    keypoints = centroids[:, [2, 0, 1]]
    report = compute_metrics(frames, frames, keypoints, {"centroids": centroids})
    assert report.akd_px == pytest.approx(0.0, abs=1e-12)
    assert report.coverage_rate == 1.0
    assert report.notes == []


def test_akd_in_pixels():
    frames = np.zeros((1, 3, 31, 31))
    centroids = np.array([[[0.0, 0.0]]])
    # 3 px at (W - 1) / 2 = 15 px per normalized unit
    keypoints = np.array([[[0.2, 0.0]]])
    report = compute_metrics(frames, frames, keypoints, {"centroids": centroids})
    assert report.akd_px == pytest.approx(3.0, abs=1e-12)
    assert report.coverage_rate == 1.0


def test_matching_is_fixed_on_first_frame():
    frames = np.zeros((2, 3, 9, 9))
    centroids = np.array([[[-0.5, 0.0], [0.5, 0.0]], [[-0.5, 0.0], [0.5, 0.0]]])
    # keypoints swap identities in the second frame
    keypoints = np.array([[[-0.5, 0.0], [0.5, 0.0]], [[0.5, 0.0], [-0.5, 0.0]]])
    report = compute_metrics(frames, frames, keypoints, {"centroids": centroids})
    assert report.akd_px == pytest.approx(0.5 * 1.0 * 4.0)
    assert report.coverage_rate == 0.5
    assert COVERAGE_RADIUS == 0.25


def test_match_keypoints_uses_smaller_side():
    rows, cols = match_keypoints(np.array([[0.0, 0.0], [1.0, 1.0], [0.9, 0.9]]), np.array([[1.0, 1.0], [0.1, 0.0]]))
    assert sorted(zip(rows.tolist(), cols.tolist())) == [(0, 1), (1, 0)]


def test_metric_errors(rng):
    with pytest.raises(ShapeError):
        compute_metrics(np.zeros((2, 3, 8, 8)), np.zeros((3, 3, 8, 8)))
    with pytest.raises(ShapeError):
        compute_metrics(np.zeros((2, 3, 8, 8)), np.zeros((2, 3, 8, 8)), np.zeros((3, 1, 2)), {"centroids": np.zeros((2, 1, 2))})


def test_metrics_are_deterministic(rng):
    a, b = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
    first, second = compute_metrics(a, b), compute_metrics(a, b)
    assert first.aed_sub == second.aed_sub > 0.0


def test_untrained_reconstruction_uses_identity_flow(tiny_model, clip):
    rendering = reconstruct(tiny_model, clip, keep_flows=True)
    assert rendering.frames.shape == clip.frames.shape
    assert rendering.keypoints.shape == (3, 3, 2)
    for flow in rendering.flows:
        np.testing.assert_allclose(flow, identity_grid(8, 8).coords, atol=1e-6)
    # with identity motion every frame is rendered from the source alone
    np.testing.assert_allclose(rendering.frames[1], rendering.frames[0], atol=1e-12)


def test_keypoints_are_detected_on_generated_frames(monkeypatch, tiny_model, clip):
    real_estimate = evaluation.estimate

    def brightness_estimate(model, image):
        # keypoints encode the mean intensity of the image they were detected on
        motion, maps = real_estimate(model, image)
        level = np.full(motion.keypoints.shape, float(np.mean(image.data)))
        return MotionSet(level, motion.affines, motion.background), maps

    def flat_generate(params, source, dense, config):
        return Tensor(np.full(source.shape, 0.25))

    monkeypatch.setattr(evaluation, "estimate", brightness_estimate)
    monkeypatch.setattr(evaluation, "generate", flat_generate)
    rendering = reconstruct(tiny_model, clip)
    np.testing.assert_allclose(rendering.keypoints, 0.25, atol=1e-12)
    expected = clip.frames.mean(axis=(1, 2, 3))
    np.testing.assert_allclose(rendering.driving_keypoints, np.broadcast_to(expected[:, None, None], (3, 3, 2)), atol=1e-12)


def test_reconstruct_rejects_wrong_frame_size(tiny_model):
    with pytest.raises(CheckpointMismatchError):
        reconstruct(tiny_model, Video("small", np.zeros((2, 3, 16, 16))))


def test_animation_modes(tiny_model, clip, image):
    relative = animate(tiny_model, image, clip, mode="relative")
    absolute = animate(tiny_model, image, clip.frames, mode="absolute")
    assert relative.frames.shape == (3, 3, 32, 32)
    # identity motion everywhere makes both modes coincide
    np.testing.assert_allclose(relative.frames, absolute.frames, atol=1e-12)
    with pytest.raises(ContractError):
        animate(tiny_model, image, clip, mode="sideways")


def test_evaluate_dataset_and_report(tmp_path, tiny_model):
    dataset = generate_dataset(1, 2, SceneSpec(size=32, frames=2, num_parts=2, supersample=1))
    report = evaluate_dataset(tiny_model, dataset)
    assert [row["video"] for row in report.per_video] == ["video_0000", "video_0001"]
    assert report.l1 == pytest.approx(np.mean([row["L1"] for row in report.per_video]))
    assert report.akd_px is not None and report.akd_px >= 0.0
    assert 0.0 <= report.coverage_rate <= 1.0

    path = write_report(report, tmp_path / "report.json")
    content = json.loads(path.read_text())
    assert set(content) == {"L1", "AKD_px", "coverage_rate", "AED_sub", "notes", "per_video"}


def test_attention_images_shape(tiny_model, image):
    _, maps = estimate(tiny_model, image)
    images = attention_images(maps, 32, 32)
    assert images.shape == (2, 3, 32, 32)
    assert np.all(images >= 0.0)


def test_dump_attention_writes_files(tmp_path, tiny_model, image):
    written = dump_attention(tiny_model, image, tmp_path / "attn")
    assert [p.name for p in written] == ["layer_00.png", "layer_01.png", "overview.png"]
    assert all(p.stat().st_size > 0 for p in written)


def test_dump_motion_writes_json_and_heatmaps(tmp_path, tiny_model, image):
    written = dump_motion(tiny_model, image, tmp_path / "motion.json")
    names = [p.name for p in written]
    assert names[0] == "motion.json"
    assert names[1:] == [f"motion_mask_{k:02d}.png" for k in range(4)] + ["motion_occlusion.png"]
    restored = motion_set_from_json(json.loads(written[0].read_text()))
    np.testing.assert_array_equal(restored.affines.data, np.tile(np.eye(2), (3, 1, 1)))
    with pytest.raises(ContractError):
        dump_motion(tiny_model, image, tmp_path / "motion.txt")


def test_write_frames(tmp_path, rng):
    out = write_frames(rng.uniform(size=(2, 3, 8, 8)), tmp_path / "frames")
    assert sorted(p.name for p in out.iterdir()) == ["frame_00000.png", "frame_00001.png"]
