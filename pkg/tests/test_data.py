import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from monoindoor.data import (
    ImageSizeMismatchError,
    MissingIntrinsicsError,
    NonContiguousFramesError,
    SequenceLoadError,
    SyntheticSceneConfig,
    decode_depth,
    encode_depth,
    generate_synthetic_scene,
    load_sequence,
    read_sequence,
    render_sequence,
    write_sequence,
)
from monoindoor.geometry import RigidTransform, relative_transform, synthesize_view
from monoindoor.losses import depth_consistency_loss

TRAJECTORIES = ("dolly", "orbit", "handheld")


def small(**kw):
    args = dict(frames=6, width=32, height=24)
    args.update(kw)
    return SyntheticSceneConfig(**args)


def batched(t):
    return RigidTransform(t.rotation[None], t.translation[None])


def chw(img):
    return torch.tensor(img).permute(2, 0, 1)[None]


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "bad",
    [dict(room_width=0.0), dict(room_height=-1.0), dict(room_depth=0.0), dict(trajectory="spiral"), dict(frames=0),
     dict(n_boxes=4)],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        render_sequence(small(**bad))


def test_default_intrinsics():
    k = SyntheticSceneConfig().intrinsics()
    assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == pytest.approx((76.8, 76.8, 47.5, 47.5, 96, 96), abs=1e-12)


# ---------------------------------------------------------------- rendering


def test_dolly_wall_depth_at_principal_pixel():
    cfg = SyntheticSceneConfig(trajectory="dolly", n_boxes=0, start_distance=3.0, step=0.5, frames=2, width=9, height=9)
    seq = render_sequence(cfg)
    assert seq.depths[0][4, 4] == 3.0
    assert seq.depths[1][4, 4] == 2.5


def test_same_seed_is_bitwise_identical():
    a = render_sequence(small(trajectory="handheld", seed=3))
    b = render_sequence(small(trajectory="handheld", seed=3))
    for x, y in zip(a.images + a.depths + a.poses, b.images + b.depths + b.poses):
        assert np.array_equal(x, y)
    c = render_sequence(small(trajectory="handheld", seed=4))
    assert not np.array_equal(a.images[0], c.images[0])


def test_rendering_independent_of_workers():
    a = render_sequence(small(trajectory="orbit", seed=2))
    b = render_sequence(small(trajectory="orbit", seed=2), workers=3)
    for x, y in zip(a.images + a.depths, b.images + b.depths):
        assert np.array_equal(x, y)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), trajectory=st.sampled_from(TRAJECTORIES), n_boxes=st.integers(0, 3))
def test_scene_invariants(seed, trajectory, n_boxes):
    cfg = small(seed=seed, trajectory=trajectory, n_boxes=n_boxes, frames=8)
    seq = render_sequence(cfg)
    diagonal = np.sqrt(cfg.room_width**2 + cfg.room_height**2 + cfg.room_depth**2)
    for d, img in zip(seq.depths, seq.images):
        assert d.min() >= 0.1 and d.max() <= diagonal
        assert img.min() >= 0 and img.max() <= 1
    for a, b in zip(seq.poses[:-1], seq.poses[1:]):
        assert float(relative_transform(a, b).rotation_angle()) < np.pi / 2


@pytest.mark.parametrize("trajectory", TRAJECTORIES)
def test_renderer_and_warper_agree(trajectory):
    seq = render_sequence(SyntheticSceneConfig(trajectory=trajectory, frames=4, seed=1))
    k = seq.intrinsics
    for t, s in ((1, 0), (1, 2), (2, 3)):
        tr = batched(relative_transform(seq.poses[t], seq.poses[s]))
        synth, grid = synthesize_view(chw(seq.images[s]), torch.tensor(seq.depths[t])[None], tr, k)
        err = (synth - chw(seq.images[t])).abs().mean(1)[grid.valid]
        assert grid.valid.float().mean() > 0.5
        assert float(err.mean()) < 0.01


@pytest.mark.parametrize("trajectory", TRAJECTORIES)
def test_ground_truth_depths_are_multiview_consistent(trajectory):
    seq = render_sequence(SyntheticSceneConfig(trajectory=trajectory, frames=5, seed=2))
    for t in range(len(seq) - 1):
        tr = batched(relative_transform(seq.poses[t], seq.poses[t + 1]))
        dt = torch.tensor(seq.depths[t])[None]
        ds = torch.tensor(seq.depths[t + 1])[None]
        assert float(depth_consistency_loss(dt, ds, tr, seq.intrinsics)) < 0.01


def test_generate_synthetic_scene_has_full_ground_truth():
    samples = generate_synthetic_scene(small(frames=5))
    assert [s.frame_ids for s in samples] == [(0, 1, 2), (1, 2, 3), (2, 3, 4)]
    for s in samples:
        assert s.gt_depth is not None and len(s.gt_poses) == 3 and len(s.sources) == 2
        assert s.target.shape == s.sources[0].shape == s.sources[1].shape
        assert s.gt_depth.shape == s.target.shape[:2]


def test_endpoints_are_not_targets():
    seq = render_sequence(small(frames=4))
    with pytest.raises(IndexError):
        seq.samples([0])
    with pytest.raises(IndexError):
        seq.samples([3])


# ---------------------------------------------------------------- disk format


def test_depth_encoding_arithmetic():
    assert decode_depth(np.array([2500], dtype=np.uint16))[0] == 2.5
    assert encode_depth(np.array([2.5]))[0] == 2500


def test_sixteen_bit_png_depth_is_read_in_metres(tmp_path):
    seq = render_sequence(small(frames=3))
    root = write_sequence(seq, tmp_path / "seq")
    Image.fromarray(np.full((24, 32), 2500, dtype=np.uint16)).save(root / "depth" / "000001.png")
    assert np.all(read_sequence(root).depths[1] == 2.5)


def test_five_frames_give_three_samples(tmp_path):
    root = write_sequence(render_sequence(small(frames=5)), tmp_path / "seq")
    samples = load_sequence(root)
    assert [s.frame_ids[1] for s in samples] == [1, 2, 3]


def test_round_trip(tmp_path):
    seq = render_sequence(small(trajectory="handheld", frames=5, seed=7))
    back = read_sequence(write_sequence(seq, tmp_path / "seq"))
    assert back.intrinsics == seq.intrinsics
    for a, b in zip(seq.images, back.images):
        assert np.abs(a - b).max() <= 1 / 255
    for a, b in zip(seq.depths, back.depths):
        assert np.abs(a - b).max() <= 1e-3
    for a, b in zip(seq.poses, back.poses):
        assert np.array_equal(a, b)


def test_temporal_stride(tmp_path):
    root = write_sequence(render_sequence(small(frames=25)), tmp_path / "seq")
    seq = read_sequence(root, temporal_stride=10)
    assert len(seq) == 3
    full = read_sequence(root)
    assert np.array_equal(seq.images[2], full.images[20])
    assert np.array_equal(seq.poses[1], full.poses[10])


def test_external_sequence_without_ground_truth(tmp_path):
    root = write_sequence(render_sequence(small(frames=3)), tmp_path / "seq")
    shutil.rmtree(root / "depth")
    (root / "poses.txt").unlink()
    samples = load_sequence(root)
    assert samples[0].gt_depth is None and samples[0].gt_poses is None


@pytest.fixture
def written(tmp_path):
    return write_sequence(render_sequence(small(frames=4)), tmp_path / "seq")


def test_missing_intrinsics(written):
    (written / "intrinsics.txt").unlink()
    with pytest.raises(MissingIntrinsicsError):
        read_sequence(written)


def test_mismatched_image_sizes(written):
    Image.fromarray(np.zeros((10, 10, 3), dtype=np.uint8)).save(written / "rgb" / "000002.png")
    with pytest.raises(ImageSizeMismatchError):
        read_sequence(written)


def test_non_contiguous_frames(written):
    (written / "rgb" / "000001.png").rename(written / "rgb" / "000007.png")
    with pytest.raises(NonContiguousFramesError):
        read_sequence(written)


def test_load_errors_are_distinct():
    kinds = {MissingIntrinsicsError, ImageSizeMismatchError, NonContiguousFramesError}
    assert len(kinds) == 3
    for kind in kinds:
        assert issubclass(kind, SequenceLoadError)
        assert not any(issubclass(kind, other) for other in kinds - {kind})
