import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenes import frames_from_spec, two_box_spec
from panrecon.fusion import FusionConfig, integrate_frame
from panrecon.geometry import Intrinsics, Pose, unproject
from panrecon.projection import render_ids
from panrecon.synthetic import render
from panrecon.voxel_map import VoxelBlockGrid, VoxelState

INTR = Intrinsics(100.0, 100.0, 160.0, 120.0, 320, 240)


def test_empty_grid_renders_zeros():
    g = VoxelBlockGrid(0.05, 4, (3,))
    r = render_ids(g, Pose.identity(), INTR, np.ones(INTR.shape))
    assert not r.instance_image.any() and not r.class_image.any()


def test_single_voxel_lookup():
    g = VoxelBlockGrid(0.01, 4, (3,))
    coord = g.world_to_voxel(unproject(160, 120, 1.0, INTR)[None])[0]
    g.write_voxel(coord, VoxelState(0.0, 1.0, np.eye(4)[3], 7, 1.0))
    depth = np.zeros(INTR.shape)
    depth[120, 160] = 1.0
    depth[10, 10] = 1.0
    r = render_ids(g, Pose.identity(), INTR, depth)
    assert r.instance_image[120, 160] == 7 and r.class_image[120, 160] == 3
    assert np.count_nonzero(r.instance_image) == 1


def test_unobserved_voxel_reads_zero():
    g = VoxelBlockGrid(0.01, 4, (3,))
    coord = g.world_to_voxel(unproject(160, 120, 1.0, INTR)[None])[0]
    g.write_voxel(coord + [1, 0, 0], VoxelState(0.0, 1.0, np.eye(4)[3], 7, 1.0))
    depth = np.zeros(INTR.shape)
    depth[120, 160] = 1.0
    # same block, weight 0 at the looked-up voxel
    assert render_ids(g, Pose.identity(), INTR, depth).instance_image[120, 160] == 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        render_ids(VoxelBlockGrid(0.05, 2), Pose.identity(), INTR, np.ones((10, 10)))


@pytest.fixture(scope="module")
def box_map():
    spec = two_box_spec(frames=24)
    frames = frames_from_spec(spec, spec.orbit.poses())
    grid = VoxelBlockGrid(0.05, spec.labels.n_classes, spec.labels.thing_classes)
    # fuse with the generator's own instance ids so the map is labeled exactly
    for f, pose in zip(frames, spec.orbit.poses()):
        _, cls, inst = render(spec, pose)
        mapping = {s: int(np.bincount(inst[f.segment_image == s]).argmax()) for s in f.segment_classes}
        integrate_frame(grid, f, mapping, FusionConfig())
    return spec, frames, grid


def test_box_scene_agreement(box_map):
    spec, frames, grid = box_map
    for f in frames[::6]:
        _, _, inst = render(spec, f.pose)
        r = render_ids(grid, f.pose, f.intrinsics, f.depth)
        valid = (f.depth > 0.1) & (f.depth < 8.0)
        agree = np.mean(r.instance_image[valid] == inst[valid])
        assert agree >= 0.95, agree


def test_no_fabrication(box_map):
    spec, frames, grid = box_map
    ids = grid.instance_ids()
    for f in frames[::5]:
        r = render_ids(grid, f.pose, f.intrinsics, f.depth)
        assert set(np.unique(r.instance_image).tolist()) - {0} <= ids


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_locality(seed):
    rng = np.random.default_rng(seed)
    intr = Intrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
    depth = rng.uniform(0.5, 2.0, intr.shape)
    depth[rng.random(intr.shape) < 0.2] = 0
    g = VoxelBlockGrid(0.05, 3, (2,))
    before = render_ids(g, Pose.identity(), intr, depth)
    # a labeled voxel well away from every back-projected point
    far = np.array([[0, 0, -40], [100, 100, 100], [-60, 5, 3]])[rng.integers(0, 3)]
    g.write_voxel(far, VoxelState(0.0, 1.0, np.eye(3)[2], 5, 1.0))
    after = render_ids(g, Pose.identity(), intr, depth)
    np.testing.assert_array_equal(before.instance_image, after.instance_image)
    np.testing.assert_array_equal(before.class_image, after.class_image)
