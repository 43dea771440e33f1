import math
import re
from importlib import resources

import numpy as np
import pytest

from scenes import two_box_spec
from panrecon.dataset import load_sequence
from panrecon.geometry import Pose
from panrecon.synthetic import (Box, GroundTruthAccumulator, SceneSpecError, generate_synthetic,
                                panoptic_segments, parse_scene, read_gt_segments, render)
from panrecon.voxel_map import read_dump

HEADER = """class 1 wall stuff
class 2 floor stuff
class 3 box thing
room -2.07 -1.93 -0.013 2.11 1.87 2.57 1 2
orbit 0 0 0.3 1.6 1.2 12
voxel_size 0.05
"""


def test_bundled_scene_parses():
    text = resources.files("panrecon").joinpath("scenes/desk.txt").read_text()
    spec = parse_scene(text)
    assert len(spec.objects) == 3
    assert {o.class_id for o in spec.objects} == {3, 4}
    assert spec.orbit.frames == 60


def test_zero_objects_all_stuff(tmp_path):
    spec = parse_scene(HEADER)
    summary = generate_synthetic(spec, tmp_path)
    assert summary.objects == 0
    for f in load_sequence(tmp_path):
        assert set(f.segment_classes.values()) <= {1, 2}
        assert (f.depth > 0).all()


def test_one_box_one_thing_segment(tmp_path):
    spec = parse_scene(HEADER + "box 3 0.0 0.0 0.3 0.4 0.4 0.6\n")
    generate_synthetic(spec, tmp_path)
    for f in load_sequence(tmp_path):
        things = [s for s, c in f.segment_classes.items() if c == 3]
        assert len(things) == 1


def test_wall_depth_matches_ray_plane(tmp_path):
    spec = parse_scene(HEADER)
    # camera at (0, 0, 1) looking along +x: the center ray meets the wall x = 2.11
    pose = Pose.look_at((0.0, 0.0, 1.0), (1.0, 0.0, 1.0))
    depth, cls, _ = render(spec, pose)
    intr = spec.intrinsics
    v, u = 100, 37
    ray = pose.rotation @ np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    t = (2.11 - 0.0) / ray[0]
    assert depth[v, u] == pytest.approx(t, abs=1e-9)
    assert cls[v, u] == 1


def test_floor_label(tmp_path):
    spec = parse_scene(HEADER)
    pose = Pose.look_at((0.0, 0.0, 1.0), (1.0, 0.0, 0.8))
    depth, cls, _ = render(spec, pose)
    assert cls[spec.intrinsics.height - 1, spec.intrinsics.width // 2] == 2
    assert cls[0, spec.intrinsics.width // 2] == 1


def test_roundtrip_poses_and_depth(tmp_path):
    spec = two_box_spec(frames=8)
    generate_synthetic(spec, tmp_path)
    frames = list(load_sequence(tmp_path))
    assert len(frames) == 8
    for f, pose in zip(frames, spec.orbit.poses()):
        np.testing.assert_allclose(f.pose.as_matrix(), pose.as_matrix(), atol=1e-6)
        exact, _, _ = render(spec, pose)
        assert np.abs(f.depth - exact).max() <= 0.0005 + 1e-12


def test_deterministic(tmp_path):
    spec = two_box_spec(frames=6)
    generate_synthetic(spec, tmp_path / "a", seed=3)
    generate_synthetic(spec, tmp_path / "b", seed=3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 6 * 4 + 4
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_seed_shuffles_segment_ids(tmp_path):
    spec = two_box_spec(frames=4)
    generate_synthetic(spec, tmp_path / "a", seed=1)
    generate_synthetic(spec, tmp_path / "b", seed=2)
    a = read_gt_segments(tmp_path / "a" / "gt_segments.txt")
    b = read_gt_segments(tmp_path / "b" / "gt_segments.txt")
    assert a != b
    assert sorted(a[0].values()) == sorted(b[0].values())


def test_gt_volume_labels(tmp_path):
    spec = two_box_spec(frames=8)
    generate_synthetic(spec, tmp_path)
    gt = read_dump(tmp_path / "gt.panvox")
    assert set(gt.class_id.tolist()) == {1, 2, 3}
    assert set(gt.instance_id[gt.class_id == 3].tolist()) == {1, 2}
    assert set(gt.instance_id[gt.class_id != 3].tolist()) == {0}
    # box voxels hug the box surfaces
    centers = (gt.coords + 0.5) * gt.voxel_size
    for k, box in enumerate(spec.objects, 1):
        lo, hi = box.bounds()
        pts = centers[gt.instance_id == k]
        assert np.all(pts >= lo - gt.voxel_size) and np.all(pts <= hi + gt.voxel_size)


def test_accumulator_majority_and_tie():
    acc = GroundTruthAccumulator(1.0)
    p = np.array([[0.5, 0.5, 0.5]] * 5 + [[2.5, 0.5, 0.5]] * 2)
    acc.add(p, np.array([3, 3, 3, 2, 2, 4, 3]), np.array([1, 1, 1, 0, 0, 2, 1]))
    vol = acc.volume(5)
    np.testing.assert_array_equal(vol.coords, [[0, 0, 0], [2, 0, 0]])
    np.testing.assert_array_equal(vol.class_id, [3, 3])
    np.testing.assert_array_equal(vol.instance_id, [1, 1])


def test_panoptic_segments_merge_stuff():
    cls = np.array([[1, 1, 3], [2, 3, 3]])
    inst = np.array([[0, 0, 1], [0, 2, 1]])
    seg, table, gt = panoptic_segments(cls, inst, np.random.default_rng(0))
    assert len(table) == 4
    assert sorted(table.values()) == [1, 2, 3, 3]
    assert seg[0, 0] == seg[0, 1]
    assert seg[0, 2] == seg[1, 2] != seg[1, 1]
    assert gt[seg[1, 1]] == 2 and gt[seg[0, 0]] == 0


@pytest.mark.parametrize("line,message", [
    ("box 3 5.0 0.0 0.3 0.4 0.4 0.4", "object out of bounds"),
    ("box 1 0.0 0.0 0.3 0.4 0.4 0.4", "not a thing class"),
    ("box 3 0.0 0.0 0.3 0.4 0.4", "line 7 (box)"),
    ("sphere 3 0 0 0.3 -1", "radius"),
    ("cone 3 0 0 0", "unknown field"),
    ("voxel_size abc", "voxel_size"),
])
def test_invalid_specs_name_the_field(line, message):
    with pytest.raises(SceneSpecError, match=re.escape(message)):
        parse_scene(HEADER + line + "\n")


def test_camera_outside_room():
    with pytest.raises(SceneSpecError, match="camera leaves the room"):
        parse_scene(HEADER.replace("orbit 0 0 0.3 1.6 1.2 12", "orbit 0 0 0.3 2.5 1.2 12"))


def test_visibility_requirement(tmp_path):
    # a box tucked in a corner behind the orbit is not seen often enough
    spec = parse_scene(HEADER + "box 3 2.0 1.75 0.3 0.2 0.2 0.2\n")
    with pytest.raises(SceneSpecError, match="visible"):
        generate_synthetic(spec, tmp_path)


def test_default_intrinsics_fov():
    spec = parse_scene(HEADER)
    intr = spec.intrinsics
    assert 2 * math.degrees(math.atan(intr.width / 2 / intr.fx)) == pytest.approx(60)


def test_box_bounds():
    lo, hi = Box(3, (0, 0, 1), (2, 4, 2)).bounds()
    np.testing.assert_array_equal(lo, [-1, -2, 0])
    np.testing.assert_array_equal(hi, [1, 2, 2])
