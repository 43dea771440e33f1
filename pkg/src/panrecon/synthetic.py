"""Synthetic room scenes with exact depth, panoptic labels and ground truth.

Scenes are described in a small line-oriented text format::

    class 1 wall stuff
    class 2 floor stuff
    class 3 box thing
    room -2 -2 0 2 2 2.5 1 2      # min xyz, max xyz, wall class, floor class
    camera 277.13 277.13 159.5 119.5 320 240
    orbit 0 0 0.3 1.8 1.4 60      # look-at center xyz, radius, height, frames
    voxel_size 0.05
    box 3 -0.6 0.3 0.25 0.5 0.5 0.5      # class, center xyz, size xyz
    sphere 4 0.1 -0.6 0.3 0.3            # class, center xyz, radius

The room is an axis-aligned box seen from inside; its bottom face is the
floor and the ceiling is labeled with the wall class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    LabelClass,
    LabelMap,
    frame_name,
    write_intrinsics,
    write_png16,
    write_pose,
    write_segment_classes,
)
from .geometry import Intrinsics, Pose, pixel_rays
from .voxel_map import VoxelDump, decode_keys, encode_coords, write_dump


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def bounds(self):
        c, h = np.array(self.center), np.array(self.size) / 2
        return c - h, c + h


@dataclass(frozen=True)
class Sphere:
    class_id: int
    center: tuple[float, float, float]
    radius: float

    def bounds(self):
        c = np.array(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Orbit:
    center: tuple[float, float, float]
    radius: float
    height: float
    frames: int
    start_angle: float = 0.0

    def poses(self) -> list[Pose]:
        out = []
        for k in range(self.frames):
            a = self.start_angle + 2 * math.pi * k / self.frames
            eye = (self.center[0] + self.radius * math.cos(a), self.center[1] + self.radius * math.sin(a), self.height)
            out.append(Pose.look_at(eye, self.center))
        return out


@dataclass
class SceneSpec:
    labels: LabelMap
    room: tuple[tuple[float, float, float], tuple[float, float, float]] | None
    wall_class: int = 0
    floor_class: int = 0
    objects: list = field(default_factory=list)
    orbit: Orbit | None = None
    intrinsics: Intrinsics = field(default_factory=lambda: default_intrinsics())
    voxel_size: float = 0.05
    min_visible_fraction: float = 0.8

    def validate(self) -> None:
        things = self.labels.thing_classes
        if self.room is not None:
            lo, hi = (np.array(b) for b in self.room)
            for name, cid in (("wall", self.wall_class), ("floor", self.floor_class)):
                if cid not in self.labels.stuff_classes:
                    raise SceneSpecError(f"room: {name} class {cid} is not a stuff class")
        for k, obj in enumerate(self.objects):
            if obj.class_id not in things:
                raise SceneSpecError(f"object {k}: class {obj.class_id} is not a thing class")
            if self.room is not None:
                olo, ohi = obj.bounds()
                if np.any(olo < lo - 1e-9) or np.any(ohi > hi + 1e-9):
                    raise SceneSpecError(f"object {k}: object out of bounds")
        if self.orbit is None or self.orbit.frames < 1:
            raise SceneSpecError("orbit: at least one frame required")
        if self.voxel_size <= 0:
            raise SceneSpecError("voxel_size: must be positive")
        if self.room is not None:
            for pose in self.orbit.poses():
                if np.any(pose.translation <= lo) or np.any(pose.translation >= hi):
                    raise SceneSpecError("orbit: camera leaves the room")


def default_intrinsics(width: int = 320, height: int = 240, hfov_deg: float = 60.0) -> Intrinsics:
    f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def _floats(parts, n, field_name):
    if len(parts) != n:
        raise SceneSpecError(f"{field_name}: expected {n} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise SceneSpecError(f"{field_name}: non-numeric value in {' '.join(parts)!r}") from None


def parse_scene(text: str) -> SceneSpec:
    classes, objects = [], []
    room = None
    wall = floor = 0
    orbit = None
    intr = default_intrinsics()
    voxel_size = 0.05
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *parts = line.split()
        where = f"line {lineno} ({key})"
        if key == "class":
            if len(parts) != 3 or parts[2] not in ("thing", "stuff"):
                raise SceneSpecError(f"{where}: expected 'class <id> <name> thing|stuff'")
            classes.append(LabelClass(int(parts[0]), parts[1], parts[2] == "thing"))
        elif key == "room":
            v = _floats(parts, 8, where)
            room, wall, floor = (tuple(v[:3]), tuple(v[3:6])), int(v[6]), int(v[7])
            if any(b <= a for a, b in zip(*room)):
                raise SceneSpecError(f"{where}: room max corner must exceed min corner")
        elif key == "camera":
            v = _floats(parts, 6, where)
            try:
                intr = Intrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))
            except ValueError as exc:
                raise SceneSpecError(f"{where}: {exc}") from None
        elif key == "orbit":
            v = _floats(parts, 6, where)
            if v[3] <= 0 or int(v[5]) < 1:
                raise SceneSpecError(f"{where}: radius and frame count must be positive")
            orbit = Orbit(tuple(v[:3]), v[3], v[4], int(v[5]))
        elif key == "voxel_size":
            voxel_size = _floats(parts, 1, where)[0]
        elif key == "box":
            v = _floats(parts, 7, where)
            if min(v[4:]) <= 0:
                raise SceneSpecError(f"{where}: box size must be positive")
            objects.append(Box(int(v[0]), tuple(v[1:4]), tuple(v[4:7])))
        elif key == "sphere":
            v = _floats(parts, 5, where)
            if v[4] <= 0:
                raise SceneSpecError(f"{where}: radius must be positive")
            objects.append(Sphere(int(v[0]), tuple(v[1:4]), v[4]))
        else:
            raise SceneSpecError(f"{where}: unknown field {key!r}")
    try:
        labels = LabelMap(classes)
    except ValueError as exc:
        raise SceneSpecError(f"class: {exc}") from None
    spec = SceneSpec(labels, room, wall, floor, objects, orbit, intr, voxel_size)
    spec.validate()
    return spec


def read_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text(encoding="utf-8"))


# -- ray casting --------------------------------------------------------------


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    return np.where((tmin <= tmax) & (tmin > 0), tmin, np.inf)


def _hit_sphere(o, d, c, r):
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * np.einsum("ij,ij->i", d, oc)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0))
    t = (-b - sq) / (2 * a)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _exit_room(o, d, lo, hi):
    """Distance to the inside wall and the axis/side that stops the ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d > 0, (hi - o) / d, np.where(d < 0, (lo - o) / d, np.inf))
    axis = np.argmin(t, axis=1)
    return t[np.arange(len(t)), axis], axis


def render(scene: SceneSpec, pose: Pose, intr: Intrinsics | None = None):
    """Exact z-depth, class and ground-truth instance images seen from `pose`.

    Instance values are object index + 1 for things and 0 for stuff; pixels
    that hit nothing have depth 0 and class 0.
    """
    intr = intr or scene.intrinsics
    rays = pixel_rays(intr).reshape(-1, 3)
    # unit-z camera rays: the ray parameter equals camera depth
    d = rays @ pose.rotation.T
    o = np.broadcast_to(pose.translation, d.shape)
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    cls = np.zeros(n, dtype=np.int64)
    inst = np.zeros(n, dtype=np.int64)
    if scene.room is not None:
        lo, hi = (np.array(b) for b in scene.room)
        t, axis = _exit_room(o, d, lo, hi)
        best_t = t
        is_floor = (axis == 2) & (d[:, 2] < 0)
        cls = np.where(is_floor, scene.floor_class, scene.wall_class).astype(np.int64)
    for k, obj in enumerate(scene.objects):
        if isinstance(obj, Box):
            lo_b, hi_b = obj.bounds()
            t = _hit_box(o, d, lo_b, hi_b)
        else:
            t = _hit_sphere(o, d, np.array(obj.center), obj.radius)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        cls[closer] = obj.class_id
        inst[closer] = k + 1
    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t, 0.0)
    cls[~hit] = 0
    shape = intr.shape
    return depth.reshape(shape), cls.reshape(shape), inst.reshape(shape)


# -- generation ---------------------------------------------------------------


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    mm = np.rint(depth * 1000.0)
    return np.where((mm > 0) & (mm <= 65535), mm, 0).astype(np.uint16)


def panoptic_segments(cls_img, inst_img, rng):
    """Relabel (class, instance) regions with shuffled local segment ids.

    Stuff regions merge per class. Returns (segment image, class table,
    {segment id: gt instance}).
    """
    code = cls_img.astype(np.int64) * 65536 + inst_img
    code[cls_img == 0] = 0
    regions = np.unique(code)
    regions = regions[regions != 0]
    ids = rng.permutation(len(regions)) + 1
    lut = dict(zip(regions.tolist(), ids.tolist()))
    seg = np.zeros(code.shape, dtype=np.int64)
    table, gt = {}, {}
    for region, sid in lut.items():
        seg[code == region] = sid
        table[sid] = region // 65536
        gt[sid] = region % 65536
    return seg, table, gt


def _count_pairs(keys, labels, weights=None):
    """Distinct (key, label) pairs with summed weights, sorted by key then label."""
    order = np.lexsort((labels, keys))
    keys, labels = keys[order], labels[order]
    w = np.ones(len(keys)) if weights is None else weights[order]
    start = np.ones(len(keys), dtype=bool)
    start[1:] = (keys[1:] != keys[:-1]) | (labels[1:] != labels[:-1])
    first = np.flatnonzero(start)
    return keys[first], labels[first], np.add.reduceat(w, first) if len(first) else w[:0]


class GroundTruthAccumulator:
    """Majority-vote voxelization of labeled surface points."""

    # label code = class * LABEL_SPAN + instance; ordering by code is ordering by (class, instance)
    LABEL_SPAN = 1 << 20

    def __init__(self, voxel_size: float):
        self.voxel_size = voxel_size
        self._parts = []

    def add(self, points, cls, inst):
        coords = np.floor(np.asarray(points) / self.voxel_size).astype(np.int64)
        labels = np.asarray(cls, dtype=np.int64) * self.LABEL_SPAN + np.asarray(inst, dtype=np.int64)
        self._parts.append(_count_pairs(encode_coords(coords), labels))

    def volume(self, n_classes: int) -> VoxelDump:
        if not self._parts:
            return VoxelDump(self.voxel_size, n_classes)
        keys, labels, votes = _count_pairs(*(np.concatenate(x) for x in zip(*self._parts)))
        # within a voxel pairs are ordered by label; a stable sort on -votes keeps
        # the lowest (class, instance) first among tied winners
        voxel_start = np.ones(len(keys), dtype=bool)
        voxel_start[1:] = keys[1:] != keys[:-1]
        group = np.cumsum(voxel_start) - 1
        order = np.lexsort((-votes, group))
        g = group[order]
        win = order[np.flatnonzero(np.r_[True, g[1:] != g[:-1]])]
        coords = decode_keys(keys[win])
        sort = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        win, coords = win[sort], coords[sort]
        n = len(win)
        return VoxelDump(self.voxel_size, n_classes, coords=coords, tsdf=np.zeros(n), weight=np.ones(n),
                         class_id=labels[win] // self.LABEL_SPAN, instance_id=labels[win] % self.LABEL_SPAN)


@dataclass
class SynthSummary:
    frames: int
    objects: int
    voxels: int
    visibility: list[float]


def generate_synthetic(spec: SceneSpec, out_dir, seed: int = 0, depth_range=(0.1, 8.0)) -> SynthSummary:
    """Write a sequence directory plus `gt.panvox` and `gt_segments.txt` for `spec`."""
    spec.validate()
    out = Path(out_dir)
    for sub in ("pose", "depth", "segm"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    intr = spec.intrinsics
    write_intrinsics(out / "intrinsics.txt", intr)
    spec.labels.write(out / "labels.txt")

    rng = np.random.default_rng(seed)
    rays = pixel_rays(intr)
    gt = GroundTruthAccumulator(spec.voxel_size)
    seen = np.zeros(len(spec.objects), dtype=np.int64)
    gt_lines = []
    poses = spec.orbit.poses()
    for index, pose in enumerate(poses):
        depth, cls_img, inst_img = render(spec, pose, intr)
        seg, table, seg_gt = panoptic_segments(cls_img, inst_img, rng)
        name = frame_name(index)
        write_pose(out / "pose" / f"{name}.txt", pose)
        write_png16(out / "depth" / f"{name}.png", quantize_depth(depth))
        write_png16(out / "segm" / f"{name}.png", seg)
        write_segment_classes(out / "segm" / f"{name}.cls", table)
        gt_lines += [f"{index} {sid} {table[sid]} {seg_gt[sid]}" for sid in sorted(table)]

        valid = (depth > depth_range[0]) & (depth < depth_range[1]) & (cls_img > 0)
        pts = rays[valid] * depth[valid][:, None]
        gt.add(pts @ pose.rotation.T + pose.translation, cls_img[valid], inst_img[valid])
        visible = np.unique(inst_img[inst_img > 0]) - 1
        seen[visible] += 1

    visibility = (seen / len(poses)).tolist()
    for k, frac in enumerate(visibility):
        if frac < spec.min_visible_fraction:
            raise SceneSpecError(f"object {k}: visible in only {frac:.0%} of frames")
    (out / "gt_segments.txt").write_text("".join(line + "\n" for line in gt_lines), encoding="utf-8")
    volume = gt.volume(spec.labels.n_classes)
    write_dump(out / "gt.panvox", volume)
    return SynthSummary(len(poses), len(spec.objects), len(volume), visibility)


def read_gt_segments(path) -> dict[int, dict[int, int]]:
    """{frame: {segment id: gt instance}} from a generator's gt_segments.txt."""
    out: dict[int, dict[int, int]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            f, s, _c, g = (int(x) for x in line.split())
            out.setdefault(f, {})[s] = g
    return out
