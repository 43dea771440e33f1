"""Projective TSDF integration with per-voxel class and instance fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import pixel_rays, transform_points
from .voxel_map import BLOCK, BLOCK_VOXELS, VoxelBlockGrid, VoxelState, decode_keys, encode_coords


_LOCAL = np.stack(np.unravel_index(np.arange(BLOCK_VOXELS), (BLOCK,) * 3), axis=1)


@dataclass(frozen=True)
class FusionConfig:
    w_frame: float = 1.0
    depth_min: float = 0.1
    depth_max: float = 8.0
    # labels are written only where |sdf| <= label_band * truncation
    label_band: float = 0.5
    # pixels within this many pixels of a depth jump larger than the
    # truncation distance are not integrated (0 disables)
    edge_radius: int = 1

    def __post_init__(self):
        if not self.w_frame > 0:
            raise ValueError("w_frame must be positive")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("depth range must satisfy 0 < min < max")
        if not 0 < self.label_band <= 1:
            raise ValueError("label_band must be in (0, 1]")
        if self.edge_radius < 0:
            raise ValueError("edge_radius must be non-negative")


# -- array kernels ------------------------------------------------------------


def fuse_tsdf(tsdf, weight, d_norm, w_frame, w_max):
    """Running weighted mean of normalized distances; weight saturates at w_max."""
    total = weight + w_frame
    new_tsdf = (weight * tsdf + w_frame * d_norm) / total
    return np.clip(new_tsdf, -1.0, 1.0), np.minimum(total, w_max)


def fuse_instance(instance_id, counter, observed_id, w_frame, w_max):
    """Counter vote for the instance a voxel holds.

    An empty or zero-counter voxel adopts the observation; a matching
    observation reinforces; a conflicting one decays the counter but keeps
    the id until it reaches zero and the next conflicting observation lands.
    """
    instance_id = np.asarray(instance_id)
    counter = np.asarray(counter)
    observed_id = np.asarray(observed_id)
    free = (instance_id == 0) | (counter == 0)
    same = ~free & (observed_id == instance_id)
    new_id = np.where(free, observed_id, instance_id)
    new_counter = np.where(
        free,
        np.where(observed_id != 0, np.minimum(w_frame, w_max), 0.0),
        np.where(same, np.minimum(counter + w_frame, w_max), np.maximum(counter - w_frame, 0.0)),
    )
    return new_id.astype(instance_id.dtype), new_counter.astype(counter.dtype)


# -- single-voxel operations ----------------------------------------------------


def update_voxel_tsdf(v: VoxelState, d_norm: float, w_frame: float, w_max: float) -> VoxelState:
    if not -1.0 <= d_norm <= 1.0:
        raise ValueError(f"normalized distance {d_norm} outside [-1, 1]")
    t, w = fuse_tsdf(np.float64(v.tsdf), np.float64(v.weight), d_norm, w_frame, w_max)
    return VoxelState(float(t), float(w), v.class_hist, v.instance_id, v.instance_counter)


def update_voxel_label(v: VoxelState, class_id: int, instance_id: int, w_frame: float,
                       w_max: float = 128.0, n_classes: int | None = None) -> VoxelState:
    hist = v.class_hist
    if hist is None:
        if n_classes is None:
            raise ValueError("n_classes required for a voxel without a class histogram")
        hist = np.zeros(n_classes)
    hist = np.array(hist, dtype=np.float64)
    if not 0 <= class_id < hist.size:
        raise ValueError(f"class {class_id} outside histogram of size {hist.size}")
    hist[class_id] += w_frame
    iid, cnt = fuse_instance(np.int64(v.instance_id), np.float64(v.instance_counter), np.int64(instance_id),
                             w_frame, w_max)
    return VoxelState(v.tsdf, v.weight, hist, int(iid), float(cnt))


# -- frame integration --------------------------------------------------------


def label_images(frame, mapping: dict[int, int]):
    """Per-pixel class and global instance for segments present in `mapping`.

    Pixels of unlabeled or dropped segments get class -1.
    """
    seg = frame.segment_image
    cls = np.full(seg.shape, -1, dtype=np.int64)
    inst = np.zeros(seg.shape, dtype=np.int64)
    if mapping:
        ids = np.fromiter(mapping.keys(), dtype=np.int64)
        lut_size = max(int(seg.max()), int(ids.max())) + 1
        cls_lut = np.full(lut_size, -1, dtype=np.int64)
        inst_lut = np.zeros(lut_size, dtype=np.int64)
        for sid, gid in mapping.items():
            cls_lut[sid] = frame.segment_classes[sid]
            inst_lut[sid] = gid
        cls = cls_lut[seg]
        inst = inst_lut[seg]
    return cls, inst


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1) x (2r+1) square, done one axis at a time."""
    out = mask.copy()
    for axis in (0, 1):
        src = out.copy()
        n = src.shape[axis]
        for s in range(1, min(radius, n - 1) + 1):
            lo = [slice(None)] * 2
            hi = [slice(None)] * 2
            lo[axis], hi[axis] = slice(0, n - s), slice(s, n)
            out[tuple(lo)] |= src[tuple(hi)]
            out[tuple(hi)] |= src[tuple(lo)]
    return out


def depth_edges(depth: np.ndarray, valid: np.ndarray, jump: float, radius: int,
                rel_jump: float = 0.05) -> np.ndarray:
    """Pixels within `radius` of a depth discontinuity or of invalid depth.

    Neighbouring pixels form a discontinuity when their depths differ by
    more than max(jump, rel_jump * depth); the relative term keeps grazing
    planes, whose depth grows quickly per pixel, from being flagged.
    Voxels just behind a silhouette see grazing rays through the rim and
    would pick up spurious negative distances from these pixels.
    """
    if radius == 0:
        return np.zeros(depth.shape, dtype=bool)
    d = np.where(valid, depth, 0.0)
    edge = ~valid
    for axis in (0, 1):
        a = np.take(d, range(0, d.shape[axis] - 1), axis=axis)
        b = np.take(d, range(1, d.shape[axis]), axis=axis)
        cut = np.abs(a - b) > np.maximum(jump, rel_jump * np.maximum(a, b))
        pad = [(0, 0), (0, 0)]
        pad[axis] = (0, 1)
        edge = edge | np.pad(cut, pad)
        pad[axis] = (1, 0)
        edge = edge | np.pad(cut, pad)
    return _dilate(edge, radius)


def candidate_blocks(grid: VoxelBlockGrid, frame, valid: np.ndarray) -> np.ndarray:
    """Block coordinates touched by the truncation band around valid pixels."""
    tau = grid.truncation
    step = BLOCK * grid.voxel_size / 4.0
    n_samples = int(math.ceil(2 * tau / step)) + 1
    offsets = np.linspace(-tau, tau, n_samples)
    block_size = BLOCK * grid.voxel_size
    # world-frame rays in block units; sample points are base + ray * offset
    rays = pixel_rays(frame.intrinsics)[valid] @ (frame.pose.rotation.T / block_size)
    base = rays * frame.depth[valid][:, None] + frame.pose.translation / block_size
    keys = [encode_coords(np.floor(base + rays * off).astype(np.int64)) for off in offsets]
    return decode_keys(np.unique(np.concatenate(keys)))


def integrate_frame(grid: VoxelBlockGrid, frame, result, config: FusionConfig) -> int:
    """Fuse one frame into `grid` in place.

    `result` is the frame's AssociationResult (or its bare mapping from
    retained local segment ids to global instance ids, 0 for stuff). Pixels
    of segments outside the mapping update geometry only. Returns the number
    of voxels updated.
    """
    mapping = getattr(result, "mapping", result)
    intr = frame.intrinsics
    depth = frame.depth
    valid = (depth > config.depth_min) & (depth < config.depth_max)
    if not valid.any():
        return 0
    tau = grid.truncation
    edges = depth_edges(depth, valid, tau, config.edge_radius)

    blocks = candidate_blocks(grid, frame, valid)
    inv = frame.pose.inverse()
    # camera coordinates as block origin plus a fixed per-block offset table
    origin = transform_points(inv, blocks * (BLOCK * grid.voxel_size))
    offsets = (_LOCAL + 0.5) * grid.voxel_size @ inv.rotation.T
    cam = (origin[:, None, :] + offsets[None]).reshape(-1, 3)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(intr.fx * cam[:, 0] / z + (intr.cx + 0.5))
        v = np.floor(intr.fy * cam[:, 1] / z + (intr.cy + 0.5))
    keep = np.flatnonzero((z > 1e-6) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height))
    u = u[keep].astype(np.int64)
    v = v[keep].astype(np.int64)
    sdf = depth[v, u] - z[keep]
    ok = valid[v, u] & (np.abs(sdf) <= tau)
    # behind a silhouette the sign of sdf is unreliable; free space is not
    ok &= (sdf >= 0) | ~edges[v, u]
    keep, sdf, u, v = keep[ok], sdf[ok], u[ok], v[ok]
    if keep.size == 0:
        return 0
    # only blocks with at least one updated voxel get allocated
    touched, which = np.unique(keep // BLOCK_VOXELS, return_inverse=True)
    idx = grid.allocate_blocks(blocks[touched])[which] * BLOCK_VOXELS + keep % BLOCK_VOXELS
    d_norm = np.clip(sdf / tau, -1.0, 1.0)
    grid.tsdf[idx], grid.weight[idx] = fuse_tsdf(grid.tsdf[idx], grid.weight[idx], d_norm.astype(np.float32),
                                                 np.float32(config.w_frame), np.float32(grid.w_max))

    cls_img, inst_img = label_images(frame, mapping)
    cls = cls_img[v, u]
    near = (np.abs(sdf) <= config.label_band * tau) & (cls >= 0)
    if near.any():
        li = idx[near]
        np.add.at(grid.class_hist, (li, cls[near]), np.float32(config.w_frame))
        grid.instance_id[li], grid.instance_counter[li] = fuse_instance(
            grid.instance_id[li], grid.instance_counter[li], inst_img[v, u][near].astype(np.int32),
            np.float32(config.w_frame), np.float32(grid.w_max))
    return int(idx.size)
