"""Depth-guided lookup of map labels for every pixel of an incoming frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, pixel_rays, transform_points
from .voxel_map import VoxelBlockGrid


@dataclass
class RenderedIds:
    instance_image: np.ndarray
    class_image: np.ndarray


def render_ids(grid: VoxelBlockGrid, pose: Pose, intr: Intrinsics, depth: np.ndarray,
               depth_min: float = 0.1, depth_max: float = 8.0) -> RenderedIds:
    """Instance and class stored in the voxel under each pixel's depth point.

    Pixels with depth outside (depth_min, depth_max), or whose voxel is
    unobserved, read 0/0.
    """
    if depth.shape != intr.shape:
        raise ValueError(f"depth image {depth.shape} does not match intrinsics {intr.shape}")
    inst = np.zeros(intr.shape, dtype=np.int64)
    cls = np.zeros(intr.shape, dtype=np.int64)
    valid = (depth > depth_min) & (depth < depth_max)
    if not valid.any() or grid.block_count == 0:
        return RenderedIds(inst, cls)
    pts = transform_points(pose, pixel_rays(intr)[valid] * depth[valid][:, None])
    idx = grid.lookup(grid.world_to_voxel(pts))
    hit = idx >= 0
    hit[hit] = grid.weight[idx[hit]] > 0
    found = idx[hit]
    vi = np.zeros(idx.shape, dtype=np.int64)
    vc = np.zeros(idx.shape, dtype=np.int64)
    vi[hit] = grid.instance_id[found]
    vc[hit] = grid.argmax_class(found)
    inst[valid] = vi
    cls[valid] = vc
    return RenderedIds(inst, cls)
