"""Frame-to-map instance association as a linear assignment problem.

Each thing segment of the incoming frame is scored against every map
instance visible in the frame by class-gated IoU of the segment mask and the
rendered instance mask. Likelihoods become -log costs; every segment also
gets a private "new instance" column priced at -log(new_instance_likelihood).
The optimal assignment then decides, jointly for all segments, which ones
continue an existing instance and which ones start a new one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lap import augment, solve
from .projection import RenderedIds, render_ids
from .voxel_map import InstanceRegistry, VoxelBlockGrid

LIKELIHOOD_FLOOR = 1e-9


class MalformedFrameError(ValueError):
    pass


@dataclass(frozen=True)
class AssociationConfig:
    new_instance_likelihood: float = 0.25
    min_segment_pixels: int = 50
    depth_min: float = 0.1
    depth_max: float = 8.0

    def __post_init__(self):
        if not 0 < self.new_instance_likelihood < 1:
            raise ValueError("new_instance_likelihood must lie in (0, 1)")
        if self.min_segment_pixels < 0:
            raise ValueError("min_segment_pixels must be non-negative")


@dataclass
class SegmentTable:
    segment_ids: np.ndarray
    class_ids: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.segment_ids)

    def subset(self, mask) -> "SegmentTable":
        return SegmentTable(self.segment_ids[mask], self.class_ids[mask], self.pixels[mask])


@dataclass
class OverlapCounts:
    segment_ids: np.ndarray
    instance_ids: np.ndarray
    counts: np.ndarray  # (segments, instances)
    segment_totals: np.ndarray
    instance_totals: np.ndarray


@dataclass
class AssociationResult:
    mapping: dict[int, int] = field(default_factory=dict)
    births: set[int] = field(default_factory=set)
    dropped: set[int] = field(default_factory=set)

    @property
    def matched(self) -> set[int]:
        return {s for s, g in self.mapping.items() if g != 0 and s not in self.births}


def extract_segments(frame) -> SegmentTable:
    seg = frame.segment_image
    ids, counts = np.unique(seg[seg != 0], return_counts=True)
    missing = [int(s) for s in ids if int(s) not in frame.segment_classes]
    if missing:
        raise MalformedFrameError(f"frame {frame.index}: segment ids {missing} have no class")
    classes = np.array([frame.segment_classes[int(s)] for s in ids], dtype=np.int64)
    return SegmentTable(ids.astype(np.int64), classes, counts.astype(np.int64))


def overlap_counts(segments: SegmentTable, frame, rendered: RenderedIds, depth_min: float = 0.1,
                   depth_max: float = 8.0) -> OverlapCounts:
    """Contingency table of frame segments vs rendered instances over valid-depth pixels."""
    seg = frame.segment_image
    if rendered.instance_image.shape != seg.shape or frame.depth.shape != seg.shape:
        raise ValueError("segment, depth and rendered images must share dimensions")
    valid = (frame.depth > depth_min) & (frame.depth < depth_max)
    s_pix = seg[valid]
    i_pix = rendered.instance_image[valid]
    inst_ids = np.unique(i_pix[i_pix != 0])
    n_s, n_i = len(segments), len(inst_ids)

    s_idx = np.full(s_pix.shape, -1, dtype=np.int64)
    if n_s:
        order = np.argsort(segments.segment_ids)
        sorted_ids = segments.segment_ids[order]
        pos = np.minimum(np.searchsorted(sorted_ids, s_pix), n_s - 1)
        s_idx = np.where(sorted_ids[pos] == s_pix, order[pos], -1)
    i_idx = np.searchsorted(inst_ids, i_pix) if n_i else np.zeros(i_pix.shape, dtype=np.int64)
    i_idx = np.where(i_pix != 0, i_idx, -1)

    seg_totals = np.bincount(s_idx[s_idx >= 0], minlength=n_s)[:n_s]
    inst_totals = np.bincount(i_idx[i_idx >= 0], minlength=n_i)[:n_i]
    both = (s_idx >= 0) & (i_idx >= 0)
    counts = np.bincount(s_idx[both] * n_i + i_idx[both], minlength=n_s * n_i)[: n_s * n_i].reshape(n_s, n_i)
    return OverlapCounts(segments.segment_ids.copy(), inst_ids.astype(np.int64), counts, seg_totals, inst_totals)


def likelihood_matrix(counts: OverlapCounts, segments: SegmentTable, registry: InstanceRegistry) -> np.ndarray:
    """IoU between segment and rendered instance when their classes agree, else 0."""
    inter = counts.counts.astype(np.float64)
    union = counts.segment_totals[:, None] + counts.instance_totals[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    inst_cls = np.array([registry.class_of(int(i)) for i in counts.instance_ids], dtype=np.int64)
    same = segments.class_ids[:, None] == inst_cls[None, :]
    return np.where(same, iou, 0.0)


def cost_matrix(likelihood, new_instance_likelihood: float) -> np.ndarray:
    """-log likelihoods plus one private birth column per segment."""
    if not 0 < new_instance_likelihood < 1:
        raise ValueError("new_instance_likelihood must lie in (0, 1)")
    L = np.asarray(likelihood, dtype=np.float64)
    L = L.reshape(L.shape[0], -1)
    return augment(-np.log(np.maximum(L, LIKELIHOOD_FLOOR)), -np.log(new_instance_likelihood))


def associate(frame, grid: VoxelBlockGrid, registry: InstanceRegistry,
              config: AssociationConfig = AssociationConfig()) -> AssociationResult:
    """Assign global ids to the segments of `frame`, birthing instances as needed.

    Mutates `registry` (births and observation statistics). Stuff segments
    map to 0 without entering the assignment.
    """
    rendered = render_ids(grid, frame.pose, frame.intrinsics, frame.depth, config.depth_min, config.depth_max)
    segments = extract_segments(frame)
    keep = segments.pixels >= config.min_segment_pixels
    result = AssociationResult(dropped=set(segments.segment_ids[~keep].tolist()))
    segments = segments.subset(keep)

    is_thing = np.isin(segments.class_ids, list(registry.thing_classes))
    for sid in segments.segment_ids[~is_thing].tolist():
        result.mapping[sid] = 0
    things = segments.subset(is_thing)
    if len(things) == 0:
        return result

    counts = overlap_counts(things, frame, rendered, config.depth_min, config.depth_max)
    L = likelihood_matrix(counts, things, registry)
    costs = cost_matrix(L, config.new_instance_likelihood)
    n_candidates = L.shape[1]
    for row, col in solve(costs).pairs:
        sid = int(things.segment_ids[row])
        if col < n_candidates:
            gid = int(counts.instance_ids[col])
        else:
            gid = registry.new_instance(int(things.class_ids[row]))
            result.births.add(sid)
        result.mapping[sid] = gid
        registry.observe(gid, frame.index)
    return result
