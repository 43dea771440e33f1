"""Voxel-domain Panoptic Quality (PQ = SQ x RQ).

A segment is the set of voxels sharing (class, instance) for thing classes
or sharing the class for stuff. Predicted and ground-truth segments of the
same class match when their voxel IoU exceeds 0.5, which makes matches
unique. Class 0 (unobserved) is never scored.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dataset import LabelMap
from .voxel_map import VoxelDump, encode_coords


@dataclass
class LabeledVolume:
    coords: np.ndarray
    class_id: np.ndarray
    instance_id: np.ndarray
    labels: LabelMap
    voxel_size: float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.class_id = np.asarray(self.class_id, dtype=np.int64)
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64)
        if np.any((self.class_id < 0) | (self.class_id >= self.labels.n_classes)):
            raise ValueError("volume holds class ids outside the label map")
        stuff = ~np.isin(self.class_id, list(self.labels.thing_classes))
        self.instance_id = np.where(stuff, 0, self.instance_id)
        keys = encode_coords(self.coords)
        if np.unique(keys).size != keys.size:
            raise ValueError("volume holds duplicate voxel coordinates")

    def __len__(self) -> int:
        return len(self.class_id)

    @classmethod
    def from_dump(cls, dump: VoxelDump, labels: LabelMap, surface_only: bool = True) -> "LabeledVolume":
        keep = dump.class_id != 0
        if surface_only:
            keep &= surface_mask(dump.coords, dump.tsdf)
        return cls(dump.coords[keep], dump.class_id[keep], dump.instance_id[keep], labels, dump.voxel_size)

    def segments(self):
        """(segment keys (S, 2) as [class, instance], per-voxel segment index)."""
        pairs = np.column_stack([self.class_id, self.instance_id])
        scored = self.class_id != 0
        keys, inv = np.unique(pairs[scored], axis=0, return_inverse=True)
        index = np.full(len(self), -1, dtype=np.int64)
        index[scored] = inv.ravel()
        return keys.reshape(-1, 2), index


def surface_mask(coords: np.ndarray, tsdf: np.ndarray) -> np.ndarray:
    """Voxels whose cell contains the zero level of the trilinear field.

    The field is sampled at the cell's 8 corners, each the mean of the 8
    voxel centers around it; corners with a missing neighbor are skipped.
    A cell is kept when its center and corners do not all share one sign.
    Only the location of the zero set matters, so projective inflation of
    the distances does not bias the result.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    tsdf = np.asarray(tsdf, dtype=np.float64)
    n = len(tsdf)
    if n == 0:
        return np.zeros(0, dtype=bool)
    keys = encode_coords(coords)
    order = np.argsort(keys)
    sorted_keys = keys[order]
    values = {}

    def at(offset):
        if offset not in values:
            k = encode_coords(coords + np.array(offset, dtype=np.int64))
            pos = np.minimum(np.searchsorted(sorted_keys, k), n - 1)
            values[offset] = np.where(sorted_keys[pos] == k, tsdf[order[pos]], np.nan)
        return values[offset]

    lo = tsdf.copy()
    hi = tsdf.copy()
    for sx, sy, sz in itertools.product((-1, 1), repeat=3):
        corner = np.mean([at((i, j, k)) for i in (0, sx) for j in (0, sy) for k in (0, sz)], axis=0)
        lo = np.fmin(lo, corner)
        hi = np.fmax(hi, corner)
    return (lo <= 0) & (hi >= 0)


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0


@dataclass
class PqStats:
    per_class: dict[int, ClassStats]
    # (pred segment key, gt segment key, iou) for every true positive
    matches: list[tuple[tuple[int, int], tuple[int, int], float]]


def match_segments(pred: LabeledVolume, gt: LabeledVolume) -> PqStats:
    if pred.labels.classes != gt.labels.classes:
        raise ValueError("prediction and ground truth use different class lists")
    if not math.isclose(pred.voxel_size, gt.voxel_size, rel_tol=1e-9):
        raise ValueError(f"voxel size mismatch: {pred.voxel_size} vs {gt.voxel_size}")

    p_keys, p_seg = pred.segments()
    g_keys, g_seg = gt.segments()
    p_area = np.bincount(p_seg[p_seg >= 0], minlength=len(p_keys))
    g_area = np.bincount(g_seg[g_seg >= 0], minlength=len(g_keys))

    _, pi, gi = np.intersect1d(encode_coords(pred.coords), encode_coords(gt.coords), assume_unique=True,
                               return_indices=True)
    ps, gs = p_seg[pi], g_seg[gi]
    both = (ps >= 0) & (gs >= 0)
    n_g = max(len(g_keys), 1)
    pair, inter = np.unique(ps[both] * n_g + gs[both], return_counts=True)
    pp, gg = pair // n_g, pair % n_g

    iou = inter / (p_area[pp] + g_area[gg] - inter)
    tp_mask = (p_keys[pp, 0] == g_keys[gg, 0]) & (iou > 0.5)
    pp, gg, iou = pp[tp_mask], gg[tp_mask], iou[tp_mask]
    if np.unique(gg).size != gg.size or np.unique(pp).size != pp.size:
        raise AssertionError("a segment matched twice despite the IoU > 0.5 rule")

    per_class = {c.class_id: ClassStats() for c in pred.labels.classes}
    matched_p = np.zeros(len(p_keys), dtype=bool)
    matched_g = np.zeros(len(g_keys), dtype=bool)
    matched_p[pp] = True
    matched_g[gg] = True
    matches = []
    ious: dict[int, list[float]] = {}
    for a, b, v in zip(pp.tolist(), gg.tolist(), iou.tolist()):
        c = int(g_keys[b, 0])
        per_class[c].tp += 1
        ious.setdefault(c, []).append(v)
        matches.append((tuple(p_keys[a].tolist()), tuple(g_keys[b].tolist()), v))
    # fsum is exactly rounded, so the sum does not depend on segment order
    for c, vals in ious.items():
        per_class[c].iou_sum = math.fsum(vals)
    for k in np.flatnonzero(~matched_p):
        per_class[int(p_keys[k, 0])].fp += 1
    for k in np.flatnonzero(~matched_g):
        per_class[int(g_keys[k, 0])].fn += 1
    return PqStats(per_class, matches)


@dataclass
class Quality:
    pq: float
    sq: float
    rq: float


@dataclass
class PqReport:
    per_class: dict[int, Quality]
    mean: Quality
    stats: PqStats


def class_quality(st: ClassStats) -> Quality:
    denom = st.tp + 0.5 * st.fp + 0.5 * st.fn
    sq = st.iou_sum / st.tp if st.tp else 0.0
    rq = st.tp / denom if denom else 0.0
    # PQ written as SQ*RQ so the factorization holds bit-for-bit
    return Quality(sq * rq, sq, rq)


def panoptic_quality(stats: PqStats) -> PqReport:
    per_class = {c: class_quality(st) for c, st in stats.per_class.items() if st.tp + st.fp + st.fn > 0}
    if per_class:
        q = list(per_class.values())
        mean = Quality(*(float(np.mean([getattr(x, f) for x in q])) for f in ("pq", "sq", "rq")))
    else:
        mean = Quality(math.nan, math.nan, math.nan)
    return PqReport(per_class, mean, stats)


def evaluate_volumes(pred: LabeledVolume, gt: LabeledVolume) -> PqReport:
    return panoptic_quality(match_segments(pred, gt))


def format_report(report: PqReport, labels: LabelMap, fmt: str = "table") -> str:
    stats = report.stats.per_class
    if fmt == "tsv":
        lines = []
        for c, q in report.per_class.items():
            st = stats[c]
            lines.append("\t".join([str(c), f"{q.pq:.6f}", f"{q.sq:.6f}", f"{q.rq:.6f}",
                                    str(st.tp), str(st.fp), str(st.fn)]))
        m = report.mean
        lines.append("\t".join(["mean", f"{m.pq:.6f}", f"{m.sq:.6f}", f"{m.rq:.6f}"]))
        return "\n".join(lines) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    head = f"{'class':>5}  {'name':<16}{'PQ':>8}{'SQ':>8}{'RQ':>8}{'TP':>6}{'FP':>6}{'FN':>6}"
    lines = [head, "-" * len(head)]
    for c, q in report.per_class.items():
        st = stats[c]
        lines.append(f"{c:>5}  {labels.name(c):<16}{q.pq:>8.4f}{q.sq:>8.4f}{q.rq:>8.4f}{st.tp:>6}{st.fp:>6}{st.fn:>6}")
    lines.append("-" * len(head))
    m = report.mean
    lines.append(f"{'mean':>5}  {'':<16}{m.pq:>8.4f}{m.sq:>8.4f}{m.rq:>8.4f}")
    return "\n".join(lines) + "\n"
