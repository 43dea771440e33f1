"""Online loop: associate each frame against the map, then fuse it."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from .association import AssociationConfig, AssociationResult, associate
from .dataset import LabelMap, PanopticFrame
from .fusion import FusionConfig, integrate_frame
from .voxel_map import InstanceRegistry, VoxelBlockGrid


@dataclass
class RunConfig:
    voxel_size: float = 0.05
    truncation: float | None = None  # defaults to 4 * voxel_size
    w_max: float = 128.0
    new_instance_likelihood: float = 0.25
    min_segment_pixels: int = 50
    depth_min: float = 0.1
    depth_max: float = 8.0
    edge_radius: int = 1

    def __post_init__(self):
        if self.truncation is None:
            self.truncation = 4.0 * self.voxel_size
        problems = []
        if not self.voxel_size > 0:
            problems.append("voxel-size must be positive")
        if not self.truncation >= 2 * self.voxel_size:
            problems.append("truncation must be at least 2 * voxel-size")
        if not self.w_max > 0:
            problems.append("w-max must be positive")
        if not 0 < self.new_instance_likelihood < 1:
            problems.append("new-instance-likelihood must lie in (0, 1)")
        if self.min_segment_pixels < 0:
            problems.append("min-segment-pixels must be non-negative")
        if not 0 < self.depth_min < self.depth_max:
            problems.append("depth range must satisfy 0 < min < max")
        if problems:
            raise ValueError("; ".join(problems))

    def association(self) -> AssociationConfig:
        return AssociationConfig(self.new_instance_likelihood, self.min_segment_pixels, self.depth_min,
                                 self.depth_max)

    def fusion(self) -> FusionConfig:
        return FusionConfig(depth_min=self.depth_min, depth_max=self.depth_max, edge_radius=self.edge_radius)

    def to_text(self) -> str:
        return "".join(f"{k.replace('_', '-')} = {v!r}\n" for k, v in asdict(self).items())


@dataclass
class FrameLog:
    index: int
    result: AssociationResult
    association_ms: float
    fusion_ms: float
    voxels_updated: int = 0


@dataclass
class Reconstructor:
    labels: LabelMap
    config: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        self.grid = VoxelBlockGrid(self.config.voxel_size, self.labels.n_classes, self.labels.thing_classes,
                                   self.config.truncation, self.config.w_max)
        self.registry = InstanceRegistry(self.labels.thing_classes)
        self._assoc = self.config.association()
        self._fusion = self.config.fusion()
        self.log: list[FrameLog] = []

    def process(self, frame: PanopticFrame) -> FrameLog:
        t0 = time.perf_counter()
        result = associate(frame, self.grid, self.registry, self._assoc)
        t1 = time.perf_counter()
        n = integrate_frame(self.grid, frame, result, self._fusion)
        t2 = time.perf_counter()
        entry = FrameLog(frame.index, result, (t1 - t0) * 1e3, (t2 - t1) * 1e3, n)
        self.log.append(entry)
        return entry

    def run(self, frames) -> "Reconstructor":
        for frame in frames:
            self.process(frame)
        return self
