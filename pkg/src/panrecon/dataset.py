"""Sequence directories of posed depth + panoptic segment frames.

Layout::

    intrinsics.txt        fx fy cx cy width height
    labels.txt            class_id name thing|stuff   (one per line)
    pose/NNNNNN.txt       4x4 world-from-camera, row-major
    depth/NNNNNN.png      uint16 millimeters, 0 = invalid
    segm/NNNNNN.png       uint16 local segment id, 0 = unlabeled
    segm/NNNNNN.cls       segment_id class_id       (one per line)
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Unreadable sequence-level data (intrinsics, labels, empty directory)."""


class FrameError(DatasetError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"frame {index}: {reason}")
        self.index = index
        self.reason = reason


@dataclass(frozen=True)
class LabelClass:
    class_id: int
    name: str
    is_thing: bool


@dataclass
class LabelMap:
    classes: list[LabelClass]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must be dense from 1, got {ids}")

    @property
    def n_classes(self) -> int:
        """Histogram length, including the reserved slot 0."""
        return len(self.classes) + 1

    @property
    def thing_classes(self) -> frozenset[int]:
        return frozenset(c.class_id for c in self.classes if c.is_thing)

    @property
    def stuff_classes(self) -> frozenset[int]:
        return frozenset(c.class_id for c in self.classes if not c.is_thing)

    def name(self, class_id: int) -> str:
        return self.classes[class_id - 1].name if 1 <= class_id <= len(self.classes) else "unobserved"

    @classmethod
    def read(cls, path) -> "LabelMap":
        classes = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("thing", "stuff"):
                raise DatasetError(f"{path}:{lineno}: expected 'class_id name thing|stuff'")
            classes.append(LabelClass(int(parts[0]), parts[1], parts[2] == "thing"))
        try:
            return cls(classes)
        except ValueError as exc:
            raise DatasetError(f"{path}: {exc}") from None

    def write(self, path) -> None:
        lines = [f"{c.class_id} {c.name} {'thing' if c.is_thing else 'stuff'}" for c in self.classes]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


@dataclass
class PanopticFrame:
    index: int
    depth: np.ndarray
    segment_image: np.ndarray
    segment_classes: dict[int, int]
    pose: Pose
    intrinsics: Intrinsics
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.intrinsics.shape
        if self.depth.shape != shape or self.segment_image.shape != shape:
            raise ValueError(f"frame {self.index}: image size does not match intrinsics {shape}")
        missing = set(np.unique(self.segment_image).tolist()) - {0} - set(self.segment_classes)
        if missing:
            raise ValueError(f"frame {self.index}: segment ids {sorted(missing)} missing from class table")


def read_intrinsics(path) -> Intrinsics:
    try:
        vals = Path(path).read_text(encoding="utf-8").split()
        if len(vals) != 6:
            raise ValueError("expected 'fx fy cx cy width height'")
        fx, fy, cx, cy = (float(x) for x in vals[:4])
        return Intrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]))
    except (OSError, ValueError, IndexError) as exc:
        raise DatasetError(f"unreadable intrinsics {path}: {exc}") from None


def write_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text(f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n",
                          encoding="utf-8", newline="\n")


def read_pose(path) -> Pose:
    m = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return Pose.from_matrix(m)


def write_pose(path, pose: Pose) -> None:
    rows = [" ".join(f"{x:.9f}" for x in row) for row in pose.as_matrix()]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-channel image")
    return arr.astype(np.uint16)


def write_png16(path, arr: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint16)).save(path)


def read_segment_classes(path) -> dict[int, int]:
    table = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            sid, cid = line.split()
            table[int(sid)] = int(cid)
    return table


def write_segment_classes(path, table: dict[int, int]) -> None:
    Path(path).write_text("".join(f"{s} {c}\n" for s, c in sorted(table.items())), encoding="utf-8", newline="\n")


def frame_name(index: int) -> str:
    return f"{index:06d}"


class Sequence:
    """Reader for a sequence directory.

    Iterating yields frames in ascending index order. Broken frames raise
    FrameError when `strict`, otherwise they are skipped, logged and kept in
    `errors`.
    """

    def __init__(self, root, label_map: LabelMap | None = None, strict: bool = False):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"{self.root}: not a directory")
        self.intrinsics = read_intrinsics(self.root / "intrinsics.txt")
        if label_map is None:
            if not (self.root / "labels.txt").exists():
                raise DatasetError(f"{self.root}: no labels.txt and no label map given")
            label_map = LabelMap.read(self.root / "labels.txt")
        self.label_map = label_map
        self.strict = strict
        self.errors: list[FrameError] = []

    def indices(self) -> list[int]:
        found = set()
        for sub, suffix in (("pose", ".txt"), ("depth", ".png"), ("segm", ".png"), ("segm", ".cls")):
            d = self.root / sub
            if d.is_dir():
                found.update(int(p.stem) for p in d.glob(f"*{suffix}") if p.stem.isdigit())
        return sorted(found)

    def __len__(self) -> int:
        return len(self.indices())

    def load_frame(self, index: int) -> PanopticFrame:
        name = frame_name(index)
        paths = {
            "pose": self.root / "pose" / f"{name}.txt",
            "depth": self.root / "depth" / f"{name}.png",
            "segment image": self.root / "segm" / f"{name}.png",
            "segment classes": self.root / "segm" / f"{name}.cls",
        }
        for what, p in paths.items():
            if not p.is_file():
                raise FrameError(index, f"missing {what} file {p.name}")
        try:
            pose = read_pose(paths["pose"])
            depth = read_png16(paths["depth"]).astype(np.float64) / 1000.0
            seg = read_png16(paths["segment image"]).astype(np.int64)
            table = read_segment_classes(paths["segment classes"])
            n = self.label_map.n_classes
            bad = [c for c in table.values() if not 1 <= c < n]
            if bad:
                raise ValueError(f"class ids {bad} not in label map")
            return PanopticFrame(index, depth, seg, table, pose, self.intrinsics)
        except (OSError, ValueError) as exc:
            raise FrameError(index, str(exc)) from None

    def __iter__(self) -> Iterator[PanopticFrame]:
        for index in self.indices():
            try:
                frame = self.load_frame(index)
            except FrameError as err:
                if self.strict:
                    raise
                log.warning("%s", err)
                self.errors.append(err)
                continue
            yield frame


def load_sequence(root, label_map: LabelMap | None = None, strict: bool = False) -> Sequence:
    return Sequence(root, label_map, strict=strict)


def prefetch(frames, capacity: int = 2) -> Iterator:
    """Load frames on a background thread, at most `capacity` ahead of the consumer."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def producer():
        try:
            for f in frames:
                while not stop.is_set():
                    try:
                        q.put(f, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
