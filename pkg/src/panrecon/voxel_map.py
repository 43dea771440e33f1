"""Sparse voxel-block storage for the panoptic map, plus the instance registry.

Voxels live in 8x8x8 blocks allocated on first write. Block coordinates are
hashed into a dict that maps them to slots in flat, growable numpy pools, so
fusion and rendering can address many voxels at once through `lookup` and
`allocate`. Instance id 0 means "no instance".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BLOCK = 8
BLOCK_VOXELS = BLOCK**3
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1

DUMP_MAGIC = "panvox v1"


@dataclass
class VoxelState:
    tsdf: float = 0.0
    weight: float = 0.0
    class_hist: np.ndarray | None = None
    instance_id: int = 0
    instance_counter: float = 0.0

    def validate(self, w_max: float, n_classes: int) -> None:
        if not -1.0 <= self.tsdf <= 1.0:
            raise ValueError(f"tsdf {self.tsdf} outside [-1, 1]")
        if not 0.0 <= self.weight <= w_max:
            raise ValueError(f"weight {self.weight} outside [0, {w_max}]")
        if self.class_hist is not None:
            hist = np.asarray(self.class_hist)
            if hist.shape != (n_classes,):
                raise ValueError(f"class_hist must have {n_classes} entries")
            if np.any(hist < 0):
                raise ValueError("class_hist entries must be non-negative")
        if self.instance_id < 0 or self.instance_counter < 0:
            raise ValueError("instance id and counter must be non-negative")
        if self.instance_id == 0 and self.instance_counter != 0:
            raise ValueError("a voxel without instance must have counter 0")


@dataclass
class InstanceRecord:
    class_id: int
    observations: int = 0
    last_seen: int = -1


class InstanceRegistry:
    """Allocator of global instance ids; ids start at 1 and are never reused."""

    def __init__(self, thing_classes):
        self.thing_classes = frozenset(int(c) for c in thing_classes)
        self.next_id = 1
        self.entries: dict[int, InstanceRecord] = {}

    def new_instance(self, class_id: int) -> int:
        if class_id not in self.thing_classes:
            raise ValueError(f"class {class_id} is not a thing class; stuff never gets instances")
        iid = self.next_id
        self.next_id += 1
        self.entries[iid] = InstanceRecord(int(class_id))
        return iid

    def observe(self, instance_id: int, frame_index: int) -> None:
        rec = self.entries[instance_id]
        rec.observations += 1
        rec.last_seen = frame_index

    def class_of(self, instance_id: int) -> int:
        return self.entries[instance_id].class_id

    def __contains__(self, instance_id) -> bool:
        return instance_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def summary_lines(self) -> list[str]:
        return [f"{iid} {rec.class_id} {rec.observations}" for iid, rec in sorted(self.entries.items())]


def _encode(block_coords: np.ndarray) -> np.ndarray:
    b = block_coords.astype(np.int64) + _KEY_OFFSET
    return (b[:, 0] << (2 * _KEY_BITS)) | (b[:, 1] << _KEY_BITS) | b[:, 2]


def encode_coords(coords) -> np.ndarray:
    """Pack integer (N, 3) coordinates into sortable int64 keys."""
    return _encode(np.asarray(coords, dtype=np.int64).reshape(-1, 3))


def decode_keys(keys: np.ndarray) -> np.ndarray:
    out = np.empty((keys.size, 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (keys >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = keys & _KEY_MASK
    return out - _KEY_OFFSET


class VoxelBlockGrid:
    """Sparse TSDF + label volume.

    Per-voxel pools are flat arrays indexed by ``slot * 512 + local`` where
    `local` is the voxel's row-major offset inside its block.
    """

    def __init__(self, voxel_size: float, n_classes: int, thing_classes=(), truncation: float | None = None,
                 w_max: float = 128.0):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        truncation = 4.0 * voxel_size if truncation is None else float(truncation)
        if truncation < 2.0 * voxel_size - 1e-12:
            raise ValueError("truncation must be at least twice the voxel size")
        if not w_max > 0:
            raise ValueError("w_max must be positive")
        if n_classes < 1:
            raise ValueError("n_classes counts the reserved slot 0 and must be >= 1")
        self.voxel_size = float(voxel_size)
        self.truncation = truncation
        self.w_max = float(w_max)
        self.n_classes = int(n_classes)
        self.thing_classes = frozenset(int(c) for c in thing_classes)

        self.blocks: dict[tuple[int, int, int], int] = {}
        self._keys = np.empty(0, dtype=np.int64)
        self._sorted_keys: np.ndarray | None = None
        self._sorted_slots: np.ndarray | None = None
        self._capacity = 0
        self.tsdf = np.zeros(0, dtype=np.float32)
        self.weight = np.zeros(0, dtype=np.float32)
        self.class_hist = np.zeros((0, self.n_classes), dtype=np.float32)
        self.instance_id = np.zeros(0, dtype=np.int32)
        self.instance_counter = np.zeros(0, dtype=np.float32)

    # -- addressing -------------------------------------------------------

    def world_to_voxel(self, points) -> np.ndarray:
        """Integer voxel coordinates containing each point (floor semantics)."""
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    def voxel_centers(self, coords) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def _split(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        block = np.floor_divide(coords, BLOCK)
        local = coords - block * BLOCK
        local_idx = (local[:, 0] * BLOCK + local[:, 1]) * BLOCK + local[:, 2]
        return block, local_idx

    def _slots_for_keys(self, keys: np.ndarray) -> np.ndarray:
        if self._sorted_keys is None:
            order = np.argsort(self._keys, kind="stable")
            self._sorted_keys = self._keys[order]
            self._sorted_slots = order
        if self._sorted_keys.size == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, self._sorted_keys.size - 1)
        found = self._sorted_keys[pos] == keys
        return np.where(found, self._sorted_slots[pos], -1)

    def lookup(self, coords) -> np.ndarray:
        """Flat pool indices of voxels, or -1 where the block is unallocated."""
        block, local = self._split(coords)
        slots = self._slots_for_keys(_encode(block))
        return np.where(slots >= 0, slots * BLOCK_VOXELS + local, -1)

    def _grow(self, needed_blocks: int) -> None:
        if needed_blocks <= self._capacity:
            return
        cap = max(needed_blocks, 2 * self._capacity, 64)
        n = cap * BLOCK_VOXELS

        def grown(a, shape_tail=()):
            out = np.zeros((n,) + shape_tail, dtype=a.dtype)
            out[: a.shape[0]] = a
            return out

        self.tsdf = grown(self.tsdf)
        self.weight = grown(self.weight)
        self.class_hist = grown(self.class_hist, (self.n_classes,))
        self.instance_id = grown(self.instance_id)
        self.instance_counter = grown(self.instance_counter)
        self._capacity = cap

    def allocate_blocks(self, blocks) -> np.ndarray:
        """Slots of the given block coordinates, allocating missing blocks."""
        keys = _encode(np.asarray(blocks, dtype=np.int64).reshape(-1, 3))
        slots = self._slots_for_keys(keys)
        missing = slots < 0
        if np.any(missing):
            new_keys = np.unique(keys[missing])
            first = len(self.blocks)
            self._grow(first + new_keys.size)
            for k, b in enumerate(decode_keys(new_keys).tolist()):
                self.blocks[tuple(b)] = first + k
            self._keys = np.concatenate([self._keys, new_keys])
            self._sorted_keys = None
            slots = self._slots_for_keys(keys)
        return slots

    def allocate(self, coords) -> np.ndarray:
        """Flat pool indices of voxels, allocating missing blocks."""
        block, local = self._split(coords)
        return self.allocate_blocks(block) * BLOCK_VOXELS + local

    def _used(self) -> slice:
        return slice(0, len(self.blocks) * BLOCK_VOXELS)

    def all_coords(self) -> np.ndarray:
        """Voxel coordinates for every pool entry of the allocated blocks."""
        n = len(self.blocks)
        base = decode_keys(self._keys) * BLOCK
        loc = np.stack(np.unravel_index(np.arange(BLOCK_VOXELS), (BLOCK,) * 3), axis=1)
        return (base[:, None, :] + loc[None, :, :]).reshape(n * BLOCK_VOXELS, 3)

    # -- single-voxel access ----------------------------------------------

    def get_voxel(self, coord) -> VoxelState | None:
        idx = int(self.lookup(np.asarray(coord).reshape(1, 3))[0])
        if idx < 0:
            return None
        return VoxelState(
            tsdf=float(self.tsdf[idx]),
            weight=float(self.weight[idx]),
            class_hist=self.class_hist[idx].astype(np.float64),
            instance_id=int(self.instance_id[idx]),
            instance_counter=float(self.instance_counter[idx]),
        )

    def write_voxel(self, coord, state: VoxelState) -> None:
        state.validate(self.w_max, self.n_classes)
        idx = int(self.allocate(np.asarray(coord).reshape(1, 3))[0])
        self.tsdf[idx] = state.tsdf
        self.weight[idx] = state.weight
        self.class_hist[idx] = 0 if state.class_hist is None else state.class_hist
        self.instance_id[idx] = state.instance_id
        self.instance_counter[idx] = state.instance_counter

    # -- extraction ---------------------------------------------------------

    def argmax_class(self, idx: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.class_hist[idx], axis=1)

    def labeled_voxels(self, surface_band: float = 1.0) -> dict[str, np.ndarray]:
        """Observed voxels as arrays, sorted lexicographically by coordinate.

        Keys: coords (N, 3), tsdf, weight, class_id, instance_id.
        """
        used = self._used()
        tsdf = self.tsdf[used]
        weight = self.weight[used]
        sel = np.flatnonzero((weight > 0) & (np.abs(tsdf) < surface_band))
        coords = self.all_coords()[sel]
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        sel = sel[order]
        coords = coords[order]
        cls = self.argmax_class(sel)
        is_thing = np.isin(cls, np.fromiter(self.thing_classes, dtype=np.int64, count=len(self.thing_classes)))
        inst = np.where(is_thing, self.instance_id[sel], 0).astype(np.int64)
        return {
            "coords": coords,
            "tsdf": tsdf[sel].astype(np.float64),
            "weight": weight[sel].astype(np.float64),
            "class_id": cls.astype(np.int64),
            "instance_id": inst,
        }

    def extract_labeled_voxels(self) -> list[tuple[np.ndarray, int, int]]:
        v = self.labeled_voxels()
        centers = self.voxel_centers(v["coords"])
        return [(c, int(k), int(i)) for c, k, i in zip(centers, v["class_id"], v["instance_id"])]

    def instance_ids(self) -> set[int]:
        ids = self.instance_id[self._used()]
        return set(np.unique(ids[ids != 0]).tolist())


@dataclass
class VoxelDump:
    voxel_size: float
    n_classes: int
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    tsdf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    class_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    instance_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.class_id)

    @classmethod
    def from_grid(cls, grid: VoxelBlockGrid) -> "VoxelDump":
        return cls(grid.voxel_size, grid.n_classes, **grid.labeled_voxels())


def write_dump(path, dump: VoxelDump) -> None:
    """Write the text dump: header, then "x y z tsdf weight class_id instance_id" per voxel."""
    lines = [f"{DUMP_MAGIC} {dump.voxel_size!r} {dump.n_classes}"]
    for (x, y, z), t, w, c, i in zip(dump.coords.tolist(), dump.tsdf.tolist(), dump.weight.tolist(),
                                    dump.class_id.tolist(), dump.instance_id.tolist()):
        lines.append(f"{x} {y} {z} {t:.6f} {w:.6g} {c} {i}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_dump(path) -> VoxelDump:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValueError(f"{path}: empty voxel dump")
    head = text[0].split()
    if " ".join(head[:2]) != DUMP_MAGIC or len(head) != 4:
        raise ValueError(f"{path}: bad header {text[0]!r}")
    voxel_size, n_classes = float(head[2]), int(head[3])
    body = [ln for ln in text[1:] if ln.strip()]
    if not body:
        return VoxelDump(voxel_size, n_classes)
    try:
        table = np.array([ln.split() for ln in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed voxel line ({exc})") from None
    if table.shape[1] != 7:
        raise ValueError(f"{path}: expected 7 columns per voxel line")
    return VoxelDump(
        voxel_size,
        n_classes,
        coords=table[:, :3].astype(np.int64),
        tsdf=table[:, 3],
        weight=table[:, 4],
        class_id=table[:, 5].astype(np.int64),
        instance_id=table[:, 6].astype(np.int64),
    )
