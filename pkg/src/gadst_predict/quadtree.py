"""Morton-coded linear quadtrees, the universal quadlist, alignment and flattening.

Quadrant digits follow Z-order with row 0 at the north edge:
0 = NW, 1 = NE, 2 = SW, 3 = SE. A key's base-4 path spells the descent from
the root; its integer code interleaves the row and column bits (row bit first).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class QuadTreeError(ValueError):
    pass


@total_ordering
@dataclass(frozen=True)
class MortonKey:
    code: int
    level: int

    def __post_init__(self):
        if self.level < 0 or self.code < 0:
            raise QuadTreeError(f"invalid key ({self.code}, {self.level})")
        if self.code >= 4 ** self.level:
            raise QuadTreeError(f"code {self.code} out of range for level {self.level}")

    @property
    def path(self) -> str:
        if self.level == 0:
            return ""
        return np.base_repr(self.code, 4).zfill(self.level)

    def child(self, quadrant: int) -> "MortonKey":
        return MortonKey(self.code * 4 + quadrant, self.level + 1)

    def children(self) -> list["MortonKey"]:
        return [self.child(q) for q in range(4)]

    def parent(self) -> "MortonKey":
        if self.level == 0:
            raise QuadTreeError("root has no parent")
        return MortonKey(self.code // 4, self.level - 1)

    def is_ancestor_of(self, other: "MortonKey") -> bool:
        return other.level >= self.level and other.code >> (2 * (other.level - self.level)) == self.code

    def __lt__(self, other: "MortonKey") -> bool:
        # depth-first (preorder) order == lexicographic order of paths
        return self.path < other.path

    def __str__(self):
        return self.path or "."


ROOT = MortonKey(0, 0)


def morton_encode(y: int, x: int, level: int) -> MortonKey:
    if level < 0:
        raise QuadTreeError("level must be >= 0")
    if not (0 <= y < 2 ** level and 0 <= x < 2 ** level):
        raise QuadTreeError(f"coordinate ({y}, {x}) out of range for level {level}")
    code = 0
    for b in range(level - 1, -1, -1):
        code = (code << 2) | (((y >> b) & 1) << 1) | ((x >> b) & 1)
    return MortonKey(code, level)


def morton_decode(key: MortonKey) -> tuple[int, int]:
    if key.code >= 4 ** key.level:
        raise QuadTreeError(f"code {key.code} out of range for level {key.level}")
    y = x = 0
    for b in range(key.level - 1, -1, -1):
        pair = (key.code >> (2 * b)) & 3
        y = (y << 1) | (pair >> 1)
        x = (x << 1) | (pair & 1)
    return y, x


def quadpath_to_morton(path: str) -> MortonKey:
    if path in ("", "."):
        return ROOT
    if any(ch not in "0123" for ch in path):
        raise QuadTreeError(f"invalid quadrant path {path!r}")
    return MortonKey(int(path, 4), len(path))


def block_shape(shape: tuple[int, int], level: int) -> tuple[int, int]:
    return (shape[0] >> level, shape[1] >> level)


def key_extent(key: MortonKey, shape: tuple[int, int]) -> tuple[slice, slice]:
    """Row/column slices covered by ``key`` in a raster of ``shape``."""
    h, w = block_shape(shape, key.level)
    y, x = morton_decode(key)
    return slice(y * h, (y + 1) * h), slice(x * w, (x + 1) * w)


@dataclass
class QuadNode:
    key: MortonKey
    payload: np.ndarray | None = None
    children: list["QuadNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self):
        yield self
        for ch in self.children:
            yield from ch.walk()


@dataclass
class QuadTree:
    shape: tuple[int, int]
    root: QuadNode
    max_level: int

    def nodes(self) -> list[QuadNode]:
        return list(self.root.walk())

    def leaves(self) -> list[QuadNode]:
        return [n for n in self.root.walk() if n.is_leaf]

    def leaf_keys(self) -> list[MortonKey]:
        return [n.key for n in self.leaves()]

    def find(self, key: MortonKey) -> QuadNode | None:
        node = self.root
        for digit in key.path:
            if node.is_leaf:
                return None
            node = node.children[int(digit)]
        return node


def _log2(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise QuadTreeError(f"{n} is not a power of two")
    return n.bit_length() - 1


def default_max_level(shape: tuple[int, int]) -> int:
    """Deepest level whose blocks are still at least 2x2."""
    return max(_log2(min(shape)) - 1, 0)


def decompose(raster: np.ndarray, max_level: int | None = None, split_uniform: bool = True) -> QuadTree:
    """Block-decompose ``raster``.

    A block is a leaf when it is all zero or sits at ``max_level``; otherwise it
    is split into its four quadrants. With ``split_uniform=False`` a block whose
    cells all share one value is also kept whole (classic region quadtree).
    """
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise QuadTreeError("raster must be 2-D")
    lm = min(_log2(raster.shape[0]), _log2(raster.shape[1]))
    if max_level is None:
        max_level = default_max_level(raster.shape)
    if not 0 <= max_level <= lm:
        raise QuadTreeError(f"max_level {max_level} outside [0, {lm}]")

    def build(key: MortonKey) -> QuadNode:
        block = raster[key_extent(key, raster.shape)]
        stop = key.level == max_level or not block.any()
        if not stop and not split_uniform:
            stop = bool((block == block.flat[0]).all())
        if stop:
            return QuadNode(key, block.copy())
        return QuadNode(key, None, [build(k) for k in key.children()])

    return QuadTree(tuple(raster.shape), build(ROOT), max_level)


def reconstruct(tree: QuadTree) -> np.ndarray:
    dtype = next(n.payload.dtype for n in tree.leaves())
    out = np.zeros(tree.shape, dtype=dtype)
    for leaf in tree.leaves():
        out[key_extent(leaf.key, tree.shape)] = leaf.payload
    return out


@dataclass
class UniversalQuadTree:
    tree: QuadTree
    node_shapes: dict[MortonKey, tuple[int, int]]

    @property
    def shape(self) -> tuple[int, int]:
        return self.tree.shape


def build_universal(rasters: Sequence[np.ndarray], max_level: int | None = None) -> UniversalQuadTree:
    """Decompose the elementwise sum of all training rasters."""
    if len(rasters) == 0:
        raise QuadTreeError("cannot build a universal tree from an empty set")
    shapes = {np.shape(r) for r in rasters}
    if len(shapes) != 1:
        raise QuadTreeError(f"rasters have mixed shapes {sorted(shapes)}")
    total = np.sum(np.stack([np.asarray(r, dtype=np.float64) for r in rasters]), axis=0)
    tree = decompose(total, max_level)
    node_shapes = {n.key: block_shape(tree.shape, n.key.level) for n in tree.nodes()}
    return UniversalQuadTree(tree, node_shapes)


def build_universal_quadlist(universal: UniversalQuadTree | QuadTree) -> list[MortonKey]:
    """Replace a node by its children whenever all four exist, recursively; keep it otherwise."""
    tree = universal.tree if isinstance(universal, UniversalQuadTree) else universal
    out: list[MortonKey] = []

    def visit(node: QuadNode):
        if len(node.children) == 4:
            for ch in node.children:
                visit(ch)
        else:
            out.append(node.key)

    visit(tree.root)
    return out


def _as_raster(local, shape) -> np.ndarray:
    if isinstance(local, QuadTree):
        return reconstruct(local)
    if isinstance(local, Mapping):
        out = None
        for key, payload in local.items():
            payload = np.asarray(payload)
            if out is None:
                out = np.zeros(shape, dtype=payload.dtype)
            out[key_extent(key, shape)] = payload
        return out if out is not None else np.zeros(shape)
    return np.asarray(local)


def align(local, quadlist: Sequence[MortonKey], node_shapes: Mapping[MortonKey, tuple[int, int]],
          shape: tuple[int, int] | None = None) -> dict[MortonKey, np.ndarray]:
    """Payload of every quadlist key taken from a local tree (or raster / payload map).

    Keys missing locally come out as zero blocks of the universal shape; local
    leaves coarser than a key contribute the matching sub-block.
    """
    if shape is None:
        if isinstance(local, QuadTree):
            shape = local.shape
        elif isinstance(local, Mapping):
            raise QuadTreeError("shape is required when aligning a payload map")
        else:
            shape = np.shape(local)
    if isinstance(local, QuadTree) and tuple(local.shape) != tuple(shape):
        raise QuadTreeError("local and universal trees have different grids")
    raster = _as_raster(local, shape)
    out = {}
    for key in quadlist:
        block = raster[key_extent(key, shape)]
        want = tuple(node_shapes[key])
        assert block.shape == want, f"payload {block.shape} does not fit universal shape {want}"
        out[key] = block.copy()
    return out


@dataclass(frozen=True)
class TableEntry:
    key: MortonKey
    data_shape: tuple[int, int]
    index_start: int
    index_stop: int


@dataclass(frozen=True)
class GeoIndexTable:
    entries: tuple[TableEntry, ...]
    shape: tuple[int, int] | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def length(self) -> int:
        return self.entries[-1].index_stop if self.entries else 0

    @property
    def keys(self) -> list[MortonKey]:
        return [e.key for e in self.entries]

    def shape_groups(self) -> dict[tuple[int, int], np.ndarray]:
        """Row indices of each node's cells, grouped by equal payload shape.

        Maps data_shape -> int array (n_nodes, h*w); used to convolve all nodes
        of one shape together.
        """
        groups: dict[tuple[int, int], list[np.ndarray]] = {}
        for e in self.entries:
            groups.setdefault(e.data_shape, []).append(np.arange(e.index_start, e.index_stop))
        return {s: np.stack(v) for s, v in groups.items()}

    def raster_index(self) -> np.ndarray:
        """Flat raster position (row-major) of every frame cell."""
        if self.shape is None:
            raise QuadTreeError("table has no grid shape attached")
        grid = np.arange(self.shape[0] * self.shape[1]).reshape(self.shape)
        idx = np.empty(self.length, dtype=np.int64)
        for e in self.entries:
            idx[e.index_start:e.index_stop] = grid[key_extent(e.key, self.shape)].ravel()
        return idx

    def dumps(self) -> str:
        lines = [f"{e.key} {e.data_shape[0]} {e.data_shape[1]} {e.index_start} {e.index_stop}"
                 for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        header = f"# grid {self.shape[0]} {self.shape[1]}\n" if self.shape else ""
        Path(path).write_text(header + self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "GeoIndexTable":
        entries, shape = [], None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "grid":
                    shape = (int(parts[1]), int(parts[2]))
                continue
            path, h, w, a, b = line.split()
            entries.append(TableEntry(quadpath_to_morton(path), (int(h), int(w)), int(a), int(b)))
        table = cls(tuple(entries), shape)
        check_table(table)
        return table

    @classmethod
    def load(cls, path) -> "GeoIndexTable":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def check_table(table: GeoIndexTable) -> None:
    pos = 0
    for e in table.entries:
        if e.index_start != pos or e.index_stop - e.index_start != e.data_shape[0] * e.data_shape[1]:
            raise QuadTreeError(f"table entry {e.key} is not contiguous")
        pos = e.index_stop


def build_geo_index_table(quadlist: Sequence[MortonKey], node_shapes: Mapping[MortonKey, tuple[int, int]],
                          shape: tuple[int, int] | None = None) -> GeoIndexTable:
    if not quadlist:
        raise QuadTreeError("quadlist is empty")
    entries, pos = [], 0
    for key in quadlist:
        h, w = node_shapes[key]
        entries.append(TableEntry(key, (int(h), int(w)), pos, pos + h * w))
        pos += h * w
    return GeoIndexTable(tuple(entries), shape)


def flatten(payloads: Mapping[MortonKey, np.ndarray], table: GeoIndexTable) -> np.ndarray:
    """Concatenate row-major node payloads in table order."""
    parts = []
    for e in table.entries:
        p = np.asarray(payloads[e.key])
        if p.shape != e.data_shape:
            raise QuadTreeError(f"payload for {e.key} has shape {p.shape}, table says {e.data_shape}")
        parts.append(p.ravel())
    return np.concatenate(parts)


def unflatten(values: np.ndarray, table: GeoIndexTable) -> dict[MortonKey, np.ndarray]:
    values = np.asarray(values)
    if values.shape[0] != table.length:
        raise QuadTreeError(f"frame length {values.shape[0]} != table length {table.length}")
    return {e.key: values[e.index_start:e.index_stop].reshape(e.data_shape) for e in table.entries}


def unflatten_to_raster(values: np.ndarray, table: GeoIndexTable) -> np.ndarray:
    values = np.asarray(values)
    if values.shape[-1] != table.length:
        raise QuadTreeError(f"frame length {values.shape[-1]} != table length {table.length}")
    out = np.zeros(values.shape[:-1] + (table.shape[0] * table.shape[1],), dtype=values.dtype)
    out[..., table.raster_index()] = values
    return out.reshape(values.shape[:-1] + tuple(table.shape))


def raster_to_frame(rasters: np.ndarray, table: GeoIndexTable) -> np.ndarray:
    """Fast path of flatten(align(...)) for raster stacks: (..., M, N) -> (..., L)."""
    rasters = np.asarray(rasters)
    flat = rasters.reshape(rasters.shape[:-2] + (-1,))
    return flat[..., table.raster_index()]


def save_payloads_csv(payloads: Mapping[MortonKey, np.ndarray], path) -> None:
    """Debug dump: one row per node, ``path,h,w,v0,v1,...`` in row-major order."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for key, p in payloads.items():
            vals = ",".join(repr(float(v)) for v in np.ravel(p))
            fh.write(f"{key},{p.shape[0]},{p.shape[1]},{vals}\n")


def paint_extents(keys: Iterable[MortonKey], shape: tuple[int, int]) -> np.ndarray:
    """How many keys cover each cell."""
    cover = np.zeros(shape, dtype=np.int64)
    for k in keys:
        cover[key_extent(k, shape)] += 1
    return cover
