"""Uniform and unconstrained random sparsity patterns for bipartite layers.

A pattern connects ``n_in`` input neurons to ``n_out`` output neurons and is
stored as CSR over input rows. In a uniform pattern every input neuron has
out-degree ``q_out`` or ``q_out + 1`` and every output neuron has in-degree
``q_in`` or ``q_in + 1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from usn._seeding import as_u64, make_rng
from usn.modelspace import round_half_up

MAGIC = b"USN1"
_HEADER = struct.Struct("<4sIIQQ")

_REPAIR_ATTEMPTS_PER_COLLISION = 64
_MAX_RESHUFFLES = 200


class ConstructionError(RuntimeError):
    """No pattern with the requested degree sequence could be produced."""


class PatternFormatError(ValueError):
    """A serialized pattern is malformed or violates the uniformity invariants."""


@dataclass(frozen=True)
class DegreeSpec:
    n_in: int
    n_out: int
    density: float
    total_edges: int
    base_out_degree: int
    out_remainder: int
    base_in_degree: int
    in_remainder: int

    @property
    def feasible(self) -> bool:
        if self.out_remainder and self.base_out_degree + 1 > self.n_out:
            return False
        if self.in_remainder and self.base_in_degree + 1 > self.n_in:
            return False
        return self.total_edges <= self.n_in * self.n_out


def degree_spec(n_in: int, n_out: int, density: float) -> DegreeSpec:
    """Degree targets for a uniform layer with ``round(density * n_in * n_out)`` edges."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"layer sizes must be positive, got {n_in}x{n_out}")
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    e = round_half_up(density * n_in * n_out)
    q_out, r_out = divmod(e, n_in)
    q_in, r_in = divmod(e, n_out)
    return DegreeSpec(n_in, n_out, float(density), e, q_out, r_out, q_in, r_in)


class SparsityPattern:
    """Immutable bipartite edge set in CSR layout over input rows.

    Args:
        n_in: number of rows (input neurons).
        n_out: number of columns (output neurons).
        row_offsets: ``n_in + 1`` nondecreasing offsets into ``col_indices``.
        col_indices: column of each edge, strictly increasing within a row.
        seed: seed the pattern was generated from (0 when not applicable).
    """

    __slots__ = ("n_in", "n_out", "row_offsets", "col_indices", "seed")

    def __init__(self, n_in, n_out, row_offsets, col_indices, seed=0):
        row_offsets = np.ascontiguousarray(row_offsets, dtype=np.int64)
        col_indices = np.ascontiguousarray(col_indices, dtype=np.int32)
        if row_offsets.shape != (n_in + 1,):
            raise ValueError(f"expected {n_in + 1} row offsets, got {row_offsets.shape[0]}")
        if row_offsets[0] != 0 or row_offsets[-1] != col_indices.shape[0]:
            raise ValueError("row offsets do not span the column index array")
        if np.any(np.diff(row_offsets) < 0):
            raise ValueError("row offsets must be nondecreasing")
        if col_indices.size and (col_indices.min() < 0 or col_indices.max() >= n_out):
            raise ValueError(f"column index out of range [0, {n_out})")
        row_offsets.flags.writeable = False
        col_indices.flags.writeable = False
        object.__setattr__(self, "n_in", int(n_in))
        object.__setattr__(self, "n_out", int(n_out))
        object.__setattr__(self, "row_offsets", row_offsets)
        object.__setattr__(self, "col_indices", col_indices)
        object.__setattr__(self, "seed", as_u64(seed))

    def __setattr__(self, name, value):
        raise AttributeError("SparsityPattern is immutable")

    def __repr__(self):
        return f"SparsityPattern({self.n_in}x{self.n_out}, edges={self.n_edges}, seed={self.seed})"

    def __eq__(self, other):
        if not isinstance(other, SparsityPattern):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    def __hash__(self):
        return hash((self.shape, self.col_indices.tobytes(), self.row_offsets.tobytes()))

    def __getstate__(self):
        return (self.n_in, self.n_out, self.row_offsets, self.col_indices, self.seed)

    def __setstate__(self, state):
        n_in, n_out, offsets, cols, seed = state
        for name, value in zip(self.__slots__, (n_in, n_out, offsets, cols, seed)):
            object.__setattr__(self, name, value)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_in, self.n_out)

    @property
    def n_edges(self) -> int:
        return int(self.col_indices.shape[0])

    @property
    def density(self) -> float:
        return self.n_edges / (self.n_in * self.n_out)

    def row_degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def col_degrees(self) -> np.ndarray:
        return np.bincount(self.col_indices, minlength=self.n_out)

    def row_ids(self) -> np.ndarray:
        """Row index of every edge, aligned with ``col_indices``."""
        return np.repeat(np.arange(self.n_in, dtype=np.int32), self.row_degrees())

    def edge_keys(self) -> np.ndarray:
        """Flat slot index ``row * n_out + col`` of every edge (sorted)."""
        return self.row_ids().astype(np.int64) * self.n_out + self.col_indices

    def to_dense(self, dtype=bool) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=dtype)
        mask[self.row_ids(), self.col_indices] = 1
        return mask

    def transpose(self) -> "SparsityPattern":
        """Same edges with rows and columns swapped (CSR over the old columns)."""
        rows = self.row_ids()
        order = np.lexsort((rows, self.col_indices))
        offsets = np.zeros(self.n_out + 1, dtype=np.int64)
        np.cumsum(self.col_degrees(), out=offsets[1:])
        return SparsityPattern(self.n_out, self.n_in, offsets, rows[order], self.seed)

    def is_uniform(self) -> bool:
        try:
            check_uniform(self)
        except PatternFormatError:
            return False
        return True

    @classmethod
    def from_dense(cls, mask, seed=0) -> "SparsityPattern":
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        offsets = np.zeros(mask.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=mask.shape[0]), out=offsets[1:])
        return cls(mask.shape[0], mask.shape[1], offsets, cols, seed)

    @classmethod
    def from_edges(cls, n_in, n_out, rows, cols, seed=0) -> "SparsityPattern":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                raise ValueError("duplicate edges")
        offsets = np.zeros(n_in + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_in), out=offsets[1:])
        return cls(n_in, n_out, offsets, cols, seed)


def check_uniform(p: SparsityPattern) -> None:
    """Raise PatternFormatError unless ``p`` satisfies every uniform-pattern invariant."""
    e = p.n_edges
    for name, degs, pop in (("row", p.row_degrees(), p.n_in), ("column", p.col_degrees(), p.n_out)):
        q, r = divmod(e, pop)
        if degs.size and (degs.min() < q or degs.max() > q + 1):
            raise PatternFormatError(f"{name} degrees outside {{{q}, {q + 1}}}")
        if int(np.count_nonzero(degs == q + 1)) != r:
            raise PatternFormatError(f"expected {r} {name}s of degree {q + 1}")
    _check_sorted_rows(p)


def _check_sorted_rows(p: SparsityPattern) -> None:
    if p.n_edges < 2:
        return
    steps = np.diff(p.col_indices.astype(np.int64))
    starts = p.row_offsets[1:-1]
    within = np.ones(p.n_edges - 1, dtype=bool)
    # positions where a new row begins are exempt from the ordering check
    within[starts[(starts > 0) & (starts < p.n_edges)] - 1] = False
    if np.any(steps[within] <= 0):
        raise PatternFormatError("column indices must be strictly increasing within each row")


def _degree_vector(rng, n, base, remainder):
    deg = np.full(n, base, dtype=np.int64)
    if remainder:
        deg[rng.choice(n, size=remainder, replace=False)] += 1
    return deg


def _deal(rng, row_deg, col_deg, n_out):
    """Configuration-model sampler with swap repair.

    Column stubs are shuffled and dealt to rows in order; duplicate (row, col)
    pairs are then swapped with random edges elsewhere so that both degree
    sequences are preserved and no duplicate is introduced.
    """
    n_in = row_deg.shape[0]
    rows = np.repeat(np.arange(n_in, dtype=np.int64), row_deg)
    stubs = np.repeat(np.arange(n_out, dtype=np.int64), col_deg)
    e = stubs.shape[0]
    if e == 0:
        return rows, stubs
    for _ in range(_MAX_RESHUFFLES):
        cols = rng.permutation(stubs)
        keys = rows * n_out + cols
        uniq, first, mult = np.unique(keys, return_index=True, return_counts=True)
        if uniq.shape[0] == e:
            return rows, cols
        dup_mask = np.ones(e, dtype=bool)
        dup_mask[first] = False
        dups = np.flatnonzero(dup_mask)
        counts = dict(zip(uniq.tolist(), mult.tolist()))
        if _repair(rng, rows, cols, counts, dups, n_out):
            return rows, cols
    raise ConstructionError(
        f"could not realise degree sequences on a {n_in}x{n_out} grid "
        f"after {_MAX_RESHUFFLES} reshuffles"
    )


def _repair(rng, rows, cols, counts, dups, n_out):
    e = rows.shape[0]
    pending = np.zeros(e, dtype=bool)
    pending[dups] = True
    budget = _REPAIR_ATTEMPTS_PER_COLLISION
    draws = rng.integers(0, e, size=budget * len(dups)).tolist()
    k = 0
    for p in dups.tolist():
        r, c = int(rows[p]), int(cols[p])
        for _ in range(budget):
            q = draws[k]
            k += 1
            if pending[q]:
                continue
            r2, c2 = int(rows[q]), int(cols[q])
            a, b = r * n_out + c2, r2 * n_out + c
            if r2 == r or counts.get(a, 0) or counts.get(b, 0):
                continue
            counts[r * n_out + c] -= 1
            counts[r2 * n_out + c2] -= 1
            counts[a] = 1
            counts[b] = 1
            cols[p], cols[q] = c2, c
            pending[p] = False
            break
        else:
            return False
    return True


def _to_pattern(n_in, n_out, rows, cols, seed):
    order = np.lexsort((cols, rows))
    offsets = np.zeros(n_in + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_in), out=offsets[1:])
    return SparsityPattern(n_in, n_out, offsets, cols[order], seed)


def _complement(n_in, n_out, rows, cols):
    mask = np.ones((n_in, n_out), dtype=bool)
    mask[rows, cols] = False
    return np.nonzero(mask)


def generate_uniform(spec: DegreeSpec, seed: int) -> SparsityPattern:
    """Draw a random uniform pattern; deterministic in ``(spec, seed)``.

    Above density one half the complementary (sparser) pattern is drawn and
    inverted, which keeps collision repair cheap and makes density 1 yield the
    complete grid for every seed.
    """
    if not spec.feasible:
        raise ConstructionError(f"infeasible degree spec {spec}")
    rng = make_rng(seed)
    n_in, n_out = spec.n_in, spec.n_out
    row_deg = _degree_vector(rng, n_in, spec.base_out_degree, spec.out_remainder)
    col_deg = _degree_vector(rng, n_out, spec.base_in_degree, spec.in_remainder)
    flip = 2 * spec.total_edges > n_in * n_out
    if flip:
        row_deg = n_out - row_deg
        col_deg = n_in - col_deg
    rows, cols = _deal(rng, row_deg, col_deg, n_out)
    if flip:
        rows, cols = _complement(n_in, n_out, rows, cols)
    return _to_pattern(n_in, n_out, rows, cols, seed)


def generate_random(n_in: int, n_out: int, total_edges: int, seed: int) -> SparsityPattern:
    """Uniformly random ``total_edges``-subset of the slot grid; degrees unconstrained."""
    slots = n_in * n_out
    if not 0 <= total_edges <= slots:
        raise ValueError(f"cannot place {total_edges} edges on {slots} slots")
    rng = make_rng(seed)
    keys = np.sort(rng.choice(slots, size=total_edges, replace=False))
    rows, cols = np.divmod(keys, n_out)
    return _to_pattern(n_in, n_out, rows, cols, seed)


def pattern_distance(a: SparsityPattern, b: SparsityPattern) -> float:
    """Fraction of ``a``'s edges absent from ``b``."""
    if a.shape != b.shape:
        raise ValueError(f"pattern shapes differ: {a.shape} vs {b.shape}")
    if a.n_edges != b.n_edges:
        raise ValueError(f"edge counts differ: {a.n_edges} vs {b.n_edges}")
    if a.n_edges == 0:
        raise ValueError("distance is undefined for empty patterns")
    shared = np.intersect1d(a.edge_keys(), b.edge_keys(), assume_unique=True).shape[0]
    return 1.0 - shared / a.n_edges


def serialize_pattern(p: SparsityPattern) -> bytes:
    """Little-endian binary layout: header, u64 row offsets, u32 column indices."""
    header = _HEADER.pack(MAGIC, p.n_in, p.n_out, p.n_edges, p.seed)
    return (
        header
        + p.row_offsets.astype("<u8").tobytes()
        + p.col_indices.astype("<u4").tobytes()
    )


def read_pattern(buf, offset=0, require_uniform=True):
    """Parse one pattern starting at ``offset``; return ``(pattern, end_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < _HEADER.size:
        raise PatternFormatError(f"truncated header at byte {offset}")
    magic, n_in, n_out, e, seed = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise PatternFormatError(f"bad magic {bytes(magic)!r} at byte {offset}")
    if n_in < 1 or n_out < 1:
        raise PatternFormatError(f"invalid shape {n_in}x{n_out}")
    if e > n_in * n_out:
        raise PatternFormatError(f"{e} edges exceed {n_in * n_out} slots")
    pos = offset + _HEADER.size
    need = 8 * (n_in + 1) + 4 * e
    if len(buf) - pos < need:
        raise PatternFormatError(
            f"truncated body at byte {len(buf)}: need {need} bytes after byte {pos}"
        )
    offsets = np.frombuffer(buf, dtype="<u8", count=n_in + 1, offset=pos).astype(np.int64)
    pos += 8 * (n_in + 1)
    cols = np.frombuffer(buf, dtype="<u4", count=e, offset=pos).astype(np.int32)
    pos += 4 * e
    try:
        p = SparsityPattern(n_in, n_out, offsets, cols, seed)
    except ValueError as exc:
        raise PatternFormatError(str(exc)) from None
    if require_uniform:
        check_uniform(p)
    else:
        _check_sorted_rows(p)
    return p, pos


def deserialize_pattern(data: bytes, require_uniform: bool = True) -> SparsityPattern:
    p, end = read_pattern(data, 0, require_uniform)
    if end != len(data):
        raise PatternFormatError(f"{len(data) - end} trailing bytes after byte {end}")
    return p
