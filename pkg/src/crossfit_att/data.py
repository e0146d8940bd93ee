"""Observations, datasets, fold plans and the random-stream contract.

Every randomized routine in the package takes an :class:`RngStream` rather
than a bare generator.  A stream is a pure value ``(seed, path)``; the actual
draws come from numpy's PCG64 bit generator seeded through
:class:`numpy.random.SeedSequence` with ``path`` as the spawn key.  Deriving
a child stream never touches shared state, so Monte Carlo repetitions give
the same numbers whatever order (or process) they run in.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidSplitError

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by a master seed and a path of stream ids."""

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if isinstance(self.stream, int):
            object.__setattr__(self, "stream", (self.stream,))
        object.__setattr__(self, "seed", int(self.seed) & _SEED_MASK)
        if any(int(s) < 0 for s in self.stream):
            raise ValueError("stream ids must be non-negative")
        object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))

    def child(self, *ids: int) -> "RngStream":
        """Substream ``path + ids``."""
        return RngStream(self.seed, self.stream + tuple(ids))

    def generator(self) -> np.random.Generator:
        """A fresh generator; two calls on equal streams give identical draws."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(seq))


class Observation(NamedTuple):
    x: np.ndarray
    a: int
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``x`` (n, d), binary treatment ``a`` and outcome ``y`` in [0, 1]."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(self.a)
        y = np.array(self.y, dtype=float, copy=True)
        if x.ndim != 2 or a.ndim != 1 or y.ndim != 1:
            raise ValueError("x must be 2-D, a and y 1-D")
        n = x.shape[0]
        if n == 0:
            raise ValueError("dataset must be nonempty")
        if a.shape[0] != n or y.shape[0] != n:
            raise ValueError(f"length mismatch: x has {n} rows, a {a.shape[0]}, y {y.shape[0]}")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("covariates and outcomes must be finite")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment must be coded 0/1")
        if np.any(y < 0) or np.any(y > 1):
            raise ValueError("outcome must lie in [0, 1]")
        a = a.astype(np.int8)
        for arr in (x, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Observation:
        return Observation(self.x[i], int(self.a[i]), float(self.y[i]))

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        if not observations:
            raise ValueError("dataset must be nonempty")
        dims = {len(np.atleast_1d(o.x)) for o in observations}
        if len(dims) != 1:
            raise ValueError(f"inconsistent covariate dimensions {sorted(dims)}")
        return cls(
            np.array([np.atleast_1d(o.x) for o in observations], dtype=float),
            np.array([o.a for o in observations]),
            np.array([o.y for o in observations], dtype=float),
        )


def read_dataset_csv(path) -> Dataset:
    """Read a headered CSV with columns ``x1..xd, a, y``.

    Parsing is strict: missing columns, non-numeric cells, a treatment other
    than 0/1 or an outcome outside [0, 1] raise ``ValueError`` naming the row.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if "a" not in header or "y" not in header:
            raise ValueError(f"{path}: header must contain 'a' and 'y' columns")
        xcols = sorted(
            (h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:])
        )
        if not xcols or [int(h[1:]) for h in xcols] != list(range(1, len(xcols) + 1)):
            raise ValueError(f"{path}: covariate columns must be x1..xd")
        extra = set(header) - set(xcols) - {"a", "y"}
        if extra:
            raise ValueError(f"{path}: unexpected columns {sorted(extra)}")
        ix = [header.index(h) for h in xcols]
        ia, iy = header.index("a"), header.index("y")
        xs, avals, yvals = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                xs.append([float(row[j]) for j in ix])
                a = float(row[ia])
                y = float(row[iy])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if a not in (0.0, 1.0):
                raise ValueError(f"{path}:{lineno}: treatment must be 0 or 1, got {row[ia]!r}")
            if not 0.0 <= y <= 1.0:
                raise ValueError(f"{path}:{lineno}: outcome must be in [0, 1], got {row[iy]!r}")
            avals.append(int(a))
            yvals.append(y)
    if not xs:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(avals), np.array(yvals))


def write_dataset_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(dataset.d)] + ["a", "y"])
        for i in range(dataset.n):
            w.writerow([repr(float(v)) for v in dataset.x[i]] + [int(dataset.a[i]), repr(float(dataset.y[i]))])


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of each observation to one of ``v_count`` folds (0-based)."""

    v_count: int
    assignment: np.ndarray
    _members: tuple = field(init=False, repr=False)

    def __post_init__(self):
        assignment = np.array(self.assignment, dtype=np.intp, copy=True)
        if self.v_count < 2:
            raise InvalidSplitError("need at least two folds")
        if assignment.ndim != 1 or np.any(assignment < 0) or np.any(assignment >= self.v_count):
            raise InvalidSplitError("fold indices must lie in 0..v_count-1")
        assignment.setflags(write=False)
        members = []
        for v in range(self.v_count):
            idx = np.flatnonzero(assignment == v)
            idx.setflags(write=False)
            members.append(idx)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "_members", tuple(members))

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    def in_fold(self, v: int) -> np.ndarray:
        """Indices ``I_v``."""
        return self._members[v]

    def out_of_fold(self, v: int) -> np.ndarray:
        """Indices of the complement of fold ``v``."""
        return np.flatnonzero(self.assignment != v)

    def sizes(self) -> np.ndarray:
        return np.array([m.size for m in self._members])


def make_fold_plan(n: int, v_count: int, rng: RngStream) -> FoldPlan:
    """Uniformly random balanced partition: shuffle, then cut into contiguous chunks."""
    if v_count < 2:
        raise InvalidSplitError(f"v_count must be at least 2, got {v_count}")
    if n < 2 * v_count:
        raise InvalidSplitError(f"cannot split {n} observations into {v_count} folds (need n >= {2 * v_count})")
    perm = rng.generator().permutation(n)
    assignment = np.empty(n, dtype=np.intp)
    for v, chunk in enumerate(np.array_split(perm, v_count)):
        assignment[chunk] = v
    return FoldPlan(v_count, assignment)


def treated_fraction(dataset: Dataset, indices) -> float:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("treated_fraction of an empty index set")
    return float(dataset.a[idx].sum()) / idx.size
