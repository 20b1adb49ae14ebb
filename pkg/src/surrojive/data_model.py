"""Unit-level and cell-fold-level data containers, fold assignment and CSV I/O.

Units are stored column-wise in numpy arrays; :class:`UnitRecord` and
:class:`CellFoldAggregate` are the row views used at the boundaries
(construction from records, iteration, file round trips).

Cell ids run over ``1..K`` and fold ids over ``1..L``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "UnitRecord",
    "Dataset",
    "CellFoldAggregate",
    "AggregateTable",
    "DataFormatError",
    "assign_folds",
    "aggregate",
    "as_table",
    "read_aggregates",
    "write_aggregates",
    "read_units",
    "write_units",
]


class DataFormatError(ValueError):
    """Raised for malformed experiment logs; carries the offending row number."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class UnitRecord:
    cell_id: int
    fold_id: int | None
    surrogate: tuple[float, ...]
    outcome: float


@dataclass
class Dataset:
    """Unit-level experiment log with ``K`` cells of ``n`` units each.

    Parameters
    ----------
    cell_ids : ndarray of int, shape (N,)
        Cell membership in ``1..num_cells``.
    surrogates : ndarray, shape (N, d)
        Short-term metrics.
    outcomes : ndarray, shape (N,)
        Long-term outcome.
    num_cells : int
    fold_ids : ndarray of int, shape (N,), optional
        Fold membership in ``1..num_folds``; ``None`` before :func:`assign_folds`.
    num_folds : int, optional
    """

    cell_ids: np.ndarray
    surrogates: np.ndarray
    outcomes: np.ndarray
    num_cells: int
    fold_ids: np.ndarray | None = None
    num_folds: int | None = None

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        surrogates = np.asarray(self.surrogates, dtype=float)
        if surrogates.ndim == 1:
            surrogates = surrogates[:, None]
        self.surrogates = surrogates
        n_units = self.cell_ids.shape[0]
        if surrogates.shape[0] != n_units or self.outcomes.shape != (n_units,):
            raise ValueError("cell_ids, surrogates and outcomes must have matching lengths")
        if n_units == 0:
            raise ValueError("dataset has no units")
        if self.cell_ids.min() < 1 or self.cell_ids.max() > self.num_cells:
            raise ValueError(f"cell ids must lie in 1..{self.num_cells}")
        sizes = np.bincount(self.cell_ids, minlength=self.num_cells + 1)[1:]
        if np.any(sizes != sizes[0]):
            raise ValueError(
                f"every cell must hold the same number of units, got sizes "
                f"between {sizes.min()} and {sizes.max()}"
            )
        if self.fold_ids is not None:
            self.fold_ids = np.asarray(self.fold_ids, dtype=np.int64)
            if self.num_folds is None:
                raise ValueError("num_folds is required when fold_ids are given")
            if self.fold_ids.shape != (n_units,):
                raise ValueError("fold_ids must have one entry per unit")
            if self.fold_ids.min() < 1 or self.fold_ids.max() > self.num_folds:
                raise ValueError(f"fold ids must lie in 1..{self.num_folds}")

    @property
    def num_units(self) -> int:
        return self.cell_ids.shape[0]

    @property
    def surrogate_dim(self) -> int:
        return self.surrogates.shape[1]

    @property
    def units_per_cell(self) -> int:
        return self.num_units // self.num_cells

    @property
    def has_folds(self) -> bool:
        return self.fold_ids is not None

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], num_cells: int,
                     num_folds: int | None = None) -> "Dataset":
        records = list(records)
        if not records:
            raise ValueError("no records")
        dims = {len(r.surrogate) for r in records}
        if len(dims) != 1:
            raise ValueError(f"inconsistent surrogate lengths {sorted(dims)}")
        folds = [r.fold_id for r in records]
        if any(f is None for f in folds):
            if not all(f is None for f in folds):
                raise ValueError("either all or no records may carry a fold id")
            fold_ids = None
        else:
            fold_ids = np.array(folds)
        return cls(
            cell_ids=np.array([r.cell_id for r in records]),
            surrogates=np.array([r.surrogate for r in records], dtype=float),
            outcomes=np.array([r.outcome for r in records], dtype=float),
            num_cells=num_cells,
            fold_ids=fold_ids,
            num_folds=num_folds if fold_ids is not None else None,
        )

    def records(self) -> Iterator[UnitRecord]:
        for i in range(self.num_units):
            yield UnitRecord(
                cell_id=int(self.cell_ids[i]),
                fold_id=None if self.fold_ids is None else int(self.fold_ids[i]),
                surrogate=tuple(float(x) for x in self.surrogates[i]),
                outcome=float(self.outcomes[i]),
            )

    def with_outcomes(self, outcomes: np.ndarray) -> "Dataset":
        return Dataset(self.cell_ids, self.surrogates, outcomes, self.num_cells,
                       self.fold_ids, self.num_folds)

    def with_surrogates(self, surrogates: np.ndarray) -> "Dataset":
        return Dataset(self.cell_ids, surrogates, self.outcomes, self.num_cells,
                       self.fold_ids, self.num_folds)

    def take(self, index: np.ndarray) -> "Dataset":
        """Reorder units; cell and fold structure are preserved."""
        return Dataset(
            self.cell_ids[index], self.surrogates[index], self.outcomes[index],
            self.num_cells,
            None if self.fold_ids is None else self.fold_ids[index],
            self.num_folds,
        )


@dataclass(frozen=True)
class CellFoldAggregate:
    cell_id: int
    fold_id: int
    mean_surrogate: tuple[float, ...]
    mean_outcome: float
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("aggregate count must be positive")


@dataclass
class AggregateTable:
    """Complete cell-by-fold grid of sample means.

    ``s_mean[k, v]`` and ``y_mean[k, v]`` are the means over units of cell
    ``cell_ids[k]`` in fold ``fold_ids[v]``; ``counts[k, v]`` is the number
    of such units.
    """

    cell_ids: np.ndarray
    fold_ids: np.ndarray
    counts: np.ndarray
    s_mean: np.ndarray
    y_mean: np.ndarray

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        self.fold_ids = np.asarray(self.fold_ids, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.s_mean = np.asarray(self.s_mean, dtype=float)
        self.y_mean = np.asarray(self.y_mean, dtype=float)
        shape = (self.cell_ids.size, self.fold_ids.size)
        if self.counts.shape != shape or self.y_mean.shape != shape:
            raise ValueError("counts and y_mean must have shape (num_cells, num_folds)")
        if self.s_mean.ndim != 3 or self.s_mean.shape[:2] != shape:
            raise ValueError("s_mean must have shape (num_cells, num_folds, d)")
        if np.any(self.counts <= 0):
            raise ValueError("every (cell, fold) aggregate needs a positive count")

    @property
    def num_cells(self) -> int:
        return self.cell_ids.size

    @property
    def num_folds(self) -> int:
        return self.fold_ids.size

    @property
    def surrogate_dim(self) -> int:
        return self.s_mean.shape[2]

    def __len__(self) -> int:
        return self.num_cells * self.num_folds

    def __iter__(self) -> Iterator[CellFoldAggregate]:
        for k, cell in enumerate(self.cell_ids):
            for v, fold in enumerate(self.fold_ids):
                yield CellFoldAggregate(
                    cell_id=int(cell),
                    fold_id=int(fold),
                    mean_surrogate=tuple(float(x) for x in self.s_mean[k, v]),
                    mean_outcome=float(self.y_mean[k, v]),
                    count=int(self.counts[k, v]),
                )

    def to_records(self) -> list[CellFoldAggregate]:
        return list(self)

    @classmethod
    def from_records(cls, records: Iterable[CellFoldAggregate]) -> "AggregateTable":
        records = list(records)
        if not records:
            raise ValueError("no aggregates")
        dims = {len(r.mean_surrogate) for r in records}
        if len(dims) != 1:
            raise ValueError(f"inconsistent surrogate dimension across aggregates: {sorted(dims)}")
        cells = sorted({r.cell_id for r in records})
        folds = sorted({r.fold_id for r in records})
        cell_pos = {c: i for i, c in enumerate(cells)}
        fold_pos = {f: i for i, f in enumerate(folds)}
        d = dims.pop()
        counts = np.zeros((len(cells), len(folds)), dtype=np.int64)
        s_mean = np.zeros((len(cells), len(folds), d))
        y_mean = np.zeros((len(cells), len(folds)))
        for r in records:
            k, v = cell_pos[r.cell_id], fold_pos[r.fold_id]
            if counts[k, v]:
                raise ValueError(f"duplicate aggregate for cell {r.cell_id}, fold {r.fold_id}")
            counts[k, v] = r.count
            s_mean[k, v] = r.mean_surrogate
            y_mean[k, v] = r.mean_outcome
        missing = np.argwhere(counts == 0)
        if missing.size:
            k, v = missing[0]
            raise ValueError(f"missing aggregate for cell {cells[k]}, fold {folds[v]}")
        return cls(np.array(cells), np.array(folds), counts, s_mean, y_mean)

    def scaled(self, s_factor: float = 1.0, y_factor: float = 1.0) -> "AggregateTable":
        return AggregateTable(self.cell_ids, self.fold_ids, self.counts,
                              self.s_mean * s_factor, self.y_mean * y_factor)


def as_table(aggregates) -> AggregateTable:
    """Accept an :class:`AggregateTable` or any iterable of :class:`CellFoldAggregate`."""
    if isinstance(aggregates, AggregateTable):
        return aggregates
    return AggregateTable.from_records(aggregates)


def assign_folds(dataset: Dataset, num_folds: int, seed) -> Dataset:
    """Split every cell into ``num_folds`` folds of (near) equal size.

    Within a cell the labels ``1, 2, ..., L, 1, 2, ...`` are randomly
    permuted, so fold sizes differ by at most one and the assignment is
    exchangeable across units.

    Parameters
    ----------
    dataset : Dataset
        Existing fold labels, if any, are replaced.
    num_folds : int
        Number of folds ``L >= 2``.
    seed : int or numpy.random.Generator
    """
    if num_folds < 2:
        raise ValueError(f"need at least 2 folds, got {num_folds}")
    n = dataset.units_per_cell
    if n < num_folds:
        raise ValueError(
            f"cells hold {n} units, fewer than the {num_folds} folds requested"
        )
    rng = np.random.default_rng(seed)
    base = np.arange(n) % num_folds + 1
    labels = rng.permuted(np.tile(base, (dataset.num_cells, 1)), axis=1)
    # units of each cell, in their order of appearance
    order = np.argsort(dataset.cell_ids, kind="stable")
    fold_ids = np.empty(dataset.num_units, dtype=np.int64)
    fold_ids[order] = labels.ravel()
    return Dataset(dataset.cell_ids, dataset.surrogates, dataset.outcomes,
                   dataset.num_cells, fold_ids, num_folds)


def aggregate(dataset: Dataset) -> AggregateTable:
    """Per (cell, fold) sample means of the surrogates and the outcome."""
    if not dataset.has_folds:
        raise ValueError("dataset has no fold assignment; call assign_folds first")
    K, L, d = dataset.num_cells, dataset.num_folds, dataset.surrogate_dim
    key = (dataset.cell_ids - 1) * L + (dataset.fold_ids - 1)
    counts = np.bincount(key, minlength=K * L)
    if np.any(counts == 0):
        raise ValueError("some (cell, fold) pair has no units")
    s_sum = np.column_stack(
        [np.bincount(key, weights=dataset.surrogates[:, j], minlength=K * L) for j in range(d)]
    )
    y_sum = np.bincount(key, weights=dataset.outcomes, minlength=K * L)
    return AggregateTable(
        cell_ids=np.arange(1, K + 1),
        fold_ids=np.arange(1, L + 1),
        counts=counts.reshape(K, L),
        s_mean=(s_sum / counts[:, None]).reshape(K, L, d),
        y_mean=(y_sum / counts).reshape(K, L),
    )


# -- CSV I/O -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _open_for_write(path):
    path = Path(path)
    try:
        return path.open("w", encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_aggregates(aggregates, path) -> None:
    """Write ``cell_id,fold_id,count,s_mean_1..s_mean_d,y_mean`` rows."""
    table = as_table(aggregates)
    d = table.surrogate_dim
    with _open_for_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_id", "fold_id", "count",
                         *[f"s_mean_{j + 1}" for j in range(d)], "y_mean"])
        for agg in table:
            writer.writerow([agg.cell_id, agg.fold_id, agg.count,
                             *map(_fmt, agg.mean_surrogate), _fmt(agg.mean_outcome)])


def _check_header(header: list[str], fixed_prefix: list[str], stem: str, last: str) -> int:
    """Validate a header of the form ``prefix..., stem1..stemd, last``; return d."""
    n_prefix = len(fixed_prefix)
    if header[:n_prefix] != fixed_prefix or len(header) < n_prefix + 2 or header[-1] != last:
        raise DataFormatError(
            f"malformed header {','.join(header)!r}; expected "
            f"{','.join(fixed_prefix)},{stem}1,...,{stem}d,{last}", row=1)
    middle = header[n_prefix:-1]
    expected = [f"{stem}{j + 1}" for j in range(len(middle))]
    if middle != expected:
        raise DataFormatError(f"malformed surrogate columns {middle!r}", row=1)
    return len(middle)


def _parse_number(text: str, row: int, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise DataFormatError(f"cannot parse {text!r} as {kind.__name__}", row=row) from None


def _read_rows(path) -> list[list[str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file", row=1)
    return rows


def read_aggregates(path) -> list[CellFoldAggregate]:
    """Read an aggregate CSV; see :func:`write_aggregates` for the layout."""
    rows = _read_rows(path)
    d = _check_header(rows[0], ["cell_id", "fold_id", "count"], "s_mean_", "y_mean")
    width = d + 4
    seen: dict[tuple[int, int], int] = {}
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(
                f"expected {d} surrogate columns ({width} fields), found {len(row) - 4}",
                row=lineno)
        cell = _parse_number(row[0], lineno, int)
        fold = _parse_number(row[1], lineno, int)
        count = _parse_number(row[2], lineno, int)
        if count <= 0:
            raise DataFormatError(f"count must be positive, got {count}", row=lineno)
        if (cell, fold) in seen:
            raise DataFormatError(
                f"duplicate key (cell={cell}, fold={fold}), first seen on row {seen[cell, fold]}",
                row=lineno)
        seen[cell, fold] = lineno
        values = [_parse_number(x, lineno) for x in row[3:]]
        out.append(CellFoldAggregate(cell, fold, tuple(values[:-1]), values[-1], count))
    if not out:
        raise DataFormatError("no data rows", row=2)
    return out


def write_units(dataset: Dataset, path) -> None:
    """Write ``cell_id,fold_id,s_1..s_d,y`` rows (fold_id empty if unassigned)."""
    d = dataset.surrogate_dim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell_id", "fold_id", *[f"s_{j + 1}" for j in range(d)], "y"])
    folds = dataset.fold_ids
    for i in range(dataset.num_units):
        writer.writerow([int(dataset.cell_ids[i]), "" if folds is None else int(folds[i]),
                         *map(_fmt, dataset.surrogates[i]), _fmt(dataset.outcomes[i])])
    with _open_for_write(path) as fh:
        fh.write(buf.getvalue())


def read_units(path, num_cells: int | None = None, num_folds: int | None = None) -> Dataset:
    """Read a unit-level CSV into a :class:`Dataset`.

    ``num_cells`` and ``num_folds`` default to the largest ids in the file.
    """
    rows = _read_rows(path)
    d = _check_header(rows[0], ["cell_id", "fold_id"], "s_", "y")
    width = d + 3
    cells, folds, surrogates, outcomes = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(
                f"expected {d} surrogate columns ({width} fields), found {len(row) - 3}",
                row=lineno)
        cells.append(_parse_number(row[0], lineno, int))
        folds.append(None if row[1] == "" else _parse_number(row[1], lineno, int))
        values = [_parse_number(x, lineno) for x in row[2:]]
        surrogates.append(values[:-1])
        outcomes.append(values[-1])
    if not cells:
        raise DataFormatError("no data rows", row=2)
    has_folds = folds[0] is not None
    if any((f is not None) != has_folds for f in folds):
        raise DataFormatError("fold_id must be given for all rows or for none")
    try:
        return Dataset(
            cell_ids=np.array(cells),
            surrogates=np.array(surrogates, dtype=float),
            outcomes=np.array(outcomes, dtype=float),
            num_cells=num_cells or max(cells),
            fold_ids=np.array(folds) if has_folds else None,
            num_folds=(num_folds or max(folds)) if has_folds else None,
        )
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
