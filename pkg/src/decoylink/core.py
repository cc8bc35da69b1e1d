"""Datasets over categorical linkage variables, comparison vectors and blocking.

Records are stored as integer category codes. Text values are mapped to codes
through a :class:`Codebook` that is shared by both files of a linkage task, so
that equal codes always mean equal raw values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, SchemaError

MISSING = -1


@dataclass(frozen=True)
class Variable:
    name: str
    cardinality: int = 1
    values: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.cardinality < 1:
            raise SchemaError(f"variable {self.name!r}: cardinality must be >= 1")
        if self.values is not None and len(self.values) > self.cardinality:
            object.__setattr__(self, "cardinality", len(self.values))


@dataclass(frozen=True)
class Schema:
    """Ordered declaration of the linkage variables."""

    variables: tuple[Variable, ...]
    missing_code: int = MISSING

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate variable names in schema: {names}")
        if not names:
            raise SchemaError("schema declares no variables")
        if self.missing_code >= 0:
            raise SchemaError("missing_code must be negative so it never collides with a category")

    @classmethod
    def from_names(cls, names: Iterable[str], cardinalities: Iterable[int] | None = None):
        names = list(names)
        cards = list(cardinalities) if cardinalities is not None else [1] * len(names)
        return cls(tuple(Variable(n, c) for n, c in zip(names, cards)))

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def cardinalities(self) -> list[int]:
        return [v.cardinality for v in self.variables]

    def __len__(self):
        return len(self.variables)

    def index(self, name: str) -> int:
        for k, v in enumerate(self.variables):
            if v.name == name:
                return k
        raise SchemaError(f"unknown variable {name!r}")

    def with_cardinalities(self, cards: Sequence[int]) -> "Schema":
        variables = tuple(replace(v, cardinality=max(v.cardinality, int(c)))
                          for v, c in zip(self.variables, cards))
        return replace(self, variables=variables)

    def compatible(self, other: "Schema") -> bool:
        return self.names == other.names and self.missing_code == other.missing_code


class Codebook:
    """Per-variable mapping between raw text values and integer codes.

    Codes follow the schema's declared value order; values seen for the first
    time while loading are appended.
    """

    def __init__(self, schema: Schema):
        self.schema = schema
        self._values: dict[str, list[str]] = {}
        self._codes: dict[str, dict[str, int]] = {}
        for v in schema.variables:
            vals = list(v.values or ())
            self._values[v.name] = vals
            self._codes[v.name] = {s: i for i, s in enumerate(vals)}

    def encode(self, name: str, value: str) -> int:
        if value == "":
            return self.schema.missing_code
        codes = self._codes[name]
        code = codes.get(value)
        if code is None:
            code = len(codes)
            codes[value] = code
            self._values[name].append(value)
        return code

    def decode(self, name: str, code: int) -> str:
        if code == self.schema.missing_code:
            return ""
        return self._values[name][code]

    def size(self, name: str) -> int:
        return len(self._values[name])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of category codes, one row per record.

    ``synthetic`` flags decoy rows; ``source_id`` holds stable record ids.
    """

    schema: Schema
    rows: np.ndarray
    synthetic: np.ndarray
    source_id: np.ndarray
    codebook: Codebook | None = field(default=None, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int32)
        if rows.ndim != 2:
            rows = rows.reshape(-1, len(self.schema))
        if rows.shape[1] != len(self.schema):
            raise SchemaError(f"rows have {rows.shape[1]} columns, schema declares {len(self.schema)}")
        n = rows.shape[0]
        synthetic = np.asarray(self.synthetic, dtype=bool).reshape(-1)
        source_id = np.asarray(self.source_id, dtype=object).reshape(-1)
        if synthetic.shape[0] != n or source_id.shape[0] != n:
            raise SchemaError("origin and source_id vectors must have one entry per row")
        if n and len(set(source_id.tolist())) != n:
            raise SchemaError("source_id values must be unique within a dataset")
        cards = np.asarray(self.schema.cardinalities)
        if n:
            bad = (rows != self.schema.missing_code) & ((rows < 0) | (rows >= cards))
            if bad.any():
                r, c = np.argwhere(bad)[0]
                raise SchemaError(f"invalid code {rows[r, c]} for variable "
                                  f"{self.schema.variables[c].name!r} in row {r}")
        for arr in (rows, synthetic, source_id):
            arr.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "synthetic", synthetic)
        object.__setattr__(self, "source_id", source_id)

    @classmethod
    def from_codes(cls, schema: Schema, rows, synthetic: bool = False, ids=None,
                   codebook: Codebook | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int32).reshape(-1, len(schema))
        n = rows.shape[0]
        if ids is None:
            ids = [str(i) for i in range(n)]
        if n:
            seen = rows.max(axis=0) + 1
            schema = schema.with_cardinalities(np.maximum(seen, 1))
        return cls(schema, rows, np.full(n, synthetic, dtype=bool), np.asarray(ids, dtype=object), codebook)

    def __len__(self):
        return self.rows.shape[0]

    @property
    def n_real(self) -> int:
        return int((~self.synthetic).sum())

    @property
    def n_synthetic(self) -> int:
        return int(self.synthetic.sum())

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.schema, self.rows[index], self.synthetic[index], self.source_id[index], self.codebook)

    def concat(self, other: "Dataset") -> "Dataset":
        if not self.schema.compatible(other.schema):
            raise SchemaError("cannot concatenate datasets with different schemas")
        cards = np.maximum(self.schema.cardinalities, other.schema.cardinalities)
        return Dataset(self.schema.with_cardinalities(cards),
                       np.vstack([self.rows, other.rows]),
                       np.concatenate([self.synthetic, other.synthetic]),
                       np.concatenate([self.source_id, other.source_id]),
                       self.codebook or other.codebook)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index(name)]

    def decoded(self) -> list[list[str]]:
        """Rows as text values (codes are printed when no codebook is attached)."""
        out = []
        miss = self.schema.missing_code
        for row in self.rows:
            vals = []
            for var, code in zip(self.schema.variables, row):
                if code == miss:
                    vals.append("")
                elif self.codebook is not None and code < self.codebook.size(var.name):
                    vals.append(self.codebook.decode(var.name, int(code)))
                else:
                    vals.append(str(int(code)))
            out.append(vals)
        return out


def load_dataset(path, schema: Schema, origin: str = "real", codebook: Codebook | None = None,
                 id_column: str | None = None) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Pass the same ``codebook`` when loading both files of a linkage task.
    """
    if origin not in ("real", "synthetic"):
        raise InputError(f"origin must be 'real' or 'synthetic', got {origin!r}")
    codebook = codebook if codebook is not None else Codebook(schema)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InputError(f"{path}: empty file, header row required") from None
            header = [h.strip() for h in header]
            cols = []
            for name in schema.names:
                if name not in header:
                    raise SchemaError(f"{path}: missing declared column {name!r}")
                cols.append(header.index(name))
            id_col = None
            if id_column is not None:
                if id_column not in header:
                    raise SchemaError(f"{path}: missing id column {id_column!r}")
                id_col = header.index(id_column)
            rows, ids = [], []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) < len(header):
                    rec = rec + [""] * (len(header) - len(rec))
                rows.append([codebook.encode(name, rec[c].strip()) for name, c in zip(schema.names, cols)])
                ids.append(rec[id_col].strip() if id_col is not None else str(len(ids)))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    cards = [max(1, codebook.size(n)) for n in schema.names]
    schema = schema.with_cardinalities(cards)
    rows = np.asarray(rows, dtype=np.int32).reshape(-1, len(schema))
    return Dataset(schema, rows, np.full(len(rows), origin == "synthetic"), np.asarray(ids, dtype=object), codebook)


def load_pair(path_a, path_b, schema: Schema, id_column: str | None = None) -> tuple[Dataset, Dataset]:
    """Load both files with a shared codebook; schemas end up identical."""
    book = Codebook(schema)
    a = load_dataset(path_a, schema, codebook=book, id_column=id_column)
    b = load_dataset(path_b, schema, codebook=book, id_column=id_column)
    cards = [max(1, book.size(n)) for n in schema.names]
    full = schema.with_cardinalities(cards)
    return replace(a, schema=full), replace(b, schema=full)


def write_dataset(ds: Dataset, path, id_column: str = "id", with_origin: bool = False) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [id_column] + ds.schema.names + (["origin"] if with_origin else [])
        w.writerow(header)
        for sid, syn, vals in zip(ds.source_id, ds.synthetic, ds.decoded()):
            extra = ["synthetic" if syn else "real"] if with_origin else []
            w.writerow([sid] + vals + extra)


@dataclass(frozen=True)
class ComparisonVector:
    agreements: tuple[int, ...]
    any_missing: bool

    @property
    def pattern(self) -> int:
        return sum(bit << k for k, bit in enumerate(self.agreements))


def compare_pair(a, b, schema: Schema) -> ComparisonVector:
    a = np.asarray(a)
    b = np.asarray(b)
    miss = schema.missing_code
    present = (a != miss) & (b != miss)
    agree = present & (a == b)
    return ComparisonVector(tuple(int(x) for x in agree), bool((~present).any()))


def agreement_patterns(a_rows: np.ndarray, b_rows: np.ndarray, missing_code: int = MISSING) -> np.ndarray:
    """Pattern codes for the full cross product, shape (len(a_rows), len(b_rows)).

    Bit ``k`` of a code is set when both records carry the same non-missing
    value of variable ``k``.
    """
    n_vars = a_rows.shape[1]
    dtype = np.uint8 if n_vars <= 8 else (np.uint16 if n_vars <= 16 else np.uint32)
    out = np.zeros((a_rows.shape[0], b_rows.shape[0]), dtype=dtype)
    for k in range(n_vars):
        av = a_rows[:, k][:, None]
        eq = av == b_rows[:, k][None, :]
        eq &= av != missing_code
        out |= eq.astype(dtype) << dtype(k)
    return out


@dataclass(frozen=True)
class Block:
    value: int
    a_index: np.ndarray
    b_index: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.a_index) * len(self.b_index)


@dataclass(frozen=True)
class BlockPartition:
    blocking_variable: str
    blocks: tuple[Block, ...]
    unblocked_a: np.ndarray
    unblocked_b: np.ndarray

    @property
    def n_pairs(self) -> int:
        return sum(b.n_pairs for b in self.blocks)

    def report(self) -> str:
        return (f"blocking on {self.blocking_variable!r}: {len(self.blocks)} blocks, "
                f"{self.n_pairs} candidate pairs, {len(self.unblocked_a)} A and "
                f"{len(self.unblocked_b)} B records unblocked (missing value)")


def block_datasets(a: Dataset, b: Dataset, variable: str) -> BlockPartition:
    ka = a.schema.index(variable)
    kb = b.schema.index(variable)
    miss = a.schema.missing_code
    col_a, col_b = a.rows[:, ka], b.rows[:, kb]
    values = np.union1d(col_a[col_a != miss], col_b[col_b != miss])
    order_a = np.argsort(col_a, kind="stable")
    order_b = np.argsort(col_b, kind="stable")
    sa, sb = col_a[order_a], col_b[order_b]
    blocks = []
    for v in values:
        ia = order_a[np.searchsorted(sa, v, "left"):np.searchsorted(sa, v, "right")]
        ib = order_b[np.searchsorted(sb, v, "left"):np.searchsorted(sb, v, "right")]
        blocks.append(Block(int(v), np.sort(ia), np.sort(ib)))
    return BlockPartition(variable, tuple(blocks),
                          np.flatnonzero(col_a == miss), np.flatnonzero(col_b == miss))
