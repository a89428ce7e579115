from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd

from core.models import StreamRecord, StreamSchema


logger = logging.getLogger("EnsembleGP")

_LINE_RE = re.compile(r"line (\d+)")


class StreamParseError(ValueError):
    """Malformed input row; `row` is the 1-based data row (header excluded)."""

    def __init__(self, row: Optional[int], message: str) -> None:
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


def _check_header(columns, schema: StreamSchema) -> None:
    if len(columns) != schema.width:
        raise StreamParseError(0, f"header has {len(columns)} columns, schema expects {schema.width}")
    if schema.names is not None and [str(c).strip() for c in columns] != schema.names:
        raise StreamParseError(0, f"header {list(columns)} does not match schema names {schema.names}")


def ingest_csv(path, schema: StreamSchema, *, chunksize: int = 1024) -> Iterator[StreamRecord]:
    """Lazily yield one StreamRecord per data row.

    Rows are read in chunks; only the current chunk is held in memory. The
    first `schema.n_features` columns form `x`, the next column (if any) the
    target.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Input CSV not found: {path}")
    try:
        _check_header(read_header(path), schema)
    except pd.errors.EmptyDataError as exc:
        raise StreamParseError(0, "file has no header") from exc
    reader = pd.read_csv(path, dtype=str, chunksize=chunksize, skipinitialspace=True, keep_default_na=False)

    row = 0
    try:
        for chunk in reader:
            raw = chunk.to_numpy(dtype=object)
            values = chunk.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
            for raw_row, numeric in zip(raw, values):
                row += 1
                missing = [j for j, cell in enumerate(raw_row) if cell is None or (isinstance(cell, float) and np.isnan(cell))]
                if missing:
                    raise StreamParseError(row, f"expected {schema.width} fields, row is short")
                bad = np.flatnonzero(~np.isfinite(numeric))
                if bad.size:
                    j = int(bad[0])
                    raise StreamParseError(row, f"column {chunk.columns[j]!r} holds non-numeric or non-finite value {raw_row[j]!r}")
                yield StreamRecord(
                    index=row,
                    x=numeric[: schema.n_features].tolist(),
                    target=float(numeric[schema.n_features]) if schema.n_targets else None,
                )
    except pd.errors.ParserError as exc:
        match = _LINE_RE.search(str(exc))
        # parser lines count the header
        line = int(match.group(1)) - 1 if match else None
        raise StreamParseError(line, f"arity mismatch: {exc}") from exc
    except pd.errors.EmptyDataError:
        logger.info("No rows in %s", path)
        return
    logger.debug("Read %d rows from %s", row, path)


def read_header(path) -> list:
    """Column names of a CSV without reading its data section."""
    return list(pd.read_csv(Path(path), nrows=0).columns)
