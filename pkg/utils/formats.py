# utils/formats.py
"""
Shared readers/writers for the line-oriented, CSV and key=value formats
"""

import csv
import io
from typing import Dict, Iterable, Iterator, List, Mapping, Sequence, TextIO, Tuple

from core.errors import FormatError


def iter_data_lines(path: str) -> Iterator[Tuple[int, str]]:
    """(line number, stripped line) for non-blank, non-comment lines"""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield line_no, stripped


def read_csv_rows(path: str, columns: Sequence[str]) -> List[Tuple[int, Dict[str, str]]]:
    """
    Read a CSV file with a header row containing at least `columns`.
    Returns (line number, row) pairs; comment lines starting with '#' are skipped.
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        lines = [(no, line) for no, line in enumerate(handle, start=1)
                 if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        return []

    header_no, header_line = lines[0]
    header = [name.strip() for name in next(csv.reader([header_line]))]
    missing = [name for name in columns if name not in header]
    if missing:
        raise FormatError(path, header_no, f"missing column(s) {', '.join(missing)} in header")

    rows = []
    for line_no, line in lines[1:]:
        values = next(csv.reader([line]))
        if len(values) != len(header):
            raise FormatError(path, line_no, f"expected {len(header)} fields, got {len(values)}")
        rows.append((line_no, {name: value.strip() for name, value in zip(header, values)}))
    return rows


def parse_number(path: str, line_no: int, field: str, value: str, kind=int):
    try:
        return kind(value)
    except ValueError:
        raise FormatError(path, line_no, f"invalid {field} {value!r}")


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def keyvalue_text(values: Mapping[str, object]) -> str:
    return "".join(f"{key}={format_value(value)}\n" for key, value in values.items())


def format_value(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_text(handle: TextIO, text: str) -> None:
    handle.write(text)
    handle.flush()
