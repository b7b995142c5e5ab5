"""Artifact files: CSVs and JSON documents with embedded provenance.

Every file starts with (or contains) the master seed and a checksum of the
resolved config, so any artifact can be traced back to the exact run that
produced it. Floats are written with repr, which round-trips float64
exactly and keeps byte-identical output across reruns; wall-clock numbers
never go into the deterministic files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import IngestionError, PrerequisiteError


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def provenance_line(provenance: dict) -> str:
    parts = " ".join(f"{k}={v}" for k, v in provenance.items())
    return f"# {parts}"


def parse_provenance(line: str) -> dict:
    fields = {}
    for token in line.lstrip("# ").split():
        if "=" in token:
            k, _, v = token.partition("=")
            fields[k] = v
    return fields


def write_csv_artifact(path, columns, rows, provenance: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(provenance_line(provenance) + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def read_csv_artifact(path) -> tuple[dict, list[str], list[dict[str, str]]]:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing artifact: {path}")
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise IngestionError(f"{path}: expected a provenance header line")
        provenance = parse_provenance(first)
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: no column row") from None
        rows = [dict(zip(columns, row)) for row in reader]
    return provenance, columns, rows


def write_json_artifact(path, doc: dict, provenance: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(doc)
    body["provenance"] = dict(provenance)
    path.write_text(json.dumps(body, indent=1))


def read_json_artifact(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def write_id_list(path, ids, provenance: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [provenance_line(provenance)] + [str(int(i)) for i in sorted(ids)]
    path.write_text("\n".join(lines) + "\n")


def read_id_list(path) -> list[int]:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing artifact: {path}")
    ids = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ids.append(int(line))
        except ValueError:
            raise IngestionError(f"{path}: line {lineno}: {line!r} is not an id") from None
    return ids
