"""Spot table parsing: CSV with header spot_id,x,y in pixel coordinates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, ValidationError

REQUIRED_COLUMNS = ("spot_id", "x", "y")


@dataclass(frozen=True)
class Spot:
    spot_id: str
    x: float
    y: float


def read_spot_table(path: str | Path) -> list[Spot]:
    """Parse and validate the spot table; ids must be unique and non-empty."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty spot table") from None
        header = [cell.strip() for cell in header]
        if header != list(REQUIRED_COLUMNS):
            raise FormatError(
                f"{path}: expected header {','.join(REQUIRED_COLUMNS)}, "
                f"got {','.join(header)}"
            )
        spots: list[Spot] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 cells, got {len(row)}")
            spot_id = row[0].strip()
            if not spot_id:
                raise ValidationError(f"{path}:{lineno}: empty spot_id")
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: non-numeric coordinates {row[1]!r}, {row[2]!r}"
                ) from None
            spots.append(Spot(spot_id=spot_id, x=x, y=y))
    if not spots:
        raise ValidationError(f"{path}: spot table has no rows")
    seen: set[str] = set()
    for spot in spots:
        if spot.spot_id in seen:
            raise ValidationError(f"{path}: duplicate spot_id {spot.spot_id!r}")
        seen.add(spot.spot_id)
    return spots
