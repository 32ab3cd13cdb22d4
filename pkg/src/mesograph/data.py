"""Cell tables, bag metadata, dual ranking labels, feature normalization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mesograph.errors import DataError

SUBTYPE_E = "E"
SUBTYPE_B = "B"
SUBTYPE_S = "S"
SUBTYPES = (SUBTYPE_E, SUBTYPE_B, SUBTYPE_S)

_SUBTYPE_ALIASES = {
    "e": SUBTYPE_E,
    "epithelioid": SUBTYPE_E,
    "b": SUBTYPE_B,
    "biphasic": SUBTYPE_B,
    "s": SUBTYPE_S,
    "sarcomatoid": SUBTYPE_S,
}

STD_FLOOR = 1e-8


def parse_subtype(text: str) -> str:
    """Normalize 'E'/'B'/'S' or full names (case-insensitive) to one letter."""
    key = text.strip().lower()
    if key not in _SUBTYPE_ALIASES:
        raise DataError(f"unknown subtype {text!r}")
    return _SUBTYPE_ALIASES[key]


@dataclass
class CellRecord:
    cell_id: int
    x_um: float
    y_um: float
    features: np.ndarray
    instance_label: Optional[str] = None  # "E"/"S", synthetic ground truth only


@dataclass
class BagMeta:
    bag_id: str
    slide_id: str
    patient_id: str
    subtype: str
    survival_days: Optional[float] = None
    event_observed: Optional[bool] = None
    sex: Optional[str] = None
    age: Optional[float] = None


@dataclass(frozen=True)
class DualLabel:
    y_s: int
    y_e: int


@dataclass
class Dataset:
    bags: list  # list of (BagMeta, list[CellRecord])
    d0: int
    norm_stats: Optional[tuple] = None  # (mean, std), each shape (d0,)


def dual_label(subtype: str) -> DualLabel:
    """Rank labels for the two scoring heads.

    The sarcomatoid head ranks S > B > E and the epithelioid head the
    reverse, so E -> (0, 2), B -> (1, 1), S -> (2, 0); y_s + y_e = 2.
    """
    code = parse_subtype(subtype)
    y_s = {SUBTYPE_E: 0, SUBTYPE_B: 1, SUBTYPE_S: 2}[code]
    return DualLabel(y_s=y_s, y_e=2 - y_s)


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}: cannot parse {column}={text!r} as a number")
    if not np.isfinite(v):
        raise DataError(f"row {row}: non-finite {column}={text!r}")
    return v


def _parse_optional_float(text: str, column: str, row: int) -> Optional[float]:
    if text is None or text.strip() == "":
        return None
    return _parse_float(text, column, row)


def _parse_optional_bool(text: str, column: str, row: int) -> Optional[bool]:
    if text is None or text.strip() == "":
        return None
    key = text.strip().lower()
    if key in ("true", "1", "yes"):
        return True
    if key in ("false", "0", "no"):
        return False
    raise DataError(f"row {row}: cannot parse {column}={text!r} as a boolean")


def _read_rows(path) -> tuple[list, list]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row")
        rows = list(reader)
    return [h.strip() for h in header], rows


def _feature_columns(header: Sequence[str]) -> list[int]:
    """Indices of f0..f{d0-1}, validated contiguous from 0."""
    found = {}
    for pos, name in enumerate(header):
        if len(name) > 1 and name[0] == "f" and name[1:].isdigit():
            found[int(name[1:])] = pos
    if not found:
        raise DataError("cell table header has no feature columns f0..f{d0-1}")
    d0 = len(found)
    missing = [k for k in range(d0) if k not in found]
    if missing or max(found) != d0 - 1:
        raise DataError(
            f"feature columns must be contiguous f0..f{d0 - 1}, "
            f"got {sorted(found)}"
        )
    return [found[k] for k in range(d0)]


def read_bag_table(bag_table_path) -> list[BagMeta]:
    """Parse the bag metadata table alone, preserving row order.

    Columns: bag_id, slide_id, patient_id, subtype, optional
    survival_days, event_observed, sex, age. Row numbers in error
    messages count the header as row 1.
    """
    bag_header, bag_rows = _read_rows(bag_table_path)
    bcol = {name: i for i, name in enumerate(bag_header)}
    for required in ("bag_id", "slide_id", "patient_id", "subtype"):
        if required not in bcol:
            raise DataError(f"bag table missing column {required!r}")

    bags: dict[str, BagMeta] = {}
    order: list[str] = []
    for r, row in enumerate(bag_rows, start=2):
        if len(row) != len(bag_header):
            raise DataError(
                f"row {r}: bag table row has {len(row)} fields, "
                f"header has {len(bag_header)}"
            )
        bag_id = row[bcol["bag_id"]].strip()
        if bag_id in bags:
            raise DataError(f"row {r}: duplicate bag_id {bag_id!r}")
        surv = (
            _parse_optional_float(row[bcol["survival_days"]], "survival_days", r)
            if "survival_days" in bcol
            else None
        )
        event = (
            _parse_optional_bool(row[bcol["event_observed"]], "event_observed", r)
            if "event_observed" in bcol
            else None
        )
        if (surv is None) != (event is None):
            raise DataError(
                f"row {r}: survival_days and event_observed must be "
                f"present together or both absent"
            )
        if surv is not None and surv < 0:
            raise DataError(f"row {r}: survival_days must be non-negative")
        sex = row[bcol["sex"]].strip() if "sex" in bcol else ""
        age = (
            _parse_optional_float(row[bcol["age"]], "age", r)
            if "age" in bcol
            else None
        )
        if age is not None and age < 0:
            raise DataError(f"row {r}: age must be non-negative")
        try:
            subtype = parse_subtype(row[bcol["subtype"]])
        except DataError as e:
            raise DataError(f"row {r}: {e}") from None
        bags[bag_id] = BagMeta(
            bag_id=bag_id,
            slide_id=row[bcol["slide_id"]].strip(),
            patient_id=row[bcol["patient_id"]].strip(),
            subtype=subtype,
            survival_days=surv,
            event_observed=event,
            sex=sex or None,
            age=age,
        )
        order.append(bag_id)
    return [bags[b] for b in order]


def ingest(cell_table_path, bag_table_path) -> Dataset:
    """Load cell and bag tables into a Dataset.

    Cell table columns: bag_id, cell_id, x_um, y_um, f0..f{d0-1},
    optional instance_label; bag table columns as in read_bag_table.
    """
    metas = read_bag_table(bag_table_path)
    order = [m.bag_id for m in metas]
    bags = {m.bag_id: m for m in metas}

    cell_header, cell_rows = _read_rows(cell_table_path)
    ccol = {name: i for i, name in enumerate(cell_header)}
    for required in ("bag_id", "cell_id", "x_um", "y_um"):
        if required not in ccol:
            raise DataError(f"cell table missing column {required!r}")
    fcols = _feature_columns(cell_header)
    d0 = len(fcols)
    label_col = ccol.get("instance_label")

    cells: dict[str, list[CellRecord]] = {b: [] for b in order}
    for r, row in enumerate(cell_rows, start=2):
        if len(row) != len(cell_header):
            raise DataError(
                f"row {r}: cell table row has {len(row)} fields, "
                f"header has {len(cell_header)}"
            )
        bag_id = row[ccol["bag_id"]].strip()
        if bag_id not in cells:
            raise DataError(f"row {r}: unknown bag_id {bag_id!r} in cell table")
        try:
            cell_id = int(row[ccol["cell_id"]])
        except ValueError:
            raise DataError(
                f"row {r}: cannot parse cell_id={row[ccol['cell_id']]!r} "
                f"as an integer"
            )
        feats = np.array(
            [_parse_float(row[c], cell_header[c], r) for c in fcols],
            dtype=np.float64,
        )
        label = None
        if label_col is not None and row[label_col].strip():
            label = row[label_col].strip().upper()
            if label not in (SUBTYPE_E, SUBTYPE_S):
                raise DataError(f"row {r}: instance_label must be E or S, got {label!r}")
        cells[bag_id].append(
            CellRecord(
                cell_id=cell_id,
                x_um=_parse_float(row[ccol["x_um"]], "x_um", r),
                y_um=_parse_float(row[ccol["y_um"]], "y_um", r),
                features=feats,
                instance_label=label,
            )
        )

    return Dataset(bags=[(bags[b], cells[b]) for b in order], d0=d0)


def export_dataset(dataset: Dataset, cell_table_path, bag_table_path) -> None:
    """Write the tables ingest consumes; floats via repr so that
    ingest(export(ds)) round-trips bit-exactly."""
    for p in (cell_table_path, bag_table_path):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    with open(bag_table_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["bag_id", "slide_id", "patient_id", "subtype", "survival_days",
             "event_observed", "sex", "age"]
        )
        for bag, _ in dataset.bags:
            w.writerow(
                [
                    bag.bag_id,
                    bag.slide_id,
                    bag.patient_id,
                    bag.subtype,
                    "" if bag.survival_days is None else repr(float(bag.survival_days)),
                    "" if bag.event_observed is None else str(bag.event_observed).lower(),
                    bag.sex or "",
                    "" if bag.age is None else repr(float(bag.age)),
                ]
            )
    with open(cell_table_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["bag_id", "cell_id", "x_um", "y_um"]
            + [f"f{k}" for k in range(dataset.d0)]
            + ["instance_label"]
        )
        for bag, cells in dataset.bags:
            for c in cells:
                w.writerow(
                    [bag.bag_id, c.cell_id, repr(float(c.x_um)), repr(float(c.y_um))]
                    + [repr(float(v)) for v in c.features]
                    + [c.instance_label or ""]
                )


def zscore_fit(train_bags) -> tuple:
    """Per-feature mean and population standard deviation over all training
    cells; std floored at 1e-8 so constant features stay finite."""
    mats = [
        np.stack([c.features for c in cells])
        for _, cells in train_bags
        if cells
    ]
    if not mats:
        raise DataError("cannot fit normalization stats on an empty training set")
    all_feats = np.concatenate(mats, axis=0)
    if all_feats.shape[0] < 2:
        raise DataError("need at least 2 training cells to fit normalization stats")
    mean = all_feats.mean(axis=0)
    std = np.maximum(all_feats.std(axis=0), STD_FLOOR)
    return (mean, std)


def zscore_apply(dataset: Dataset, norm_stats) -> Dataset:
    """Return a new Dataset with features mapped to (f - mean) / std."""
    mean, std = norm_stats
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (dataset.d0,) or std.shape != (dataset.d0,):
        raise DataError(
            f"normalization stats have shapes {mean.shape} and {std.shape}, "
            f"expected ({dataset.d0},)"
        )
    new_bags = []
    for bag, cells in dataset.bags:
        new_cells = [
            replace(c, features=(c.features - mean) / std) for c in cells
        ]
        new_bags.append((bag, new_cells))
    return Dataset(bags=new_bags, d0=dataset.d0, norm_stats=(mean, std))
