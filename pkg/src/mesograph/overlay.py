"""Score-file formats and viewer exports for the command-line pipeline:
per-cell/per-bag score tables, GeoJSON point overlays, and MesoGram
histograms of per-cell combined scores.

Floats are written with repr() so identical runs produce identical bytes
and reading a table back reproduces every value bit-exactly.
"""

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError

CELL_SCORE_HEADER = ["bag_id", "cell_id", "x_um", "y_um", "z_s", "z_e", "score"]
BAG_SCORE_HEADER = ["bag_id", "n_cells", "Z_s", "Z_e", "Z"]

MESOGRAM_BINS = 50
MESOGRAM_RANGE = (-1.0, 1.0)


def _open_out(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def write_cell_scores(path, scored_bags) -> None:
    """scored_bags: iterable of (bag_id, cells, score_set). Branch scores
    must sit inside (0,1) (they are sigmoid outputs); violations mean the
    model produced junk and the write refuses."""
    with _open_out(path) as f:
        w = csv.writer(f)
        w.writerow(CELL_SCORE_HEADER)
        for bag_id, cells, ss in scored_bags:
            z_s = np.asarray(ss.z_s, dtype=float)
            z_e = np.asarray(ss.z_e, dtype=float)
            if not (
                np.all((z_s > 0) & (z_s < 1)) and np.all((z_e > 0) & (z_e < 1))
            ):
                raise NumericalError(
                    f"bag {bag_id}: branch scores left (0,1); refusing to write"
                )
            for k, cell in enumerate(cells):
                w.writerow(
                    [
                        bag_id,
                        cell.cell_id,
                        repr(float(cell.x_um)),
                        repr(float(cell.y_um)),
                        repr(float(z_s[k])),
                        repr(float(z_e[k])),
                        repr(float(z_s[k] - z_e[k])),
                    ]
                )


def read_cell_scores(path):
    """Returns bags in file order: (bag_id, coords (n,2), z_s, z_e)."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CELL_SCORE_HEADER:
            raise DataError(f"{path}: not a per-cell score table")
        groups = {}
        order = []
        for row in reader:
            bag_id = row[0]
            if bag_id not in groups:
                groups[bag_id] = []
                order.append(bag_id)
            groups[bag_id].append(
                (float(row[2]), float(row[3]), float(row[4]), float(row[5]))
            )
    out = []
    for bag_id in order:
        arr = np.array(groups[bag_id])
        out.append((bag_id, arr[:, :2], arr[:, 2], arr[:, 3]))
    return out


def write_bag_scores(path, rows) -> None:
    """rows: iterable of (bag_id, n_cells, Z_s, Z_e, Z)."""
    with _open_out(path) as f:
        w = csv.writer(f)
        w.writerow(BAG_SCORE_HEADER)
        for bag_id, n_cells, big_zs, big_ze, big_z in rows:
            w.writerow(
                [bag_id, n_cells, repr(float(big_zs)), repr(float(big_ze)),
                 repr(float(big_z))]
            )


def read_bag_scores(path) -> dict:
    """bag_id -> (n_cells, Z_s, Z_e, Z), insertion-ordered."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != BAG_SCORE_HEADER:
            raise DataError(f"{path}: not a per-bag score table")
        out = {}
        for row in reader:
            out[row[0]] = (
                int(row[1]), float(row[2]), float(row[3]), float(row[4])
            )
    return out


def geojson_overlay(coords, z_s, z_e) -> dict:
    """GeoJSON FeatureCollection of Point features carrying the two
    branch scores and their difference."""
    coords = np.asarray(coords, dtype=float)
    z_s = np.asarray(z_s, dtype=float)
    z_e = np.asarray(z_e, dtype=float)
    if coords.shape != (z_s.size, 2) or z_s.size != z_e.size:
        raise DataError(
            f"coords {coords.shape} do not match {z_s.size}/{z_e.size} scores"
        )
    features = []
    for k in range(z_s.size):
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    "coordinates": [float(coords[k, 0]), float(coords[k, 1])],
                },
                "properties": {
                    "z_s": float(z_s[k]),
                    "z_e": float(z_e[k]),
                    "score": float(z_s[k] - z_e[k]),
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_geojson(path, collection: dict) -> None:
    with _open_out(path) as f:
        json.dump(collection, f, indent=1, sort_keys=True)
        f.write("\n")


def mesogram_counts(scores) -> np.ndarray:
    """50-bin histogram of per-cell combined scores over [-1, 1]."""
    scores = np.asarray(scores, dtype=float)
    if scores.size and (scores.min() < MESOGRAM_RANGE[0] or scores.max() > MESOGRAM_RANGE[1]):
        raise DataError("combined scores must lie in [-1, 1]")
    counts, _ = np.histogram(scores, bins=MESOGRAM_BINS, range=MESOGRAM_RANGE)
    return counts


def smooth3(counts) -> np.ndarray:
    """3-bin moving average; the window shrinks at the array edges."""
    counts = np.asarray(counts, dtype=float)
    out = np.empty_like(counts)
    n = counts.size
    for i in range(n):
        lo = max(0, i - 1)
        hi = min(n, i + 2)
        out[i] = counts[lo:hi].mean()
    return out


def count_local_maxima(values) -> int:
    """Number of local maxima, plateau-aware: a maximal run of equal
    values counts once when every existing neighbor is strictly lower.
    Runs touching the array boundary qualify on their single inner side."""
    v = np.asarray(values, dtype=float)
    n = v.size
    count = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[j + 1] == v[i]:
            j += 1
        left_ok = i == 0 or v[i - 1] < v[i]
        right_ok = j == n - 1 or v[j + 1] < v[i]
        if left_ok and right_ok and not (i == 0 and j == n - 1):
            count += 1
        i = j + 1
    return count


def mesogram_report(bag_id: str, scores) -> str:
    """Structured text MesoGram: header block, then one row per bin."""
    counts = mesogram_counts(scores)
    smoothed = smooth3(counts)
    edges = np.linspace(MESOGRAM_RANGE[0], MESOGRAM_RANGE[1], MESOGRAM_BINS + 1)
    lines = [
        f"bag_id\t{bag_id}",
        f"cells\t{int(counts.sum())}",
        f"bins\t{MESOGRAM_BINS}",
        f"range\t{MESOGRAM_RANGE[0]}\t{MESOGRAM_RANGE[1]}",
        f"local_maxima_smoothed\t{count_local_maxima(smoothed)}",
        "lo\thi\tcount\tsmoothed",
    ]
    for b in range(MESOGRAM_BINS):
        lines.append(
            f"{repr(float(edges[b]))}\t{repr(float(edges[b + 1]))}"
            f"\t{int(counts[b])}\t{repr(float(smoothed[b]))}"
        )
    return "\n".join(lines) + "\n"
