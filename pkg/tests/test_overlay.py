"""Score tables, GeoJSON export, and histogram helpers."""

import json

import numpy as np
import pytest

from mesograph.data import CellRecord
from mesograph.errors import DataError, NumericalError
from mesograph.model import ScoreSet
from mesograph.overlay import (
    count_local_maxima,
    geojson_overlay,
    mesogram_counts,
    mesogram_report,
    read_bag_scores,
    read_cell_scores,
    smooth3,
    write_bag_scores,
    write_cell_scores,
    write_geojson,
)


def make_cells(rng, n):
    return [
        CellRecord(
            cell_id=k,
            x_um=float(rng.uniform(0, 500)),
            y_um=float(rng.uniform(0, 500)),
            features=rng.normal(size=3),
        )
        for k in range(n)
    ]


def make_score_set(rng, n):
    z_s = rng.uniform(0.05, 0.95, size=n)
    z_e = rng.uniform(0.05, 0.95, size=n)
    return ScoreSet(
        z_s=z_s,
        z_e=z_e,
        Z_s=float(z_s.mean()),
        Z_e=float(z_e.mean()),
        Z=float(z_s.mean() - z_e.mean()),
    )


class TestCellScoreTable:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "cells.csv"
        bags = [
            ("bagA", make_cells(rng, 7), make_score_set(rng, 7)),
            ("bagB", make_cells(rng, 4), make_score_set(rng, 4)),
        ]
        write_cell_scores(path, bags)
        back = read_cell_scores(path)
        assert [b[0] for b in back] == ["bagA", "bagB"]
        for (_, cells, ss), (_, coords, z_s, z_e) in zip(bags, back):
            assert np.array_equal(coords[:, 0], [c.x_um for c in cells])
            assert np.array_equal(coords[:, 1], [c.y_um for c in cells])
            assert np.array_equal(z_s, ss.z_s)
            assert np.array_equal(z_e, ss.z_e)

    def test_identical_writes_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        bags = [("b0", make_cells(rng, 5), make_score_set(rng, 5))]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_cell_scores(a, bags)
        write_cell_scores(b, bags)
        assert a.read_bytes() == b.read_bytes()

    def test_score_outside_unit_interval_refused(self, tmp_path):
        rng = np.random.default_rng(2)
        cells = make_cells(rng, 3)
        ss = make_score_set(rng, 3)
        ss.z_s[1] = 1.0
        with pytest.raises(NumericalError, match="left \\(0,1\\)"):
            write_cell_scores(tmp_path / "bad.csv", [("b", cells, ss)])

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "junk.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError, match="per-cell score table"):
            read_cell_scores(path)


class TestBagScoreTable:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "bags.csv"
        rows = [("b0", 12, 0.7, 0.2, 0.5), ("b1", 30, 0.3, 0.9, -0.6)]
        write_bag_scores(path, rows)
        back = read_bag_scores(path)
        assert back == {"b0": (12, 0.7, 0.2, 0.5), "b1": (30, 0.3, 0.9, -0.6)}
        assert list(back) == ["b0", "b1"]

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "junk.csv"
        path.write_text("bag_id,score\nb0,1\n")
        with pytest.raises(DataError, match="per-bag score table"):
            read_bag_scores(path)


class TestGeojson:
    def test_collection_structure(self):
        coords = np.array([[1.0, 2.0], [3.0, 4.0]])
        doc = geojson_overlay(coords, [0.8, 0.3], [0.1, 0.6])
        assert doc["type"] == "FeatureCollection"
        assert len(doc["features"]) == 2
        f0 = doc["features"][0]
        assert f0["type"] == "Feature"
        assert f0["geometry"] == {"type": "Point", "coordinates": [1.0, 2.0]}
        assert f0["properties"]["z_s"] == 0.8
        assert f0["properties"]["z_e"] == 0.1
        assert f0["properties"]["score"] == 0.8 - 0.1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError, match="do not match"):
            geojson_overlay(np.zeros((3, 2)), [0.5, 0.5], [0.5, 0.5])

    def test_written_file_parses_and_is_stable(self, tmp_path):
        coords = np.array([[0.0, 0.0], [10.0, 5.0], [2.5, 7.5]])
        doc = geojson_overlay(coords, [0.2, 0.5, 0.9], [0.8, 0.5, 0.1])
        a, b = tmp_path / "a.geojson", tmp_path / "b.geojson"
        write_geojson(a, doc)
        write_geojson(b, doc)
        assert a.read_bytes() == b.read_bytes()
        parsed = json.loads(a.read_text())
        assert parsed == doc


class TestMesogram:
    def test_counts_sum_to_cell_count(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(-1, 1, size=137)
        counts = mesogram_counts(scores)
        assert counts.size == 50
        assert counts.sum() == 137

    def test_bin_placement(self):
        # Bin width 0.04; the final bin is closed at 1.0.
        counts = mesogram_counts([-1.0, -0.99, 0.0, 1.0])
        assert counts[0] == 2
        assert counts[25] == 1
        assert counts[49] == 1

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError, match="lie in"):
            mesogram_counts([0.0, 1.5])

    def test_smooth3_hand_oracle(self):
        out = smooth3([0.0, 3.0, 6.0, 3.0, 0.0])
        assert np.allclose(out, [1.5, 3.0, 4.0, 3.0, 1.5], atol=0, rtol=0)

    def test_smooth3_preserves_constant(self):
        assert np.array_equal(smooth3([2.0] * 6), [2.0] * 6)


class TestLocalMaxima:
    @pytest.mark.parametrize(
        "values,expected",
        [
            ([0, 1, 0, 1, 0], 2),
            ([1, 2, 3], 1),
            ([3, 2, 1], 1),
            ([0, 2, 2, 0], 1),  # interior plateau counts once
            ([5, 1, 1], 1),  # boundary run qualifies on its inner side
            ([1, 1, 2], 1),
            ([2, 2, 2], 0),  # a flat array has no maxima
            ([3], 0),
            ([], 0),
            ([0, 1, 1, 0, 2, 0], 2),
        ],
    )
    def test_conventions(self, values, expected):
        assert count_local_maxima(values) == expected

    def test_two_lump_scores_are_bimodal(self):
        rng = np.random.default_rng(4)
        scores = np.concatenate(
            [rng.normal(-0.5, 0.08, 300), rng.normal(0.5, 0.08, 300)]
        )
        scores = np.clip(scores, -1.0, 1.0)
        smoothed = smooth3(mesogram_counts(scores))
        assert count_local_maxima(smoothed) >= 2


class TestMesogramReport:
    def test_structure(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(-0.9, 0.9, size=60)
        text = mesogram_report("bag7", scores)
        lines = text.splitlines()
        assert lines[0] == "bag_id\tbag7"
        assert lines[1] == "cells\t60"
        assert lines[2] == "bins\t50"
        assert lines[5] == "lo\thi\tcount\tsmoothed"
        rows = lines[6:]
        assert len(rows) == 50
        total = sum(int(r.split("\t")[2]) for r in rows)
        assert total == 60

    def test_reported_maxima_match_helper(self):
        rng = np.random.default_rng(6)
        scores = np.concatenate(
            [rng.normal(-0.4, 0.1, 200), rng.normal(0.45, 0.1, 200)]
        )
        scores = np.clip(scores, -1.0, 1.0)
        text = mesogram_report("b", scores)
        reported = None
        for line in text.splitlines():
            if line.startswith("local_maxima_smoothed\t"):
                reported = int(line.split("\t")[1])
        expected = count_local_maxima(smooth3(mesogram_counts(scores)))
        assert reported == expected
