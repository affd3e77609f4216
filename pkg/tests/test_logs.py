"""Tests for `floodseg.logs`."""
import csv

from structlog.contextvars import get_contextvars

from floodseg.logs import log_state, write_csv


def test_write_csv(tmp_path):
    path = write_csv(tmp_path / "out.csv", ["a", "b"], ([i, i * i] for i in range(3)))
    assert path == tmp_path / "out.csv"
    with path.open(newline="") as fp:
        rows = list(csv.reader(fp))
    assert rows == [["a", "b"], ["0", "0"], ["1", "1"], ["2", "4"]]


def test_write_csv_header_only(tmp_path):
    path = write_csv(tmp_path / "empty.csv", ["pixels", "wall_ms"], [])
    assert path.read_text().splitlines() == ["pixels,wall_ms"]


def test_log_state_unbinds():
    with log_state(scene=3):
        assert get_contextvars()["scene"] == 3
    assert "scene" not in get_contextvars()
