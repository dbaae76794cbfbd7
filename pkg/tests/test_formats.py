import io

import numpy as np
import pytest

from app.core.exceptions import InvalidInputError
from app.core.formats import (
    cloud_from_text,
    cloud_to_text,
    fmt_cell,
    read_cloud,
    read_csv,
    read_field,
    sha256_file,
    write_cloud,
    write_csv,
    write_csv_stream,
    write_field,
)
from app.schemas.cloud import ScalarField


def test_cloud_file_is_bit_exact(tmp_path, poisson_cloud):
    path = write_cloud(poisson_cloud, tmp_path / "cloud.txt")
    back = read_cloud(path)
    np.testing.assert_array_equal(np.sort(back.ids), np.sort(poisson_cloud.ids))
    order = np.argsort(poisson_cloud.ids)
    np.testing.assert_array_equal(back.points, poisson_cloud.points[order])
    assert back.window == poisson_cloud.window
    assert back.meta.seed == 7


def test_cloud_header_required():
    with pytest.raises(InvalidInputError):
        cloud_from_text("0 0.0 0.0\n")


def test_cloud_ids_must_ascend(small_cloud):
    lines = cloud_to_text(small_cloud).splitlines()
    swapped = "\n".join([lines[0], lines[2], lines[1]] + lines[3:])
    with pytest.raises(InvalidInputError):
        cloud_from_text(swapped)


def test_field_file(tmp_path, small_cloud):
    field = ScalarField(cloud=small_cloud, values=[0.1, 0.2, 0.3, 0.4, 1 / 3])
    path = write_field(field, tmp_path / "field.txt")
    back = read_field(path, small_cloud)
    np.testing.assert_array_equal(back.values, field.values)


def test_field_with_unknown_id_rejected(tmp_path, small_cloud):
    path = tmp_path / "field.txt"
    path.write_text("10 1\n3 1\n7 1\n1 1\n999 1\n")
    with pytest.raises(InvalidInputError, match="orphans"):
        read_field(path, small_cloud)


def test_malformed_field_line_rejected(tmp_path, small_cloud):
    path = tmp_path / "field.txt"
    path.write_text("10 1 2\n")
    with pytest.raises(InvalidInputError, match="line 1"):
        read_field(path, small_cloud)


def test_csv_cells():
    assert fmt_cell(True) == "1"
    assert fmt_cell(np.int64(4)) == "4"
    assert fmt_cell(0.1) == "0.10000000000000001"
    assert fmt_cell(None) == ""


def test_csv_layout_and_hash(tmp_path):
    path = tmp_path / "out.csv"
    n = write_csv(path, ["a", "b"], [[1, 0.5], [2, float("nan")]])
    assert n == 2
    assert path.read_bytes() == b"a,b\n1,0.5\n2,nan\n"
    header, rows = read_csv(path)
    assert header == ["a", "b"] and rows[1] == ["2", "nan"]
    again = tmp_path / "again.csv"
    write_csv(again, ["a", "b"], [[1, 0.5], [2, float("nan")]])
    assert sha256_file(path) == sha256_file(again)


def test_csv_stream_writer():
    buf = io.StringIO()
    assert write_csv_stream(buf, ["x"], [[1.5]]) == 1
    assert buf.getvalue() == "x\n1.5\n"
