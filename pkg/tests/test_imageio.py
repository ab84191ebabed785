import numpy as np
import pytest

from isofmm.errors import DataError
from isofmm.imagecore import ImageLabel
from isofmm.imageio import (
    heatmap,
    load_manifest,
    parse_manifest,
    read_image,
    read_pgm,
    write_image_csv,
    write_manifest,
    write_pgm,
)


def test_pgm_16_bit_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 65536, (7, 11))
    write_pgm(tmp_path / "a.pgm", img, comments=["config=abc"])
    back = read_pgm(tmp_path / "a.pgm")
    assert back.dtype == np.float64 and back.shape == (7, 11)
    assert np.array_equal(back, img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n# config=abc\n11 7\n65535\n")


def test_raw_8_bit_pgm(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n4 3\n255\n" + img.tobytes())
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), img)


def test_plain_pgm(tmp_path):
    (tmp_path / "c.pgm").write_text("P2\n3 2\n# comment\n1000\n0 1 2\n3 4 1000\n")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0, 1, 2], [3, 4, 1000]]


def test_bad_pgm_files(tmp_path):
    (tmp_path / "d.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(DataError, match="grayscale"):
        read_pgm(tmp_path / "d.pgm")
    (tmp_path / "e.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(DataError, match="truncated"):
        read_pgm(tmp_path / "e.pgm")
    (tmp_path / "f.pgm").write_text("P2\n2 2\n255\n1 2 3\n")
    with pytest.raises(DataError, match="expected 4"):
        read_pgm(tmp_path / "f.pgm")
    with pytest.raises(DataError):
        write_pgm(tmp_path / "g.pgm", np.array([[-1, 2]]))


def test_csv_images(tmp_path):
    vals = np.random.default_rng(1).standard_normal((4, 5))
    write_image_csv(tmp_path / "x.csv", vals, "config=1")
    grid = read_image(tmp_path / "x.csv")
    assert grid.values.tobytes() == vals.tobytes()
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    with pytest.raises(DataError):
        read_image(tmp_path / "bad.csv")
    with pytest.raises(DataError, match="unsupported"):
        (tmp_path / "x.tif").write_bytes(b"")
        read_image(tmp_path / "x.tif")
    with pytest.raises(DataError, match="not found"):
        read_image(tmp_path / "missing.pgm")


def test_heatmap_scaling():
    out = heatmap(np.array([[0.0, 0.5, 1.0]]))
    assert out.tolist() == [[0, 32768, 65535]]
    assert heatmap(np.ones((2, 2))).max() == 0


def make_images(root, n=4):
    for k in range(n):
        write_pgm(root / f"g{k}.pgm", np.full((4, 4), 100 + k))


def test_manifest_round_trip_with_relative_paths(tmp_path):
    sub = tmp_path / "imgs"
    sub.mkdir()
    make_images(sub)
    labels = [ImageLabel(f"id{k}", "ab"[k // 2], f"u{k // 2}", str(sub / f"g{k}.pgm")) for k in range(4)]
    write_manifest(tmp_path / "m.csv", labels)
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "imgs/g0.pgm,id0,a,u0"
    back = parse_manifest(tmp_path / "m.csv")
    assert [(b.image_id, b.group, b.unit) for b in back] == [(l.image_id, l.group, l.unit) for l in labels]
    ds, design = load_manifest(tmp_path / "m.csv")
    assert ds.stack().shape == (4, 4, 4) and design.X.shape == (4, 2) and design.Z.shape == (4, 2)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


def test_manifest_errors_cite_the_line(tmp_path):
    make_images(tmp_path)
    m = tmp_path / "m.csv"
    write_lines(m, ["path,image_id,group,unit", "g0.pgm,a,g,u", "g1.pgm,b,g"])
    with pytest.raises(DataError, match=r"m\.csv:3: expected 4"):
        parse_manifest(m)
    write_lines(m, ["# comment", "g0.pgm,a,g,u", "", "g1.pgm,a,g,u"])
    with pytest.raises(DataError, match=r"m\.csv:4: duplicate image_id 'a' \(first on line 2\)"):
        parse_manifest(m)
    write_lines(m, ["g0.pgm,a,g,u", "nope.pgm,b,g,u"])
    with pytest.raises(DataError, match=r"m\.csv:2: unknown image path 'nope\.pgm'"):
        parse_manifest(m)
    write_lines(m, ["path,image_id,group,unit", "# nothing"])
    with pytest.raises(DataError, match="no images"):
        parse_manifest(m)
    with pytest.raises(DataError, match="manifest not found"):
        parse_manifest(tmp_path / "none.csv")
