from __future__ import annotations

import numpy as np
import pytest

from gcmvs.depthmap import DepthMap
from gcmvs.errors import FormatError
from gcmvs.fileio import (
    load_image,
    read_camera,
    read_depth,
    read_ply,
    read_pfm,
    save_depth_preview,
    save_png,
    write_camera,
    write_depth,
    write_pfm,
    write_ply,
)

from conftest import make_camera, rot_y

EXTRINSIC = """extrinsic
1 0 0 0.5
0 1 0 -0.25
0 0 1 2
"""
INTRINSIC = """intrinsic
100 0 50
0 120 40
0 0 1
"""


# ── PFM ──────────────────────────────────────────────────────────────────

def test_pfm_is_bit_exact(tmp_path):
    data = np.random.default_rng(0).normal(size=(7, 9)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", data)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), data)


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "rows.pfm"
    write_pfm(path, data)
    raw = path.read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n3 2\n-1.0\n"):], dtype="<f4")
    np.testing.assert_array_equal(body, [3, 4, 5, 0, 1, 2])
    np.testing.assert_array_equal(read_pfm(path, top_down=True), np.flipud(data))


def test_color_pfm(tmp_path):
    data = np.random.default_rng(1).random((4, 5, 3)).astype(np.float32)
    write_pfm(tmp_path / "c.pfm", data)
    assert (tmp_path / "c.pfm").read_bytes()[:3] == b"PF\n"
    np.testing.assert_array_equal(read_pfm(tmp_path / "c.pfm"), data)


def test_big_endian_pfm_is_read(tmp_path):
    data = np.array([[1.5, -2.0]], dtype=">f4")
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
    np.testing.assert_array_equal(read_pfm(path), [[1.5, -2.0]])


@pytest.mark.parametrize(
    "raw",
    [b"P6\n2 1\n-1.0\n" + bytes(8), b"Pf\n2\n-1.0\n" + bytes(8), b"Pf\n2 1\nscale\n" + bytes(8), b"Pf\n2 1\n-1.0\n" + bytes(4)],
)
def test_malformed_pfm_raises(tmp_path, raw):
    path = tmp_path / "bad.pfm"
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        read_pfm(path)


def test_pfm_rejects_unsupported_shapes(tmp_path):
    with pytest.raises(FormatError):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_depth_files_store_invalid_as_zero(tmp_path):
    values = np.array([[1.0, 2.0], [3.0, 4.0]])
    depth = DepthMap(values=values, validity=np.array([[True, False], [True, True]]))
    write_depth(tmp_path / "d.pfm", depth)
    back = read_depth(tmp_path / "d.pfm")
    np.testing.assert_array_equal(back.values, [[1.0, 0.0], [3.0, 4.0]])
    np.testing.assert_array_equal(back.validity, depth.validity)


# ── cameras ──────────────────────────────────────────────────────────────

def test_camera_with_keywords_and_size(tmp_path):
    path = tmp_path / "cam.txt"
    path.write_text(EXTRINSIC + "\n" + INTRINSIC + "\nsize 101 81\n")
    cam = read_camera(path)
    assert (cam.fx, cam.fy, cam.cx, cam.cy) == (100.0, 120.0, 50.0, 40.0)
    assert (cam.image_width, cam.image_height) == (101, 81)
    np.testing.assert_array_equal(cam.translation, [0.5, -0.25, 2.0])


def test_camera_with_homogeneous_row_and_depth_range(tmp_path):
    path = tmp_path / "cam.txt"
    path.write_text(EXTRINSIC + "0 0 0 1\n\n" + INTRINSIC + "\n425 2.5\n")
    cam = read_camera(path, image_size=(101, 81))
    assert cam.fy == 120.0
    assert cam.shape == (81, 101)


def test_camera_without_keywords(tmp_path):
    path = tmp_path / "cam.txt"
    numbers = "1 0 0 0.5 0 1 0 -0.25 0 0 1 2 100 0 50 0 120 40 0 0 1"
    path.write_text(numbers + "\n")
    assert read_camera(path, image_size=(101, 81)).cx == 50.0


def test_camera_without_size_needs_image_size(tmp_path):
    path = tmp_path / "cam.txt"
    path.write_text(EXTRINSIC + INTRINSIC)
    with pytest.raises(FormatError):
        read_camera(path)


@pytest.mark.parametrize(
    "text",
    [
        EXTRINSIC + INTRINSIC + "size 10\n",
        EXTRINSIC + "oops\n" + INTRINSIC,
        EXTRINSIC + "100 0 50\n",
        EXTRINSIC,
        EXTRINSIC + "0 0 0 1\n",
    ],
)
def test_malformed_camera_raises(tmp_path, text):
    path = tmp_path / "cam.txt"
    path.write_text(text)
    with pytest.raises(FormatError):
        read_camera(path, image_size=(101, 81))


def test_camera_round_trip_is_exact(tmp_path):
    cam = make_camera(fx=123.456, fy=98.7654321, cx=33.3, cy=44.4, rotation=rot_y(17.0), center=(0.1, -2.0, 3.3))
    write_camera(tmp_path / "cam.txt", cam)
    back = read_camera(tmp_path / "cam.txt")
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    np.testing.assert_array_equal(back.translation, cam.translation)
    np.testing.assert_array_equal(back.K, cam.K)
    assert back.shape == cam.shape


# ── PLY ──────────────────────────────────────────────────────────────────

def test_ply_without_colors(tmp_path):
    points = np.random.default_rng(2).normal(size=(10, 3))
    write_ply(tmp_path / "p.ply", points)
    back, colors = read_ply(tmp_path / "p.ply")
    assert colors is None
    np.testing.assert_array_equal(back, points.astype(np.float32))


def test_ply_with_colors(tmp_path):
    rng = np.random.default_rng(3)
    points = rng.normal(size=(6, 3))
    colors = rng.integers(0, 256, size=(6, 3)).astype(np.uint8)
    write_ply(tmp_path / "p.ply", points, colors)
    raw = (tmp_path / "p.ply").read_bytes()
    assert b"format binary_little_endian 1.0" in raw
    assert b"element vertex 6" in raw
    back, back_colors = read_ply(tmp_path / "p.ply")
    np.testing.assert_array_equal(back_colors, colors)
    np.testing.assert_array_equal(back, points.astype(np.float32))


def test_ascii_ply_is_rejected(tmp_path):
    path = tmp_path / "a.ply"
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(FormatError):
        read_ply(path)


def test_truncated_ply_header_raises(tmp_path):
    path = tmp_path / "t.ply"
    path.write_bytes(b"ply\nformat binary_little_endian 1.0\n")
    with pytest.raises(FormatError):
        read_ply(path)


# ── images ───────────────────────────────────────────────────────────────

def test_png_round_trip_within_one_level(tmp_path):
    image = np.random.default_rng(4).random((9, 11, 3))
    save_png(tmp_path / "i.png", image)
    back = load_image(tmp_path / "i.png")
    assert back.shape == (9, 11, 3)
    assert np.abs(back - image).max() <= 0.5 / 255 + 1e-12


def test_gray_png_loads_as_rgb(tmp_path):
    save_png(tmp_path / "g.png", np.full((4, 5), 0.5))
    back = load_image(tmp_path / "g.png")
    assert back.shape == (4, 5, 3)
    np.testing.assert_allclose(back, 128 / 255)


def test_depth_preview_spans_the_full_range(tmp_path):
    values = np.array([[2.0, 4.0], [6.0, 0.0]])
    save_depth_preview(tmp_path / "d.png", DepthMap(values=values))
    back = load_image(tmp_path / "d.png")[..., 0]
    np.testing.assert_allclose(back, [[0.0, 128 / 255], [1.0, 0.0]])
