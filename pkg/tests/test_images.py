import numpy as np
import pytest

from splatsurf.images import (load_image, load_pfm, save_gray, save_image,
                              save_pfm)


@pytest.fixture
def quantized_rgb():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(5, 7, 3)).astype(np.float64)
    return raw / 255.0


def test_ppm_round_trip(tmp_path, quantized_rgb):
    path = tmp_path / "img.ppm"
    save_image(path, quantized_rgb)
    back = load_image(path)
    np.testing.assert_allclose(back, quantized_rgb, atol=1e-12)


def test_png_round_trip(tmp_path, quantized_rgb):
    path = tmp_path / "img.png"
    save_image(path, quantized_rgb)
    back = load_image(path)
    np.testing.assert_allclose(back, quantized_rgb, atol=1e-12)


def test_ppm_header_with_comments(tmp_path):
    body = bytes([10, 20, 30, 40, 50, 60])
    raw = b"P6\n# a comment\n2 1\n# another\n255\n" + body
    path = tmp_path / "c.ppm"
    path.write_bytes(raw)
    img = load_image(path)
    assert img.shape == (1, 2, 3)
    np.testing.assert_allclose(img[0, 0], np.array([10, 20, 30]) / 255.0)


def test_ppm_truncated_reports_offset(tmp_path):
    path = tmp_path / "t.ppm"
    path.write_bytes(b"P6\n2 2\n255\n\x00\x01")
    with pytest.raises(ValueError, match="byte"):
        load_image(path)


def test_ppm_wrong_maxval(tmp_path):
    path = tmp_path / "m.ppm"
    path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="maxval"):
        load_image(path)


def test_save_image_clips(tmp_path):
    path = tmp_path / "clip.ppm"
    save_image(path, np.array([[[1.7, -0.3, 0.5]]]))
    back = load_image(path)
    np.testing.assert_allclose(back[0, 0], [1.0, 0.0, 128 / 255.0], atol=1e-12)


def test_pfm_gray_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    depth = rng.normal(size=(4, 6)).astype(np.float64)
    path = tmp_path / "depth.pfm"
    save_pfm(path, depth)
    back = load_pfm(path)
    np.testing.assert_array_equal(back, depth.astype(np.float32))


def test_pfm_color_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    normals = rng.normal(size=(3, 5, 3))
    path = tmp_path / "n.pfm"
    save_pfm(path, normals)
    back = load_pfm(path)
    assert back.shape == (3, 5, 3)
    np.testing.assert_array_equal(back, normals.astype(np.float32))


def test_pfm_rows_stored_bottom_up(tmp_path):
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "b.pfm"
    save_pfm(path, img)
    raw = path.read_bytes()
    header_end = raw.index(b"-1.0\n") + 5
    floats = np.frombuffer(raw[header_end:], dtype="<f4")
    np.testing.assert_array_equal(floats, [3.0, 4.0, 1.0, 2.0])


def test_save_gray(tmp_path):
    path = tmp_path / "g.png"
    save_gray(path, np.array([[0.0, 0.5], [1.0, 2.0]]))
    from PIL import Image
    arr = np.asarray(Image.open(path))
    assert arr.shape == (2, 2)
    assert arr[0, 0] == 0 and arr[1, 0] == 255 and arr[1, 1] == 255
    assert arr[0, 1] in (127, 128)
