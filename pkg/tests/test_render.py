import numpy as np
import pytest

from drape.imaging import (decode_8bit, encode_8bit, read_labels, read_mask, read_png,
                           write_labels, write_mask, write_png)
from drape.mesh import TriMesh
from drape.render import CameraView, look_at, rasterize
from drape.scenes import grid, icosphere, quad
from drape.texels import TexelGrid

import rendercases as rc


def front_camera(w=32, h=24):
    return CameraView(30.0, 30.0, w / 2, h / 2, np.eye(3), np.zeros(3), w, h)


def facing_quad(z, half=10.0):
    return quad([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])


def test_full_frame_constant_texture():
    cam = front_camera()
    m = TriMesh([[-100, -100, 1.0], [100, -100, 1.0], [0, 100, 1.0]], [[0, 1, 2]],
                [[0, 0], [1, 0], [0.5, 1]])
    tex = TexelGrid(np.full((4, 4, 3), 0.3), np.ones((4, 4), bool))
    fb = rasterize([(m, tex)], cam)
    assert fb.coverage.all() and (fb.tag == 0).all()
    np.testing.assert_allclose(fb.rgb, 0.3, rtol=0, atol=1e-15)


def test_nearer_quad_wins():
    cam = front_camera()
    for order in ((1.0, 2.0), (2.0, 1.0)):
        fb = rasterize([(facing_quad(order[0]), (1, 0, 0)), (facing_quad(order[1]), (0, 1, 0))], cam)
        near = int(np.argmin(order))
        assert (fb.tag == near).all()
        np.testing.assert_allclose(fb.depth, min(order))


def test_camera_behind_geometry():
    cam = front_camera()
    fb = rasterize([(facing_quad(-1.0), (1, 1, 1))], cam, background=(0.1, 0.2, 0.3))
    assert not fb.coverage.any() and (fb.tag == -1).all()
    np.testing.assert_array_equal(fb.rgb, np.broadcast_to([0.1, 0.2, 0.3], fb.rgb.shape))


def test_near_plane_clipping_keeps_front_part():
    cam = front_camera()
    # a floor-like sheet passing through the camera plane
    m = TriMesh([[-5, 1, -1], [5, 1, -1], [5, 1, 10], [-5, 1, 10]], [[0, 1, 2], [0, 2, 3]])
    fb = rasterize([(m, (1, 1, 1))], cam)
    assert fb.coverage.any() and np.isfinite(fb.depth[fb.coverage]).all()
    assert (fb.depth[fb.coverage] > 0).all()


@pytest.mark.parametrize("seed", range(10))
def test_winner_matches_raycast(seed):
    bad, kept, hit = rc.winner_mismatches(seed)
    assert hit > 100
    assert bad == 0


def test_perspective_correct_uv():
    cam = look_at((0.3, -2.0, 1.2), (0, 0, 0), fov_y=50, width=64, height=64)
    m = grid(1, 1, 1.4, origin=(-0.7, -0.7))
    fb = rasterize([(m, (1, 1, 1))], cam)
    ys, xs = np.nonzero(fb.coverage)
    o, d = cam.pixel_rays(xs + 0.5, ys + 0.5)
    t = -o[:, 2] / d[:, 2]
    hit = o + t[:, None] * d
    uv = (hit[:, :2] + 0.7) / 1.4
    np.testing.assert_allclose(fb.uv[ys, xs], uv, atol=1e-9)


def test_textured_lookup_bilinear():
    cam = front_camera(16, 16)
    m = TriMesh([[-100, -100, 1.0], [100, -100, 1.0], [100, 100, 1.0], [-100, 100, 1.0]],
                [[0, 1, 2], [0, 2, 3]], [[0, 0], [1, 0], [1, 1], [0, 1]])
    vals = np.zeros((2, 2, 3))
    vals[:, 1] = 1.0
    fb = rasterize([(m, TexelGrid(vals, np.ones((2, 2), bool)))], cam)
    # left texel column 0, right column 1: bilinear gives clip(2u - 0.5, 0, 1)
    expect = np.clip(2 * fb.uv[..., 0] - 0.5, 0, 1)
    np.testing.assert_allclose(fb.rgb[..., 0], expect, atol=1e-12)
    assert fb.rgb[..., 0].min() < 0.5 < fb.rgb[..., 0].max()


def test_tags_per_mesh():
    cam = look_at((0, -3, 0), (0, 0, 0), fov_y=40, width=48, height=48)
    a = icosphere(2, 0.3, (-0.4, 0, 0))
    b = icosphere(2, 0.3, (0.4, 0, 0))
    fb = rasterize([(a, (1, 0, 0)), (b, (0, 0, 1))], cam)
    assert (fb.tag == 0).any() and (fb.tag == 1).any()
    assert (fb.rgb[fb.tag == 0] == [1, 0, 0]).all()
    np.testing.assert_array_equal(fb.mask(1), fb.tag == 1)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraView(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        CameraView(1.0, 1.0, 0, 0, -np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        look_at((0, 0, 1), (0, 0, 0))


def test_camera_dict_roundtrip():
    cam = look_at((1, -2, 1), (0, 0, 0.5), width=40, height=30, name="x")
    back = CameraView.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    assert back.to_dict() == cam.to_dict()


def test_look_at_projects_target_to_center():
    cam = look_at((1, -2, 1), (0.1, 0.2, 0.5), width=40, height=30)
    p = rc.project(cam, np.array([[0.1, 0.2, 0.5], [0.1, 0.2, 1.5]]))
    np.testing.assert_allclose(p[0], [20, 15], atol=1e-12)
    assert p[1, 1] < 15   # world up is image up


def test_png_roundtrips(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((6, 5, 3))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    np.testing.assert_array_equal(encode_8bit(back), encode_8bit(img))
    np.testing.assert_allclose(decode_8bit(encode_8bit(img)), img, atol=0.02)
    mask = rng.random((6, 5)) > 0.5
    write_mask(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), mask)
    labels = rng.integers(0, 400, (6, 5))
    write_labels(tmp_path / "l.png", labels)
    np.testing.assert_array_equal(read_labels(tmp_path / "l.png"), labels)
    with pytest.raises(ValueError):
        write_labels(tmp_path / "n.png", -labels - 1)
