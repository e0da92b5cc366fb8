import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drape.appearance import (EnvironmentLight, ShadowParams, ViewParams, compose_final_texture,
                              compute_irradiance_table, diffuse_texture, fresnel_schlick,
                              irradiance_direct, normal_map, shade_texture, shadow_map,
                              view_directions_tbn, view_offset, albedo_texture, uniform_texture)
from drape.scenes import grid, icosphere
from drape.texels import TexelGrid, UVRaster

import appcases as ap


def grid_of(values, shape=(8, 8)):
    v = np.asarray(values, float)
    return TexelGrid(v, np.ones(shape, bool))


def random_texels(rng, shape=(8, 8)):
    n = rng.normal(size=shape + (3,))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n


@pytest.mark.parametrize("mode", ["grid", "sh"])
def test_constant_environment(mode):
    assert ap.constant_env_error(0.7, mode) < 0.005


@pytest.mark.parametrize("mode", ["grid", "sh"])
def test_zero_environment(mode):
    t = compute_irradiance_table(EnvironmentLight.uniform(0.0), mode)
    assert (t.evaluate(ap.random_normals(20)) == 0).all()


@pytest.mark.parametrize("mode", ["direct", "grid"])
def test_bright_texel_matches_monte_carlo(mode):
    assert ap.bright_env_error(mode) < 0.01


def test_sh_close_on_smooth_environment():
    # low-frequency sky: radiance linear in z is band-limited to order 1
    d = np.cos((np.arange(32) + 0.5) / 32 * np.pi)
    env = EnvironmentLight(np.repeat((1.0 + 0.5 * d)[:, None], 64, axis=1))
    n = ap.random_normals(50, 9)
    ref = irradiance_direct(env, n)
    sh = compute_irradiance_table(env, "sh").evaluate(n)
    assert np.abs(sh / ref - 1).max() < 0.01


def test_environment_validation():
    with pytest.raises(ValueError):
        EnvironmentLight(-np.ones((4, 8, 3)))
    with pytest.raises(ValueError):
        EnvironmentLight(np.ones((4, 8, 2)))
    with pytest.raises(ValueError):
        compute_irradiance_table(EnvironmentLight.uniform(1.0), "wavelet")


def test_solid_angles_cover_sphere():
    env = EnvironmentLight.uniform(1.0, (24, 12))
    assert abs(env.solid_angles().sum() * 24 - 4 * np.pi) < 1e-12


def test_diffuse_black_cloth():
    rng = np.random.default_rng(0)
    t = compute_irradiance_table(ap.bright_texel_env())
    out = diffuse_texture(grid_of(np.zeros((8, 8))), grid_of(random_texels(rng)), t)
    assert (out.values == 0).all()


def test_diffuse_constant_environment():
    rng = np.random.default_rng(1)
    t = compute_irradiance_table(EnvironmentLight.uniform(0.3))
    out = diffuse_texture(grid_of(np.full((8, 8), 0.25)), grid_of(random_texels(rng)), t)
    np.testing.assert_allclose(out.values, 0.25 * np.pi * 0.3, rtol=0.005)


def test_diffuse_factored_recomputation():
    rng = np.random.default_rng(2)
    t = compute_irradiance_table(ap.bright_texel_env())
    alb = rng.random((8, 8, 3))
    n = random_texels(rng)
    out = diffuse_texture(grid_of(alb), grid_of(n), t)
    np.testing.assert_array_equal(out.values, alb * t.evaluate(n.reshape(-1, 3)).reshape(8, 8, 3))


def test_fresnel_values():
    assert fresnel_schlick(1.0, 0.04) == 0.04
    assert fresnel_schlick(0.0, 0.04) == 1.0
    assert abs(fresnel_schlick(0.5, 0.04) - 0.07) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_fresnel_monotone_between_endpoints(f0, c1, c2):
    lo, hi = sorted((c1, c2))
    assert f0 - 1e-15 <= fresnel_schlick(hi, f0) <= fresnel_schlick(lo, f0) <= 1 + 1e-15


def test_view_offset_normal_and_grazing():
    t = compute_irradiance_table(EnvironmentLight.uniform(1 / np.pi))
    n = grid_of(np.tile([0, 0, 1.0], (8, 8, 1)))
    head_on = view_offset(n, grid_of(np.tile([0, 0, 1.0], (8, 8, 1))), ViewParams(f0=0.04), t)
    grazing = view_offset(n, grid_of(np.tile([1.0, 0, 0], (8, 8, 1))), ViewParams(f0=0.04), t)
    e = t.evaluate(np.array([[0, 0, 1.0]]))[0] / np.pi
    np.testing.assert_allclose(head_on.values, np.broadcast_to(0.04 * e, (8, 8, 3)), rtol=1e-15)
    np.testing.assert_allclose(grazing.values, np.broadcast_to(e, (8, 8, 3)), rtol=1e-15)
    away = view_offset(n, grid_of(np.tile([0, 0, -1.0], (8, 8, 1))), ViewParams(), t)
    assert (away.values == 0).all()


def test_view_offset_rejects_non_unit():
    t = compute_irradiance_table(EnvironmentLight.uniform(1.0))
    n = grid_of(np.tile([0, 0, 1.0], (8, 8, 1)))
    with pytest.raises(ValueError):
        view_offset(n, grid_of(np.tile([0, 0, 2.0], (8, 8, 1))), ViewParams(), t)


def test_shadow_map_curve():
    vis = grid_of(np.array([[0.0, 0.25], [0.5, 1.0]]), (2, 2))
    ident = shadow_map(vis, ShadowParams())
    np.testing.assert_array_equal(ident.values, vis.values)
    s = shadow_map(vis, ShadowParams(gamma=2.0, floor=0.2))
    assert s.values[1, 1] == 1.0 and s.values[0, 0] == 0.2
    np.testing.assert_allclose(s.values[1, 0], 0.2 + 0.8 * 0.25)
    with pytest.raises(ValueError):
        ShadowParams(floor=1.0)


def test_compose_neutral_and_black():
    rng = np.random.default_rng(5)
    d = grid_of(rng.random((8, 8, 3)))
    zero = grid_of(np.zeros((8, 8, 3)))
    np.testing.assert_array_equal(compose_final_texture(d, zero, grid_of(np.ones((8, 8)))).values,
                                  d.values)
    black = compose_final_texture(d, grid_of(rng.random((8, 8, 3))), grid_of(np.zeros((8, 8))))
    assert (black.values == 0).all()


def decomposition_error(seed):
    rng = np.random.default_rng(seed)
    d = grid_of(rng.random((8, 8, 3)))
    v = grid_of(rng.random((8, 8, 3)) * 0.2)
    s = grid_of(rng.random((8, 8)))
    zero = grid_of(np.zeros((8, 8, 3)))
    full = compose_final_texture(d, v, s).values
    vi = compose_final_texture(d, zero, s).values
    ref = s.values[..., None] * v.values
    return float(np.abs((full - vi) - ref).max() / np.abs(full).max())


def test_decomposition_identity():
    assert max(decomposition_error(k) for k in range(10)) < 1e-12


def shaded_pair(view_dependent):
    m = grid(10, 10, 1.0, origin=(-0.5, -0.5))
    m = m.with_vertices(np.c_[m.vertices[:, :2], 0.1 * np.sin(4 * m.vertices[:, 0])])
    r = UVRaster(m, 32)
    alb = uniform_texture(r, (0.6, 0.5, 0.4))
    t = compute_irradiance_table(ap.bright_texel_env())
    a = shade_texture(m, r, alb, t, (2.0, 0.0, 1.0), view_dependent=view_dependent)
    b = shade_texture(m, r, alb, t, (-1.0, 3.0, 0.5), view_dependent=view_dependent)
    return a, b


def test_diffuse_view_independent_bit_exact():
    a, b = shaded_pair(False)
    np.testing.assert_array_equal(a.values, b.values)
    fa, fb = shaded_pair(True)
    assert not np.array_equal(np.nan_to_num(fa.values), np.nan_to_num(fb.values))


def test_view_directions_are_unit_and_facing():
    m = grid(6, 6, 1.0, origin=(-0.5, -0.5))
    r = UVRaster(m, 16)
    v = view_directions_tbn(m, r, (0, 0, 3.0)).values
    ok = ~np.isnan(v[..., 0])
    np.testing.assert_allclose(np.linalg.norm(v[ok], axis=1), 1, atol=1e-12)
    assert (v[ok][:, 2] > 0.9).all()
    n = normal_map(m, r).values
    np.testing.assert_allclose(n[ok], np.tile([0, 0, 1.0], (ok.sum(), 1)), atol=1e-12)


def test_albedo_range_checked():
    with pytest.raises(ValueError):
        albedo_texture(np.full((4, 4), 1.5), np.ones((4, 4), bool))


def test_mismatched_resolutions_rejected():
    t = compute_irradiance_table(EnvironmentLight.uniform(1.0))
    with pytest.raises(ValueError):
        diffuse_texture(grid_of(np.ones((8, 8))), grid_of(np.ones((4, 4, 3)), (4, 4)), t)
