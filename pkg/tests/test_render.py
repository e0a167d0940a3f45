import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import shape, sky
from matdecomp.bench import checker_mixture
from matdecomp.brdf import Material, eval_brdf
from matdecomp.illum import GaussianLight, Illumination, sh_project
from matdecomp.objective import MixtureField
from matdecomp.render import NormalMap, render_fast, render_irradiance, render_mix, render_reference

VIEW = np.array([0.0, 0.0, 1.0])


def rel_rmse(a, b, mask):
    d = a[mask] - b[mask]
    return float(np.sqrt(np.mean(d * d)) / np.sqrt(np.mean(b[mask] ** 2)))


def flat(res=6):
    mask = np.ones((res, res), dtype=bool)
    return NormalMap(mask, np.zeros((res, res)), np.zeros((res, res)))


def test_uniform_sky_is_lambertian(sphere16):
    mat = Material(0.2, 0.5, 0.8, 0.0, 0.4)
    img = render_fast(mat, sphere16, Illumination((), sky(1.3)))
    np.testing.assert_allclose(img[sphere16.mask], np.tile(mat.rd * np.pi * 1.3, (sphere16.n_pixels, 1)), rtol=1e-12)
    assert np.all(img[~sphere16.mask] == 0)


def test_irradiance_uniform_sky(sphere16):
    E = render_irradiance(sphere16, Illumination((), sky(1.0)))
    np.testing.assert_allclose(E[sphere16.mask], np.pi, rtol=1e-12)


def test_irradiance_matches_white_diffuse_without_lobes(sphere16):
    rng = np.random.default_rng(0)
    sh = sky(1.0) + 0.1 * rng.normal(size=(9, 3))
    il = Illumination((), sh)
    E = render_irradiance(sphere16, il)
    f = render_fast(Material(1, 1, 1, 0, 0.5), sphere16, il)
    assert rel_rmse(f, E, sphere16.mask) < 0.01


def test_irradiance_peaks_for_axis_light():
    nm = flat()
    il = Illumination((GaussianLight(0.0, 0.0, 2.0, 60.0),))
    E = render_irradiance(nm, il)
    assert np.ptp(E[nm.mask]) < 1e-12
    tilted = NormalMap(nm.mask, np.full(nm.shape, 0.3), np.zeros(nm.shape))
    assert np.all(render_irradiance(tilted, il)[nm.mask] < E[nm.mask])


def test_narrow_lobe_is_directional():
    nm = shape("sphere", 8)
    mat = Material(0.5, 0.5, 0.5, 0.3, 0.6)
    kappa = 3000.0
    light = GaussianLight(0.5, 0.4, 1.0, kappa)
    img = render_fast(mat, nm, Illumination((light,)))
    power = 2 * np.pi / kappa * (1 - np.exp(-2 * kappa))
    n = nm.masked_vectors()
    cos = np.clip(n @ light.dir, 0, None)
    f = eval_brdf(mat, np.broadcast_to(light.dir, n.shape), np.broadcast_to(VIEW, n.shape), n)
    expected = f * (cos * power)[:, None]
    lit = cos > 0.2
    np.testing.assert_allclose(img[nm.mask][lit], expected[lit], rtol=0.02)


def test_repeatable(sphere16, lit, glossy):
    a = render_fast(glossy, sphere16, lit)
    b = render_fast(glossy, sphere16, lit)
    assert a.tobytes() == b.tobytes()


@given(st.floats(0.1, 5.0))
def test_linear_in_lighting(c):
    nm = shape("sphere", 10)
    il = Illumination((GaussianLight(0.6, 0.5, 4.0, 40.0, 5.0, 0.3),), sky(0.3))
    mat = Material(0.6, 0.4, 0.3, 0.4, 0.3)
    np.testing.assert_allclose(render_fast(mat, nm, il.scaled(c)), c * render_fast(mat, nm, il), rtol=1e-10, atol=1e-14)


@given(st.floats(0.0, 0.9), st.floats(0.0, 0.1), st.floats(0.0, 1.0), st.floats(0.05, 1.0))
def test_monotone_in_red_albedo(rd, step, rs, rough):
    nm = shape("sphere", 10)
    il = Illumination((GaussianLight(0.6, 0.5, 4.0, 40.0),), sky(0.3))
    lo = render_fast(Material(rd, 0.3, 0.3, rs, rough), nm, il)
    hi = render_fast(Material(rd + step, 0.3, 0.3, rs, rough), nm, il)
    assert np.all(hi[..., 0] >= lo[..., 0] - 1e-12)


def test_mix_degenerate_cases(sphere16, lit, glossy):
    one = MixtureField.uniform(sphere16.mask, 1)
    np.testing.assert_array_equal(render_mix([glossy], one, sphere16, lit), render_fast(glossy, sphere16, lit))
    rng = np.random.default_rng(1)
    w = rng.dirichlet([1, 1], sphere16.n_pixels)
    mix = MixtureField.from_masked(sphere16.mask, w)
    np.testing.assert_allclose(render_mix([glossy, glossy], mix, sphere16, lit),
                               render_fast(glossy, sphere16, lit), rtol=1e-12, atol=1e-15)


def test_mix_checker_selects(sphere16, lit, glossy):
    other = Material(0.1, 0.7, 0.2, 0.1, 0.6)
    mix = checker_mixture(sphere16.mask, 4)
    img = render_mix([glossy, other], mix, sphere16, lit)
    a = render_fast(glossy, sphere16, lit)
    b = render_fast(other, sphere16, lit)
    pick = mix.values[..., :1] > 0.5
    np.testing.assert_allclose(img, np.where(pick, a, b), rtol=1e-12, atol=1e-15)


def test_mix_count_mismatch(sphere16, lit, glossy):
    with pytest.raises(ValueError):
        render_mix([glossy], MixtureField.uniform(sphere16.mask, 2), sphere16, lit)


def test_normal_map_invariants(sphere16):
    n = sphere16.vectors()
    np.testing.assert_allclose(np.linalg.norm(n[sphere16.mask], axis=-1), 1.0, atol=1e-12)
    again = NormalMap.from_vectors(sphere16.mask, n)
    np.testing.assert_allclose(again.vectors(), n, atol=1e-12)
    with pytest.raises(ValueError):
        NormalMap(sphere16.mask, np.full(sphere16.shape, np.nan), np.zeros(sphere16.shape))


# -- reference renderer --------------------------------------------------------------

def test_reference_zero_albedo_under_sky():
    nm = shape("sphere", 6)
    img = render_reference(Material(0, 0, 0, 0, 0.5), nm, Illumination((), sky(1.0)), 64, seed=3)
    assert np.all(img == 0)


def test_reference_seeded():
    nm = shape("sphere", 6)
    il = Illumination((GaussianLight(0.3, 0.3, 3.0, 30.0),), sky(0.2))
    mat = Material(0.5, 0.5, 0.5, 0.3, 0.3)
    a = render_reference(mat, nm, il, 32, seed=5)
    assert a.tobytes() == render_reference(mat, nm, il, 32, seed=5).tobytes()
    assert a.tobytes() != render_reference(mat, nm, il, 32, seed=6).tobytes()
    with pytest.raises(ValueError):
        render_reference(mat, nm, il, 0)


def test_reference_lambertian_envmap_vs_sh():
    nm = shape("sphere", 12)
    il = Illumination((GaussianLight(0.8, 0.6, 1.5, 4.0),), sky(0.4))
    env = il.to_envmap(64, 128)
    mat = Material(0.7, 0.6, 0.5, 0.0, 0.5)
    ref = render_reference(mat, nm, env, 4096, seed=1, diffuse_only=True)
    fast = render_fast(mat, nm, Illumination((), sh_project(env)))
    assert rel_rmse(fast, ref, nm.mask) < 0.03


@pytest.mark.slow
def test_reference_convergence_rate():
    nm = shape("sphere", 5)
    il = Illumination((GaussianLight(0.4, 0.5, 3.0, 20.0),), sky(0.3))
    mat = Material(0.5, 0.4, 0.3, 0.3, 0.4)
    truth = render_reference(mat, nm, il, 2**20, seed=100)
    e4 = rel_rmse(render_reference(mat, nm, il, 4096, seed=1), truth, nm.mask)
    e64 = rel_rmse(render_reference(mat, nm, il, 65536, seed=2), truth, nm.mask)
    assert 3.0 <= e4 / e64 <= 5.0
