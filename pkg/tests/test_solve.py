import numpy as np
import pytest
from sklearn.base import clone

from conftest import shape, sky
from helpers import small_prior
from matdecomp import solve
from matdecomp.bench import checker_mixture
from matdecomp.brdf import Material
from matdecomp.illum import GaussianLight, Illumination
from matdecomp.objective import MixtureField, Objective, ObjectiveWeights, State, lobes_to_params
from matdecomp.render import NormalMap, render_fast, render_irradiance, render_mix
from matdecomp.solve import (
    MaterialEstimator,
    SolveConfig,
    estimate_mixture,
    estimate_single,
    init_material,
    init_shape_from_contour,
    initial_illumination,
)

LIGHT = Illumination((GaussianLight(0.5, 0.5, 4.0, 40.0, 4.0, 0.2),), sky(0.8))


def disk(res, radius=None):
    c = (np.arange(res) + 0.5) - res / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx**2 + yy**2 < (radius or res / 2 - 1) ** 2


@pytest.fixture
def watch_iterates(monkeypatch):
    """Record the state behind every solver iterate."""
    seen = []
    orig = solve._Stopper.record

    def record(self, x, iteration):
        st = self.obj.unpack(x)
        seen.append((self.obj, st))
        return orig(self, x, iteration)

    monkeypatch.setattr(solve._Stopper, "record", record)
    return seen


# -- initialisation --------------------------------------------------------------------

def test_contour_init_on_disk_is_near_hemisphere():
    res = 48
    mask = disk(res)
    nm = init_shape_from_contour(mask)
    c = (np.arange(res) + 0.5) - res / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    R = res / 2 - 1
    x, y = xx / R, -yy / R
    truth = np.stack([x, y, np.sqrt(np.clip(1 - x * x - y * y, 0, None))], -1)
    truth /= np.linalg.norm(truth, axis=-1, keepdims=True)
    cos = np.sum(nm.vectors()[mask] * truth[mask], axis=-1)
    assert np.degrees(np.mean(np.arccos(np.clip(cos, -1, 1)))) < 10.0


def test_contour_init_square_centre_and_boundary():
    mask = np.zeros((21, 21), bool)
    mask[3:18, 3:18] = True
    nm = init_shape_from_contour(mask)
    np.testing.assert_allclose(nm.vectors()[10, 10], [0, 0, 1], atol=1e-9)
    from matdecomp.objective import PixelGrid

    grid = PixelGrid.from_mask(mask)
    n = nm.masked_vectors()[grid.boundary]
    assert np.max(np.abs(n[:, 2])) < 1e-9
    np.testing.assert_allclose(np.linalg.norm(nm.masked_vectors(), axis=-1), 1.0, atol=1e-12)


def test_contour_init_rejects_bad_masks():
    with pytest.raises(ValueError):
        init_shape_from_contour(np.zeros((20, 20), bool))
    two = np.zeros((30, 30), bool)
    two[2:13, 2:13] = True
    two[16:28, 16:28] = True
    with pytest.raises(ValueError):
        init_shape_from_contour(two)
    tiny = np.zeros((20, 20), bool)
    tiny[5:10, 5:10] = True
    with pytest.raises(ValueError):
        init_shape_from_contour(tiny)


def test_init_material_division_identity():
    nm = shape("sphere", 16)
    rd = np.array([0.3, 0.55, 0.7])
    img = rd * render_irradiance(nm, LIGHT)
    m = init_material(img, nm, LIGHT)
    np.testing.assert_allclose(m.rd, rd, atol=1e-6)
    assert m.rs == 0.01 and m.rough == 0.01


def test_init_material_clamps_and_fails_without_light():
    nm = shape("sphere", 16)
    img = 3.0 * render_irradiance(nm, LIGHT)
    assert np.all(init_material(img, nm, LIGHT).rd == 1.0)
    with pytest.raises(ValueError):
        init_material(img, nm, Illumination())


def test_initial_illumination_defaults():
    nm = shape("sphere", 16)
    img = np.where(nm.mask[..., None], 0.4, np.zeros(nm.shape + (3,)))
    il = initial_illumination(img, nm.mask)
    l = il.lights[0]
    assert (l.el, l.intensity, l.kappa, l.beta) == (pytest.approx(np.pi / 4), 1.0, 20.0, 0.0)
    assert l.dir[2] > 0 and l.dir[1] > 0
    assert np.all(il.sh[1:] == 0) and np.ptp(il.sh[0]) == 0
    prior = small_prior()
    assert np.array_equal(initial_illumination(img, nm.mask, prior).sh, prior.pca_means)


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(k=0)
    with pytest.raises(ValueError):
        SolveConfig(m=-1)
    with pytest.raises(ValueError):
        SolveConfig(freeze=("shape",))
    assert SolveConfig().max_iters == 500 and SolveConfig().lbfgs_memory == 10


# -- single-material solves ------------------------------------------------------------------

def test_self_render_without_priors_reaches_zero():
    nm = shape("sphere", 16)
    truth = Material(0.6, 0.35, 0.2, 0.3, 0.35)
    img = render_fast(truth, nm, LIGHT)
    cfg = SolveConfig(freeze=("normals", "illum"), weights=ObjectiveWeights().priors_off(), max_iters=300)
    mat, _, _, diag = estimate_single(img, nm.mask, None, cfg, normals=nm, illum=LIGHT)
    assert diag.trace[-1]["rend"] < 1e-8
    np.testing.assert_allclose(mat.as_array(), truth.as_array(), atol=1e-3)


def test_known_shape_and_light_recovery(watch_iterates):
    nm = shape("ellipsoid", 24)
    truth = Material(0.25, 0.5, 0.7, 0.4, 0.25)
    img = render_fast(truth, nm, LIGHT)
    cfg = SolveConfig(freeze=("normals", "illum"))
    mat, _, _, diag = estimate_single(img, nm.mask, None, cfg, normals=nm, illum=LIGHT)
    assert np.max(np.abs(mat.as_array() - truth.as_array())) <= 0.05
    e = diag.energies
    assert np.all(np.diff(e) <= 1e-12 * np.abs(e[:-1]))
    for obj, st in watch_iterates:
        m = st.mats
        assert np.all(m >= 0) and np.all(m <= 1) and np.all(m[:, 4] >= 1e-3)


def test_black_object():
    nm = shape("sphere", 16)
    img = np.zeros(nm.shape + (3,))
    cfg = SolveConfig(freeze=("normals", "illum"), max_iters=100)
    mat, _, _, diag = estimate_single(img, nm.mask, None, cfg, normals=nm, illum=LIGHT)
    assert diag.trace[-1]["rend"] == 0
    assert np.all(mat.rd < 0.05)


def test_mask_must_match_normals():
    nm = shape("sphere", 16)
    with pytest.raises(ValueError):
        estimate_single(np.zeros(nm.shape + (3,)), ~nm.mask, None, SolveConfig(max_iters=1), normals=nm)


def test_blind_solve_iterates_stay_valid(watch_iterates):
    nm = shape("sphere", 20)
    img = render_fast(Material(0.5, 0.4, 0.3, 0.3, 0.3), nm, LIGHT)
    cfg = SolveConfig(max_iters=60, stage1_iters=20, n_starts=2)
    mat, nm_hat, il, diag = estimate_single(img, nm.mask, small_prior(), cfg)
    assert len(watch_iterates) >= len(diag.trace)
    for obj, st in watch_iterates:
        assert np.all(st.mats >= 0) and np.all(st.mats <= 1)
        n = obj.normal_map(st).masked_vectors()
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)
    assert set(diag.trace[0]) >= {"stage", "iteration", "total", "rend"}


# -- mixtures ---------------------------------------------------------------------------------

def test_mixture_k1_is_single():
    nm = shape("sphere", 16)
    img = render_fast(Material(0.5, 0.4, 0.3, 0.3, 0.3), nm, LIGHT)
    cfg = SolveConfig(max_iters=30, stage1_iters=10, n_starts=1)
    mats, mix, _, _, _ = estimate_mixture(img, nm.mask, None, cfg)
    mat, _, _, _ = estimate_single(img, nm.mask, None, cfg)
    assert len(mats) == 1
    np.testing.assert_array_equal(mats[0].as_array(), mat.as_array())
    assert mix.k == 1 and np.all(mix.masked() == 1)


def test_mixture_permutation_symmetry():
    nm = shape("sphere", 12)
    img = render_fast(Material(0.5, 0.4, 0.3, 0.3, 0.3), nm, LIGHT)
    rng = np.random.default_rng(0)
    st = State(rng.uniform(0.1, 0.9, (2, 5)), lobes_to_params(LIGHT.lights), LIGHT.sh.copy(), nm.masked_angles(),
               rng.normal(size=(nm.n_pixels, 2)))
    obj = Objective(img, nm.mask, k=2, reference=st, sh_mode="free")
    for _ in range(5):
        x = obj.pack(st)
        swapped = State(st.mats[::-1].copy(), st.lobes, st.sh, st.normals, st.logits[:, ::-1].copy())
        assert obj.energy(x) == pytest.approx(obj.energy(obj.pack(swapped)), rel=1e-12)
        st = obj.unpack(x - 1e-3 * obj.value_and_grad(x)[1])


@pytest.mark.parametrize("schedule", ["joint", "alternate"])
def test_mixture_iterates_on_simplex(watch_iterates, schedule):
    nm = shape("sphere", 16)
    a, b = Material(0.8, 0.2, 0.1, 0.3, 0.3), Material(0.1, 0.3, 0.8, 0.3, 0.3)
    mix = checker_mixture(nm.mask, 4)
    img = render_mix([a, b], mix, nm, LIGHT)
    cfg = SolveConfig(k=2, max_iters=40, stage1_iters=10, block_iters=10, n_starts=2, mixture_schedule=schedule)
    mats, weights, _, _, _ = estimate_mixture(img, nm.mask, None, cfg)
    assert len(mats) == 2 and weights.k == 2
    checked = 0
    for obj, st in watch_iterates:
        if obj.k == 2:
            m = obj.mixture(st).masked()
            assert np.all(m >= 0) and np.allclose(m.sum(-1), 1, atol=1e-12)
            checked += 1
    assert checked > 0


@pytest.mark.slow
def test_uniform_input_collapses_mixture():
    nm = shape("sphere", 24)
    mat = Material(0.6, 0.45, 0.3, 0.3, 0.3)
    img = render_fast(mat, nm, LIGHT)
    # with the roughness prior on, a split has strictly lower energy than two equal materials
    cfg = SolveConfig(k=2, freeze=("normals", "illum"), weights=ObjectiveWeights().priors_off())
    mats, mix, _, il, _ = estimate_mixture(img, nm.mask, None, cfg, normals=nm, illum=LIGHT)
    r0, r1 = (render_fast(m, nm, LIGHT)[nm.mask] for m in mats)
    assert np.sqrt(np.mean((r0 - r1) ** 2)) / np.sqrt(np.mean(r0**2)) < 0.02


# -- estimator API ------------------------------------------------------------------------------

def test_estimator_params_and_fit():
    est = MaterialEstimator(k=1, max_iters=20, stage1_iters=5, n_starts=1)
    params = est.get_params()
    assert params["k"] == 1 and params["n_starts"] == 1
    assert clone(est).get_params() == params
    with pytest.raises(AttributeError):
        est.predict()
    nm = shape("sphere", 16)
    img = render_fast(Material(0.5, 0.4, 0.3, 0.3, 0.3), nm, LIGHT)
    est.fit(img, nm.mask)
    assert isinstance(est.material_, Material)
    out = est.predict()
    assert out.shape == img.shape and np.all(out[~nm.mask] == 0)
    np.testing.assert_allclose(est.predict(est.illumination_.scaled(2.0)), 2 * out, rtol=1e-10, atol=1e-12)
