import numpy as np
import pytest
from sklearn.base import clone

from conftest import shape, sky
from matdecomp import debias
from matdecomp.brdf import Material
from matdecomp.illum import Illumination
from matdecomp.render import NormalMap, render_fast

L = debias.FEATURE_LENGTH


def features_for(mat, nm, il, image=None):
    img = render_fast(mat, nm, il) if image is None else image
    return debias.extract_features(img, mat, nm, il)


@pytest.fixture(scope="module")
def pairs():
    """Synthetic (features, truth) pairs with a known linear relation."""
    rng = np.random.default_rng(0)
    out = []
    for i in range(30):
        v = np.concatenate([rng.random(L - 1), [1.0]])
        raw = Material(*rng.uniform(0.2, 0.8, 5))
        out.append((debias.FeatureVector(v, raw), v))
    return out


# -- features -------------------------------------------------------------------------------

def test_feature_layout(lit, glossy, sphere16):
    f = features_for(glossy, sphere16, lit)
    assert f.values.shape == (L,) == (2 + 12 * 16 + 1,)
    assert f.values[0] == glossy.rs and f.values[1] == glossy.rough and f.values[-1] == 1.0
    np.testing.assert_allclose(f.blocks().sum(axis=1), 1.0, atol=1e-9)


def test_features_deterministic(lit, glossy, sphere16):
    a = features_for(glossy, sphere16, lit)
    b = features_for(glossy, sphere16, lit)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.fingerprint() == b.fingerprint()


def test_constant_input_gives_one_hot_raw_histograms():
    mask = np.zeros((12, 12), bool)
    mask[2:10, 2:10] = True
    nm = NormalMap(mask, np.zeros(mask.shape), np.zeros(mask.shape))
    il = Illumination((), sky(0.4))
    mat = Material(0.5, 0.5, 0.5, 0.0, 0.5)
    img = np.where(mask[..., None], render_fast(mat, nm, il), 0.0)
    raw = features_for(mat, nm, il, img).blocks()[:6]
    assert np.all(np.sort(raw, axis=1)[:, -1] == 1.0)
    assert np.all(np.count_nonzero(raw, axis=1) == 1)


def test_features_ignore_unmasked_content(lit, glossy, sphere16):
    img = render_fast(glossy, sphere16, lit)
    noisy = np.where(sphere16.mask[..., None], img, np.random.default_rng(1).random(img.shape) * 50)
    a = debias.extract_features(img, glossy, sphere16, lit)
    b = debias.extract_features(noisy, glossy, sphere16, lit)
    assert a.values.tobytes() == b.values.tobytes()


def test_feature_vector_length_checked(glossy):
    with pytest.raises(ValueError):
        debias.FeatureVector(np.zeros(L - 1), glossy)


# -- regression -------------------------------------------------------------------------------

def test_realizable_target_is_fit_exactly():
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.normal(size=(40, 6)), np.ones(40)])
    W = rng.normal(size=(7, 5))
    reg = debias.BiasRegressor(lam=0.0).fit(X, X @ W)
    assert np.max(np.abs(reg.predict(X) - X @ W)) < 1e-6


def test_l1_is_robust_to_outliers():
    rng = np.random.default_rng(2)
    X = np.column_stack([rng.normal(size=(60, 3)), np.ones(60)])
    w = np.array([0.5, -1.0, 2.0, 0.3])
    y = X @ w + rng.normal(scale=0.01, size=60)
    bad = rng.choice(60, 6, replace=False)
    y[bad] += rng.choice([-1, 1], 6) * 20
    inl = np.setdiff1d(np.arange(60), bad)
    l1 = debias.BiasRegressor(lam=0.0).fit(X, y).predict(X)
    l2 = X @ np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.mean(np.abs(l1 - y)[inl]) < np.mean(np.abs(l2 - y)[inl])


def test_huge_penalty_shrinks_to_zero():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 5))
    reg = debias.BiasRegressor(lam=1e12).fit(X, rng.normal(size=(30, 2)))
    assert np.max(np.abs(reg.coef_)) < 1e-9
    model = debias.BiasModel(np.zeros((5, L)))
    f = debias.FeatureVector(np.ones(L), Material(0.1, 0.2, 0.3, 0.4, 0.5))
    assert debias.apply_bias(model, f).as_array().tolist() == [0.1, 0.2, 0.3, 0.4, 0.5]


def test_rank_deficient_without_penalty_errors():
    X = np.ones((25, 3))
    with pytest.raises(np.linalg.LinAlgError):
        debias.BiasRegressor(lam=0.0).fit(X, np.zeros(25))
    debias.BiasRegressor(lam=0.1, free_columns=(0,)).fit(X, np.zeros(25))
    with pytest.raises(ValueError):
        debias.BiasRegressor(lam=-1).fit(X, np.zeros(25))


def test_train_needs_twenty_pairs(pairs):
    with pytest.raises(ValueError, match="20"):
        debias.train_bias(pairs[:19])


def test_train_recovers_linear_correction(pairs):
    W = np.random.default_rng(4).normal(scale=0.01, size=(5, L))
    data = [(f, Material.from_array(f.raw.as_array() + W @ f.values)) for f, _ in pairs]
    model = debias.train_bias(data, lam=1e-9)
    for f, t in data:
        np.testing.assert_allclose(debias.apply_bias(model, f).as_array(), t.as_array(), atol=1e-4)
    again = debias.train_bias(data, lam=1e-9)
    assert again.weights.tobytes() == model.weights.tobytes()


def test_apply_clamps_and_checks_length(pairs):
    f = pairs[0][0]
    big = debias.BiasModel(np.full((5, L), 10.0))
    out = debias.apply_bias(big, f).as_array()
    assert np.all(out == 1.0)
    assert np.all(debias.apply_bias(debias.BiasModel(-big.weights), f).as_array() == 0.0)
    with pytest.raises(ValueError):
        debias.apply_bias(big, np.zeros(L - 3), f.raw)


def test_zero_model_is_identity(pairs):
    f = pairs[3][0]
    assert debias.apply_bias(debias.BiasModel.zero(), f).as_array().tolist() == f.raw.as_array().tolist()


def test_bias_model_validation():
    with pytest.raises(ValueError):
        debias.BiasModel(np.zeros((4, L)))
    w = np.zeros((5, L))
    w[0, 0] = np.nan
    with pytest.raises(ValueError):
        debias.BiasModel(w)


def test_leave_one_out_never_sees_its_sample(pairs):
    data = [(f, Material.from_array(np.clip(f.raw.as_array() + 0.05, 0, 1))) for f, _ in pairs[:22]]
    out, folds = debias.leave_one_out(data, lam=0.1)
    assert len(out) == len(folds) == 22
    for (f, _), prints in zip(data, folds):
        assert f.fingerprint() not in prints and len(prints) == 21
    dup = data + [data[0]]
    with pytest.raises(RuntimeError):
        debias.leave_one_out(dup)


def test_save_load(tmp_path, pairs):
    model = debias.BiasModel(np.random.default_rng(5).normal(size=(5, L)), lam=0.25)
    debias.save_bias(tmp_path / "b.txt", model)
    back = debias.load_bias(tmp_path / "b.txt")
    assert back.weights.tobytes() == model.weights.tobytes() and back.lam == 0.25


def test_sklearn_api():
    reg = debias.BiasRegressor(lam=0.3, free_columns=(2,))
    assert clone(reg).get_params() == reg.get_params()
    with pytest.raises(Exception):
        reg.predict(np.zeros((2, 3)))
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 3))
    reg.fit(X, X[:, 0])
    assert reg.predict(X).shape == (20,)
    assert reg.score(X, X[:, 0]) > 0.9
    with pytest.raises(ValueError):
        reg.predict(np.zeros((2, 4)))
