import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import small_prior
from matdecomp import io as mio
from matdecomp.brdf import Material
from matdecomp.illum import GaussianLight, Illumination

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3])), elements=f32))
def test_pfm_round_trip_is_bit_exact(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    mio.write_pfm(p, img)
    back = mio.read_pfm(p)
    assert back.shape == img.shape
    assert back.astype(np.float32).tobytes() == img.tobytes()


def test_pfm_row_order(tmp_path):
    img = np.zeros((2, 3, 3), np.float32)
    img[0] = 1.0
    mio.write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    # PFM stores the bottom row first
    assert np.frombuffer(raw[-9 * 4:], "<f4").max() == 1.0
    np.testing.assert_array_equal(mio.read_pfm(tmp_path / "a.pfm"), img)


def test_pfm_big_endian(tmp_path):
    img = np.arange(6, dtype=">f4").reshape(2, 3)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + img[::-1].tobytes())
    np.testing.assert_array_equal(mio.read_pfm(tmp_path / "b.pfm")[..., 0], img)


@pytest.mark.parametrize("content,msg", [
    (b"P6\n1 1\n255\n\0\0\0", "not a PFM"),
    (b"PF\nx y\n-1\n", "header"),
    (b"PF\n2 2\n-1.0\n" + b"\0" * 20, "expected 12 values"),
])
def test_pfm_errors(tmp_path, content, msg):
    p = tmp_path / "bad.pfm"
    p.write_bytes(content)
    with pytest.raises(mio.FormatError, match=msg):
        mio.read_pfm(p)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(mio.FormatError, match="nope.pfm"):
        mio.read_pfm(tmp_path / "nope.pfm")


def test_pfm_channel_count():
    with pytest.raises(ValueError):
        mio.write_pfm("/dev/null", np.zeros((2, 2, 2)))


@pytest.mark.parametrize("k", [1, 2, 3, 4, 7])
def test_channels_pfm(tmp_path, k):
    img = np.random.default_rng(k).random((5, 4, k)).astype(np.float32)
    mio.write_channels_pfm(tmp_path / "w.pfm", img)
    np.testing.assert_array_equal(mio.read_channels_pfm(tmp_path / "w.pfm", k), img)
    assert mio.read_pfm(tmp_path / "w.pfm").shape == (5 * -(-k // 3), 4, 3)


def test_mask_png(tmp_path):
    mask = np.random.default_rng(0).random((9, 11)) > 0.5
    mio.write_mask_png(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(mio.read_mask_png(tmp_path / "m.png"), mask)
    (tmp_path / "x.png").write_text("junk")
    with pytest.raises(mio.FormatError):
        mio.read_mask_png(tmp_path / "x.png")


def test_preview_png(tmp_path):
    from PIL import Image

    img = np.linspace(0, 2, 48).reshape(4, 4, 3)
    mio.write_preview_png(tmp_path / "p.png", img, scale=2.0)
    arr = np.asarray(Image.open(tmp_path / "p.png"))
    assert arr.dtype == np.uint8 and arr.shape == (4, 4, 3)
    assert arr[0, 0, 0] == 0 and arr[-1, -1, -1] == 255
    t = mio.tonemap(img, np.ones((4, 4), bool))
    assert t.min() >= 0 and t.max() <= 1


# -- records ---------------------------------------------------------------------------

def test_material_round_trip(tmp_path):
    mats = [Material(0.1, 0.2, 0.3, 0.4, 0.5), Material(1 / 3, 0.7, 2 ** -30, 0.0, 1.0)]
    mio.save_material(tmp_path / "m.txt", mats)
    back = mio.load_materials(tmp_path / "m.txt")
    assert [b.as_array().tolist() for b in back] == [m.as_array().tolist() for m in mats]
    assert mio.load_material(tmp_path / "m.txt").as_array().tolist() == mats[0].as_array().tolist()


def test_illumination_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    il = Illumination((GaussianLight(0.1, 0.7, 3.3, 55.5, 7.0, 0.2), GaussianLight(-2, -0.3, 1 / 7, 4.0, 0.0, 0.0)),
                      rng.normal(size=(9, 3)))
    mio.save_illumination(tmp_path / "i.txt", il)
    back = mio.load_illumination(tmp_path / "i.txt")
    np.testing.assert_array_equal(back.light_array(), il.light_array())
    np.testing.assert_array_equal(back.sh, il.sh)
    empty = Illumination((), il.sh)
    mio.save_illumination(tmp_path / "e.txt", empty)
    assert mio.load_illumination(tmp_path / "e.txt").n_lights == 0


def test_prior_round_trip(tmp_path):
    prior = small_prior()
    mio.save_prior(tmp_path / "p.txt", prior)
    back = mio.load_prior(tmp_path / "p.txt")
    for name in ("kappa_means", "beta_means", "pca_basis", "pca_means", "gray_vector", "pca_eigenvalues"):
        np.testing.assert_array_equal(getattr(back, name), getattr(prior, name))


def test_record_errors(tmp_path):
    p = tmp_path / "r.txt"
    mio.write_record(p, "material", {"materials": np.ones((1, 5))})
    with pytest.raises(mio.FormatError, match="expected a 'prior'"):
        mio.read_record(p, "prior")
    p.write_text(p.read_text().replace("material 1", "material 99"))
    with pytest.raises(mio.FormatError, match="newer"):
        mio.read_record(p, "material")
    p.write_text("# matdecomp material 1\nmaterials 2 5\n1 1 1 1 1\n")
    with pytest.raises(mio.FormatError, match="malformed"):
        mio.read_record(p, "material")
    p.write_text("")
    with pytest.raises(mio.FormatError, match="empty"):
        mio.read_record(p, "material")
    p.write_text("# matdecomp material 1\nmaterials 1 4\n1 1 1 1\n")
    with pytest.raises(mio.FormatError, match="5 columns"):
        mio.load_materials(p)
    p.write_text("# matdecomp prior 1\nkappa_means 1 1\n3\n")
    with pytest.raises(mio.FormatError, match="incomplete"):
        mio.load_prior(p)


def test_write_is_atomic(tmp_path):
    p = tmp_path / "m.txt"
    mio.save_material(p, Material(0.1, 0.2, 0.3, 0.4, 0.5))
    assert [q.name for q in tmp_path.iterdir()] == ["m.txt"]
