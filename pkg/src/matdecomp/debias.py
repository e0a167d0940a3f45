"""Linear correction of systematic estimation bias.

Features are the estimated specular albedo and roughness plus normalised
histograms of the re-render, the normal components, the input and the error
image (raw values and gradient magnitudes), and a constant entry.  A linear
model fitted with an L1 loss and an L2 penalty predicts additive corrections
to the five material parameters.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import io as mio
from ._validation import InputError, check_image
from .brdf import Material
from .illum import Illumination
from .render import NormalMap, render_fast

N_BINS = 16
BLOCK_NAMES = ("render", "normal_x", "normal_y", "normal_z", "input", "error")
N_BLOCKS = 2 * len(BLOCK_NAMES)
FEATURE_LENGTH = 2 + N_BLOCKS * N_BINS + 1
MIN_TRAINING_PAIRS = 20
LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class FeatureVector:
    """Feature values plus the raw estimate they were computed for."""

    values: np.ndarray
    raw: Material

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (FEATURE_LENGTH,):
            raise ValueError(f"feature vector must have {FEATURE_LENGTH} entries, got {v.shape}")
        object.__setattr__(self, "values", v)

    def blocks(self) -> np.ndarray:
        """Histogram blocks as ``(12, 16)``, raw blocks first."""
        return self.values[2:-1].reshape(N_BLOCKS, N_BINS)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.values.tobytes())
        h.update(self.raw.as_array().tobytes())
        return h.hexdigest()


def _histogram(values):
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=N_BINS, range=(0.0, 1.0))
    return counts / max(counts.sum(), 1)


def _gradient_magnitude(img, mask):
    """Forward-difference gradient magnitude on masked pixels (0 across the border)."""
    pad = np.pad(np.where(mask, img, 0.0), ((0, 1), (0, 1)))
    pm = np.pad(mask, ((0, 1), (0, 1)))
    dx = np.where(pm[:-1, 1:] & mask, pad[:-1, 1:] - img, 0.0)
    dy = np.where(pm[1:, :-1] & mask, pad[1:, :-1] - img, 0.0)
    return np.hypot(dx, dy)[mask]


def _normalised_gradient(img, mask):
    g = _gradient_magnitude(img, mask)
    top = np.percentile(g, 99) if g.size else 0.0
    return g / top if top > 0 else np.zeros_like(g)


def extract_features(image, material: Material, normals: NormalMap, illum: Illumination) -> FeatureVector:
    """Features of a single-material solve on ``image``."""
    image = check_image(image)
    mask = normals.mask
    rendered = render_fast(material, normals, illum)
    n = normals.vectors()
    planes = {
        "render": rendered @ LUMA,
        "normal_x": (n[..., 0] + 1) / 2,
        "normal_y": (n[..., 1] + 1) / 2,
        "normal_z": (n[..., 2] + 1) / 2,
        "input": image @ LUMA,
        "error": ((rendered - image) @ LUMA + 1) / 2,
    }
    raw = [_histogram(planes[b][mask]) for b in BLOCK_NAMES]
    grad = [_histogram(_normalised_gradient(planes[b], mask)) for b in BLOCK_NAMES]
    vals = np.concatenate([[material.rs, material.rough], *raw, *grad, [1.0]])
    return FeatureVector(vals, material)


# -- regression -------------------------------------------------------------------

class BiasRegressor(RegressorMixin, BaseEstimator):
    """Least-absolute-deviation linear regression with a ridge penalty.

    Minimises ``sum |X w - y| + lam * |w|^2`` per output column by
    iteratively reweighted least squares.  Columns listed in
    ``free_columns`` (e.g. a constant entry) are not penalised.
    """

    def __init__(self, lam=0.1, tol=1e-8, max_sweeps=200, free_columns=(), floor=1e-9):
        self.lam = lam
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.free_columns = free_columns
        self.floor = floor

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        Y = y.reshape(len(y), -1)
        d = X.shape[1]
        pen = np.full(d, float(self.lam))
        pen[list(self.free_columns)] = 0.0
        free = pen == 0
        if free.any() and np.linalg.matrix_rank(X[:, free]) < free.sum():
            # unpenalised columns must be identifiable on their own
            raise np.linalg.LinAlgError("rank-deficient design without regularisation")
        W = np.zeros((d, Y.shape[1]))
        self.n_sweeps_ = 0
        for j in range(Y.shape[1]):
            w = np.linalg.lstsq(X.T @ X + np.diag(2 * pen + 1e-12), X.T @ Y[:, j], rcond=None)[0]
            for sweep in range(self.max_sweeps):
                r = np.abs(X @ w - Y[:, j])
                v = 1.0 / np.maximum(r, self.floor)
                A = (X * v[:, None]).T @ X + np.diag(2 * pen)
                w_new = np.linalg.solve(A, (X * v[:, None]).T @ Y[:, j])
                step = np.max(np.abs(w_new - w))
                w = w_new
                self.n_sweeps_ = max(self.n_sweeps_, sweep + 1)
                if step < self.tol:
                    break
            W[:, j] = w
        self.coef_ = W.T if y.ndim > 1 else W[:, 0]
        self.n_features_in_ = d
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ np.asarray(self.coef_).T


@dataclass(frozen=True)
class BiasModel:
    """Maps features to additive corrections of ``(rd_r, rd_g, rd_b, rs, rough)``."""

    weights: np.ndarray  # (5, FEATURE_LENGTH)
    lam: float = 0.1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (5, FEATURE_LENGTH) or not np.all(np.isfinite(w)):
            raise ValueError(f"bias weights must be finite with shape (5, {FEATURE_LENGTH})")
        object.__setattr__(self, "weights", w)

    @classmethod
    def zero(cls) -> "BiasModel":
        return cls(np.zeros((5, FEATURE_LENGTH)))


def train_bias(pairs, lam=0.1, tol=1e-8, max_sweeps=200) -> BiasModel:
    """Fit the correction model on ``(FeatureVector, true Material)`` pairs."""
    pairs = list(pairs)
    if len(pairs) < MIN_TRAINING_PAIRS:
        raise InputError(f"need at least {MIN_TRAINING_PAIRS} training pairs, got {len(pairs)}")
    X = np.stack([f.values for f, _ in pairs])
    Y = np.stack([t.as_array() - f.raw.as_array() for f, t in pairs])
    reg = BiasRegressor(lam=lam, tol=tol, max_sweeps=max_sweeps, free_columns=(FEATURE_LENGTH - 1,))
    reg.fit(X, Y)
    return BiasModel(reg.coef_, lam)


def apply_bias(model: BiasModel, features: FeatureVector, raw_estimate: Material | None = None) -> Material:
    """Raw estimate plus the predicted correction, clamped to the unit box."""
    v = np.asarray(getattr(features, "values", features), dtype=float)
    if v.shape != (model.weights.shape[1],):
        raise InputError(f"feature length {v.shape} does not match model ({model.weights.shape[1]})")
    raw = raw_estimate if raw_estimate is not None else features.raw
    return Material.from_array(raw.as_array() + model.weights @ v, clip=True)


def leave_one_out(pairs, lam=0.1):
    """Corrected estimates where sample ``i`` comes from a model trained without it.

    Returns ``(corrected materials, training fingerprints per fold)``.
    """
    pairs = list(pairs)
    out, folds = [], []
    for i, (f, _) in enumerate(pairs):
        train = pairs[:i] + pairs[i + 1 :]
        prints = {p.fingerprint() for p, _ in train}
        if f.fingerprint() in prints:
            raise RuntimeError(f"sample {i} appears in its own training fold")
        out.append(apply_bias(train_bias(train, lam), f))
        folds.append(prints)
    return out, folds


def save_bias(path, model: BiasModel):
    mio.write_record(path, "bias", {"weights": model.weights, "lam": [[model.lam]]})


def load_bias(path) -> BiasModel:
    rec = mio.read_record(path, "bias")
    try:
        return BiasModel(rec["weights"], float(rec["lam"][0, 0]))
    except (KeyError, ValueError) as exc:
        raise mio.FormatError(f"{path}: invalid bias model ({exc})") from exc
