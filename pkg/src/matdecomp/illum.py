"""Low-order illumination: Kent lobes for emitters plus 2nd-order SH.

Frame conventions (shared with the renderer):

* camera frame, ``x`` right, ``y`` up, ``z`` towards the camera; the camera
  looks along ``-z``;
* a direction with azimuth ``az`` and elevation ``el`` is
  ``(cos el sin az, sin el, cos el cos az)``, so ``az = el = 0`` points at
  the camera;
* lat-long environment maps have the ``+y`` pole on row 0 and azimuth 0 in
  the middle column.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize

from . import _cluster
from ._validation import check_envmap

SH_BANDS = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])
SH_CONV = np.array([np.pi, 2 * np.pi / 3, np.pi / 4])[SH_BANDS]
Y00 = 0.28209479177387814

N_PCA = 7
PEAK_BLUR_DEG = 5.0
PEAK_SUPPRESS_DEG = 20.0
PEAK_MEDIAN_FACTOR = 3.0
CLUSTER_MERGE_GAP = 1.0
FIT_MAX_ROWS = 64
DEFAULT_KAPPA = 20.0


# -- geometry ---------------------------------------------------------------

def direction(az, el, xp=np):
    ce = xp.cos(el)
    return xp.stack([ce * xp.sin(az), xp.sin(el), ce * xp.cos(az)], axis=-1)


def angles(d):
    """Inverse of :func:`direction` for unit vectors; returns ``(az, el)``."""
    d = np.asarray(d, dtype=float)
    return np.arctan2(d[..., 0], d[..., 2]), np.arcsin(np.clip(d[..., 1], -1.0, 1.0))


def kent_frame(az, el, gamma, xp=np):
    """Orthonormal ``(mean, minor, major)`` axes of a lobe."""
    sa, ca = xp.sin(az), xp.cos(az)
    se, ce = xp.sin(el), xp.cos(el)
    zero = xp.zeros_like(sa * se)
    g1 = xp.stack([ce * sa, se + zero, ce * ca], axis=-1)
    t1 = xp.stack([ca + zero, zero, -sa + zero], axis=-1)
    t2 = xp.stack([-se * sa, ce + zero, -se * ca], axis=-1)
    cg, sg = xp.cos(gamma)[..., None], xp.sin(gamma)[..., None]
    g2 = cg * t1 + sg * t2
    g3 = -sg * t1 + cg * t2
    return g1, g2, g3


def kent_value(x, az, el, intensity, kappa, beta, gamma, xp=np):
    """Peak-normalised Kent radiance; parameters broadcast against ``x[..., 0]``."""
    g1, g2, g3 = kent_frame(xp.asarray(az), xp.asarray(el), xp.asarray(gamma), xp)
    d1 = xp.sum(x * g1, axis=-1)
    d2 = xp.sum(x * g2, axis=-1)
    d3 = xp.sum(x * g3, axis=-1)
    return intensity * xp.exp(kappa * (d1 - 1.0) + beta * (d2**2 - d3**2))


def sh_basis(x, xp=np):
    """Real spherical harmonics up to l = 2, ``(..., 9)``."""
    x = xp.asarray(x)
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    return xp.stack(
        [
            Y00 + 0.0 * a,
            0.4886025119029199 * b,
            0.4886025119029199 * c,
            0.4886025119029199 * a,
            1.0925484305920792 * a * b,
            1.0925484305920792 * b * c,
            0.31539156525252005 * (3.0 * c * c - 1.0),
            1.0925484305920792 * a * c,
            0.5462742152960396 * (a * a - b * b),
        ],
        axis=-1,
    )


def latlong_grid(height, width):
    """Pixel-centre directions ``(H, W, 3)`` and solid angles ``(H, W)``."""
    theta_edges = np.linspace(0.0, np.pi, height + 1)
    theta = 0.5 * (theta_edges[:-1] + theta_edges[1:])
    az = 2 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    el = 0.5 * np.pi - theta
    AZ, EL = np.meshgrid(az, el)
    dirs = direction(AZ, EL)
    band = np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])
    domega = np.repeat((band * 2 * np.pi / width)[:, None], width, axis=1)
    return dirs, domega


def latlong_lookup(dirs, height, width):
    """Row/column indices of the lat-long pixel containing each direction."""
    az, el = angles(dirs)
    theta = 0.5 * np.pi - el
    rows = np.clip((theta / np.pi * height).astype(int), 0, height - 1)
    cols = np.clip(((az + np.pi) / (2 * np.pi) * width).astype(int), 0, width - 1)
    return rows, cols


# -- data types -------------------------------------------------------------

@dataclass(frozen=True)
class GaussianLight:
    """A Kent-distributed emitter; ``beta`` must stay within ``[0, kappa/2]``."""

    az: float
    el: float
    intensity: float
    kappa: float
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite light parameters: {vals}")
        if self.intensity < 0 or self.kappa < 0:
            raise ValueError("light intensity and kappa must be non-negative")
        if self.beta < 0 or self.beta > 0.5 * self.kappa * (1 + 1e-12):
            raise ValueError(f"beta={self.beta} outside [0, kappa/2] for kappa={self.kappa}")

    @property
    def dir(self) -> np.ndarray:
        return direction(self.az, self.el)

    def as_array(self) -> np.ndarray:
        return np.array([self.az, self.el, self.intensity, self.kappa, self.beta, self.gamma])

    @classmethod
    def from_array(cls, v) -> "GaussianLight":
        az, el, inten, kappa, beta, gamma = (float(x) for x in v)
        kappa = max(kappa, 0.0)
        return cls(az, el, max(inten, 0.0), kappa, min(max(beta, 0.0), 0.5 * kappa), gamma % np.pi)

    def scaled(self, c: float) -> "GaussianLight":
        return GaussianLight(self.az, self.el, self.intensity * c, self.kappa, self.beta, self.gamma)


def check_sh(sh) -> np.ndarray:
    sh = np.asarray(sh, dtype=float)
    if sh.shape != (9, 3):
        raise ValueError(f"SH coefficients must be 9x3, got {sh.shape}")
    if not np.all(np.isfinite(sh)):
        raise ValueError("SH coefficients must be finite")
    return sh


@dataclass(frozen=True)
class Illumination:
    lights: tuple = ()
    sh: np.ndarray = field(default_factory=lambda: np.zeros((9, 3)))

    def __post_init__(self):
        object.__setattr__(self, "lights", tuple(self.lights))
        object.__setattr__(self, "sh", check_sh(self.sh))

    @property
    def n_lights(self) -> int:
        return len(self.lights)

    def light_array(self) -> np.ndarray:
        if not self.lights:
            return np.zeros((0, 6))
        return np.stack([l.as_array() for l in self.lights])

    def scaled(self, c: float) -> "Illumination":
        return Illumination(tuple(l.scaled(c) for l in self.lights), self.sh * c)

    def radiance(self, x) -> np.ndarray:
        """Total radiance (lobes + SH) towards directions ``x``; ``(..., 3)``."""
        x = np.asarray(x, dtype=float)
        out = sh_basis(x) @ self.sh
        for l in self.lights:
            out = out + kent_value(x, l.az, l.el, l.intensity, l.kappa, l.beta, l.gamma)[..., None]
        return out

    def to_envmap(self, height=64, width=128) -> np.ndarray:
        dirs, _ = latlong_grid(height, width)
        return self.radiance(dirs)


@dataclass(frozen=True)
class IlluminationPrior:
    """Statistics gathered from a collection of fitted environments."""

    kappa_means: np.ndarray
    beta_means: np.ndarray
    pca_basis: np.ndarray  # (3, 9, 7): per-channel principal directions
    pca_means: np.ndarray  # (9, 3)
    gray_vector: np.ndarray  # (9,)
    pca_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros((3, 9)))

    def __post_init__(self):
        for name in ("kappa_means", "beta_means", "pca_basis", "pca_means", "gray_vector", "pca_eigenvalues"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.pca_basis.shape != (3, 9, N_PCA) or self.pca_means.shape != (9, 3):
            raise ValueError("PCA basis must be (3, 9, 7) and means (9, 3)")
        if self.gray_vector.shape != (9,):
            raise ValueError("gray vector must have 9 entries")

    def project(self, sh) -> np.ndarray:
        """PCA weights ``(3, 7)`` whose reconstruction is closest to ``sh``."""
        sh = check_sh(sh)
        return np.einsum("cij,ic->cj", self.pca_basis, sh - self.pca_means)


def sh_from_weights(prior: IlluminationPrior, w) -> np.ndarray:
    """Per-channel ``mean + basis @ weights``; ``w`` is ``(3, 7)``."""
    w = np.asarray(w, dtype=float).reshape(3, N_PCA)
    return prior.pca_means + np.einsum("cij,cj->ic", prior.pca_basis, w)


# -- gray-world weighting -----------------------------------------------------

def grayworld_weight(x, xp=np):
    """``cos((theta - pi) / 2)`` with theta measured from the viewing direction ``-z``."""
    return xp.sqrt(xp.clip(0.5 * (1.0 + x[..., 2]), 0.0, 1.0))


@lru_cache(maxsize=4)
def _gray_quadrature(n_theta, n_phi):
    t, wt = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.5 * np.pi * (t + 1.0)
    wt = 0.5 * np.pi * wt
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    x = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), -np.cos(T)], axis=-1)
    w = (wt * np.sin(theta))[:, None] * (2 * np.pi / n_phi) * np.ones_like(P)
    x.setflags(write=False)
    w.setflags(write=False)
    return x.reshape(-1, 3), w.reshape(-1)


def gray_quadrature(n_theta=400, n_phi=512):
    """Product Gauss-Legendre (polar angle about ``-z``) x uniform azimuth nodes."""
    return _gray_quadrature(n_theta, n_phi)


@lru_cache(maxsize=4)
def _grayworld_vector(n_theta, n_phi):
    x, w = gray_quadrature(n_theta, n_phi)
    g = (sh_basis(x) * (w * grayworld_weight(x))[:, None]).sum(axis=0)
    g.setflags(write=False)
    return g


def grayworld_vector(n_theta=400, n_phi=512) -> np.ndarray:
    """View-weighted sphere integrals of the nine SH basis functions."""
    return _grayworld_vector(n_theta, n_phi).copy()


# -- environment fitting --------------------------------------------------------

def downsample_envmap(env, max_rows=FIT_MAX_ROWS):
    env = np.asarray(env, dtype=float)
    h, w = env.shape[:2]
    f = 1
    while h // f > max_rows and h % (2 * f) == 0 and w % (2 * f) == 0:
        f *= 2
    if f == 1:
        return env
    return env.reshape(h // f, f, w // f, f, -1).mean(axis=(1, 3))


def sh_project(env) -> np.ndarray:
    """Least-squares-free SH projection of a lat-long map (quadrature on pixels)."""
    env = check_envmap(env)
    dirs, domega = latlong_grid(*env.shape[:2])
    Y = sh_basis(dirs)
    return np.einsum("hwi,hw,hwc->ic", Y, domega, env)


def spherical_blur(img, dirs, domega, sigma_deg=PEAK_BLUR_DEG, chunk=1024):
    x = dirs.reshape(-1, 3)
    v = img.reshape(-1)
    w = domega.reshape(-1)
    s2 = np.radians(sigma_deg) ** 2
    out = np.empty_like(v)
    for i in range(0, len(x), chunk):
        k = np.exp((x[i : i + chunk] @ x.T - 1.0) / s2) * w
        out[i : i + chunk] = (k @ v) / k.sum(axis=1)
    return out.reshape(img.shape)


def detect_peaks(env, max_lights, sigma_deg=PEAK_BLUR_DEG,
                 suppress_deg=PEAK_SUPPRESS_DEG, median_factor=PEAK_MEDIAN_FACTOR):
    """Directions of luminaire candidates, strongest first."""
    lum = np.asarray(env, dtype=float).mean(axis=-1)
    h, w = lum.shape
    dirs, domega = latlong_grid(h, w)
    sm = spherical_blur(lum, dirs, domega, sigma_deg)
    thresh = median_factor * np.median(sm)
    padded = np.pad(sm, ((1, 1), (0, 0)), mode="edge")
    padded = np.concatenate([padded[:, -1:], padded, padded[:, :1]], axis=1)
    is_max = np.ones_like(sm, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            is_max &= sm >= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    is_max &= sm > thresh
    cand = np.argwhere(is_max)
    order = np.argsort(-sm[is_max], kind="stable")
    cos_sup = np.cos(np.radians(suppress_deg))
    chosen = []
    for idx in order:
        d = dirs[tuple(cand[idx])]
        if all(d @ c < cos_sup for c in chosen):
            chosen.append(d)
        if len(chosen) >= max_lights:
            break
    return chosen


def _lobe_image(params, x):
    out = np.zeros(x.shape[0])
    for az, el, inten, kappa, b, gamma in params.reshape(-1, 6):
        out += kent_value(x, az, el, inten, kappa, 0.5 * b * kappa, gamma)
    return out


def fit_envmap(env, max_lights: int = 3) -> Illumination:
    """Fit lobes + SH to a lat-long radiance map by bounded non-linear least squares.

    The lobe count is the number of detected peaks (capped at ``max_lights``);
    SH coefficients are solved in closed form for every lobe configuration.
    """
    env = downsample_envmap(check_envmap(env))
    h, w = env.shape[:2]
    if not np.any(env > 0):
        return Illumination((), np.zeros((9, 3)))
    dirs, domega = latlong_grid(h, w)
    x = dirs.reshape(-1, 3)
    sw = np.sqrt(domega.reshape(-1))
    target = env.reshape(-1, 3) * sw[:, None]
    Q, R = np.linalg.qr(sh_basis(x) * sw[:, None])

    def residual(p):
        r = target - (_lobe_image(p, x) * sw)[:, None]
        return (r - Q @ (Q.T @ r)).ravel()

    peaks = detect_peaks(env, max_lights)
    lights = ()
    if peaks:
        lum = env.mean(axis=-1)
        floor = np.median(lum)
        rows, cols = latlong_lookup(np.array(peaks), h, w)
        x0, lo, hi = [], [], []
        for d, r_, c_ in zip(peaks, rows, cols):
            az, el = angles(d)
            x0 += [az, el, max(lum[r_, c_] - floor, 1e-3), 30.0, 0.1, 0.5]
            lo += [-np.inf, -0.5 * np.pi, 0.0, 0.1, 0.0, -np.inf]
            hi += [np.inf, 0.5 * np.pi, np.inf, 1e5, 1.0, np.inf]
        sol = optimize.least_squares(residual, np.array(x0), bounds=(lo, hi),
                                     x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                     max_nfev=400 * len(x0))
        p = sol.x.reshape(-1, 6)
        lights = tuple(
            GaussianLight.from_array([az, el, inten, kappa, 0.5 * b * kappa, gamma])
            for az, el, inten, kappa, b, gamma in p
        )
        lobe = np.array([l.as_array() for l in lights])
        lobe[:, 4] = p[:, 4]
        r = target - (_lobe_image(lobe.ravel(), x) * sw)[:, None]
    else:
        r = target
    sh = np.linalg.solve(R, Q.T @ r)
    return Illumination(lights, sh)


# -- priors -------------------------------------------------------------------

def _merge_close(centers, gap=CLUSTER_MERGE_GAP):
    merged = []
    for c in np.sort(np.asarray(centers, dtype=float).ravel()):
        if merged and c - merged[-1][-1] < gap:
            merged[-1].append(c)
        else:
            merged.append([c])
    return np.array([np.mean(m) for m in merged])


def pca_per_channel(sh_stack):
    """Per-channel PCA of an ``(n, 9, 3)`` stack; keeps seven components."""
    sh_stack = np.asarray(sh_stack, dtype=float)
    means = sh_stack.mean(axis=0)
    basis = np.zeros((3, 9, N_PCA))
    eig = np.zeros((3, 9))
    for c in range(3):
        X = sh_stack[:, :, c] - means[:, c]
        cov = X.T @ X / max(len(X) - 1, 1)
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(-vals, kind="stable")
        eig[c] = np.clip(vals[order], 0.0, None)
        basis[c] = vecs[:, order[:N_PCA]]
    return means, basis, eig


def prior_from_fits(fits, n_kappa_clusters=3, n_beta_clusters=3, seed=0) -> IlluminationPrior:
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one fitted environment")
    kappas = np.array([l.kappa for f in fits for l in f.lights])
    betas = np.array([l.beta for f in fits for l in f.lights])
    if len(kappas):
        kc, _ = _cluster.kmeans(kappas, n_kappa_clusters, seed=seed)
        bc, _ = _cluster.kmeans(betas, n_beta_clusters, seed=seed + 1)
        kappa_means, beta_means = _merge_close(kc), _merge_close(bc)
    else:
        kappa_means, beta_means = np.array([DEFAULT_KAPPA]), np.array([0.0])
    means, basis, eig = pca_per_channel(np.stack([f.sh for f in fits]))
    return IlluminationPrior(kappa_means, beta_means, basis, means, grayworld_vector(), eig)


def build_prior(envs, n_kappa_clusters=3, n_beta_clusters=3, max_lights=3, seed=0) -> IlluminationPrior:
    """Fit every environment and summarise lobe shapes (k-means) and SH (PCA)."""
    envs = list(envs)
    fits = [fit_envmap(e, max_lights) for e in envs]
    return prior_from_fits(fits, n_kappa_clusters, n_beta_clusters, seed)
