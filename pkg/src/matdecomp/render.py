"""Forward rendering under Kent-lobe + SH lighting.

``render_fast`` is the deterministic renderer used inside the optimiser:
emitters are integrated by a fixed polar quadrature over each lobe's support
cap with the full BRDF, everything else is diffuse SH irradiance scaled by the
diffuse albedo.  ``render_reference`` is a seeded Monte Carlo estimate of the
same reflection integral and serves as an independent oracle.

The camera is orthographic and looks along ``-z``; every pixel sees the
surface from ``v = +z``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from ._validation import check_mask
from .brdf import DIFFUSE_NORM, ROUGH_FLOOR, Material, eval_brdf
from .illum import (
    SH_CONV,
    Illumination,
    angles,
    direction,
    kent_frame,
    kent_value,
    latlong_grid,
    latlong_lookup,
    sh_basis,
)

VIEW = np.array([0.0, 0.0, 1.0])
CAP_THRESHOLD = 1e-3
N_RADIAL = 16
N_AZIMUTH = 16
# Half-width of the C1 smoothing applied to cosine clamps and maxima inside the
# differentiable renderer.
SMOOTH = 1e-2


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals over a mask, stored as azimuth/elevation."""

    mask: np.ndarray
    az: np.ndarray
    el: np.ndarray

    def __post_init__(self):
        mask = check_mask(self.mask)
        az = np.where(mask, np.asarray(self.az, dtype=float), 0.0)
        el = np.where(mask, np.asarray(self.el, dtype=float), 0.0)
        if az.shape != mask.shape or el.shape != mask.shape:
            raise ValueError("az/el must match the mask shape")
        if not (np.all(np.isfinite(az)) and np.all(np.isfinite(el))):
            raise ValueError("normal angles must be finite on the mask")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "az", az)
        object.__setattr__(self, "el", el)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def n_pixels(self) -> int:
        return int(self.mask.sum())

    def vectors(self) -> np.ndarray:
        """``(H, W, 3)`` unit normals, zero outside the mask."""
        return np.where(self.mask[..., None], direction(self.az, self.el), 0.0)

    def masked_vectors(self) -> np.ndarray:
        return direction(self.az[self.mask], self.el[self.mask])

    def masked_angles(self) -> np.ndarray:
        return np.stack([self.az[self.mask], self.el[self.mask]], axis=-1)

    @classmethod
    def from_vectors(cls, mask, normals) -> "NormalMap":
        mask = check_mask(mask)
        n = np.asarray(normals, dtype=float)
        n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
        az, el = angles(n)
        return cls(mask, np.where(mask, az, 0.0), np.where(mask, el, 0.0))

    @classmethod
    def from_masked_angles(cls, mask, ang) -> "NormalMap":
        mask = check_mask(mask)
        az = np.zeros(mask.shape)
        el = np.zeros(mask.shape)
        ang = np.asarray(ang, dtype=float).reshape(-1, 2)
        az[mask] = ang[:, 0]
        el[mask] = ang[:, 1]
        return cls(mask, az, el)


# -- smooth helpers (differentiable path) ---------------------------------------

def soft_relu(x, d=SMOOTH):
    """max(x, 0) with a quadratic blend on ``|x| < d``; C1."""
    return jnp.where(x >= d, x, jnp.where(x <= -d, 0.0, (x + d) ** 2 / (4 * d)))


def soft_max(a, b, d=SMOOTH):
    return 0.5 * (a + b + jnp.sqrt((a - b) ** 2 + d * d))


def soft_step(x, d=SMOOTH):
    s = jnp.clip((x + d) / (2 * d), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


# -- quadrature over lobe caps --------------------------------------------------

def cap_extent(kappa, beta):
    """``1 - cos`` radius of the cap outside which a lobe is below 1e-3 of its peak."""
    c = -np.log(CAP_THRESHOLD)
    a = kappa - 2.0 * beta
    return jnp.minimum(2.0 * c / (a + jnp.sqrt(a * a + 4.0 * beta * c)), 2.0)


@partial(jax.jit, static_argnames=("n_radial", "n_azimuth"))
def lobe_nodes(lobe, n_radial=N_RADIAL, n_azimuth=N_AZIMUTH):
    """Quadrature directions and radiance-times-weight for one lobe ``(6,)``."""
    az, el, inten, kappa, beta, gamma = (lobe[i] for i in range(6))
    g1, g2, g3 = kent_frame(az, el, gamma, jnp)
    t = cap_extent(kappa, beta)
    x, w = np.polynomial.legendre.leggauss(n_radial)
    u = 0.5 * t * (jnp.asarray(x) + 1.0)
    wu = 0.5 * t * jnp.asarray(w)
    phi = 2 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    cos_t = 1.0 - u
    sin_t = jnp.sqrt(u * (2.0 - u))
    cp, sp = jnp.asarray(np.cos(phi)), jnp.asarray(np.sin(phi))
    d2 = sin_t[:, None] * cp[None, :]
    d3 = sin_t[:, None] * sp[None, :]
    dirs = cos_t[:, None, None] * g1 + d2[..., None] * g2 + d3[..., None] * g3
    rad = inten * jnp.exp(-kappa * u[:, None] + beta * (d2**2 - d3**2))
    weight = wu[:, None] * (2 * np.pi / n_azimuth) * rad
    return dirs.reshape(-1, 3), weight.reshape(-1)


def _lobe_geometry(normals, lobes):
    """Per-lobe quadrature terms shared by all materials."""
    view = jnp.asarray(VIEW)
    co = soft_relu(normals[:, 2])[:, None]
    out = []
    for j in range(lobes.shape[0]):
        dirs, lw = lobe_nodes(lobes[j])
        h = dirs + view
        h = h / jnp.sqrt(jnp.sum(h * h, axis=-1, keepdims=True) + 1e-30)
        cih = jnp.maximum(jnp.sum(dirs * h, axis=-1), 1e-6)
        ci = soft_relu(normals @ dirs.T)
        ch = jnp.maximum(normals @ h.T, 1e-12)
        out.append((lw, cih, ci, ch))
    return co, out


def shade_pixels(mats, normals, lobes, sh):
    """Rendered radiance ``(k, P, 3)`` for ``k`` materials at ``P`` pixel normals.

    ``mats`` is ``(k, 5)``, ``lobes`` ``(m, 6)`` with ``beta`` in absolute
    units, ``sh`` ``(9, 3)``.  Pure jax; differentiable in every argument.
    """
    co, geo = _lobe_geometry(normals, lobes)
    gate = soft_step(normals[:, 2])
    go = 1.0 - (1.0 - 0.5 * co[:, 0]) ** 5
    irr = sh_basis(normals, jnp) @ (jnp.asarray(SH_CONV)[:, None] * sh)
    diff_sum = jnp.zeros(normals.shape[0])
    for lw, cih, ci, ch in geo:
        gi = 1.0 - (1.0 - 0.5 * ci) ** 5
        diff_sum = diff_sum + (gi * ci) @ lw
    diff_sum = go * diff_sum
    out = []
    for k in range(mats.shape[0]):
        rd, rs, rough = mats[k, :3], mats[k, 3], jnp.maximum(mats[k, 4], ROUGH_FLOOR)
        e = 2.0 / rough**2 - 2.0
        spec = jnp.zeros(normals.shape[0])
        for lw, cih, ci, ch in geo:
            dist = jnp.exp(e * jnp.log(ch)) / (np.pi * rough**2)
            s5 = (1.0 - cih) ** 5
            base = dist * (ci / soft_max(ci, co)) * (lw / (4.0 * cih))
            spec = spec + base @ (rs * (1.0 - s5) + s5)
        emitted = DIFFUSE_NORM * (1.0 - rs) * diff_sum[:, None] * rd + (gate * spec)[:, None]
        out.append(emitted + rd * irr)
    return jnp.stack(out)


def irradiance_pixels(normals, lobes, sh):
    irr = sh_basis(normals, jnp) @ (jnp.asarray(SH_CONV)[:, None] * sh)
    for j in range(lobes.shape[0]):
        dirs, lw = lobe_nodes(lobes[j])
        irr = irr + (soft_relu(normals @ dirs.T) @ lw)[:, None]
    return irr


_shade_jit = jax.jit(shade_pixels)
_irr_jit = jax.jit(irradiance_pixels)


def _as_image(mask, values):
    img = np.zeros(mask.shape + (3,))
    img[mask] = np.asarray(values)
    return img


def render_fast(mat: Material, normals: NormalMap, illum: Illumination) -> np.ndarray:
    """Deterministic render ``(H, W, 3)``; zero outside the mask."""
    vals = _shade_jit(jnp.asarray(mat.as_array()[None]), jnp.asarray(normals.masked_vectors()),
                      jnp.asarray(illum.light_array()), jnp.asarray(illum.sh))
    return _as_image(normals.mask, vals[0])


def render_irradiance(normals: NormalMap, illum: Illumination) -> np.ndarray:
    """SH irradiance plus cosine-weighted lobe power, as if every lobe hit a white diffuser."""
    vals = _irr_jit(jnp.asarray(normals.masked_vectors()), jnp.asarray(illum.light_array()),
                    jnp.asarray(illum.sh))
    return _as_image(normals.mask, vals)


def render_mix(mats, weights, normals: NormalMap, illum: Illumination) -> np.ndarray:
    """Per-pixel convex combination of single-material renders.

    ``weights`` is a mixture field, ``(H, W, k)`` or ``(P, k)`` over masked pixels.
    """
    mats = list(mats)
    w = np.asarray(getattr(weights, "values", weights), dtype=float)
    if w.ndim == 3:
        w = w[normals.mask]
    if w.shape != (normals.n_pixels, len(mats)):
        raise ValueError(f"weights shape {w.shape} does not match {len(mats)} materials")
    arr = jnp.asarray(np.stack([m.as_array() for m in mats]))
    vals = _shade_jit(arr, jnp.asarray(normals.masked_vectors()), jnp.asarray(illum.light_array()),
                      jnp.asarray(illum.sh))
    return _as_image(normals.mask, jnp.einsum("pk,kpc->pc", jnp.asarray(w), vals))


# -- Monte Carlo reference ----------------------------------------------------------

def _frame(n):
    """Two tangents orthogonal to unit vectors ``n`` ``(..., 3)``."""
    a = np.where(np.abs(n[..., :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    return t1, np.cross(n, t1)


def _around(n, cos_t, phi):
    t1, t2 = _frame(n)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    return (cos_t[:, None] * n + (sin_t * np.cos(phi))[:, None] * t1
            + (sin_t * np.sin(phi))[:, None] * t2)


def _vmf_sample(mu, kappa, u1, u2):
    w = 1.0 + np.log(u1 + (1.0 - u1) * np.exp(-2.0 * kappa)) / kappa
    return _around(np.broadcast_to(mu, (len(u1), 3)), np.clip(w, -1.0, 1.0), 2 * np.pi * u2)


def _vmf_pdf(x, mu, kappa):
    return kappa / (2 * np.pi * (-np.expm1(-2.0 * kappa))) * np.exp(kappa * (x @ mu - 1.0))


class _Lighting:
    """Radiance split into emitted (full BRDF) and non-emitted (diffuse) parts."""

    def __init__(self, source, diffuse_only=False):
        self.lights = ()
        self.sh = None
        self.env = None
        self.diffuse_only = diffuse_only
        if isinstance(source, Illumination):
            self.lights = source.lights
            self.sh = source.sh
        else:
            env = np.asarray(source, dtype=float)
            self.env = env
            h, w = env.shape[:2]
            _, domega = latlong_grid(h, w)
            lum = env.mean(axis=-1) * domega
            p = lum.ravel() + 1e-3 * lum.sum() / lum.size + 1e-300
            self.pix_p = p / p.sum()
            self.cdf = np.cumsum(self.pix_p)
            self.domega = domega

    def emitted(self, x):
        if self.env is not None:
            return np.zeros(x.shape[:-1] + (3,)) if self.diffuse_only else self._env(x)
        out = np.zeros(x.shape[:-1])
        for l in self.lights:
            out += kent_value(x, l.az, l.el, l.intensity, l.kappa, l.beta, l.gamma)
        return np.repeat(out[..., None], 3, axis=-1)

    def nonemitted(self, x):
        if self.env is not None:
            return self._env(x) if self.diffuse_only else np.zeros(x.shape[:-1] + (3,))
        return sh_basis(x) @ self.sh

    def _env(self, x):
        r, c = latlong_lookup(x, *self.env.shape[:2])
        return self.env[r, c]

    # light-importance strategy
    def has_light_strategy(self):
        return self.env is not None or len(self.lights) > 0

    def sample(self, u1, u2, u3):
        if self.env is not None:
            h, w = self.env.shape[:2]
            idx = np.minimum(np.searchsorted(self.cdf, u1 * self.cdf[-1]), h * w - 1)
            row, col = idx // w, idx % w
            ct0 = np.cos(np.pi * row / h)
            ct1 = np.cos(np.pi * (row + 1) / h)
            ct = ct0 + u2 * (ct1 - ct0)
            theta = np.arccos(np.clip(ct, -1, 1))
            az = 2 * np.pi * (col + u3) / w - np.pi
            return direction(az, 0.5 * np.pi - theta)
        m = len(self.lights)
        which = np.minimum((u1 * m).astype(int), m - 1)
        u1 = u1 * m - which
        out = np.empty((len(u1), 3))
        for j, l in enumerate(self.lights):
            sel = which == j
            out[sel] = _vmf_sample(l.dir, self._kappa_s(l), u1[sel], u2[sel])
        return out

    def pdf(self, x):
        if self.env is not None:
            h, w = self.env.shape[:2]
            r, c = latlong_lookup(x, h, w)
            return self.pix_p.reshape(h, w)[r, c] / self.domega[r, c]
        m = len(self.lights)
        return sum(_vmf_pdf(x, l.dir, self._kappa_s(l)) for l in self.lights) / m

    @staticmethod
    def _kappa_s(light):
        return max(light.kappa - 2.0 * light.beta, 0.25 * light.kappa, 1e-3)


def _reference_pixel(mat, n, lighting, spp, rng):
    v = VIEW
    rough = max(mat.rough, ROUGH_FLOOR)
    e = 2.0 / rough**2 - 2.0
    use_light = lighting.has_light_strategy()
    c_cos, c_brdf = (0.3, 0.2) if use_light else (0.6, 0.4)
    c_light = 1.0 - c_cos - c_brdf
    u = rng.random((spp, 4))
    strat = np.where(u[:, 0] < c_cos, 0, np.where(u[:, 0] < c_cos + c_brdf, 1, 2))
    x = np.empty((spp, 3))
    s0, s1, s2 = strat == 0, strat == 1, strat == 2
    x[s0] = _around(np.broadcast_to(n, (s0.sum(), 3)), np.sqrt(u[s0, 1]), 2 * np.pi * u[s0, 2])
    hs = _around(np.broadcast_to(n, (s1.sum(), 3)), u[s1, 1] ** (1.0 / (e + 1.0)), 2 * np.pi * u[s1, 2])
    x[s1] = 2.0 * (hs @ v)[:, None] * hs - v
    if use_light:
        x[s2] = lighting.sample(u[s2, 1], u[s2, 2], u[s2, 3])

    cos_n = x @ n
    pdf = c_cos * np.maximum(cos_n, 0.0) / np.pi
    h = x + v
    hn = np.linalg.norm(h, axis=-1)
    ok = hn > 1e-12
    h = h / np.where(ok, hn, 1.0)[:, None]
    ch = h @ n
    vh = h @ v
    p_h = np.where(ok & (ch > 0), (e + 1.0) / (2 * np.pi) * np.power(np.clip(ch, 0.0, 1.0), e), 0.0)
    pdf = pdf + c_brdf * np.where(vh > 1e-12, p_h / (4.0 * np.maximum(vh, 1e-12)), 0.0)
    if use_light:
        pdf = pdf + c_light * lighting.pdf(x)

    cos_c = np.maximum(cos_n, 0.0)
    f = eval_brdf(mat, x, v, n)
    contrib = (f * lighting.emitted(x) + mat.rd * lighting.nonemitted(x)) * cos_c[:, None]
    est = np.where(pdf[:, None] > 0, contrib / np.where(pdf > 0, pdf, 1.0)[:, None], 0.0)
    return est.mean(axis=0)


def render_reference(mat: Material, normals: NormalMap, lighting, samples_per_pixel: int,
                     seed: int = 0, diffuse_only: bool = False) -> np.ndarray:
    """Monte Carlo estimate of the reflection integral, seeded per pixel.

    ``lighting`` is an :class:`Illumination` (lobes reflect through the full
    BRDF, SH through the diffuse albedo) or a raw lat-long map (all light
    reflects through the full BRDF, or diffusely with ``diffuse_only``).
    Non-emitted light is scaled by ``rd`` without the Lambertian ``1/pi``,
    matching ``render_fast``.
    Samples mix cosine, BRDF and light-importance strategies.
    """
    if samples_per_pixel < 1:
        raise ValueError("samples_per_pixel must be >= 1")
    lit = _Lighting(lighting, diffuse_only)
    nv = normals.masked_vectors()
    vals = np.empty((len(nv), 3))
    for p, n in enumerate(nv):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
        vals[p] = _reference_pixel(mat, n, lit, samples_per_pixel, rng)
    return _as_image(normals.mask, vals)
