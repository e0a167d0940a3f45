"""Five-parameter diffuse + microfacet substrate BRDF.

The model is the Fresnel-blend ("substrate") reflectance: a Lambertian-like
diffuse layer that darkens at grazing angles, under a Blinn microfacet
specular coat with Schlick's Fresnel term.  Specular albedo is monochromatic.

Directions follow the renderer's frame: unit vectors pointing *away* from the
surface point, normals facing the camera.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROUGH_FLOOR = 1e-3
DIFFUSE_NORM = 28.0 / (23.0 * np.pi)


@dataclass(frozen=True)
class Material:
    """RGB diffuse albedo, monochromatic specular albedo and roughness."""

    rd_r: float
    rd_g: float
    rd_b: float
    rs: float
    rough: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite material parameters: {vals}")
        if np.any(vals < 0.0) or np.any(vals > 1.0):
            raise ValueError(f"material parameters must lie in [0, 1]: {vals}")

    @property
    def rd(self) -> np.ndarray:
        return np.array([self.rd_r, self.rd_g, self.rd_b])

    def as_array(self) -> np.ndarray:
        return np.array([self.rd_r, self.rd_g, self.rd_b, self.rs, self.rough], dtype=float)

    @classmethod
    def from_array(cls, values, clip: bool = False) -> "Material":
        v = np.asarray(values, dtype=float).reshape(5)
        if clip:
            v = np.clip(v, 0.0, 1.0)
        return cls(*(float(x) for x in v))


def roughness_exponent(rough):
    """Blinn exponent for a roughness value, ``2 / r**2 - 2`` (floored at 1e-3)."""
    r = np.maximum(rough, ROUGH_FLOOR)
    return 2.0 / r**2 - 2.0


def substrate_terms(rs, rough, ci, co, cih, ch, vmax, xp=np):
    """Shared algebra of the substrate model.

    Returns ``(diffuse_coef, specular)`` with the BRDF equal to
    ``rd * diffuse_coef + specular``.  Cosines must already be clamped by the
    caller; ``vmax`` is the max used in the specular denominator so that the
    differentiable renderer can swap in a smooth maximum.
    """
    r = xp.maximum(rough, ROUGH_FLOOR)
    e = 2.0 / r**2 - 2.0
    gi = 1.0 - (1.0 - 0.5 * ci) ** 5
    go = 1.0 - (1.0 - 0.5 * co) ** 5
    diffuse = DIFFUSE_NORM * (1.0 - rs) * gi * go
    dist = xp.exp(e * xp.log(ch)) / (np.pi * r**2)
    fresnel = rs + (1.0 - rs) * (1.0 - cih) ** 5
    specular = dist * fresnel / (4.0 * cih * vmax(ci, co))
    return diffuse, specular


def _geometry(wi, wo, n):
    wi = np.asarray(wi, dtype=float)
    wo = np.asarray(wo, dtype=float)
    n = np.asarray(n, dtype=float)
    ci = np.sum(wi * n, axis=-1)
    co = np.sum(wo * n, axis=-1)
    h = wi + wo
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    h = h / np.where(hn > 0, hn, 1.0)
    ch = np.clip(np.sum(h * n, axis=-1), 1e-300, 1.0)
    cih = np.clip(np.sum(wi * h, axis=-1), 1e-12, 1.0)
    valid = (ci > 0) & (co > 0)
    return ci, co, cih, ch, valid


def eval_brdf(mat: Material, wi, wo, n) -> np.ndarray:
    """Evaluate the BRDF for direction pairs; returns ``(..., 3)`` RGB values.

    Directions on or below the horizon of ``n`` contribute zero.
    """
    ci, co, cih, ch, valid = _geometry(wi, wo, n)
    cic = np.where(valid, ci, 1.0)
    coc = np.where(valid, co, 1.0)
    diffuse, specular = substrate_terms(mat.rs, mat.rough, cic, coc, cih, ch, np.maximum)
    out = mat.rd * diffuse[..., None] + specular[..., None]
    return np.where(valid[..., None], out, 0.0)


def brdf_grad(mat: Material, wi, wo, n) -> np.ndarray:
    """Analytic Jacobian of :func:`eval_brdf` w.r.t. the five material parameters.

    Returns ``(..., 3, 5)``: rows are RGB channels, columns follow
    ``Material.as_array`` ordering.
    """
    ci, co, cih, ch, valid = _geometry(wi, wo, n)
    ci = np.where(valid, ci, 1.0)
    co = np.where(valid, co, 1.0)
    rs = mat.rs
    r = max(mat.rough, ROUGH_FLOOR)
    e = 2.0 / r**2 - 2.0
    gi = 1.0 - (1.0 - 0.5 * ci) ** 5
    go = 1.0 - (1.0 - 0.5 * co) ** 5
    base = DIFFUSE_NORM * gi * go
    dist = np.exp(e * np.log(ch)) / (np.pi * r**2)
    denom = 4.0 * cih * np.maximum(ci, co)
    schlick = (1.0 - cih) ** 5
    fresnel = rs + (1.0 - rs) * schlick

    jac = np.zeros(ci.shape + (3, 5))
    for c in range(3):
        jac[..., c, c] = (1.0 - rs) * base
        jac[..., c, 3] = -mat.rd[c] * base + dist * (1.0 - schlick) / denom
    if mat.rough > ROUGH_FLOOR:
        ddist = dist * (np.log(ch) * (-4.0 / r**3) - 2.0 / r)
        jac[..., :, 4] = (ddist * fresnel / denom)[..., None]
    return np.where(valid[..., None, None], jac, 0.0)


def reflect(w, n):
    """Mirror ``w`` about ``n``."""
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    return 2.0 * np.sum(w * n, axis=-1, keepdims=True) * n - w
