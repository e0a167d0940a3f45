"""Energy terms of the single-material and mixture objectives.

The optimised total is the full energy (pixel sums plus the global material
and lighting priors) divided by the masked pixel count, so that tolerances
do not depend on image resolution.  The standalone ``e_*`` helpers return
the undivided terms, except ``e_rend``/``e_mix`` which are pixel means.  All terms are written once in
``jax.numpy``; gradients of the packed objective come from reverse-mode
differentiation and are checked against finite differences in the tests.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import jax
import jax.numpy as jnp
import numpy as np

from ._validation import InputError, check_image, check_mask
from .brdf import ROUGH_FLOOR, Material
from .illum import N_PCA, GaussianLight, Illumination, IlluminationPrior, direction
from .render import NormalMap, shade_pixels

KAPPA_BOUNDS = (4.0, 1e4)
LOG_INTENSITY_BOUNDS = (-20.0, 12.0)
NZ_FLOOR = 0.1


@dataclass(frozen=True)
class ObjectiveWeights:
    w_mat: float = 1.0
    w_lmeans: float = 0.1
    w_lpca: float = 0.1
    w_lgray: float = 0.1
    w_shape_smooth: float = 1.0
    w_integrability: float = 0.1
    w_contour: float = 0.1
    alpha_firm: float = 0.5
    w_firm: float = 1.0
    w_msmooth: float = 1.0
    eps_abs: float = 1e-6
    softmin_t: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative number, got {v}")
        if self.alpha_firm <= 0:
            raise ValueError("alpha_firm must be positive")

    def priors_off(self) -> "ObjectiveWeights":
        """Copy with every prior weight zeroed (rendering error only)."""
        zero = {f.name: 0.0 for f in fields(self) if f.name.startswith("w_")}
        return replace(self, **zero)

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MixtureField:
    """Per-pixel simplex weights over ``k`` materials, ``values`` is ``(H, W, k)``."""

    mask: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        mask = check_mask(self.mask)
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[:2] != mask.shape:
            raise ValueError(f"mixture values must be (H, W, k) matching the mask, got {v.shape}")
        m = v[mask]
        if np.any(m < 0) or not np.allclose(m.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("mixture weights must be non-negative and sum to one on the mask")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", np.where(mask[..., None], v, 0.0))

    @property
    def k(self) -> int:
        return self.values.shape[-1]

    def masked(self) -> np.ndarray:
        return self.values[self.mask]

    @classmethod
    def from_masked(cls, mask, w) -> "MixtureField":
        mask = check_mask(mask)
        w = np.asarray(w, dtype=float)
        vals = np.zeros(mask.shape + (w.shape[-1],))
        vals[mask] = w
        return cls(mask, vals)

    @classmethod
    def uniform(cls, mask, k) -> "MixtureField":
        mask = check_mask(mask)
        return cls.from_masked(mask, np.full((int(mask.sum()), k), 1.0 / k))


# -- smooth primitives ----------------------------------------------------------

def smooth_abs(x, eps=1e-6, xp=jnp):
    """``sqrt(x**2 + eps)``: between ``|x|`` and ``|x| + sqrt(eps)``."""
    return xp.sqrt(x * x + eps)


def _sabs0(x, eps):
    # zero-anchored variant so that satisfied penalties contribute exactly 0
    return jnp.sqrt(x * x + eps) - np.sqrt(eps)


def softmin(x, t=10.0, axis=-1, xp=jnp):
    """``-(1/t) log sum exp(-t x)``; lies in ``[min - log(n)/t, min]``."""
    x = xp.asarray(x)
    lo = xp.min(x, axis=axis, keepdims=True)
    return (lo - xp.log(xp.sum(xp.exp(-t * (x - lo)), axis=axis, keepdims=True)) / t).squeeze(axis)


# -- pixel topology -------------------------------------------------------------

@dataclass(frozen=True)
class PixelGrid:
    """Neighbour structure of the masked pixels (row-major order)."""

    mask: np.ndarray
    index: np.ndarray
    right: np.ndarray  # (P,) index of right neighbour or -1
    down: np.ndarray
    boundary: np.ndarray  # indices of contour pixels
    contour_normals: np.ndarray  # (B, 3) outward image-plane normals

    @classmethod
    def from_mask(cls, mask) -> "PixelGrid":
        mask = check_mask(mask)
        h, w = mask.shape
        index = -np.ones((h, w), dtype=int)
        index[mask] = np.arange(int(mask.sum()))
        padded = np.pad(index, 1, constant_values=-1)
        right = padded[1:-1, 2:][mask]
        down = padded[2:, 1:-1][mask]
        left = padded[1:-1, :-2][mask]
        up = padded[:-2, 1:-1][mask]
        on_edge = (right < 0) | (down < 0) | (left < 0) | (up < 0)
        boundary = np.flatnonzero(on_edge)
        return cls(mask, index, right, down, boundary, _contour_normals(mask)[mask][boundary])

    @property
    def n_pixels(self) -> int:
        return len(self.right)


def _contour_normals(mask):
    """Outward image-plane unit normals (x right, y up, z = 0) from the mask."""
    from scipy import ndimage

    m = mask.astype(float)
    inside = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    outside = ndimage.distance_transform_edt(1.0 - np.pad(m, 1))[1:-1, 1:-1]
    sdf = ndimage.gaussian_filter(inside - outside, 1.0)
    gr, gc = np.gradient(sdf)
    # outward = direction of decreasing signed distance; image rows point down
    nx, ny = -gc, gr
    norm = np.hypot(nx, ny)
    norm = np.where(norm > 0, norm, 1.0)
    return np.stack([nx / norm, ny / norm, np.zeros_like(nx)], axis=-1)


def image_gradient_weights(image, grid: PixelGrid):
    """Smoothness modulation ``exp(-c |grad I|^2)`` with median 0.5 on the mask."""
    I = check_image(image)[grid.mask]
    g2 = np.zeros(len(I))
    for nb in (grid.right, grid.down):
        ok = nb >= 0
        g2[ok] += np.sum((I[nb[ok]] - I[ok]) ** 2, axis=-1)
    med = np.median(g2)
    c = np.log(2.0) / med if med > 0 else 0.0
    return np.exp(-c * g2)


# -- state packing --------------------------------------------------------------

BLOCKS = ("mat", "lobes", "sh", "normals", "logits")


@dataclass
class State:
    """All free parameters of the objective in natural units.

    ``lobes`` rows are ``(az, el, log_intensity, log_kappa, b, gamma)`` with
    ``beta = b * kappa / 2``.  ``sh`` holds PCA weights ``(3, 7)`` when a
    prior is used in PCA mode, otherwise raw ``(9, 3)`` coefficients.
    """

    mats: np.ndarray  # (k, 5)
    lobes: np.ndarray  # (m, 6)
    sh: np.ndarray
    normals: np.ndarray  # (P, 2) azimuth/elevation
    logits: np.ndarray | None = None  # (P, k)

    def block(self, name):
        return {"mat": self.mats, "lobes": self.lobes, "sh": self.sh,
                "normals": self.normals, "logits": self.logits}[name]

    def copy(self) -> "State":
        return State(*(None if b is None else np.array(b, dtype=float) for b in
                       (self.mats, self.lobes, self.sh, self.normals, self.logits)))


def lobes_to_params(lights) -> np.ndarray:
    rows = []
    for l in lights:
        b = 2.0 * l.beta / l.kappa if l.kappa > 0 else 0.0
        # no clipping here: a frozen light must keep its values; free blocks are
        # clipped to the optimiser bounds before solving
        li = np.log(max(l.intensity, 1e-300))
        rows.append([l.az, l.el, li, np.log(max(l.kappa, 1e-300)), min(b, 1.0), l.gamma])
    return np.array(rows, dtype=float).reshape(-1, 6)


def params_to_lights(lobes) -> tuple:
    out = []
    for az, el, li, lk, b, g in np.asarray(lobes, dtype=float).reshape(-1, 6):
        kappa = float(np.exp(lk))
        out.append(GaussianLight.from_array([az, el, np.exp(li), kappa, 0.5 * np.clip(b, 0, 1) * kappa, g]))
    return tuple(out)


def _lobes_natural(lobes):
    kappa = jnp.exp(lobes[:, 3])
    return jnp.stack([lobes[:, 0], lobes[:, 1], jnp.exp(lobes[:, 2]), kappa,
                      0.5 * lobes[:, 4] * kappa, lobes[:, 5]], axis=-1)


def _sh_from(sh_block, pca_means, pca_basis, pca_mode):
    if pca_mode:
        return pca_means + jnp.einsum("cij,cj->ic", pca_basis, sh_block.reshape(3, N_PCA))
    return sh_block.reshape(9, 3)


# -- the objective ----------------------------------------------------------------

class NonFiniteEnergyError(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"energy term '{term}' is not finite ({value})")
        self.term = term


TERMS = ("rend", "mat", "illum_means", "illum_pca", "illum_gray",
         "shape_smooth", "shape_integrability", "shape_contour", "firm", "msmooth")


class Objective:
    """Packed objective over the free parameter blocks.

    Parameters
    ----------
    image : (H, W, 3) linear radiance input.
    mask : object silhouette.
    k, n_lights : material and lobe counts.
    prior : illumination prior; ``None`` disables the illumination prior
        terms and uses raw SH coefficients.
    weights : :class:`ObjectiveWeights`.
    free : names of the blocks exposed to the optimiser; the others are taken
        from ``reference``.
    """

    def __init__(self, image, mask, k=1, n_lights=1, prior: IlluminationPrior | None = None,
                 weights: ObjectiveWeights | None = None, free=BLOCKS, reference: State | None = None,
                 sh_mode=None):
        self.image = check_image(image)
        self.grid = PixelGrid.from_mask(check_mask(mask, self.image.shape))
        self.k = int(k)
        self.m = int(n_lights)
        self.prior = prior
        self.weights = weights or ObjectiveWeights()
        self.pca_mode = (prior is not None) if sh_mode is None else sh_mode == "pca"
        if self.pca_mode and prior is None:
            raise InputError("PCA lighting parameterisation needs a prior")
        self.free = tuple(b for b in BLOCKS if b in free and (b != "logits" or self.k > 1))
        self.reference = reference
        P = self.grid.n_pixels
        self.sizes = {"mat": 5 * self.k, "lobes": 6 * self.m, "sh": 3 * N_PCA if self.pca_mode else 27,
                      "normals": 2 * P, "logits": P * self.k if self.k > 1 else 0}
        self.n_pixels = P

        g = self.grid
        w = self.weights
        pr = prior
        self.consts = {
            "I": jnp.asarray(self.image[g.mask]),
            "right": jnp.asarray(g.right),
            "down": jnp.asarray(g.down),
            "has_right": jnp.asarray(g.right >= 0),
            "has_down": jnp.asarray(g.down >= 0),
            "integ": jnp.asarray((g.right >= 0) & (g.down >= 0)),
            "boundary": jnp.asarray(g.boundary),
            "contour": jnp.asarray(g.contour_normals),
            "eta": jnp.asarray(image_gradient_weights(self.image, g)),
            "kappa_means": jnp.asarray(pr.kappa_means if pr is not None else np.zeros(1)),
            "beta_means": jnp.asarray(pr.beta_means if pr is not None else np.zeros(1)),
            "pca_means": jnp.asarray(pr.pca_means if pr is not None else np.zeros((9, 3))),
            "pca_basis": jnp.asarray(pr.pca_basis if pr is not None else np.zeros((3, 9, N_PCA))),
            "gray": jnp.asarray(pr.gray_vector if pr is not None else np.zeros(9)),
        }
        self._use_prior = pr is not None
        self._vg = jax.jit(jax.value_and_grad(self._total, has_aux=True))
        self._last = None

    # packing ---------------------------------------------------------------
    @property
    def size(self) -> int:
        return sum(self.sizes[b] for b in self.free)

    def pack(self, state: State) -> np.ndarray:
        return np.concatenate([np.asarray(state.block(b), dtype=float).ravel() for b in self.free]) \
            if self.free else np.zeros(0)

    def unpack(self, x) -> State:
        s = self.reference.copy() if self.reference is not None else None
        blocks = self._split(np.asarray(x, dtype=float))
        shapes = self._shapes()
        vals = {}
        for b in BLOCKS:
            if b in blocks:
                vals[b] = np.asarray(blocks[b]).reshape(shapes[b])
            elif s is not None:
                vals[b] = s.block(b)
            else:
                vals[b] = None
        return State(vals["mat"], vals["lobes"], vals["sh"], vals["normals"], vals["logits"])

    def _shapes(self):
        P = self.n_pixels
        return {"mat": (self.k, 5), "lobes": (self.m, 6),
                "sh": (3, N_PCA) if self.pca_mode else (9, 3),
                "normals": (P, 2), "logits": (P, self.k)}

    def _split(self, x):
        out, i = {}, 0
        for b in self.free:
            out[b] = x[i : i + self.sizes[b]]
            i += self.sizes[b]
        return out

    def bounds(self):
        lo, hi = [], []
        for b in self.free:
            n = self.sizes[b]
            if b == "mat":
                lo += [0.0, 0.0, 0.0, 0.0, ROUGH_FLOOR] * self.k
                hi += [1.0] * n
            elif b == "lobes":
                lo += [None, None, LOG_INTENSITY_BOUNDS[0], np.log(KAPPA_BOUNDS[0]), 0.0, None] * self.m
                hi += [None, None, LOG_INTENSITY_BOUNDS[1], np.log(KAPPA_BOUNDS[1]), 1.0, None] * self.m
            else:
                lo += [None] * n
                hi += [None] * n
        return list(zip(lo, hi))

    def _full_blocks(self, x):
        blocks = self._split_jnp(x)
        ref = self.reference
        shapes = self._shapes()
        full = {}
        for b in BLOCKS:
            if b in blocks:
                full[b] = blocks[b].reshape(shapes[b])
            elif ref is not None and ref.block(b) is not None:
                full[b] = jnp.asarray(ref.block(b)).reshape(shapes[b])
            else:
                full[b] = None
        return full

    def _split_jnp(self, x):
        out, i = {}, 0
        for b in self.free:
            out[b] = x[i : i + self.sizes[b]]
            i += self.sizes[b]
        return out

    # energy ------------------------------------------------------------------
    def _terms(self, x):
        c = self.consts
        w = self.weights
        P = self.n_pixels
        blk = self._full_blocks(x)
        mats = blk["mat"]
        lobes = _lobes_natural(blk["lobes"])
        sh = _sh_from(blk["sh"], c["pca_means"], c["pca_basis"], self.pca_mode)
        ang = blk["normals"]
        normals = direction(ang[:, 0], ang[:, 1], jnp)
        renders = shade_pixels(mats, normals, lobes, sh)
        if self.k > 1:
            mix = jax.nn.softmax(blk["logits"], axis=-1)
            pred = jnp.einsum("pk,kpc->pc", mix, renders)
        else:
            mix = None
            pred = renders[0]
        I = c["I"]
        t = {}
        t["rend"] = jnp.sum(I * I * (I - pred) ** 2) / P
        t["mat"] = w.w_mat * jnp.sum(mats[:, 4] ** 2) / P
        t.update({name: v / P for name, v in self._illum_terms(lobes, blk["sh"], sh).items()})
        t.update(_shape_terms(normals, c, w, P))
        if mix is not None:
            # m**alpha via log-weights keeps the gradient finite when m underflows
            t["firm"] = w.w_firm * jnp.sum(jnp.exp(w.alpha_firm * jax.nn.log_softmax(blk["logits"], -1))) / P
            t["msmooth"] = w.w_msmooth * _tv(mix, c, w.eps_abs) / P
        else:
            t["firm"] = jnp.zeros(())
            t["msmooth"] = jnp.zeros(())
        return t

    def _illum_terms(self, lobes, sh_block, sh):
        c = self.consts
        w = self.weights
        zero = jnp.zeros(())
        if not self._use_prior:
            return {"illum_means": zero, "illum_pca": zero, "illum_gray": zero}
        means = zero
        if lobes.shape[0]:
            means = w.w_lmeans * _means_energy(lobes[:, 3], lobes[:, 4], c["kappa_means"], c["beta_means"],
                                                w.eps_abs, w.softmin_t)
        pca = w.w_lpca * jnp.sum(_sabs0(sh_block, w.eps_abs)) if self.pca_mode else zero
        gray = w.w_lgray * _gray_energy(sh, c["gray"], w.eps_abs)
        return {"illum_means": means, "illum_pca": pca, "illum_gray": gray}

    def _total(self, x):
        t = self._terms(x)
        return sum(t[name] for name in TERMS), t

    def _evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if self._last is not None and np.array_equal(self._last[0], x):
            return self._last[1:]
        (v, t), g = self._vg(jnp.asarray(x))
        terms = {k: float(t[k]) for k in TERMS}
        out = (float(v), np.asarray(g, dtype=float), terms)
        self._last = (x.copy(),) + out
        return out

    def value_and_grad(self, x):
        v, g, terms = self._evaluate(x)
        if not np.isfinite(v):
            self._raise_nonfinite(terms)
        if not np.all(np.isfinite(g)):
            self._raise_nonfinite(terms, gradient=True)
        return v, g

    def energy(self, x) -> float:
        return self.value_and_grad(x)[0]

    def terms(self, x) -> dict:
        """Per-term energies at ``x`` (no finiteness check)."""
        return dict(self._evaluate(x)[2])

    @staticmethod
    def _raise_nonfinite(terms, gradient=False):
        for name in TERMS:
            if not np.isfinite(terms[name]):
                raise NonFiniteEnergyError(name, terms[name])
        raise NonFiniteEnergyError("gradient" if gradient else "total", float("nan"))

    # conversions --------------------------------------------------------------
    def illumination(self, state: State) -> Illumination:
        if self.pca_mode:
            sh = self.prior.pca_means + np.einsum("cij,cj->ic", self.prior.pca_basis, state.sh)
        else:
            sh = np.asarray(state.sh).reshape(9, 3)
        return Illumination(params_to_lights(state.lobes), sh)

    def normal_map(self, state: State) -> NormalMap:
        return NormalMap.from_masked_angles(self.grid.mask, state.normals)

    def materials(self, state: State) -> list:
        return [Material.from_array(m, clip=True) for m in np.asarray(state.mats).reshape(-1, 5)]

    def mixture(self, state: State) -> MixtureField:
        if self.k == 1 or state.logits is None:
            return MixtureField.from_masked(self.grid.mask, np.ones((self.n_pixels, 1)))
        return MixtureField.from_masked(self.grid.mask, np.asarray(jax.nn.softmax(jnp.asarray(state.logits), -1)))


def _means_energy(kappa, beta, kmeans_, bmeans_, eps, t):
    dk = jnp.sqrt((kappa[:, None] - kmeans_[None, :]) ** 2 + eps)
    db = jnp.sqrt((beta[:, None] - bmeans_[None, :]) ** 2 + eps)
    return jnp.sum(softmin(dk, t) + softmin(db, t))


def _gray_energy(sh, gray, eps):
    a = gray @ sh
    return _sabs0(a[0] - a[1], eps) + _sabs0(a[1] - a[2], eps) + _sabs0(a[0] - a[2], eps)


def _shape_terms(normals, c, w, P):
    eps = w.eps_abs
    dx = jnp.where(c["has_right"][:, None], normals[c["right"]] - normals, 0.0)
    dy = jnp.where(c["has_down"][:, None], normals[c["down"]] - normals, 0.0)
    grad_norm = jnp.sqrt(jnp.sum(dx * dx + dy * dy, axis=-1) + eps) - np.sqrt(eps)
    smooth = w.w_shape_smooth * jnp.sum(c["eta"] * grad_norm) / P

    nz = 0.5 * (normals[:, 2] + NZ_FLOOR + jnp.sqrt((normals[:, 2] - NZ_FLOOR) ** 2 + 1e-4))
    p = normals[:, 0] / nz
    q = normals[:, 1] / nz
    resid = (p[c["down"]] - p) + (q[c["right"]] - q)
    integ = w.w_integrability * jnp.sum(jnp.where(c["integ"], _sabs0(resid, eps), 0.0)) / P

    diff = normals[c["boundary"]] - c["contour"]
    contour = w.w_contour * jnp.sum(jnp.sqrt(jnp.sum(diff * diff, axis=-1) + eps) - np.sqrt(eps)) / P
    return {"shape_smooth": smooth, "shape_integrability": integ, "shape_contour": contour}


def _tv(mix, c, eps):
    dx = jnp.where(c["has_right"][:, None], mix[c["right"]] - mix, 0.0)
    dy = jnp.where(c["has_down"][:, None], mix[c["down"]] - mix, 0.0)
    return jnp.sum(_sabs0(dx, eps) + _sabs0(dy, eps))


# -- standalone term evaluators ----------------------------------------------------

def _state_for(normals: NormalMap, mats, illum: Illumination, logits=None):
    mats = np.stack([m.as_array() for m in mats])
    return State(mats, lobes_to_params(illum.lights), np.asarray(illum.sh, dtype=float),
                 normals.masked_angles(), logits)


def _raw_objective(image, normals, k, illum, weights, reference):
    return Objective(image, normals.mask, k=k, n_lights=illum.n_lights, prior=None,
                     weights=weights, free=(), reference=reference, sh_mode="free")


def e_rend(image, mat: Material, normals: NormalMap, illum: Illumination) -> float:
    """Brightness-weighted squared rendering error, averaged over masked pixels."""
    ref = _state_for(normals, [mat], illum)
    obj = _raw_objective(image, normals, 1, illum, ObjectiveWeights().priors_off(), ref)
    return obj.terms(np.zeros(0))["rend"]


def e_mix(image, mats, weights: MixtureField, normals: NormalMap, illum: Illumination) -> float:
    mats = list(mats)
    if weights.k != len(mats):
        raise ValueError(f"{weights.k} weight channels for {len(mats)} materials")
    from .render import render_mix

    pred = render_mix(mats, weights, normals, illum)[normals.mask]
    I = check_image(image)[normals.mask]
    return float(np.sum(I * I * (I - pred) ** 2) / normals.n_pixels)


def e_mat(mat: Material, weights: ObjectiveWeights | None = None) -> float:
    w = weights or ObjectiveWeights()
    return w.w_mat * mat.rough**2


def e_illum(illum: Illumination, prior: IlluminationPrior, pca_weights=None,
            weights: ObjectiveWeights | None = None) -> float:
    """Lobe-shape, PCA-sparsity and gray-world priors on a lighting estimate."""
    if prior is None:
        raise InputError("an illumination prior is required")
    w = weights or ObjectiveWeights()
    lights = illum.light_array()
    means = 0.0
    if len(lights):
        means = w.w_lmeans * float(_means_energy(jnp.asarray(lights[:, 3]), jnp.asarray(lights[:, 4]),
                                                 jnp.asarray(prior.kappa_means), jnp.asarray(prior.beta_means),
                                                 w.eps_abs, w.softmin_t))
    if pca_weights is None:
        pca_weights = prior.project(illum.sh)
    pca = w.w_lpca * float(jnp.sum(_sabs0(jnp.asarray(pca_weights), w.eps_abs)))
    gray = w.w_lgray * float(_gray_energy(jnp.asarray(illum.sh), jnp.asarray(prior.gray_vector), w.eps_abs))
    return means + pca + gray


def gray_energy(sh, gray_vector, eps=1e-6) -> float:
    return float(_gray_energy(jnp.asarray(sh), jnp.asarray(gray_vector), eps))


def e_shape(normals: NormalMap, image, weights: ObjectiveWeights | None = None) -> float:
    return float(sum(shape_terms(normals, image, weights).values()))


def shape_terms(normals: NormalMap, image, weights: ObjectiveWeights | None = None) -> dict:
    w = weights or ObjectiveWeights()
    grid = PixelGrid.from_mask(normals.mask)
    c = {
        "right": jnp.asarray(grid.right), "down": jnp.asarray(grid.down),
        "has_right": jnp.asarray(grid.right >= 0), "has_down": jnp.asarray(grid.down >= 0),
        "integ": jnp.asarray((grid.right >= 0) & (grid.down >= 0)),
        "boundary": jnp.asarray(grid.boundary), "contour": jnp.asarray(grid.contour_normals),
        "eta": jnp.asarray(image_gradient_weights(image, grid)),
    }
    return {k: float(v) for k, v in _shape_terms(jnp.asarray(normals.masked_vectors()), c, w, 1).items()}


def e_firm(weights: MixtureField, cfg: ObjectiveWeights | None = None) -> float:
    """Firmness prior ``sum_ij m_ij ** alpha`` over masked pixels."""
    cfg = cfg or ObjectiveWeights()
    return cfg.w_firm * float(np.sum(weights.masked() ** cfg.alpha_firm))


def e_msmooth(weights: MixtureField, cfg: ObjectiveWeights | None = None) -> float:
    cfg = cfg or ObjectiveWeights()
    grid = PixelGrid.from_mask(weights.mask)
    c = {"right": jnp.asarray(grid.right), "down": jnp.asarray(grid.down),
         "has_right": jnp.asarray(grid.right >= 0), "has_down": jnp.asarray(grid.down >= 0)}
    return cfg.w_msmooth * float(_tv(jnp.asarray(weights.masked()), c, cfg.eps_abs))


def total_energy_and_gradient(state: State, image, mask, prior=None, weights=None, **kw):
    """Energy of ``state`` and its gradient w.r.t. the packed free parameters."""
    st = state
    k = st.mats.shape[0]
    obj = Objective(image, mask, k=k, n_lights=st.lobes.shape[0], prior=prior, weights=weights,
                    reference=st, **kw)
    return obj.value_and_grad(obj.pack(st))
