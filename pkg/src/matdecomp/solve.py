"""Initialisation and the staged optimisation drivers."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, optimize, sparse
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator

from . import _cluster
from ._validation import InputError, check_image, check_mask
from .brdf import Material
from .illum import DEFAULT_KAPPA, Y00, GaussianLight, Illumination, IlluminationPrior
from .objective import (MixtureField, Objective, ObjectiveWeights, PixelGrid, State, TERMS,
                        lobes_to_params)
from .render import NormalMap, render_fast, render_irradiance, render_mix

log = logging.getLogger(__name__)

MIN_MASK_PIXELS = 100
INIT_SPECULAR = 0.01
INIT_LOGIT = 2.0
# (azimuth, elevation) of the first lobe for each restart of the first stage
START_DIRECTIONS = tuple((az, el) for el in (np.pi / 4, 0.0)
                         for az in (np.pi / 4, -np.pi / 4, 3 * np.pi / 4, -3 * np.pi / 4))


@dataclass(frozen=True)
class SolveConfig:
    """Optimiser settings.

    ``freeze`` lists parameter groups held at their initial values:
    any of ``"material"``, ``"normals"``, ``"illum"``.  ``sh_mode`` is
    ``"pca"`` (weights in the prior's basis) or ``"free"`` (raw SH); the
    default picks PCA whenever a prior is given and the light is free.
    """

    max_iters: int = 500
    lbfgs_memory: int = 10
    rel_tol: float = 1e-6
    rel_window: int = 5
    stage1_iters: int = 100
    k: int = 1
    m: int = 1
    seed: int = 0
    mixture_rounds: int = 2
    block_iters: int = 150
    mixture_schedule: str = "joint"
    n_starts: int = 8
    freeze: tuple = ()
    sh_mode: str | None = None
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.max_iters < 1 or self.lbfgs_memory < 1:
            raise ValueError("iteration counts must be positive")
        bad = set(self.freeze) - {"material", "normals", "illum"}
        if bad:
            raise ValueError(f"unknown freeze groups {sorted(bad)}")
        if self.sh_mode not in (None, "pca", "free"):
            raise ValueError("sh_mode must be 'pca' or 'free'")
        if self.mixture_schedule not in ("joint", "alternate", "best"):
            raise ValueError("mixture_schedule must be 'joint', 'alternate' or 'best'")


@dataclass
class Diagnostics:
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    converged: bool = False

    @property
    def energies(self) -> np.ndarray:
        return np.array([row["total"] for row in self.trace])

    def write_csv(self, path):
        cols = ["stage", "iteration", "total", *TERMS]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.trace:
                w.writerow([row["stage"], row["iteration"]] + [repr(float(row[c])) for c in cols[2:]])


# -- initialisation -------------------------------------------------------------

def check_single_component(mask, min_pixels=MIN_MASK_PIXELS):
    mask = check_mask(mask)
    n = int(mask.sum())
    if n < min_pixels:
        raise InputError(f"mask has {n} pixels, need at least {min_pixels}")
    _, count = ndimage.label(mask)
    if count != 1:
        raise InputError(f"mask must be a single connected region, found {count}")
    return mask


def init_shape_from_contour(mask) -> NormalMap:
    """Normals tangent to the view at the silhouette, harmonic inside."""
    mask = check_single_component(mask)
    grid = PixelGrid.from_mask(mask)
    P = grid.n_pixels
    known = np.zeros(P, dtype=bool)
    known[grid.boundary] = True
    vals = np.zeros((P, 2))
    vals[grid.boundary] = grid.contour_normals[:, :2]

    unknown = np.flatnonzero(~known)
    if len(unknown):
        pos = -np.ones(P, dtype=int)
        pos[unknown] = np.arange(len(unknown))
        rows, cols, data = [], [], []
        rhs = np.zeros((len(unknown), 2))
        # interior pixels have all four neighbours inside the mask
        padded = np.pad(grid.index, 1, constant_values=-1)
        nbrs = [padded[1:-1, 2:][mask], padded[1:-1, :-2][mask], padded[2:, 1:-1][mask], padded[:-2, 1:-1][mask]]
        for r, i in enumerate(unknown):
            rows.append(r)
            cols.append(r)
            data.append(4.0)
            for nb in nbrs:
                j = nb[i]
                if known[j]:
                    rhs[r] += vals[j]
                else:
                    rows.append(r)
                    cols.append(pos[j])
                    data.append(-1.0)
        A = sparse.csr_matrix((data, (rows, cols)), shape=(len(unknown),) * 2)
        sol = spsolve(A.tocsc(), rhs)
        vals[unknown] = np.asarray(sol).reshape(-1, 2)

    nz = np.sqrt(np.clip(1.0 - np.sum(vals**2, axis=-1), 0.0, None))
    n = np.concatenate([vals, nz[:, None]], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[grid.boundary, 2] = 0.0
    full = np.zeros(mask.shape + (3,))
    full[mask] = n
    return NormalMap.from_vectors(mask, full)


def init_material(image, normals: NormalMap, illum: Illumination) -> Material:
    """Median per-channel ratio of input to irradiance; small specular terms."""
    image = check_image(image)
    E = render_irradiance(normals, illum)[normals.mask]
    I = image[normals.mask]
    rd = np.zeros(3)
    for c in range(3):
        ok = E[:, c] > 1e-8
        if not np.any(ok):
            raise InputError("irradiance is zero on every masked pixel")
        rd[c] = np.median(I[ok, c] / E[ok, c])
    rd = np.clip(rd, 0.0, 1.0)
    return Material(*rd, INIT_SPECULAR, INIT_SPECULAR)


def initial_illumination(image, mask, prior: IlluminationPrior | None = None, m=1) -> Illumination:
    """Starting light: lobes above and in front of the object plus an SH sky.

    With a prior the SH starts at the prior mean and the lobe concentration at
    the cluster mean nearest the default.  Without one, the sky is a gray
    constant that makes the median albedo about one half.
    """
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    if prior is not None:
        kappa = float(prior.kappa_means[np.argmin(np.abs(prior.kappa_means - DEFAULT_KAPPA))])
    else:
        kappa = DEFAULT_KAPPA
    kappa = max(kappa, 4.0)
    lights = tuple(GaussianLight(np.pi / 4 + 2 * np.pi * i / max(m, 1), np.pi / 4, 1.0, kappa, 0.0, 0.0)
                   for i in range(m))
    if prior is not None:
        sh = np.array(prior.pca_means, dtype=float)
    else:
        level = float(np.mean(image[mask]))
        sh = np.zeros((9, 3))
        # Lambertian response to a constant sky L is pi * L; aim for albedo 1/2
        sh[0] = 2.0 * level / np.pi / Y00
    return Illumination(lights, sh)


# -- optimisation ---------------------------------------------------------------

class _Stopper:
    def __init__(self, obj, diag, stage, rel_tol, window):
        self.obj, self.diag, self.stage = obj, diag, stage
        self.rel_tol, self.window = rel_tol, window
        self.history = []
        self.best = (np.inf, None)

    def record(self, x, iteration):
        terms = self.obj.terms(x)
        total = sum(terms[t] for t in TERMS)
        self.diag.trace.append({"stage": self.stage, "iteration": iteration, "total": total, **terms})
        self.history.append(total)
        if total < self.best[0]:
            self.best = (total, np.array(x, dtype=float))
        return total

    def __call__(self, intermediate_result):
        self.record(intermediate_result.x, len(self.history))
        h = self.history
        if len(h) > self.window:
            old = h[-1 - self.window]
            if old - h[-1] <= self.rel_tol * max(abs(old), 1e-300):
                raise StopIteration


def _minimize(obj: Objective, x0, iters, cfg: SolveConfig, diag: Diagnostics, stage: str):
    bounds = obj.bounds()
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    if obj.size == 0:
        return x0
    stop = _Stopper(obj, diag, stage, cfg.rel_tol, cfg.rel_window)
    obj.value_and_grad(x0)  # raises on a non-finite start
    stop.record(x0, 0)
    res = optimize.minimize(obj.value_and_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            callback=stop,
                            options={"maxiter": int(iters), "maxcor": cfg.lbfgs_memory,
                                     "ftol": 0.0, "gtol": 1e-12})
    x = np.clip(res.x, lo, hi)
    if not np.isfinite(obj.energy(x)):
        raise FloatingPointError("non-finite energy at the solution")
    msg = str(res.message)
    if "StopIteration" in msg or res.status == 0:
        diag.converged = True
    elif "ABNORMAL" in msg.upper() or res.status == 2:
        diag.warnings.append(f"{stage}: line search failed ({msg})")
        log.warning("%s: line search failed, keeping the best iterate", stage)
    if obj.energy(x) > stop.best[0]:
        x = stop.best[1]
    return x


def _free_blocks(cfg: SolveConfig, extra_frozen=()):
    frozen = set(cfg.freeze) | set(extra_frozen)
    out = []
    if "material" not in frozen:
        out.append("mat")
    if "illum" not in frozen:
        out += ["lobes", "sh"]
    if "normals" not in frozen:
        out.append("normals")
    if "logits" not in frozen:
        out.append("logits")
    return tuple(out)


def _sh_mode(cfg, prior):
    if cfg.sh_mode is not None:
        return cfg.sh_mode
    return "pca" if prior is not None and "illum" not in cfg.freeze else "free"


def _initial_state(image, mask, prior, cfg, normals, illum, material, sh_mode):
    normals = normals if normals is not None else init_shape_from_contour(mask)
    if illum is None:
        illum = initial_illumination(image, mask, prior, cfg.m)
    material = material if material is not None else init_material(image, normals, illum)
    sh = prior.project(illum.sh) if sh_mode == "pca" else np.array(illum.sh)
    return State(material.as_array()[None], lobes_to_params(illum.lights), sh, normals.masked_angles())


def estimate_single(image, mask, prior: IlluminationPrior | None = None, cfg: SolveConfig | None = None,
                    normals: NormalMap | None = None, illum: Illumination | None = None,
                    material: Material | None = None):
    """Minimise the single-material objective.

    ``normals``, ``illum`` and ``material`` override the initialisation; pair
    them with ``cfg.freeze`` for the known-shape / known-light conditions.
    Returns ``(material, normals, illumination, diagnostics)``.
    """
    cfg = cfg or SolveConfig()
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    if normals is None:
        check_single_component(mask)
    elif not np.array_equal(normals.mask, mask):
        raise InputError("normal map mask differs from the input mask")
    sh_mode = _sh_mode(cfg, prior)
    state = _initial_state(image, mask, prior, cfg, normals, illum, material, sh_mode)
    m = state.lobes.shape[0]
    diag = Diagnostics()

    def objective(free):
        return Objective(image, mask, k=1, n_lights=m, prior=prior, weights=cfg.weights, free=free,
                         reference=state, sh_mode=sh_mode)

    if "normals" not in cfg.freeze and cfg.stage1_iters > 0:
        obj = objective(_free_blocks(cfg, ("normals",)))
        starts = _restarts(state, cfg, image, normals is None and illum is None and material is None)
        state = _best_start(obj, starts, cfg, diag, "init")
    obj = objective(_free_blocks(cfg))
    state = obj.unpack(_minimize(obj, obj.pack(state), cfg.max_iters, cfg, diag, "joint"))
    return obj.materials(state)[0], obj.normal_map(state), obj.illumination(state), diag


def _restarts(state: State, cfg: SolveConfig, image, vary: bool):
    """Copies of ``state`` with the lobes rotated to each start direction.

    Albedo is re-initialised for each light so every start is self-consistent.
    """
    m = state.lobes.shape[0]
    if not vary or m == 0 or "illum" in cfg.freeze or cfg.n_starts <= 1:
        return [state]
    out = []
    for az, el in START_DIRECTIONS[: cfg.n_starts]:
        st = state.copy()
        st.lobes[:, 0] = az + 2 * np.pi * np.arange(m) / m
        st.lobes[:, 1] = el
        out.append(st)
    return out


def _best_start(obj: Objective, starts, cfg, diag: Diagnostics, stage):
    """Run the stage from every start; keep the lowest final energy and its trace."""
    best = None
    for st in starts:
        if len(starts) > 1 and "mat" in obj.free:
            st = _rebalance_albedo(obj, st)
        d = Diagnostics()
        x = _minimize(obj, obj.pack(st), cfg.stage1_iters, cfg, d, stage)
        e = obj.energy(x)
        if best is None or e < best[0]:
            best = (e, x, d)
    diag.trace += best[2].trace
    diag.warnings += best[2].warnings
    return obj.unpack(best[1])


def _rebalance_albedo(obj: Objective, st: State) -> State:
    """Median-ratio albedo under the start's light, keeping specular terms."""
    il = obj.illumination(st)
    nm = obj.normal_map(st)
    E = render_irradiance(nm, il)[nm.mask]
    I = obj.image[nm.mask]
    st = st.copy()
    logits = st.logits
    labels = np.zeros(len(I), dtype=int) if logits is None else np.argmax(logits, axis=-1)
    for j in range(st.mats.shape[0]):
        for c in range(3):
            ok = (labels == j) & (E[:, c] > 1e-8)
            if ok.any():
                st.mats[j, c] = np.clip(np.median(I[ok, c] / E[ok, c]), 0.0, 1.0)
    return st


def _cluster_features(image, mask):
    I = np.clip(image[mask], 0.0, None)
    s = I.sum(axis=-1, keepdims=True)
    chroma = np.where(s > 0, I / np.where(s > 0, s, 1.0), 1.0 / 3.0)
    intensity = s / max(float(s.max()), 1e-12)
    return np.concatenate([chroma, intensity], axis=-1)


def estimate_mixture(image, mask, prior: IlluminationPrior | None = None, cfg: SolveConfig | None = None,
                     normals: NormalMap | None = None, illum: Illumination | None = None):
    """Minimise the mixture objective for ``cfg.k`` materials.

    Weights start from k-means on chromaticity and intensity.  Two schedules
    exist: ``"alternate"`` takes shape and light from a single-material solve
    and alternates (materials, weights) with (normals, light) blocks;
    ``"joint"`` restarts from the contour/light initialisation and runs the
    two-stage single-material schedule on all mixture parameters.  ``"best"``
    runs both and keeps the lower final energy.  Returns
    ``(materials, mixture, normals, illumination, diagnostics)``.
    """
    cfg = cfg or SolveConfig()
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    if normals is None:
        check_single_component(mask)
    if cfg.k == 1:
        mat, nm, il, diag = estimate_single(image, mask, prior, cfg, normals, illum)
        return [mat], MixtureField.from_masked(mask, np.ones((nm.n_pixels, 1))), nm, il, diag
    schedules = ("joint", "alternate") if cfg.mixture_schedule == "best" else (cfg.mixture_schedule,)
    best = None
    for sched in schedules:
        energy, result = _mixture_schedule(sched, image, mask, prior, cfg, normals, illum)
        if best is None or energy < best[0]:
            best = (energy, result)
    return best[1]


def _mixture_schedule(schedule, image, mask, prior, cfg, normals, illum):
    k = cfg.k
    sh_mode = _sh_mode(cfg, prior)
    if schedule == "alternate":
        mat1, nm, il, diag = estimate_single(image, mask, prior, replace(cfg, k=1), normals, illum)
    else:
        nm = normals if normals is not None else init_shape_from_contour(mask)
        il = illum if illum is not None else initial_illumination(image, mask, prior, cfg.m)
        mat1, diag = init_material(image, nm, il), Diagnostics()
    labels = _cluster.kmeans(_cluster_features(image, mask), k, seed=cfg.seed)[1]
    logits = np.full((len(labels), k), -INIT_LOGIT)
    logits[np.arange(len(labels)), labels] = INIT_LOGIT
    mats = _cluster_materials(image, mask, nm, il, labels, k, mat1)
    sh = prior.project(il.sh) if sh_mode == "pca" else np.array(il.sh)
    state = State(mats, lobes_to_params(il.lights), sh, nm.masked_angles(), logits)

    def objective(free):
        return Objective(image, mask, k=k, n_lights=il.n_lights, prior=prior, weights=cfg.weights,
                         free=free, reference=state, sh_mode=sh_mode)

    def run(free, iters, stage):
        nonlocal state
        obj = objective(free)
        state = obj.unpack(_minimize(obj, obj.pack(state), iters, cfg, diag, stage))
        return obj

    if schedule == "joint":
        if "normals" not in cfg.freeze and cfg.stage1_iters > 0:
            obj = objective(_free_blocks(cfg, ("normals",)))
            state = _best_start(obj, _restarts(state, cfg, image, illum is None), cfg, diag, "mix-init")
        obj = run(_free_blocks(cfg), cfg.max_iters, "mix-joint")
    else:
        rounds = max(1, cfg.mixture_rounds)
        geom = tuple(b for b in _free_blocks(cfg) if b in ("lobes", "sh", "normals"))
        appearance = tuple(b for b in _free_blocks(cfg) if b in ("mat", "logits"))
        for r in range(rounds):
            obj = run(appearance, cfg.max_iters if r == rounds - 1 else cfg.block_iters, f"mix-appearance-{r}")
            if r < rounds - 1 and geom:
                obj = run(geom, cfg.block_iters, f"mix-geometry-{r}")
    energy = obj.energy(obj.pack(state))
    if "material" not in cfg.freeze:
        # firm weights decouple the materials, so a split can trap the solver even when
        # one shared material explains the image; restart from each material copied to all
        mat_obj = objective(("mat",))
        for j in range(k):
            st = state.copy()
            st.mats[:] = state.mats[j]
            d = Diagnostics()
            x = _minimize(mat_obj, mat_obj.pack(st), cfg.block_iters, cfg, d, f"mix-collapse-{j}")
            e = mat_obj.energy(x)
            if e < energy:
                energy, state = e, mat_obj.unpack(x)
                diag.trace += d.trace
        obj = mat_obj
    return energy, (obj.materials(state), obj.mixture(state), obj.normal_map(state), obj.illumination(state), diag)


def _cluster_materials(image, mask, normals, illum, labels, k, fallback: Material):
    """Per-cluster median albedo; specular terms copied from ``fallback``."""
    E = render_irradiance(normals, illum)[mask]
    I = image[mask]
    base = fallback.as_array()
    mats = []
    for j in range(k):
        ok = (labels == j)[:, None] & (E > 1e-8)
        rd = [np.median(I[ok[:, c], c] / E[ok[:, c], c]) if ok[:, c].any() else base[c] for c in range(3)]
        mats.append(np.concatenate([np.clip(rd, 0.0, 1.0), base[3:]]))
    return np.stack(mats)


# -- estimator wrapper -----------------------------------------------------------

class MaterialEstimator(BaseEstimator):
    """Fit materials, normals and lighting to one masked image.

    >>> est = MaterialEstimator(k=2).fit(image, mask)        # doctest: +SKIP
    >>> est.materials_, est.mixture_, est.illumination_     # doctest: +SKIP
    """

    def __init__(self, k=1, n_lights=1, prior=None, max_iters=500, stage1_iters=100,
                 lbfgs_memory=10, n_starts=8, mixture_schedule="joint", mixture_rounds=2, seed=0,
                 weights=None):
        self.k = k
        self.n_lights = n_lights
        self.prior = prior
        self.max_iters = max_iters
        self.stage1_iters = stage1_iters
        self.lbfgs_memory = lbfgs_memory
        self.n_starts = n_starts
        self.mixture_schedule = mixture_schedule
        self.mixture_rounds = mixture_rounds
        self.seed = seed
        self.weights = weights

    def _config(self):
        return SolveConfig(max_iters=self.max_iters, lbfgs_memory=self.lbfgs_memory,
                           stage1_iters=self.stage1_iters, k=self.k, m=self.n_lights, seed=self.seed,
                           n_starts=self.n_starts, mixture_schedule=self.mixture_schedule,
                           mixture_rounds=self.mixture_rounds, weights=self.weights or ObjectiveWeights())

    def fit(self, image, mask):
        mats, mix, nm, il, diag = estimate_mixture(image, mask, self.prior, self._config())
        self.materials_ = mats
        self.mixture_ = mix
        self.normals_ = nm
        self.illumination_ = il
        self.diagnostics_ = diag
        return self

    @property
    def material_(self) -> Material:
        return self.materials_[0]

    def predict(self, illum: Illumination | None = None) -> np.ndarray:
        """Re-render the fitted object, optionally under other lighting."""
        if not hasattr(self, "materials_"):
            raise AttributeError("estimator is not fitted")
        il = illum if illum is not None else self.illumination_
        return render_mix(self.materials_, self.mixture_, self.normals_, il)
