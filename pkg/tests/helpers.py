"""Scene builders and independent oracles shared by the unit and acceptance tests."""
import jax
import jax.numpy as jnp
import numpy as np

from matdecomp.illum import GaussianLight, Illumination, prior_from_fits
from matdecomp.objective import Objective, State, lobes_to_params


def small_prior(seed=0, n=12):
    rng = np.random.default_rng(seed)
    fits = []
    for _ in range(n):
        kappa = rng.choice([15.0, 60.0, 300.0]) * rng.uniform(0.9, 1.1)
        light = GaussianLight(rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(1, 5), kappa,
                              rng.uniform(0, 0.3) * kappa, rng.uniform(0, 3))
        sh = np.zeros((9, 3))
        sh[0] = rng.uniform(1.0, 2.0)
        sh += 0.2 * rng.normal(size=(9, 3))
        fits.append(Illumination((light,), sh))
    return prior_from_fits(fits, 3, 2, seed=seed)


def standard_light():
    """Two lobes over a tinted sky with a vertical gradient."""
    sh = np.zeros((9, 3))
    sh[0] = np.array([0.5, 0.45, 0.4]) / 0.28209479177387814
    sh[1] = [0.15, 0.12, 0.1]
    sh[3] = [0.05, 0.0, -0.05]
    return Illumination((GaussianLight(0.6, 0.5, 6.0, 60.0, 10.0, 0.3),
                         GaussianLight(-1.2, 0.2, 2.0, 25.0, 0.0, 0.0)), sh)


def random_state(rng, normals, k, illum, prior=None):
    """A perturbed parameter state around a scene, away from box bounds."""
    sh = prior.project(illum.sh) if prior is not None else illum.sh.copy()
    lobes = lobes_to_params(illum.lights)
    lobes[:, :2] += rng.normal(0, 0.1, lobes[:, :2].shape)
    lobes[:, 4] = rng.uniform(0.1, 0.9, len(lobes))
    return State(rng.uniform(0.1, 0.9, (k, 5)), lobes,
                 sh + 0.05 * rng.normal(size=sh.shape),
                 normals.masked_angles() + rng.normal(0, 0.05, (normals.n_pixels, 2)),
                 rng.normal(size=(normals.n_pixels, k)) if k > 1 else None)


_FD_CACHE = {}  # compiled batch energy per objective


def fd_gradient(obj: Objective, x, h=1e-4, order=2):
    """Central differences of the total energy, every component, batched.

    ``order=4`` uses the five-point stencil; it is needed where a term's third
    derivative is large (smooth-abs kinks with eps = 1e-6).
    """
    f = _FD_CACHE.get(id(obj))
    if f is None or f[0] is not obj:
        f = _FD_CACHE[id(obj)] = (obj, jax.jit(jax.vmap(lambda y: obj._total(y)[0])))
    f = f[1]
    E = np.eye(len(x)) * h
    steps = [x + E, x - E] if order == 2 else [x + E, x - E, x + 2 * E, x - 2 * E]
    v = np.asarray(f(jnp.asarray(np.concatenate(steps)))).reshape(len(steps), -1)
    if order == 2:
        return (v[0] - v[1]) / (2 * h)
    return (8 * (v[0] - v[1]) - (v[2] - v[3])) / (12 * h)


def max_rel_error(g, fd, floor=1e-6):
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(g)), floor)))
