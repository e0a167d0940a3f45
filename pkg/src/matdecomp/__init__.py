"""Single-image decomposition into parametric materials, normals and lighting."""
import jax

# Energies, gradients and finite-difference checks all assume double precision.
jax.config.update("jax_enable_x64", True)

from .brdf import Material, eval_brdf, brdf_grad  # noqa: E402
from .illum import (  # noqa: E402
    GaussianLight,
    Illumination,
    IlluminationPrior,
    build_prior,
    fit_envmap,
    grayworld_vector,
    sh_basis,
    sh_from_weights,
)
from .render import NormalMap, render_fast, render_irradiance, render_mix, render_reference  # noqa: E402
from .solve import MaterialEstimator, SolveConfig  # noqa: E402
from .debias import BiasRegressor  # noqa: E402

__all__ = [
    "Material", "eval_brdf", "brdf_grad",
    "GaussianLight", "Illumination", "IlluminationPrior",
    "build_prior", "fit_envmap", "grayworld_vector", "sh_basis", "sh_from_weights",
    "NormalMap", "render_fast", "render_irradiance", "render_mix", "render_reference",
    "MaterialEstimator", "SolveConfig", "BiasRegressor",
]
