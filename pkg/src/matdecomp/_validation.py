"""Input validation helpers shared by the public entry points."""
import numpy as np


class InputError(ValueError):
    """Malformed user input (shape, dtype, NaNs, empty masks)."""


def check_image(img, name="image", channels=3, allow_negative=True):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2 and channels == 1:
        img = img[..., None]
    if img.ndim != 3 or img.shape[-1] != channels:
        raise InputError(f"{name} must be (H, W, {channels}), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputError(f"{name} contains non-finite values")
    if not allow_negative and np.any(img < 0):
        raise InputError(f"{name} contains negative values")
    return img


def check_envmap(env, min_size=(16, 32)):
    env = check_image(env, "environment map", allow_negative=False)
    if env.shape[0] < min_size[0] or env.shape[1] < min_size[1]:
        raise InputError(f"environment map must be at least {min_size[0]}x{min_size[1]}, got {env.shape[:2]}")
    return env


def check_mask(mask, shape=None, min_pixels=1):
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise InputError(f"mask must be 2-D, got {mask.shape}")
    mask = mask.astype(bool)
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise InputError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    if mask.sum() < min_pixels:
        raise InputError(f"mask has {int(mask.sum())} pixels, need at least {min_pixels}")
    return mask
