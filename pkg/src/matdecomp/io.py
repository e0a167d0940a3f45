"""File formats: PFM imagery, PNG masks/previews, versioned text records.

Text records are blocks of named float arrays::

    # matdecomp illumination 1
    lights 1 6
    0.5 0.6 5.0 60.0 10.0 0.3
    sh 9 3
    ...

Floats are written with ``repr`` so a write/read cycle is exact.
"""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from ._validation import InputError
from .brdf import Material
from .illum import GaussianLight, Illumination, IlluminationPrior

FORMAT_VERSION = 1


class FormatError(InputError):
    pass


# -- PFM ------------------------------------------------------------------------

def write_pfm(path, img):
    """Write a 1- or 3-channel float image (top row first in memory)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    c = img.shape[-1]
    if c not in (1, 3):
        raise ValueError(f"PFM holds 1 or 3 channels, got {c}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if c == 3 else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM as ``(H, W, C)`` float64."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        try:
            w, h = (int(v) for v in fh.readline().split())
            scale = float(fh.readline())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        c = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} values, found {data.size}")
    return data.reshape(h, w, c)[::-1].astype(np.float64)


def write_channels_pfm(path, img):
    """Store a ``k``-channel image as ``ceil(k / 3)`` stacked 3-channel PFM tiles."""
    img = np.asarray(img, dtype=float)
    k = img.shape[-1]
    tiles = [img[..., i : i + 3] for i in range(0, k, 3)]
    tiles = [np.concatenate([t, np.zeros(t.shape[:2] + (3 - t.shape[-1],))], -1) for t in tiles]
    write_pfm(path, np.concatenate(tiles, axis=0))


def read_channels_pfm(path, k) -> np.ndarray:
    img = read_pfm(path)
    n_tiles = -(-k // 3)
    if img.shape[0] % n_tiles:
        raise FormatError(f"{path}: height not divisible into {n_tiles} tiles")
    h = img.shape[0] // n_tiles
    return np.concatenate([img[i * h : (i + 1) * h] for i in range(n_tiles)], axis=-1)[..., :k]


# -- PNG --------------------------------------------------------------------------

def write_mask_png(path, mask):
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def read_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    return arr > 127


def tonemap(img, mask=None, gamma=2.2):
    img = np.clip(np.asarray(img, dtype=float), 0.0, None)
    vals = img[mask] if mask is not None else img
    top = np.percentile(vals, 99) if vals.size else 1.0
    out = (img / (top if top > 0 else 1.0)).clip(0.0, 1.0) ** (1.0 / gamma)
    if mask is not None:
        out = np.where(np.asarray(mask)[..., None], out, 0.0)
    return out


def write_preview_png(path, img, mask=None, gamma=2.2, scale=None):
    """8-bit preview; radiance is normalised by ``scale`` (99th percentile if omitted)."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, -1)
    elif img.shape[-1] == 2:
        img = np.concatenate([img, np.zeros(img.shape[:2] + (1,))], -1)
    if scale is None:
        out = tonemap(img, mask, gamma)
    else:
        out = np.clip(img / scale, 0.0, 1.0) ** (1.0 / gamma)
    Image.fromarray(np.round(out[..., :3] * 255).astype(np.uint8)).save(path)


def write_normals_png(path, normals_img):
    out = (np.asarray(normals_img, dtype=float) + 1.0) / 2.0
    Image.fromarray(np.round(out.clip(0, 1) * 255).astype(np.uint8)).save(path)


# -- text records -------------------------------------------------------------------

def write_record(path, kind, blocks: dict):
    lines = [f"# matdecomp {kind} {FORMAT_VERSION}"]
    for name, arr in blocks.items():
        a = np.atleast_2d(np.asarray(arr, dtype=float))
        if a.size == 0:
            lines.append(f"{name} 0 {a.shape[-1] if a.ndim == 2 else 0}")
            continue
        a = a.reshape(a.shape[0], -1)
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in a]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_record(path, kind) -> dict:
    try:
        with open(path) as fh:
            lines = [l.strip() for l in fh if l.strip()]
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc.strerror}") from exc
    if not lines:
        raise FormatError(f"{path}: empty file")
    head = lines[0].split()
    if head[:3] != ["#", "matdecomp", kind] or len(head) != 4:
        raise FormatError(f"{path}: expected a '{kind}' record, found '{lines[0]}'")
    if int(head[3]) > FORMAT_VERSION:
        raise FormatError(f"{path}: format version {head[3]} is newer than {FORMAT_VERSION}")
    out, i = {}, 1
    try:
        while i < len(lines):
            name, r, c = lines[i].split()
            r, c = int(r), int(c)
            rows = [[float(v) for v in lines[i + 1 + j].split()] for j in range(r)]
            arr = np.array(rows, dtype=float).reshape(r, c)
            out[name] = arr
            i += 1 + r
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed block near line {i + 1}") from exc
    return out


def save_material(path, mats):
    mats = [mats] if isinstance(mats, Material) else list(mats)
    write_record(path, "material", {"materials": np.stack([m.as_array() for m in mats])})


def load_materials(path) -> list:
    arr = read_record(path, "material")["materials"]
    if arr.shape[1] != 5:
        raise FormatError(f"{path}: materials need 5 columns")
    return [Material.from_array(row) for row in arr]


def load_material(path) -> Material:
    return load_materials(path)[0]


def save_illumination(path, illum: Illumination):
    write_record(path, "illumination", {"lights": illum.light_array().reshape(-1, 6), "sh": illum.sh})


def load_illumination(path) -> Illumination:
    rec = read_record(path, "illumination")
    lights = tuple(GaussianLight(*row) for row in rec.get("lights", np.zeros((0, 6))).reshape(-1, 6))
    return Illumination(lights, rec["sh"])


def save_prior(path, prior: IlluminationPrior):
    write_record(path, "prior", {
        "kappa_means": prior.kappa_means[None], "beta_means": prior.beta_means[None],
        "pca_means": prior.pca_means, "pca_basis": prior.pca_basis.reshape(27, -1),
        "pca_eigenvalues": prior.pca_eigenvalues, "gray_vector": prior.gray_vector[None],
    })


def load_prior(path) -> IlluminationPrior:
    rec = read_record(path, "prior")
    try:
        return IlluminationPrior(rec["kappa_means"].ravel(), rec["beta_means"].ravel(),
                                 rec["pca_basis"].reshape(3, 9, -1), rec["pca_means"],
                                 rec["gray_vector"].ravel(), rec["pca_eigenvalues"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete prior ({exc})") from exc
