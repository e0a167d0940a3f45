"""Synthetic ground-truth datasets, evaluation metrics and baselines."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _cluster
from . import io as mio
from ._validation import InputError, check_image, check_mask
from .brdf import Material
from .illum import (GaussianLight, Illumination, IlluminationPrior, latlong_grid, prior_from_fits,
                    fit_envmap, Y00)
from .objective import MixtureField
from .render import NormalMap, render_fast, render_mix, render_reference

ABSLOG_EPS = 1e-3
BASELINE_RS = 0.05
BASELINE_ROUGH = 0.3
MANIFEST = "manifest.jsonl"
METRIC_NAMES = ("l2", "l1", "abslog")


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate.

    ``shapes`` entries are ``sphere``, ``ellipsoid`` or ``bumpy:<seed>``.
    Every (shape, material) pair becomes one image; environments are dealt
    out so each is used equally often, which requires the image count to be
    a multiple of ``n_envs``.  With ``mixture`` set each material slot is a
    pair of materials laid out as a checkerboard whose albedos differ by at
    least ``mixture_contrast`` in some channel.
    """

    shapes: tuple = ("sphere", "ellipsoid", "bumpy:1", "bumpy:2")
    n_materials: int = 5
    n_envs: int = 10
    n_novel_envs: int = 6
    n_prior_envs: int = 20
    resolution: int = 64
    style: str = "fit"
    spp: int = 4096
    mixture: bool = False
    checker_cells: int = 4
    mixture_contrast: float = 0.3
    rd_range: tuple = (0.05, 0.9)
    rs_range: tuple = (0.1, 0.6)
    rough_range: tuple = (0.1, 0.5)
    env_paths: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.style not in ("fit", "measured"):
            raise ValueError("style must be 'fit' or 'measured'")
        if not self.shapes or self.n_materials < 1:
            raise ValueError("need at least one shape and one material")
        n_envs = len(self.env_paths) or self.n_envs
        if n_envs < 1 or self.n_images % n_envs:
            raise ValueError(f"{self.n_images} images cannot use {n_envs} environments equally")
        if self.resolution < 16:
            raise ValueError("resolution must be at least 16")
        if self.n_novel_envs < 1:
            raise ValueError("need at least one novel environment")
        for name in self.shapes:
            _parse_shape(name)

    @property
    def n_images(self) -> int:
        return len(self.shapes) * self.n_materials

    def as_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- procedural content ----------------------------------------------------------

def _parse_shape(name):
    base, _, arg = name.partition(":")
    if base not in ("sphere", "ellipsoid", "bumpy"):
        raise ValueError(f"unknown shape '{name}'")
    if base == "bumpy":
        try:
            return base, int(arg or 0)
        except ValueError:
            raise ValueError(f"bad bump seed in '{name}'") from None
    return base, 0


def pixel_coords(res):
    c = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    return np.meshgrid(c, -c)


def make_shape(name, res):
    """Mask and unit normals ``(H, W, 3)`` of a procedural shape seen from +z."""
    base, seed = _parse_shape(name)
    x, y = pixel_coords(res)
    if base == "ellipsoid":
        a, b, c = 0.9, 0.62, 0.7
        q = 1.0 - (x / a) ** 2 - (y / b) ** 2
        mask = q > 0
        z = c * np.sqrt(np.clip(q, 0.0, None))
        n = np.stack([x / a**2, y / b**2, z / c**2], -1)
    else:
        R = 0.9
        r2 = x * x + y * y
        mask = r2 < R * R
        s = np.sqrt(np.clip(R * R - r2, 1e-12, None))
        hx, hy = -x / s, -y / s
        if base == "bumpy":
            rng = np.random.default_rng(seed)
            amp = 0.06
            dx = dy = 0.0
            for _ in range(4):
                fx, fy = rng.uniform(-5.0, 5.0, 2)
                ph = rng.uniform(0, 2 * np.pi)
                w = rng.uniform(0.5, 1.0)
                arg = fx * x + fy * y + ph
                env = s / R  # fades bumps out at the silhouette
                dxe, dye = -x / (s * R), -y / (s * R)
                dx = dx + amp * w * (-np.sin(arg) * fx * env + np.cos(arg) * dxe)
                dy = dy + amp * w * (-np.sin(arg) * fy * env + np.cos(arg) * dye)
            hx, hy = hx + dx, hy + dy
        n = np.stack([-hx, -hy, np.ones_like(x)], -1)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(mask[..., None], n, 0.0)
    # stored normals are float32, so generate from the float32 values
    return mask, n.astype(np.float32).astype(np.float64)


def mean_radiance(illum: Illumination, height=64, width=128) -> float:
    env = illum.to_envmap(height, width).mean(axis=-1)
    _, dom = latlong_grid(height, width)
    return float(np.sum(env * dom) / (4 * np.pi))


def random_illumination(rng) -> Illumination:
    """1 to 3 Kent lobes over a tinted sky, normalised to mean radiance 1."""
    m = int(rng.integers(1, 4))
    lights = []
    for _ in range(m):
        kappa = float(np.exp(rng.uniform(np.log(10.0), np.log(300.0))))
        beta = float(rng.uniform(0.0, 0.8) * kappa / 2)
        power = rng.uniform(0.5, 2.0)
        inten = power * kappa / (2 * np.pi)
        lights.append(GaussianLight(float(rng.uniform(-0.8, 0.8) * np.pi), float(rng.uniform(-0.3, 1.2)),
                                    float(inten), kappa, beta, float(rng.uniform(0, np.pi))))
    tint = 1.0 + rng.uniform(-0.15, 0.15, 3)
    sh = np.zeros((9, 3))
    sh[0] = tint / Y00 * rng.uniform(0.3, 0.8)
    sh[1] = sh[0] * rng.uniform(0.1, 0.4)  # brighter above
    sh[2:] = rng.normal(0.0, 0.05, (7, 1)) * sh[0]
    illum = Illumination(tuple(lights), sh)
    lo = illum.to_envmap(32, 64).min()
    if lo < 0:
        # keep the sky non-negative by lifting the constant band
        sh = sh.copy()
        sh[0] += (-lo + 1e-3) / Y00
        illum = Illumination(tuple(lights), sh)
    return illum.scaled(1.0 / mean_radiance(illum))


def checker_mixture(mask, cells):
    h, w = mask.shape
    r = (np.arange(h) * cells // h)[:, None]
    c = (np.arange(w) * cells // w)[None, :]
    a = ((r + c) % 2 == 0).astype(float)
    return MixtureField(mask, np.stack([a, 1.0 - a], -1) * mask[..., None])


def _material(rng, spec):
    return Material(*rng.uniform(*spec.rd_range, 3), rng.uniform(*spec.rs_range), rng.uniform(*spec.rough_range))


# -- dataset -------------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    normals: NormalMap
    materials: list
    mixture: MixtureField
    illum: Illumination
    env: str
    style: str = "fit"

    @property
    def k(self) -> int:
        return len(self.materials)

    def render(self, illum: Illumination | None = None) -> np.ndarray:
        return render_mix(self.materials, self.mixture, self.normals, illum or self.illum)


@dataclass
class Dataset:
    root: str
    samples: list
    novel_envs: list
    prior: IlluminationPrior | None
    spec: dict


def _env_names(n, prefix):
    return [f"{prefix}{i:03d}" for i in range(n)]


def gen_dataset(spec: DatasetSpec, root) -> Dataset:
    """Render the dataset described by ``spec`` into ``root``; reproducible from the seed."""
    os.makedirs(root, exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(5)
    env_rng, novel_rng, prior_rng, mat_rng, pair_rng = (np.random.default_rng(s) for s in seeds)

    if spec.env_paths:
        envs = [fit_envmap(mio.read_pfm(p)) for p in spec.env_paths]
        env_maps = [mio.read_pfm(p) for p in spec.env_paths]
    else:
        envs = [random_illumination(env_rng) for _ in range(spec.n_envs)]
        env_maps = [None] * len(envs)
    novel = [random_illumination(novel_rng) for _ in range(spec.n_novel_envs)]
    prior_envs = [random_illumination(prior_rng) for _ in range(spec.n_prior_envs)]

    for sub in ("envs", "novel", "samples"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    env_ids = _env_names(len(envs), "env")
    for name, il in zip(env_ids, envs):
        mio.save_illumination(os.path.join(root, "envs", f"{name}.txt"), il)
    for name, il in zip(_env_names(len(novel), "novel"), novel):
        mio.save_illumination(os.path.join(root, "novel", f"{name}.txt"), il)

    prior = None
    if spec.n_prior_envs >= 3:
        fits = [fit_envmap(il.to_envmap(32, 64)) for il in prior_envs]
        prior = prior_from_fits(fits, seed=spec.seed)
        mio.save_prior(os.path.join(root, "prior.txt"), prior)

    n_img = spec.n_images
    assign = np.tile(np.arange(len(envs)), n_img // len(envs))
    assign = assign[pair_rng.permutation(n_img)]

    records, samples = [], []
    i = 0
    for shape in spec.shapes:
        mask, normals = make_shape(shape, spec.resolution)
        nm = NormalMap.from_vectors(mask, normals)
        for _ in range(spec.n_materials):
            k = 2 if spec.mixture else 1
            mats = [_material(mat_rng, spec)]
            while len(mats) < k:
                cand = _material(mat_rng, spec)
                # keep the two albedos visibly different
                if np.max(np.abs(cand.rd - mats[0].rd)) >= spec.mixture_contrast:
                    mats.append(cand)
            mix = checker_mixture(mask, spec.checker_cells) if k == 2 else MixtureField.uniform(mask, 1)
            e = int(assign[i])
            il = envs[e]
            if spec.style == "fit":
                img = render_mix(mats, mix, nm, il)
            else:
                img = np.zeros(mask.shape + (3,))
                source = env_maps[e] if env_maps[e] is not None else il
                for j, mat in enumerate(mats):
                    part = render_reference(mat, nm, source, spec.spp, seed=spec.seed * 100003 + i * 7 + j)
                    img += mix.values[..., j : j + 1] * part
            img = img.astype(np.float32).astype(np.float64)
            sid = f"s{i:04d}"
            d = os.path.join(root, "samples", sid)
            os.makedirs(d, exist_ok=True)
            files = {"input": "input.pfm", "mask": "mask.png", "normals": "normals.pfm",
                     "material": "material.txt", "mixture": "mixture.pfm"}
            mio.write_pfm(os.path.join(d, files["input"]), img)
            mio.write_mask_png(os.path.join(d, files["mask"]), mask)
            mio.write_pfm(os.path.join(d, files["normals"]), nm.vectors())
            mio.save_material(os.path.join(d, files["material"]), mats)
            mio.write_channels_pfm(os.path.join(d, files["mixture"]), mix.values)
            records.append({"id": sid, "shape": shape, "env": env_ids[e], "style": spec.style,
                            "k": k, "materials": [m.as_array().tolist() for m in mats],
                            "files": {key: f"samples/{sid}/{v}" for key, v in files.items()},
                            "input_sha256": _sha(img.astype(np.float32))})
            samples.append(Sample(sid, img, mask, nm, mats, mix, il, env_ids[e], spec.style))
            i += 1

    header = {"dataset": "matdecomp", "version": mio.FORMAT_VERSION, "spec": spec.as_dict()}
    write_manifest(os.path.join(root, MANIFEST), header, records)
    return Dataset(root, samples, novel, prior, spec.as_dict())


def _sha(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def write_manifest(path, header, records):
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path):
    try:
        with open(path) as fh:
            lines = [l for l in fh if l.strip()]
    except OSError as exc:
        raise mio.FormatError(f"cannot open manifest {path}: {exc.strerror}") from exc
    try:
        rows = [json.loads(l) for l in lines]
    except json.JSONDecodeError as exc:
        raise mio.FormatError(f"{path}: corrupt manifest line {exc.lineno}") from exc
    if not rows or rows[0].get("dataset") != "matdecomp":
        raise mio.FormatError(f"{path}: missing manifest header")
    for r in rows[1:]:
        if not {"id", "env", "files", "k"} <= set(r):
            raise mio.FormatError(f"{path}: record missing required fields")
    return rows[0], rows[1:]


def load_dataset(root) -> Dataset:
    header, records = read_manifest(os.path.join(root, MANIFEST))
    envs = {}
    samples = []
    for r in records:
        p = {k: os.path.join(root, v) for k, v in r["files"].items()}
        mask = mio.read_mask_png(p["mask"])
        nm = NormalMap.from_vectors(mask, mio.read_pfm(p["normals"]))
        mats = mio.load_materials(p["material"])
        if len(mats) != r["k"]:
            raise mio.FormatError(f"{r['id']}: material count does not match manifest")
        mix = MixtureField(mask, mio.read_channels_pfm(p["mixture"], r["k"]))
        if r["env"] not in envs:
            envs[r["env"]] = mio.load_illumination(os.path.join(root, "envs", f"{r['env']}.txt"))
        samples.append(Sample(r["id"], mio.read_pfm(p["input"]), mask, nm, mats, mix, envs[r["env"]],
                              r["env"], r.get("style", "fit")))
    novel_dir = os.path.join(root, "novel")
    novel = [mio.load_illumination(os.path.join(novel_dir, f)) for f in sorted(os.listdir(novel_dir))]
    prior_path = os.path.join(root, "prior.txt")
    prior = mio.load_prior(prior_path) if os.path.exists(prior_path) else None
    return Dataset(root, samples, novel, prior, header["spec"])


# -- metrics ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    l2: float
    l1: float
    abslog: float

    def as_tuple(self):
        return (self.l2, self.l1, self.abslog)


def image_metrics(a, b, mask) -> Metrics:
    """Means over masked pixels and channels of squared, absolute and log differences."""
    mask = check_mask(mask)
    x = np.asarray(a, dtype=float)[mask]
    y = np.asarray(b, dtype=float)[mask]
    d = x - y
    la = np.log(np.clip(x, 0.0, None) + ABSLOG_EPS) - np.log(np.clip(y, 0.0, None) + ABSLOG_EPS)
    return Metrics(float(np.mean(d * d)), float(np.mean(np.abs(d))), float(np.mean(np.abs(la))))


def _as_estimate(estimate, truth):
    if isinstance(estimate, Material):
        return [estimate], MixtureField.uniform(truth.mask, 1)
    mats, mix = estimate
    mats = list(mats)
    if mix is None:
        mix = MixtureField.uniform(truth.mask, len(mats))
    return mats, mix


def eval_orig(estimate, truth: Sample) -> Metrics:
    """Input image vs the estimate rendered on the true shape under the true light.

    ``estimate`` is a :class:`Material` or ``(materials, mixture)``.
    """
    mats, mix = _as_estimate(estimate, truth)
    return image_metrics(render_mix(mats, mix, truth.normals, truth.illum), truth.image, truth.mask)


def eval_cross(estimate, truth: Sample, novel_envs) -> Metrics:
    """True vs estimated material on the true shape, averaged over ``novel_envs``."""
    novel_envs = list(novel_envs)
    if not novel_envs:
        raise InputError("need at least one novel environment")
    mats, mix = _as_estimate(estimate, truth)
    per = [image_metrics(render_mix(mats, mix, truth.normals, env), truth.render(env), truth.mask)
           for env in novel_envs]
    return Metrics(*np.mean([m.as_tuple() for m in per], axis=0))


# -- baselines -------------------------------------------------------------------------

def baseline_single(image, mask, prior=None, rs=BASELINE_RS, rough=BASELINE_ROUGH) -> Material:
    """Masked channel means as albedo, fixed specular terms."""
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    rd = np.clip(image[mask].mean(axis=0), 0.0, 1.0)
    return Material(*rd, rs, rough)


def baseline_mixture(image, mask, k, seed=0, rs=BASELINE_RS, rough=BASELINE_ROUGH):
    """k-means on RGB; hard weights and per-cluster mean albedo."""
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    if k < 2:
        raise ValueError("baseline_mixture needs k >= 2")
    I = image[mask]
    _, labels = _cluster.kmeans(I, k, seed=seed)
    kk = int(labels.max()) + 1
    mats = [Material(*np.clip(I[labels == j].mean(axis=0), 0, 1), rs, rough) for j in range(kk)]
    w = np.zeros((len(I), kk))
    w[np.arange(len(I)), labels] = 1.0
    return mats, MixtureField.from_masked(mask, w)


# -- reports ---------------------------------------------------------------------------

REPORT_COLUMNS = ("id", "method", "orig_l2", "orig_l1", "orig_abslog", "cross_l2", "cross_l1",
                  "cross_abslog", "err_rd_r", "err_rd_g", "err_rd_b", "err_rs", "err_rough")


def report_row(sid, method, estimate, truth: Sample, novel_envs) -> dict:
    o = eval_orig(estimate, truth)
    c = eval_cross(estimate, truth, novel_envs)
    row = {"id": sid, "method": method}
    row.update({f"orig_{n}": v for n, v in zip(METRIC_NAMES, o.as_tuple())})
    row.update({f"cross_{n}": v for n, v in zip(METRIC_NAMES, c.as_tuple())})
    mats, _ = _as_estimate(estimate, truth)
    if truth.k == 1 and len(mats) == 1:
        err = np.abs(mats[0].as_array() - truth.materials[0].as_array())
    else:
        err = [float("nan")] * 5
    row.update({f"err_{n}": float(e) for n, e in zip(("rd_r", "rd_g", "rd_b", "rs", "rough"), err)})
    return row


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c in ("id", "method") else repr(float(r[c])) for c in REPORT_COLUMNS])


def read_report(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise mio.FormatError(f"cannot open report {path}: {exc.strerror}") from exc
    out = []
    for r in rows:
        if set(REPORT_COLUMNS) - set(r):
            raise mio.FormatError(f"{path}: missing report columns")
        out.append({c: (r[c] if c in ("id", "method") else float(r[c])) for c in REPORT_COLUMNS})
    return out


def aggregate(rows):
    """Per-method mean and sample standard deviation of every numeric column."""
    out = {}
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        stats = {"n": len(sel)}
        for c in REPORT_COLUMNS[2:]:
            v = np.array([r[c] for r in sel], dtype=float)
            v = v[np.isfinite(v)]
            stats[c] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0) if len(v) else (
                float("nan"), float("nan"))
        out[method] = stats
    return out


def summary_table(rows) -> str:
    """Fixed-width table of mean (std) per method, one block per illumination condition."""
    agg = aggregate(rows)
    lines = []
    for cond in ("orig", "cross"):
        lines.append(f"{cond} illumination")
        lines.append(f"{'method':<20}{'n':>4}" + "".join(f"{m:>24}" for m in METRIC_NAMES))
        for method, st in agg.items():
            cells = "".join(f"{st[f'{cond}_{m}'][0]:>12.5g} ({st[f'{cond}_{m}'][1]:>8.3g})" for m in METRIC_NAMES)
            lines.append(f"{method:<20}{st['n']:>4}{cells}")
        lines.append("")
    return "\n".join(lines)


# -- evaluation driver -------------------------------------------------------------------

METHODS = ("baseline", "optimized", "regressed", "baseline-k2", "optimized-k2")


def _save_estimate(d, mats, mix=None, normals=None, illum=None):
    os.makedirs(d, exist_ok=True)
    mio.save_material(os.path.join(d, "material.txt"), mats)
    if mix is not None:
        mio.write_channels_pfm(os.path.join(d, "mixture.pfm"), mix.values)
    if normals is not None:
        mio.write_pfm(os.path.join(d, "normals.pfm"), normals.vectors())
    if illum is not None:
        mio.save_illumination(os.path.join(d, "illumination.txt"), illum)


def evaluate_dataset(dataset: Dataset, out_dir, methods=("baseline", "optimized"), cfg=None,
                     bias_model=None, log=None):
    """Run ``methods`` on every sample, store estimates, return report rows.

    ``regressed`` applies ``bias_model`` to the ``optimized`` estimate, so it
    requires both.  Rows are in sample order, methods in the given order.
    """
    from . import debias
    from .solve import SolveConfig, estimate_mixture, estimate_single

    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if "regressed" in methods and bias_model is None:
        raise ValueError("the 'regressed' method needs a bias model")
    cfg = cfg or SolveConfig()
    rows = []
    for s in dataset.samples:
        single = None
        for method in methods:
            d = os.path.join(out_dir, "estimates", method, s.id)
            if method == "baseline":
                est = baseline_single(s.image, s.mask)
                _save_estimate(d, [est])
            elif method in ("optimized", "regressed"):
                if single is None:
                    mat, nm, il, diag = estimate_single(s.image, s.mask, dataset.prior, cfg)
                    single = (mat, nm, il)
                    _save_estimate(os.path.join(out_dir, "estimates", "optimized", s.id), [mat], None, nm, il)
                    diag.write_csv(os.path.join(out_dir, "estimates", "optimized", s.id, "diagnostics.csv"))
                mat, nm, il = single
                est = mat
                if method == "regressed":
                    feats = debias.extract_features(s.image, mat, nm, il)
                    est = debias.apply_bias(bias_model, feats, mat)
                    _save_estimate(d, [est])
            elif method == "baseline-k2":
                est = baseline_mixture(s.image, s.mask, 2, seed=cfg.seed)
                _save_estimate(d, est[0], est[1])
            else:
                mats, mix, nm, il, diag = estimate_mixture(s.image, s.mask, dataset.prior,
                                                           _with_k(cfg, 2))
                est = (mats, mix)
                _save_estimate(d, mats, mix, nm, il)
                diag.write_csv(os.path.join(d, "diagnostics.csv"))
            rows.append(report_row(s.id, method, est, s, dataset.novel_envs))
            if log:
                log(f"{s.id} {method} cross_l2={rows[-1]['cross_l2']:.6g}")
    return rows


def _with_k(cfg, k):
    from dataclasses import replace

    return replace(cfg, k=k)
