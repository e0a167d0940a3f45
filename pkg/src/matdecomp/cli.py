"""Command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 usage or I/O failure.
Every subcommand accepts ``--config FILE`` (``key = value`` lines using the
long option names) and ``--dump-config``; explicit flags override the file.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from ._validation import InputError
from .io import FormatError

log = logging.getLogger("matdecomp")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _weight_options(p):
    from .objective import ObjectiveWeights

    g = p.add_argument_group("objective weights")
    for f in fields(ObjectiveWeights):
        g.add_argument(f"--{f.name.replace('_', '-')}", type=float, default=f.default, dest=f.name)


def _solve_options(p):
    from .solve import SolveConfig

    d = SolveConfig()
    g = p.add_argument_group("solver")
    g.add_argument("--max-iters", type=int, default=d.max_iters)
    g.add_argument("--stage1-iters", type=int, default=d.stage1_iters)
    g.add_argument("--lbfgs-memory", type=int, default=d.lbfgs_memory)
    g.add_argument("--rel-tol", type=float, default=d.rel_tol)
    g.add_argument("--n-starts", type=int, default=d.n_starts)
    g.add_argument("--mixture-schedule", choices=("joint", "alternate", "best"), default=d.mixture_schedule)
    g.add_argument("--mixture-rounds", type=int, default=d.mixture_rounds)
    g.add_argument("--lights", type=int, default=d.m, help="number of Kent lobes")
    _weight_options(p)


def _solve_config(args, k=1, freeze=()):
    from .objective import ObjectiveWeights
    from .solve import SolveConfig

    w = ObjectiveWeights(**{f.name: getattr(args, f.name) for f in fields(ObjectiveWeights)})
    return SolveConfig(max_iters=args.max_iters, stage1_iters=args.stage1_iters, lbfgs_memory=args.lbfgs_memory,
                       rel_tol=args.rel_tol, n_starts=args.n_starts, mixture_schedule=args.mixture_schedule,
                       mixture_rounds=args.mixture_rounds, m=args.lights, k=k, seed=args.seed,
                       freeze=tuple(freeze), weights=w)


def build_parser():
    p = _Parser(prog="matdecomp", description="Material, shape and lighting from one masked image.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key = value defaults file")
        s.add_argument("--dump-config", action="store_true", help="print every option with its value and exit")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--threads", type=int, default=0, help="cap worker threads (0: library default)")
        s.add_argument("-v", "--verbose", action="count", default=0)
        return s

    s = add("fit-env", "fit Kent lobes + SH to a lat-long PFM")
    s.add_argument("--env", required=True)
    s.add_argument("--max-lights", type=int, default=3)
    s.add_argument("--out", required=True)

    s = add("build-prior", "build an illumination prior from lat-long PFMs")
    s.add_argument("--envs", nargs="+", required=True)
    s.add_argument("--max-lights", type=int, default=3)
    s.add_argument("--kappa-clusters", type=int, default=3)
    s.add_argument("--beta-clusters", type=int, default=3)
    s.add_argument("--out", required=True)

    s = add("estimate", "estimate materials, normals and lighting")
    s.add_argument("--input", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--prior")
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--normals", help="known normals PFM (held fixed)")
    s.add_argument("--illum", help="known illumination file (held fixed)")
    s.add_argument("--out", required=True)
    _solve_options(s)

    s = add("debias-train", "train the bias correction on evaluated estimates")
    s.add_argument("--dataset", required=True)
    s.add_argument("--estimates", required=True, help="directory holding estimates/optimized/<id>")
    s.add_argument("--lam", type=float, default=0.1)
    s.add_argument("--out", required=True)

    s = add("debias-apply", "apply a trained bias correction to one estimate")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--estimate", required=True, help="directory with material.txt, normals.pfm, illumination.txt")
    s.add_argument("--out", required=True)

    s = add("gen", "generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--shapes", default="sphere,ellipsoid,bumpy:1,bumpy:2")
    s.add_argument("--n-materials", type=int, default=5)
    s.add_argument("--n-envs", type=int, default=10)
    s.add_argument("--n-novel-envs", type=int, default=6)
    s.add_argument("--n-prior-envs", type=int, default=20)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--style", choices=("fit", "measured"), default="fit")
    s.add_argument("--spp", type=int, default=4096)
    s.add_argument("--mixture", action="store_true")
    s.add_argument("--env-paths", default="", help="comma-separated lat-long PFMs instead of synthetic skies")

    s = add("eval", "run methods on a dataset and write a metrics CSV")
    s.add_argument("--dataset", required=True)
    s.add_argument("--methods", default="baseline,optimized")
    s.add_argument("--bias", help="bias model for the 'regressed' method")
    s.add_argument("--out", required=True)
    _solve_options(s)

    s = add("report", "summarise a metrics CSV")
    s.add_argument("--report", required=True)
    s.add_argument("--out", help="write the summary table here as well")

    s = add("render", "render a material on a normal map")
    s.add_argument("--material", required=True)
    s.add_argument("--normals", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--illum", required=True)
    s.add_argument("--mixture", help="k-channel weights PFM")
    s.add_argument("--reference", action="store_true", help="Monte Carlo instead of the fast renderer")
    s.add_argument("--spp", type=int, default=1024)
    s.add_argument("--out", required=True)
    s.add_argument("--png")
    return p, sub


def _read_config(path):
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise FormatError(f"cannot open config {path}: {exc.strerror}") from exc
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = (t.strip() for t in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _apply_config(parser, sub, argv):
    """Parse twice: once to find the subcommand and config file, then with file defaults."""
    given = sys.argv[1:] if argv is None else argv
    dumping = "--dump-config" in given
    required = {}
    if dumping or any(a == "--config" or a.startswith("--config=") for a in given):
        # the file may supply required options; check them after it is read
        for sp in sub.choices.values():
            for a in sp._actions:
                required[a] = a.required
                a.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required (see --help)")
    if dumping:
        return args
    sp = sub.choices[args.command]
    conf = _read_config(args.config) if args.config else {}
    for a in sp._actions:
        a.required = required.get(a, a.required) and a.dest not in conf
    if not args.config:
        return parser.parse_args(argv)
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in conf.items():
        if k not in actions or k in ("config", "dump_config", "help"):
            raise UsageError(f"{args.config}: unknown option '{k}'")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        elif a.nargs in ("+", "*"):
            defaults[k] = v.split()
        else:
            defaults[k] = a.type(v) if a.type else v
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _dump(args):
    for k, v in sorted(vars(args).items()):
        if k in ("dump_config", "config", "command"):
            continue
        print(f"{k} = {' '.join(map(str, v)) if isinstance(v, list) else v}")


def _limit_threads(n):
    if n > 0:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
        os.environ.setdefault("XLA_FLAGS", f"--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={n}")


def _need(path):
    if not os.path.exists(path):
        raise FormatError(f"no such file: {path}")
    return path


# -- subcommands -------------------------------------------------------------------

def cmd_fit_env(args):
    from . import io as mio
    from .illum import fit_envmap

    env = mio.read_pfm(_need(args.env))
    mio.save_illumination(args.out, fit_envmap(env, args.max_lights))
    return EXIT_OK


def cmd_build_prior(args):
    from . import io as mio
    from .illum import build_prior

    envs = [mio.read_pfm(_need(p)) for p in args.envs]
    prior = build_prior(envs, args.kappa_clusters, args.beta_clusters, args.max_lights, seed=args.seed)
    mio.save_prior(args.out, prior)
    return EXIT_OK


def cmd_estimate(args):
    from . import io as mio
    from .render import NormalMap, render_mix
    from .solve import estimate_mixture

    image = mio.read_pfm(_need(args.input))
    mask = mio.read_mask_png(_need(args.mask))
    if not mask.any():
        raise InputError("mask is empty")
    prior = mio.load_prior(_need(args.prior)) if args.prior else None
    freeze, normals, illum = [], None, None
    if args.normals:
        normals = NormalMap.from_vectors(mask, mio.read_pfm(_need(args.normals)))
        freeze.append("normals")
    if args.illum:
        illum = mio.load_illumination(_need(args.illum))
        freeze.append("illum")
    cfg = _solve_config(args, k=args.k, freeze=freeze)
    if illum is not None:
        from dataclasses import replace

        cfg = replace(cfg, m=illum.n_lights)
    mats, mix, nm, il, diag = estimate_mixture(image, mask, prior, cfg, normals=normals, illum=illum)

    os.makedirs(args.out, exist_ok=True)
    out = lambda name: os.path.join(args.out, name)  # noqa: E731
    mio.save_material(out("material.txt"), mats)
    mio.write_channels_pfm(out("mixture.pfm"), mix.values)
    mio.write_pfm(out("normals.pfm"), nm.vectors())
    mio.save_illumination(out("illumination.txt"), il)
    diag.write_csv(out("diagnostics.csv"))
    rerender = render_mix(mats, mix, nm, il)
    mio.write_pfm(out("render.pfm"), rerender)
    scale = np.percentile(image[mask], 99) or 1.0
    mio.write_preview_png(out("input.png"), image, mask, scale=scale)
    mio.write_preview_png(out("render.png"), rerender, mask, scale=scale)
    mio.write_normals_png(out("normals.png"), nm.vectors())
    mio.write_preview_png(out("weights.png"), mix.values, mask, gamma=1.0, scale=1.0)
    for w in diag.warnings:
        log.warning(w)
    return EXIT_OK


def _load_estimate(d):
    from . import io as mio
    from .render import NormalMap

    mat = mio.load_material(_need(os.path.join(d, "material.txt")))
    normals_img = mio.read_pfm(_need(os.path.join(d, "normals.pfm")))
    mask = np.linalg.norm(normals_img, axis=-1) > 0.5
    il = mio.load_illumination(_need(os.path.join(d, "illumination.txt")))
    return mat, NormalMap.from_vectors(mask, normals_img), il


def cmd_debias_train(args):
    from . import debias
    from .bench import load_dataset

    ds = load_dataset(args.dataset)
    pairs = []
    for s in ds.samples:
        if s.k != 1:
            continue
        mat, nm, il = _load_estimate(os.path.join(args.estimates, "estimates", "optimized", s.id))
        pairs.append((debias.extract_features(s.image, mat, nm, il), s.materials[0]))
    debias.save_bias(args.out, debias.train_bias(pairs, args.lam))
    return EXIT_OK


def cmd_debias_apply(args):
    from . import debias
    from . import io as mio

    model = debias.load_bias(_need(args.model))
    mat, nm, il = _load_estimate(args.estimate)
    image = mio.read_pfm(_need(args.input))
    mio.save_material(args.out, debias.apply_bias(model, debias.extract_features(image, mat, nm, il), mat))
    return EXIT_OK


def cmd_gen(args):
    from .bench import DatasetSpec, gen_dataset

    spec = DatasetSpec(shapes=tuple(s for s in args.shapes.split(",") if s), n_materials=args.n_materials,
                       n_envs=args.n_envs, n_novel_envs=args.n_novel_envs, n_prior_envs=args.n_prior_envs,
                       resolution=args.resolution, style=args.style, spp=args.spp, mixture=args.mixture,
                       env_paths=tuple(p for p in args.env_paths.split(",") if p), seed=args.seed)
    for p in spec.env_paths:
        _need(p)
    gen_dataset(spec, args.out)
    return EXIT_OK


def cmd_eval(args):
    from . import debias
    from .bench import evaluate_dataset, load_dataset, write_report

    ds = load_dataset(args.dataset)
    methods = tuple(m for m in args.methods.split(",") if m)
    bias = debias.load_bias(_need(args.bias)) if args.bias else None
    os.makedirs(args.out, exist_ok=True)
    rows = evaluate_dataset(ds, args.out, methods, _solve_config(args), bias, log=log.info)
    write_report(os.path.join(args.out, "report.csv"), rows)
    return EXIT_OK


def cmd_report(args):
    from .bench import aggregate, read_report, summary_table

    rows = read_report(_need(args.report))
    table = summary_table(rows)
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")
        agg = aggregate(rows)
        with open(os.path.splitext(args.out)[0] + "_aggregate.csv", "w") as fh:
            fh.write("method,column,mean,std,n\n")
            for method, st in agg.items():
                for col, val in st.items():
                    if col != "n":
                        fh.write(f"{method},{col},{val[0]!r},{val[1]!r},{st['n']}\n")
    return EXIT_OK


def cmd_render(args):
    from . import io as mio
    from .objective import MixtureField
    from .render import NormalMap, render_mix, render_reference

    mats = mio.load_materials(_need(args.material))
    mask = mio.read_mask_png(_need(args.mask))
    nm = NormalMap.from_vectors(mask, mio.read_pfm(_need(args.normals)))
    il = mio.load_illumination(_need(args.illum))
    if args.mixture:
        mix = MixtureField(mask, mio.read_channels_pfm(_need(args.mixture), len(mats)))
    else:
        mix = MixtureField.uniform(mask, 1) if len(mats) == 1 else None
        if mix is None:
            raise InputError("several materials need --mixture weights")
    if args.reference:
        img = sum(mix.values[..., j : j + 1] * render_reference(m, nm, il, args.spp, seed=args.seed + j)
                  for j, m in enumerate(mats))
    else:
        img = render_mix(mats, mix, nm, il)
    mio.write_pfm(args.out, img)
    if args.png:
        mio.write_preview_png(args.png, img, mask)
    return EXIT_OK


COMMANDS = {
    "fit-env": cmd_fit_env, "build-prior": cmd_build_prior, "estimate": cmd_estimate,
    "debias-train": cmd_debias_train, "debias-apply": cmd_debias_apply, "gen": cmd_gen,
    "eval": cmd_eval, "report": cmd_report, "render": cmd_render,
}


def main(argv=None) -> int:
    from .objective import NonFiniteEnergyError

    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.dump_config:
        _dump(args)
        return EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    _limit_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except NonFiniteEnergyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, UsageError) as exc:  # InputError and FormatError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
