"""Command line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import bench
from .config import ConfigError, apply_section, format_config, read_config
from .exceptions import (DegenerateGeometryError, FormatError, InsufficientDataError, MissingPriorError,
                         NumericalError, ShapeMismatchError)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def load_configs(path=None) -> dict:
    configs = bench.default_configs()
    if path is None:
        return configs
    sections = read_config(path)
    for name, values in sections.items():
        if name not in configs:
            raise ConfigError(f"unknown section {name!r}; known: {', '.join(configs)}")
        configs[name] = apply_section(type(configs[name]), values, name, base=configs[name])
    return configs


def _override(configs, section, **values):
    values = {k: v for k, v in values.items() if v is not None}
    if values:
        configs[section] = dataclasses.replace(configs[section], **values)


# subcommands ---------------------------------------------------------------------

def cmd_synth(args, configs):
    from .data import save_pgm, save_pts, write_manifest
    from .synth import Occlusion, augment, synth_corpus
    if not args.out:
        raise UsageError("synth needs --out DIR")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    recs = synth_corpus(args.n, args.seed, args.resolution)
    rows = []
    for i, r in enumerate(recs):
        if args.occlusion > 0:
            r = augment(r, [Occlusion(args.occlusion)], seed=[args.seed, i])
        img, pts = f"face_{i:04d}.pgm", f"face_{i:04d}.pts"
        save_pgm(os.path.join(args.out, img), r.image)
        save_pts(os.path.join(args.out, pts), r.shape)
        rows.append((img, pts))
    write_manifest(os.path.join(args.out, "manifest.csv"), rows)
    print(f"wrote {len(recs)} images and manifest.csv to {args.out}")
    return EXIT_OK


def _model_path(args, default="model.aamg"):
    return args.model or os.path.join(args.out or ".", default)


def cmd_build_model(args, configs):
    from .container import serialize_model
    from .data import read_manifest
    from .models import build_aam
    b = configs["bench"]
    recs = read_manifest(args.manifest)
    if len(recs) < 2:
        raise InsufficientDataError("building a model needs at least two annotated images")
    aam = build_aam([r.image for r in recs], [r.shape for r in recs], frame_size=b.frame_size,
                    shape_variance=b.shape_variance, appearance_variance=b.appearance_variance)
    path = _model_path(args)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    serialize_model(aam, path)
    print(f"model: {aam.n_parameters} shape parameters ({aam.pdm.n_similarity} similarity), "
          f"{aam.appearance.n_components} appearance modes, {aam.frame.n_pixels} pixels -> {path}")
    return EXIT_OK


def cmd_train_gan(args, configs):
    from .container import deserialize_model, serialize_model
    from .data import read_manifest
    from .gan_fitting import build_training_pairs, train_prior
    aam, _ = deserialize_model(args.model)
    recs = read_manifest(args.manifest)
    shapes = [r.shape for r in recs]
    _, _, scaling = build_training_pairs([r.image for r in recs], shapes, aam)
    if args.augment:
        recs = bench.augment_training(recs, configs["bench"], np.random.SeedSequence(args.seed))
    train_cfg = dataclasses.replace(configs["train"], seed=args.seed)
    prior = train_prior([r.image for r in recs], shapes, aam, train_cfg, scaling=scaling,
                        callback=lambda e, h: _log(f"epoch {e + 1}: d={h.d_loss[-1]:.4f} "
                                                   f"g_adv={h.g_adv[-1]:.4f} g_l1={h.g_l1[-1]:.4f}"))
    path = os.path.join(args.out, os.path.basename(args.model)) if args.out else args.model
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    serialize_model(aam, path, prior)
    print(f"trained prior ({train_cfg.epochs} epochs, final L1 {prior.history['g_l1'][-1]:.4f}) -> {path}")
    return EXIT_OK


def _print_report(rep, gt=None):
    print(f"iterations: {rep.iterations}  converged: {rep.converged}  diverged: {rep.diverged}  "
          f"time: {rep.wall_time:.3f}s")
    print("cost trace: " + " ".join(f"{c:.6g}" for c in rep.cost_trace))
    if gt is not None:
        from .metrics import mean_error
        from .synth import interocular_distance
        print(f"mean error / iod: {mean_error(rep.shape_final, gt, interocular_distance(gt)):.5f}")
    print("p_final: " + " ".join(f"{v:.6g}" for v in rep.p_final))


def cmd_fit(args, configs):
    from .container import deserialize_model
    from .data import load_image, read_pts, save_pts
    from .synth import perturb_init, synth_face
    if args.image:
        image = load_image(args.image)
        gt = read_pts(args.pts) if args.pts else None
    else:
        rec = synth_face(args.seed, configs["bench"].resolution)
        image, gt = rec.image, rec.shape
    if args.model:
        aam, prior = deserialize_model(args.model)
    else:
        b = configs["bench"]
        _log(f"no --model given; building one from {b.n_train} synthetic faces")
        ds = bench.make_dataset(dataclasses.replace(b, n_validation=0, n_test=1), args.seed)
        aam = bench.train_models(ds, b, configs["train"], priors=()).aam
        prior = None
    if args.init_pts:
        p0 = aam.pdm.project(read_pts(args.init_pts))
    elif gt is not None:
        p0 = aam.pdm.project(perturb_init(gt, args.init_perturb, args.seed, mean_shape=aam.pdm.mean_shape))
    else:
        raise InsufficientDataError("fitting a loaded image needs --pts or --init-pts for initialisation")
    models = bench.BenchModels(aam, {"aug": prior} if prior is not None else {},
                               gamma=configs["gan"].gamma)
    rep = bench._method_fn(args.method, models, configs)
    report = rep(image, p0)
    _print_report(report, gt)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_pts(os.path.join(args.out, "fit.pts"), report.shape_final)
    return EXIT_OK


def _bench_common(args, configs, methods):
    _override(configs, "bench", n_test=args.n_test, n_train=args.n_train)
    _override(configs, "train", epochs=args.epochs)
    b = configs["bench"]
    _log(f"generating {b.n_train}/{b.n_validation}/{b.n_test} train/validation/test faces")
    ds = bench.make_dataset(b, args.seed)
    if args.model:
        from .container import deserialize_model
        aam, prior = deserialize_model(args.model)
        models = bench.BenchModels(aam, {"aug": prior} if prior is not None else {})
    else:
        models = bench.train_models(ds, b, configs["train"], bench.model_seed(args.seed),
                                    bench.required_priors(methods), _log)
    reports = bench.run_benchmark(ds, methods, b, args.seed, models=models, configs=configs, log=_log)
    return ds, models, reports


def cmd_bench(args, configs):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in bench.METHOD_LABELS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(bench.METHOD_LABELS)}")
    return _finish(args, configs, methods)


def cmd_ablate(args, configs):
    return _finish(args, configs, list(bench.ABLATION_METHODS))


def _finish(args, configs, methods):
    ds, models, reports = _bench_common(args, configs, methods)
    out = args.out or "."
    paths = bench.write_outputs(out, reports, models)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(format_config(configs))
    with open(paths["summary"]) as fh:
        print(fh.read(), end="")
    n_over = configs["bench"].overlays
    if n_over:
        test, _ = bench.occluded_test_set(ds, configs["bench"], args.seed, models.aam)
        written = bench.emit_overlays(test, reports, os.path.join(out, "overlays"), n_over)
        print(f"overlays: {len(written)} files in {os.path.join(out, 'overlays')}")
    print(f"results: {paths['results']}")
    return EXIT_OK


# parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    sup = argparse.SUPPRESS  # lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=sup, help="random seed (default 0)")
    common.add_argument("--config", default=sup, help="flat 'section.key = value' config file")
    common.add_argument("--out", default=sup, help="output directory")

    p = _Parser(prog="aamgan", description="AAM fitting with a learned appearance prior",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic annotated corpus")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--occlusion", type=float, default=0.0, help="occluded fraction of the face box")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-model", parents=[common], help="build an AAM from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", default=None, help="output model path (default OUT/model.aamg)")
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("train-gan", parents=[common], help="train the appearance prior for a model")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--augment", action="store_true", help="lighting/occlusion augmentation")
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("fit", parents=[common], help="fit one image")
    s.add_argument("--model", default=None)
    s.add_argument("--image", default=None, help="PGM/PNG image (default: a synthetic face)")
    s.add_argument("--pts", default=None, help="ground-truth landmarks")
    s.add_argument("--init-pts", default=None, help="initial landmarks")
    s.add_argument("--init-perturb", type=float, default=0.05)
    s.add_argument("--method", default="cgd", choices=sorted(bench.METHOD_LABELS))
    s.set_defaults(func=cmd_fit)

    for name, fn, hlp in (("bench", cmd_bench, "run the benchmark"),
                          ("ablate", cmd_ablate, "gamma=0 and augmentation ablations")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        if name == "bench":
            s.add_argument("--methods", default=",".join(bench.DEFAULT_METHODS))
        s.add_argument("--model", default=None, help="pre-built model (with prior) to reuse")
        s.add_argument("--n-test", type=int, default=None)
        s.add_argument("--n-train", type=int, default=None)
        s.add_argument("--epochs", type=int, default=None)
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("seed", 0), ("config", None), ("out", None)):
            if not hasattr(args, name):
                setattr(args, name, default)
        configs = load_configs(args.config)
        return args.func(args, configs)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        msg = f"file not found: {exc.filename}" if exc.filename else str(exc)
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, InsufficientDataError, MissingPriorError, ShapeMismatchError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateGeometryError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
