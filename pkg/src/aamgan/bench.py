"""Benchmark orchestration: seeded occluded suite, method registry, reports.

Every method fits the same image from the same initial parameters; the
per-image wall time covers only the fitting call.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import AnnotatedImage, Dataset
from .exceptions import InsufficientDataError, MissingPriorError
from .fitting import FitConfig, gradient_descent_fit, project_out_fit, simultaneous_fit
from .gan_fitting import GanFitConfig, build_training_pairs, gan_fit, train_prior
from .metrics import PIXEL_TOLERANCES, MetricsReport, evaluate_shape
from .models import AAM, build_aam
from .nets import TrainConfig
from .synth import Lighting, Occlusion, augment, interocular_distance, perturb_init, synth_corpus

CSV_COLUMNS = ("method", "image_id", "nmse", "mean_error_iod", "converged",
               "acc_10px", "acc_5px", "iterations", "time_s")
TIMING_COLUMNS = ("time_s",)

METHOD_LABELS = {"gd": "GD", "cgd": "CGD", "sic": "SIC", "gan": "GAN",
                 "gan_g0": "GAN (gamma=0)", "gan_noaug": "GAN (no aug)"}
DEFAULT_METHODS = ("gd", "cgd", "gan")
ABLATION_METHODS = ("gan", "gan_g0", "gan_noaug")


@dataclass
class BenchConfig:
    n_train: int = 200
    n_validation: int = 30
    n_test: int = 200
    resolution: int = 64
    frame_size: int = 64
    shape_variance: float = 0.98
    appearance_variance: float = 0.95
    occlusion: float = 0.3
    init_perturb: float = 0.05
    gammas: tuple[float, ...] = (0.0, 1.0, 10.0, 100.0)
    gamma: float | None = None  # fixed gamma; None tunes on the validation split
    augment_fraction: float = 0.5
    aug_gain: tuple[float, ...] = (0.7, 1.3)
    aug_bias: tuple[float, ...] = (-30.0, 30.0)
    aug_occlusion: tuple[float, ...] = (0.1, 0.4)
    overlays: int = 0

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 1 or self.n_validation < 0:
            raise ValueError("need n_train >= 2, n_test >= 1, n_validation >= 0")
        if not 0 <= self.occlusion < 1:
            raise ValueError("occlusion must lie in [0, 1)")
        if self.init_perturb < 0:
            raise ValueError("init_perturb must be >= 0")
        if not 0 <= self.augment_fraction <= 1:
            raise ValueError("augment_fraction must lie in [0, 1]")
        if not self.gammas or min(self.gammas) < 0:
            raise ValueError("gammas must be a non-empty list of values >= 0")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        for name in ("aug_gain", "aug_bias", "aug_occlusion"):
            if len(getattr(self, name)) != 2:
                raise ValueError(f"{name} needs two values (low, high)")


def default_configs() -> dict:
    """Every configurable section with its default value."""
    return {
        "bench": BenchConfig(),
        "fit": FitConfig(),
        "gd": FitConfig(solver="gradient_descent", max_iters=100, metric="gauss_newton"),
        "gan": GanFitConfig(metric="gauss_newton"),
        "train": TrainConfig(epochs=30),
    }


@dataclass
class BenchModels:
    aam: AAM
    priors: dict = field(default_factory=dict)  # "aug" / "plain" -> GanPrior
    gamma: float = 0.1
    tuning: list = field(default_factory=list)  # (gamma, MetricsReport) on validation


# data --------------------------------------------------------------------------

def _children(seed, n):
    """``n`` child sequences; a fresh copy is spawned so repeated calls agree."""
    if isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    else:
        seed = np.random.SeedSequence(seed)
    return seed.spawn(n)


def make_dataset(config: BenchConfig, seed=0) -> Dataset:
    """Clean synthetic faces split into train / validation / test."""
    s_train, s_val, s_test = _children(seed, 3)
    parts = [("train", synth_corpus(config.n_train, s_train, config.resolution)),
             ("validation", synth_corpus(config.n_validation, s_val, config.resolution)),
             ("test", synth_corpus(config.n_test, s_test, config.resolution))]
    records, labels = [], []
    for name, recs in parts:
        for i, r in enumerate(recs):
            r.meta["image_id"] = f"{name}_{i:04d}"
            records.append(r)
            labels.append(name)
    return Dataset(records, labels, None)


def occlude(records, fraction: float, seed) -> list:
    if fraction <= 0:
        return list(records)
    seeds = _children(seed, len(records))
    return [augment(r, [Occlusion(fraction)], s) for r, s in zip(records, seeds)]


def augment_training(records, config: BenchConfig, seed) -> list:
    """Replace a seeded fraction of the training images by lighting/occlusion variants."""
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        if rng.random() >= config.augment_fraction:
            out.append(r)
            continue
        ops = [Lighting(rng.uniform(*config.aug_gain), rng.uniform(*config.aug_bias)),
               Occlusion(rng.uniform(*config.aug_occlusion))]
        out.append(augment(r, ops, int(rng.integers(2 ** 31))))
    return out


def shared_inits(records, aam: AAM, magnitude: float, seed) -> list:
    """One perturbed initial parameter vector per record, reused by every method."""
    seeds = _children(seed, len(records))
    return [aam.pdm.project(perturb_init(r.shape, magnitude, s, mean_shape=aam.pdm.mean_shape))
            for r, s in zip(records, seeds)]


# models ----------------------------------------------------------------------------

def train_models(dataset: Dataset, config: BenchConfig, train_config: TrainConfig,
                 seed=0, priors=("aug", "plain"), log=None) -> BenchModels:
    train = dataset.subset("train")
    if len(train) < 2:
        raise InsufficientDataError("benchmark needs at least two training images")
    aam = build_aam([r.image for r in train], [r.shape for r in train], frame_size=config.frame_size,
                    shape_variance=config.shape_variance, appearance_variance=config.appearance_variance)
    models = BenchModels(aam)
    if not priors:
        return models
    images = [r.image for r in train]
    shapes = [r.shape for r in train]
    s_aug, = _children(seed, 1)
    _, _, scaling = build_training_pairs(images, shapes, aam)
    for name in priors:
        if log:
            log(f"training {name} prior ({train_config.epochs} epochs)")
        imgs = images if name == "plain" else [r.image for r in augment_training(train, config, s_aug)]
        models.priors[name] = train_prior(imgs, shapes, aam, train_config, scaling=scaling)
    return models


# fitting ---------------------------------------------------------------------------

def _method_fn(method: str, models: BenchModels, configs: dict):
    aam = models.aam
    if method == "gd":
        cfg = configs["gd"]
        return lambda img, p0: gradient_descent_fit(img, p0, None, aam, cfg)
    if method == "cgd":
        cfg = configs["fit"]
        return lambda img, p0: project_out_fit(img, p0, aam, cfg)
    if method == "sic":
        cfg = configs["fit"]
        return lambda img, p0: simultaneous_fit(img, p0, None, aam, cfg)
    if method in ("gan", "gan_g0", "gan_noaug"):
        prior = models.priors.get("plain" if method == "gan_noaug" else "aug")
        if prior is None:
            raise MissingPriorError(f"method {method!r} needs a trained prior")
        gamma = 0.0 if method == "gan_g0" else models.gamma
        base = configs["gan"]
        cfg = GanFitConfig(**{**base.__dict__, "gamma": gamma})
        return lambda img, p0: gan_fit(img, p0, aam, prior, cfg)
    raise ValueError(f"unknown method {method!r}; choose from {sorted(METHOD_LABELS)}")


def _fit_all(fn, records, inits, label: str) -> MetricsReport:
    results = []
    for r, p0 in zip(records, inits):
        t0 = time.perf_counter()
        rep = fn(r.image, p0)
        elapsed = time.perf_counter() - t0
        results.append(evaluate_shape(r.meta.get("image_id", r.source_path), rep.shape_final, r.shape,
                                      interocular_distance(r.shape), rep.iterations, elapsed))
    return MetricsReport.from_results(label, results)


def tune_gamma(records, inits, models: BenchModels, configs: dict, gammas) -> tuple[float, list]:
    """Pick gamma by validation convergence rate, then mean error, then the smaller value."""
    prior = models.priors.get("aug")
    if prior is None:
        raise MissingPriorError("gamma tuning needs the trained prior")
    rows = []
    for g in gammas:
        cfg = GanFitConfig(**{**configs["gan"].__dict__, "gamma": float(g)})
        rep = _fit_all(lambda img, p0: gan_fit(img, p0, models.aam, prior, cfg), records, inits, f"gamma={g}")
        rows.append((float(g), rep))

    def key(row):
        g, rep = row
        mean_err = np.mean([r.mean_error for r in rep.per_image]) if rep.per_image else np.inf
        return (-rep.convergence_rate, mean_err, g)
    return min(rows, key=key)[0], rows


def model_seed(seed):
    return _children(seed, 5)[0]


def required_priors(methods) -> tuple:
    methods = set(methods)
    out = ("aug",) if methods & {"gan", "gan_g0"} else ()
    return out + (("plain",) if "gan_noaug" in methods else ())


def occluded_test_set(dataset: Dataset, config: BenchConfig, seed, aam: AAM) -> tuple[list, list]:
    """The occluded test images and their shared initial parameters."""
    s_test_occ, s_test_init = _children(seed, 5)[2::2]
    test = occlude(dataset.subset("test"), config.occlusion, s_test_occ)
    return test, shared_inits(test, aam, config.init_perturb, s_test_init)


def run_benchmark(dataset: Dataset, methods, config: BenchConfig | None = None, seed=0,
                  models: BenchModels | None = None, configs: dict | None = None, log=None) -> dict:
    """Fit every occluded test image with each method from shared initialisations.

    Returns ``{method: MetricsReport}`` in the order requested.
    """
    config = config or BenchConfig()
    configs = {**default_configs(), **(configs or {})}
    methods = list(methods)
    _, s_val_occ, _, s_val_init, _ = _children(seed, 5)
    if models is None:
        models = train_models(dataset, config, configs["train"], model_seed(seed),
                              required_priors(methods), log)
    for m in methods:
        _method_fn(m, models, configs)  # fail early on unknown methods / missing priors
    if {"gan", "gan_noaug"} & set(methods):
        if config.gamma is not None:
            models.gamma = float(config.gamma)
        elif not models.tuning:
            val = occlude(dataset.subset("validation"), config.occlusion, s_val_occ)
            if val:
                if log:
                    log(f"tuning gamma over {list(config.gammas)} on {len(val)} validation images")
                vinit = shared_inits(val, models.aam, config.init_perturb, s_val_init)
                models.gamma, models.tuning = tune_gamma(val, vinit, models, configs, config.gammas)
    test, inits = occluded_test_set(dataset, config, seed, models.aam)
    reports = {}
    for m in methods:
        if log:
            log(f"fitting {len(test)} test images with {m}")
        reports[m] = _fit_all(_method_fn(m, models, configs), test, inits, m)
    return reports


# output ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_results_csv(path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for method, rep in reports.items():
            for r in rep.per_image:
                w.writerow([method, r.image_id, _fmt(r.nmse), _fmt(r.mean_error), int(r.converged),
                            _fmt(r.accuracy[10.0]), _fmt(r.accuracy[5.0]), r.iterations,
                            f"{r.time_s:.6f}"])


def write_ced_csv(path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method", "threshold", "fraction"))
        for method, rep in reports.items():
            for t, f in rep.ced:
                w.writerow([method, _fmt(t), _fmt(f)])


def summary_table(reports: dict) -> str:
    """Four rows (NMSE, convergence, landmark accuracy, time) by one column per method."""
    names = [METHOD_LABELS.get(m, m) for m in reports]
    width = max(12, *(len(n) + 2 for n in names))
    rows = [
        ("Normalized MSE", lambda r: f"{r.normalized_mse:.5f}"),
        ("Convergence Rate (%)", lambda r: f"{100 * r.convergence_rate:.1f}"),
        ("Landmark Accuracy (%)", lambda r: f"{100 * r.landmark_accuracy:.1f}"),
        ("Time (s)", lambda r: f"{r.mean_time_s:.3f}"),
    ]
    lines = ["Metric".ljust(24) + "".join(n.rjust(width) for n in names)]
    for label, f in rows:
        lines.append(label.ljust(24) + "".join(f(r).rjust(width) for r in reports.values()))
    acc5 = ", ".join(f"{METHOD_LABELS.get(m, m)} {100 * r.landmark_accuracy_5px:.1f}%"
                     for m, r in reports.items())
    lines.append(f"(landmark accuracy uses a {PIXEL_TOLERANCES[0]:g} px tolerance; at "
                 f"{PIXEL_TOLERANCES[1]:g} px: {acc5})")
    return "\n".join(lines)


def tuning_table(tuning: list, chosen: float) -> str:
    lines = ["gamma      conv(%)  mean_err"]
    for g, rep in tuning:
        err = np.mean([r.mean_error for r in rep.per_image]) if rep.per_image else float("nan")
        mark = "  <- chosen" if g == chosen else ""
        lines.append(f"{g:<10g} {100 * rep.convergence_rate:7.1f}  {err:.5f}{mark}")
    return "\n".join(lines)


def write_outputs(out_dir, reports: dict, models: BenchModels | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {"results": os.path.join(out_dir, "results.csv"),
             "ced": os.path.join(out_dir, "ced.csv"),
             "summary": os.path.join(out_dir, "summary.txt")}
    write_results_csv(paths["results"], reports)
    write_ced_csv(paths["ced"], reports)
    text = summary_table(reports)
    if models is not None and models.tuning:
        text += "\n\n" + tuning_table(models.tuning, models.gamma)
    with open(paths["summary"], "w") as fh:
        fh.write(text + "\n")
    return paths


def read_results_csv(path, drop_timing: bool = True) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not drop_timing:
        return rows
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    return [[row[i] for i in keep] for row in rows]


# overlays ---------------------------------------------------------------------------

def cross_pixels(point, image_shape, arm: int = 1) -> list:
    """Pixels of a plus-shaped cross centred on the nearest pixel to ``point``."""
    h, w = image_shape
    cx, cy = int(np.rint(point[0])), int(np.rint(point[1]))
    pix = {(cy, cx)}
    for k in range(1, arm + 1):
        pix |= {(cy, cx - k), (cy, cx + k), (cy - k, cx), (cy + k, cx)}
    return sorted((r, c) for r, c in pix if 0 <= r < h and 0 <= c < w)


def burn_crosses(image, points, value: int, arm: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Copy of ``image`` with crosses drawn; also returns the boolean mask of drawn pixels."""
    out = np.array(image, dtype=np.uint8, copy=True)
    mask = np.zeros(out.shape, dtype=bool)
    for pt in np.asarray(points, dtype=np.float64):
        for r, c in cross_pixels(pt, out.shape, arm):
            mask[r, c] = True
    out[mask] = value
    return out, mask


def emit_overlays(records, reports: dict, out_dir, limit: int | None = None) -> list:
    """One PGM per (image, method): ground truth crosses in white, prediction in black."""
    from .data import save_pgm
    os.makedirs(out_dir, exist_ok=True)
    by_id = {r.meta.get("image_id", r.source_path): r for r in records}
    paths = []
    for method, rep in reports.items():
        for res in rep.per_image[:limit]:
            rec: AnnotatedImage = by_id[res.image_id]
            img, _ = burn_crosses(rec.image, rec.shape, 255)
            img, _ = burn_crosses(img, res.shape, 0)
            path = os.path.join(out_dir, f"{method}_{res.image_id}.pgm")
            save_pgm(path, img)
            paths.append(path)
    return paths

