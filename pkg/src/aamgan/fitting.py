"""Compositional Gauss-Newton and gradient-descent AAM fitting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_image, check_vector
from .exceptions import DimensionError, NumericalError
from .geometry import composition_matrix, compose_shapes, is_degenerate, steepest_descent_images
from .models import AAM, downsample

COMPOSITIONS = ("forward", "inverse", "asymmetric", "bidirectional")
SOLVERS = ("gauss_newton", "gradient_descent")
METRICS = ("identity", "jacobi", "gauss_newton")
SINGULAR_DAMPING = 1e-8


@dataclass
class FitConfig:
    max_iters: int = 50
    tol: float = 1e-4
    lam: float = 0.0
    composition: str = "inverse"
    alpha: float = 0.5
    solver: str = "gauss_newton"
    step: float = 1.0
    backtracking: bool | None = None
    max_halvings: int = 8
    pyramid_levels: int = 1
    metric: str = "jacobi"
    sic_solver: str = "direct"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.sic_solver not in ("direct", "schur"):
            raise ValueError("sic_solver must be 'direct' or 'schur'")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")

    @property
    def use_backtracking(self) -> bool:
        if self.backtracking is None:
            return self.solver == "gradient_descent"
        return self.backtracking


@dataclass
class FitReport:
    p_final: np.ndarray
    c_final: np.ndarray
    shape_final: np.ndarray
    cost_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    out_of_bounds_pixels: int = 0
    wall_time: float = 0.0
    update_norms: list = field(default_factory=list)
    diverged: bool = False
    degenerate: bool = False
    damped: bool = False
    traces: dict = field(default_factory=dict)


# costs -----------------------------------------------------------------------

def _model_texture(image, p, aam: AAM):
    t, outside = aam.sample(image, p, return_outside=True)
    valid = ~outside
    if valid.sum() < 3:
        raise NumericalError("shape left the image: fewer than 3 in-image pixels")
    vsel = None if valid.all() else valid
    tm, gain = aam.appearance.photometric(t, vsel)
    return tm, gain, vsel, int(outside.sum())


def _rows(x, vsel):
    return x if vsel is None else x[vsel]


def ssd_cost(image, p, c, aam: AAM) -> float:
    """Squared texture residual ``||I[p] - (a + A c)||^2`` over in-image pixels."""
    img = check_image(image)
    p = check_vector(p, aam.n_parameters, "p")
    c = check_vector(c, aam.appearance.n_components, "c")
    tm, _, vsel, _ = _model_texture(img, p, aam)
    r = tm - _rows(aam.appearance.instance(c), vsel)
    return float(r @ r)


def regularized_cost(image, p, c, aam: AAM, lam: float) -> float:
    """Parameter penalty plus ``lam`` times the SSD term."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    p = check_vector(p, aam.n_parameters, "p")
    c = check_vector(c, aam.appearance.n_components, "c")
    return float(p @ p + c @ c) + lam * ssd_cost(image, p, c, aam)


def optimal_appearance(image, p, aam: AAM) -> np.ndarray:
    """Least-squares appearance parameters for the texture under ``p``."""
    tm, _, vsel, _ = _model_texture(check_image(image), p, aam)
    am = aam.appearance
    if vsel is None:
        return am.project(tm)
    A = am.basis[vsel]
    return np.linalg.lstsq(A, tm - am.mean_texture[vsel], rcond=None)[0]


def ssd_gradient(image, p, c, aam: AAM, lam: float = 0.0):
    """Analytic gradient of the GD objective w.r.t. ``(p, c)``.

    The objective is the SSD when ``lam == 0`` and the regularised cost
    otherwise.
    """
    img = check_image(image)
    p = check_vector(p, aam.n_parameters, "p")
    c = check_vector(c, aam.appearance.n_components, "c")
    _, g, _, _ = _gd_terms(img, p, c, aam, lam)
    return g[:aam.n_parameters], g[aam.n_parameters:]


def _gd_terms(img, p, c, aam, lam):
    am = aam.appearance
    tm, gain, vsel, n_out = _model_texture(img, p, aam)
    A = _rows(am.basis, vsel)
    r = tm - _rows(am.mean_texture, vsel) - A @ c
    sd = _rows(steepest_descent_images(img, aam.pdm, p, aam.tri, aam.frame, aam.dw_dp), vsel)
    J = np.hstack([am.photometric_jacobian(tm, gain, sd, vsel), -A])
    ssd = float(r @ r)
    grad = 2.0 * (J.T @ r)
    cost = ssd
    if lam > 0:
        q = np.concatenate([p, c])
        cost = float(q @ q) + lam * ssd
        grad = 2.0 * q + lam * grad
    return cost, grad, J, n_out


# composition -----------------------------------------------------------------

def composed_update(aam: AAM, p, dp_image, dp_model, composition: str, alpha: float = 0.5):
    """Apply image-side and/or model-side increments to ``p``.

    ``asymmetric`` applies ``alpha * dp_image`` forward and then
    ``(1 - alpha) * dp_model`` inverse; a zero weight skips its step so the
    end points coincide exactly with the pure forward and inverse updates.
    """
    pdm, tri = aam.pdm, aam.tri
    if composition == "forward":
        return compose_shapes(pdm, tri, p, dp_image, "forward")
    if composition == "inverse":
        return compose_shapes(pdm, tri, p, dp_model, "inverse")
    if composition == "asymmetric":
        out = np.asarray(p, dtype=np.float64)
        if alpha != 0.0:
            out = compose_shapes(pdm, tri, out, alpha * np.asarray(dp_image) if alpha != 1.0
                                 else dp_image, "forward")
        if alpha != 1.0:
            out = compose_shapes(pdm, tri, out, (1.0 - alpha) * np.asarray(dp_model) if alpha != 0.0
                                 else dp_model, "inverse")
        return out
    if composition == "bidirectional":
        out = compose_shapes(pdm, tri, p, dp_image, "forward")
        return compose_shapes(pdm, tri, out, dp_model, "inverse")
    raise ValueError(f"unknown composition {composition!r}")


# Gauss-Newton ----------------------------------------------------------------

class _Linearisation:
    """Residual and Jacobian blocks of one Gauss-Newton iteration."""

    def __init__(self, img, p, c, aam: AAM, config: FitConfig, project_out: bool):
        am = aam.appearance
        self.aam = aam
        tm, gain, vsel, n_out = _model_texture(img, p, aam)
        self.n_out = n_out
        self.vsel = vsel
        A = _rows(am.basis, vsel)
        abar = _rows(am.mean_texture, vsel)
        if project_out:
            if vsel is None:
                Q = A
                self.c_opt = A.T @ (tm - abar)
            else:
                Q, _ = np.linalg.qr(A)
                self.c_opt = np.linalg.lstsq(A, tm - abar, rcond=None)[0]
            e = tm - abar
            self.proj = lambda X: X - Q @ (Q.T @ X)
            self.e = self.proj(e)
        else:
            self.proj = None
            self.e = tm - abar - A @ c
        self.A = A
        comp = config.composition
        n = aam.n_parameters
        need_f = comp in ("forward", "bidirectional") or (comp == "asymmetric" and config.alpha > 0)
        need_i = comp in ("inverse", "bidirectional") or (comp == "asymmetric" and config.alpha < 1)
        C = composition_matrix(aam.pdm, aam.tri, p)
        self.C = C
        Jf = Ji = None
        if need_f:
            sd = _rows(steepest_descent_images(img, aam.pdm, p, aam.tri, aam.frame, aam.dw_dp), vsel)
            Jf = am.photometric_jacobian(tm, gain, sd, vsel) @ C
        if need_i:
            Ji = _rows(aam.template_sd, vsel)
            if not project_out and c.size:
                Ji = Ji + np.einsum("j,jfn->fn", c, aam.mode_sd if vsel is None
                                    else aam.mode_sd[:, vsel])
        if comp == "forward":
            Jp, Ep = Jf, C
        elif comp == "inverse":
            Jp, Ep = -Ji, -C
        elif comp == "asymmetric":
            a = config.alpha
            if a == 1.0:
                Jp = Jf
            elif a == 0.0:
                Jp = Ji
            else:
                Jp = a * Jf + (1.0 - a) * Ji
            Ep = C
        else:
            Jp, Ep = np.hstack([Jf, -Ji]), np.hstack([C, -C])
        if project_out:
            Jp = self.proj(Jp)
            self.J = Jp
            self.E = Ep
        else:
            m = A.shape[1]
            self.J = np.hstack([Jp, -A])
            self.E = np.block([[Ep, np.zeros((n, m))],
                               [np.zeros((m, Ep.shape[1])), np.eye(m)]])
        self.n_z_p = Jp.shape[1]

    def solve(self, q, lam: float, bidirectional: bool, sic_solver: str = "direct"):
        """Increment minimising the linearised (optionally regularised) cost.

        Returns ``(z, damped)``.
        """
        J, e, E = self.J, self.e, self.E
        w = lam if lam > 0 else 1.0
        if bidirectional:
            rows = [np.sqrt(w) * J]
            rhs = [-np.sqrt(w) * e]
            if lam > 0:
                rows.append(E)
                rhs.append(-q)
            z = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=1e-10)[0]
            return z, False
        H = w * (J.T @ J)
        g = w * (J.T @ e)
        if lam > 0:
            H = H + E.T @ E
            g = g + E.T @ q
        damped = False
        if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e12:
            H = H + SINGULAR_DAMPING * np.eye(H.shape[0])
            damped = True
        if sic_solver == "schur" and self.proj is None:
            return -_schur_solve(H, g, self.n_z_p), damped
        return -np.linalg.solve(H, g), damped


def _schur_solve(H, g, k):
    """Solve ``H x = g`` by eliminating the trailing block first."""
    Hpp, Hpc = H[:k, :k], H[:k, k:]
    Hcp, Hcc = H[k:, :k], H[k:, k:]
    gp, gc = g[:k], g[k:]
    X = np.linalg.solve(Hcc, np.column_stack([Hcp, gc]))
    xp = np.linalg.solve(Hpp - Hpc @ X[:, :-1], gp - Hpc @ X[:, -1])
    xc = np.linalg.solve(Hcc, gc - Hcp @ xp)
    return np.concatenate([xp, xc])


def sic_increment(image, p, c, aam: AAM, config: FitConfig | None = None,
                  sic_solver: str = "direct"):
    """One simultaneous Gauss-Newton increment ``(dp, dc)``; for cross-checks."""
    config = config or FitConfig()
    img = check_image(image)
    lin = _Linearisation(img, np.asarray(p, float), np.asarray(c, float), aam, config, False)
    q = np.concatenate([p, c])
    z, _ = lin.solve(q, config.lam, config.composition == "bidirectional", sic_solver)
    return z[:lin.n_z_p], z[lin.n_z_p:]


def _apply(aam, p, zp, config):
    comp = config.composition
    if comp == "forward":
        return composed_update(aam, p, zp, None, comp)
    if comp == "inverse":
        return composed_update(aam, p, None, zp, comp)
    if comp == "asymmetric":
        return composed_update(aam, p, zp, -zp, comp, config.alpha)
    n = aam.n_parameters
    return composed_update(aam, p, zp[:n], zp[n:], comp)


def _gn_cost(img, p, c, aam, lam, project_out):
    try:
        return _gn_cost_unchecked(img, p, c, aam, lam, project_out)
    except NumericalError:
        return np.inf


def _gn_cost_unchecked(img, p, c, aam, lam, project_out):
    if project_out:
        c = optimal_appearance(img, p, aam)
    ssd = ssd_cost(img, p, c, aam)
    if lam > 0:
        return float(p @ p + c @ c) + lam * ssd
    return ssd


def _gauss_newton(image, p_init, c_init, aam: AAM, config: FitConfig, project_out: bool) -> FitReport:
    start = time.perf_counter()
    img = check_image(image)
    p = check_vector(p_init, aam.n_parameters, "p_init").copy()
    m = aam.appearance.n_components
    c = np.zeros(m) if c_init is None else check_vector(c_init, m, "c_init").copy()
    report = FitReport(p, c, aam.pdm.instance(p))
    lam = config.lam
    bidir = config.composition == "bidirectional"
    cost = _gn_cost(img, p, c, aam, lam, project_out)
    report.cost_trace.append(cost)
    initial = cost
    n_out = 0
    for _ in range(config.max_iters):
        lin = _Linearisation(img, p, c, aam, config, project_out)
        n_out = lin.n_out
        q = np.concatenate([p, c]) if not project_out else p
        z, damped = lin.solve(q, lam, bidir, config.sic_solver)
        report.damped |= damped
        zp, zc = z[:lin.n_z_p], z[lin.n_z_p:]
        scale = 1.0
        for _halving in range(config.max_halvings + 1 if config.use_backtracking else 1):
            p_new = _apply(aam, p, scale * zp, config)
            c_new = c + scale * zc if not project_out else c
            new_cost = _gn_cost(img, p_new, c_new, aam, lam, project_out)
            if not config.use_backtracking or new_cost <= cost:
                break
            scale *= 0.5
        else:
            p_new, c_new, new_cost = p, c, cost
        step_norm = float(np.linalg.norm(scale * zp)) if new_cost is not cost else 0.0
        p, c, cost = p_new, c_new, new_cost
        report.iterations += 1
        report.cost_trace.append(cost)
        report.update_norms.append(step_norm)
        if not np.isfinite(cost) or cost > 1e6 * max(initial, 1e-12):
            report.diverged = True
            break
        if step_norm < config.tol:
            report.converged = True
            break
    if project_out:
        try:
            c = optimal_appearance(img, p, aam)
        except NumericalError:
            c = np.zeros(m)
    report.p_final = p
    report.c_final = c
    report.shape_final = aam.pdm.instance(p)
    report.out_of_bounds_pixels = n_out
    report.degenerate = is_degenerate(report.shape_final, aam.tri)
    report.wall_time = time.perf_counter() - start
    return report


def project_out_fit(image, p_init, aam: AAM, config: FitConfig | None = None) -> FitReport:
    """Project-out Gauss-Newton fit (inverse composition by default)."""
    return _gauss_newton(image, p_init, None, aam, config or FitConfig(), True)


def simultaneous_fit(image, p_init, c_init, aam: AAM, config: FitConfig | None = None) -> FitReport:
    """Joint Gauss-Newton over shape and appearance increments."""
    return _gauss_newton(image, p_init, c_init, aam, config or FitConfig(), False)


# gradient descent ----------------------------------------------------------------

def descend(objective, q0, config: FitConfig, metric=None):
    """Preconditioned gradient descent with step halving.

    ``objective(q)`` returns ``(cost, grad, J)`` where ``J`` is a Jacobian used
    to build the metric (may be None for the identity metric).  Returns
    ``(q, trace, update_norms, converged, diverged, costs_extra)`` where the
    last entry collects any extra values the objective returned.
    """
    metric = metric or config.metric
    q = np.asarray(q0, dtype=np.float64).copy()
    out = objective(q)
    cost, grad, J = out[:3]
    extras = [out[3:]]
    trace = [cost]
    norms = []
    converged = diverged = False
    initial = cost
    for _ in range(config.max_iters):
        d = _precondition(grad, J, metric)
        step = config.step
        for _halving in range(config.max_halvings + 1 if config.use_backtracking else 1):
            q_new = q - step * d
            out_new = objective(q_new)
            if not config.use_backtracking or out_new[0] <= cost:
                break
            step *= 0.5
        else:
            q_new, out_new = q, None
        if out_new is None:
            norms.append(0.0)
            trace.append(cost)
            extras.append(extras[-1])
            converged = True
            break
        norms.append(float(np.linalg.norm(q_new - q)))
        q = q_new
        cost, grad, J = out_new[:3]
        trace.append(cost)
        extras.append(out_new[3:])
        if not np.isfinite(cost) or cost > 1e6 * max(initial, 1e-12):
            diverged = True
            break
        if norms[-1] < config.tol:
            converged = True
            break
    return q, trace, norms, converged, diverged, extras


def _precondition(grad, J, metric):
    if metric == "identity" or J is None:
        return grad
    if metric == "jacobi":
        d = np.einsum("ij,ij->j", J, J)
        d = np.where(d > 0, d, 1.0)
        return grad / (2.0 * d)
    H = 2.0 * (J.T @ J)
    H = H + SINGULAR_DAMPING * max(np.trace(H) / H.shape[0], 1.0) * np.eye(H.shape[0])
    return np.linalg.solve(H, grad)


def gradient_descent_fit(image, p_init, c_init, aam: AAM, config: FitConfig | None = None) -> FitReport:
    """First-order descent on the SSD (or the regularised cost when ``lam > 0``)."""
    config = config or FitConfig(solver="gradient_descent")
    start = time.perf_counter()
    img = check_image(image)
    n = aam.n_parameters
    m = aam.appearance.n_components
    p0 = check_vector(p_init, n, "p_init")
    c0 = np.zeros(m) if c_init is None else check_vector(c_init, m, "c_init")

    def objective(q):
        try:
            return _gd_terms(img, q[:n], q[n:], aam, config.lam)
        except NumericalError:
            return np.inf, None, None, aam.frame.n_pixels

    q, trace, norms, converged, diverged, extras = descend(objective, np.concatenate([p0, c0]), config)
    p, c = q[:n], q[n:]
    shape = aam.pdm.instance(p)
    return FitReport(p, c, shape, trace, len(trace) - 1, converged, int(extras[-1][0]),
                     time.perf_counter() - start, norms, diverged,
                     is_degenerate(shape, aam.tri))


# coarse to fine ----------------------------------------------------------------

def _transfer(p, src: AAM, dst: AAM, factor: float):
    return dst.pdm.project(src.pdm.instance(p) * factor)


def pyramid_fit(image, p_init, models_per_level, config: FitConfig | None = None,
                fitter=project_out_fit) -> FitReport:
    """Fit from the coarsest level to the finest.

    ``models_per_level`` lists the models finest first, each built at half the
    resolution of the previous one; ``p_init`` refers to the finest model.
    """
    config = config or FitConfig()
    levels = list(models_per_level)
    if len(levels) != config.pyramid_levels:
        raise DimensionError(f"{len(levels)} models for {config.pyramid_levels} pyramid levels")
    start = time.perf_counter()
    images = [check_image(image)]
    for _ in range(len(levels) - 1):
        images.append(downsample(images[-1]))
    p = _transfer(p_init, levels[0], levels[-1], 0.5 ** (len(levels) - 1))
    trace, norms = [], []
    iterations = 0
    rep = None
    for lvl in range(len(levels) - 1, -1, -1):
        aam = levels[lvl]
        if fitter is project_out_fit:
            rep = fitter(images[lvl], p, aam, config)
        else:
            rep = fitter(images[lvl], p, None, aam, config)
        trace.extend(rep.cost_trace if not trace else rep.cost_trace[1:])
        norms.extend(rep.update_norms)
        iterations += rep.iterations
        if lvl > 0:
            p = _transfer(rep.p_final, aam, levels[lvl - 1], 2.0)
    rep.cost_trace = trace
    rep.update_norms = norms
    rep.iterations = iterations
    rep.wall_time = time.perf_counter() - start
    return rep
