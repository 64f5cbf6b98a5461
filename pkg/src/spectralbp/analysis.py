"""Latent-space analysis of a trained generator f: Z -> X.

Maximum-likelihood trajectories climb the seeded ln Q estimate in z. The
spectrum of M_f(z) gives the directions of largest output change, and the
ratios

    delta(j, 0) = E ‖f(z_j + α ε) - f(z_j)‖,
    delta(j, i) = ‖f(z_j + α v_i) - f(z_j)‖ / delta(j, 0),

compare eigen-direction perturbations with random ones. v_eff(τ) averages
the number of eigen-directions with delta(j, i) > τ over the trial points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Program, constant, ops, parameter, vjp
from .density import SingularJacobianError, exact_log_likelihood, explicit_metric, log_likelihood
from .estimators import EstimatorConfig, draw_probes, draw_start
from .linalg import NotSymmetricError, Rng, sym_eig
from .models import Z_TO_X, Model

TRAJECTORY_CONFIG = EstimatorConfig(m=5, p=20, t=20, g=1.1, eps=1e-4)


class DegenerateGeneratorError(ValueError):
    """Random perturbations leave the output unchanged, so delta(j, 0) = 0."""


def _points(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[:, None], True
    if z.ndim != 2:
        raise ValueError("points must be (n,) or (n, B)")
    return z, False


# --- trajectories ----------------------------------------------------------------

@dataclass
class Trajectory:
    """Ascent iterates for B independent starting points.

    `z` is (steps + 1, n, B); `log_q` is the seeded estimate at each iterate
    and `exact_log_q` the Cholesky value. Eigenvalue pairs are (λ_min, λ_max)
    of M_f at the first and last iterate.
    """

    z: np.ndarray
    log_q: np.ndarray
    exact_log_q: np.ndarray
    lambda_init: np.ndarray
    lambda_final: np.ndarray
    truncated: bool = False
    message: str = ""

    @property
    def steps(self) -> int:
        return self.z.shape[0] - 1

    @property
    def log_ratio(self) -> np.ndarray:
        """log(p_final / p_init) from the seeded estimate, per start point."""
        return self.log_q[-1] - self.log_q[0]

    @property
    def condition_init(self) -> np.ndarray:
        return self.lambda_init[1] / self.lambda_init[0]

    @property
    def condition_final(self) -> np.ndarray:
        return self.lambda_final[1] / self.lambda_final[0]


def _extreme_eigs(model: Model, z: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        M = explicit_metric(model, z)
    out = np.full((2, z.shape[1]), np.nan)
    for b in range(z.shape[1]):
        if not np.all(np.isfinite(M[b])):
            continue
        w, _ = sym_eig(M[b])
        out[:, b] = w[-1], w[0]
    return out


def _exact_or_nan(model: Model, z: np.ndarray) -> np.ndarray:
    """Exact ln Q per column, NaN where the metric is singular or non-finite."""
    try:
        with np.errstate(all="ignore"):
            return np.atleast_1d(exact_log_likelihood(model, z))
    except (SingularJacobianError, NotSymmetricError):
        if z.shape[1] == 1:
            return np.full(1, np.nan)
        return np.concatenate([_exact_or_nan(model, z[:, b:b + 1]) for b in range(z.shape[1])])


def ml_trajectory(model: Model, z0, steps: int = 1000, step_size: float = 1e-2,
                  cfg: EstimatorConfig = TRAJECTORY_CONFIG, rng: Rng | None = None) -> Trajectory:
    """Fixed-step gradient ascent on the seeded ln Q(f(z)) over z.

    Step i draws its probes and start vectors from rng.split(i). Columns of a
    (n, B) `z0` are independent trajectories. A non-finite value or gradient
    stops the ascent; the finite iterates so far are returned with `truncated`
    set (just z0 and its non-finite value when the very first step fails).
    """
    if model.direction != Z_TO_X:
        raise ValueError("trajectories need a z->x model")
    if steps < 0 or step_size <= 0:
        raise ValueError("need steps >= 0 and step_size > 0")
    rng = rng or Rng(0)
    z, _ = _points(z0)
    n, B = z.shape
    zn = parameter(z.copy(), name="z")
    start, probes = constant(draw_start(rng.split(0), n, (B,))), constant(draw_probes(rng.split(1), n, (B,), cfg.p))
    lik = log_likelihood(model, zn, cfg, params={k: constant(v) for k, v in model.params.items()},
                         start=start, probes=probes, check_bounds=False)
    # Trajectories are independent, so the gradient of the sum is per-column.
    (gz,) = vjp(ops.sum(lik.loglik), [zn])
    prog = Program([lik.loglik, gz], [zn, start, probes])

    zs, logq = [z.copy()], []
    truncated, message = False, ""
    for i in range(steps + 1):
        r = rng.split(i)
        val, g = prog(z, draw_start(r.split(0), n, (B,)), draw_probes(r.split(1), n, (B,), cfg.p))
        if not (np.all(np.isfinite(val)) and np.all(np.isfinite(g))):
            truncated, message = True, f"non-finite value or gradient at step {i}"
            if i == 0:
                logq.append(val)        # keep z0 so the report still has a start point
            else:
                zs.pop()
            break
        logq.append(val)
        if i == steps:
            break
        z = z + step_size * g
        zs.append(z.copy())
    zs = np.stack(zs)
    exact = np.stack([_exact_or_nan(model, zz) for zz in zs])
    return Trajectory(zs, np.stack(logq), exact, _extreme_eigs(model, zs[0]), _extreme_eigs(model, zs[-1]),
                      truncated, message)


# --- spectrum and perturbations -----------------------------------------------------

def fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip eigenvector columns so each one's largest-magnitude entry is positive."""
    vecs = np.array(vecs, dtype=np.float64)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def metric_spectrum(model: Model, z) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigenvalues and sign-fixed eigenvectors (columns) of M_f(z)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("metric_spectrum takes a single point")
    w, v = sym_eig(explicit_metric(model, z))
    return w, fix_signs(v)


@dataclass
class PerturbationConfig:
    alpha: float = 0.4
    trials: int = 12
    taus: tuple = (0.25, 0.5, 1.0, 2.0)
    mc_count: int = 256
    directions: str = "unit"        # "unit": random unit vectors; "gaussian": ε ~ N(0, I)

    def __post_init__(self):
        if self.alpha <= 0 or self.trials < 1 or self.mc_count < 1:
            raise ValueError("need alpha > 0, trials >= 1 and mc_count >= 1")
        if self.directions not in ("unit", "gaussian"):
            raise ValueError(f"unknown direction kind {self.directions!r}")
        self.taus = tuple(float(t) for t in self.taus)


@dataclass
class Deltas:
    delta0: float
    delta0_se: float
    ratios: np.ndarray


def random_directions(rng: Rng, n: int, count: int, kind: str = "unit") -> np.ndarray:
    """(n, count) perturbation directions."""
    eps = rng.normal((n, count))
    if kind == "unit":
        eps = eps / np.linalg.norm(eps, axis=0, keepdims=True)
    return eps


def delta_ratios(model: Model, z, eigvecs, pcfg: PerturbationConfig, rng: Rng) -> Deltas:
    """delta(j, 0) by Monte Carlo and delta(j, i) for every eigenvector column."""
    z = np.asarray(z, dtype=np.float64)
    eigvecs = np.asarray(eigvecs, dtype=np.float64)
    n = z.shape[0]
    if not np.allclose(eigvecs.T @ eigvecs, np.eye(eigvecs.shape[1]), atol=1e-8):
        raise ValueError("eigenvectors must be orthonormal")
    base = model(z[:, None])
    eps = random_directions(rng, n, pcfg.mc_count, pcfg.directions)
    moved = model(z[:, None] + pcfg.alpha * eps)
    dist = np.linalg.norm(moved - base, axis=0)
    delta0 = float(np.mean(dist))
    se = float(np.std(dist, ddof=1) / math.sqrt(dist.size)) if dist.size > 1 else math.nan
    if not delta0 > 0:
        raise DegenerateGeneratorError("random perturbations do not change the output (delta(j, 0) = 0)")
    eig_moved = model(z[:, None] + pcfg.alpha * eigvecs)
    ratios = np.linalg.norm(eig_moved - base, axis=0) / delta0
    return Deltas(delta0, se, ratios)


def v_eff(ratios, tau: float) -> float:
    """Mean over trials of the number of ratios above tau; `ratios` is (M, n)."""
    ratios = np.atleast_2d(np.asarray(ratios, dtype=np.float64))
    if ratios.size == 0:
        raise ValueError("need at least one trial")
    return float(np.mean(np.sum(ratios > tau, axis=1)))


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray         # (M, n), descending
    eigenvectors: np.ndarray        # (M, n, n), columns
    delta0: np.ndarray              # (M,)
    delta0_se: np.ndarray           # (M,)
    ratios: np.ndarray              # (M, n)
    v_eff: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"trial": j, "index": i, "eigenvalue": self.eigenvalues[j, i], "delta0": self.delta0[j],
                 "delta0_se": self.delta0_se[j], "delta": self.ratios[j, i]}
                for j in range(self.ratios.shape[0]) for i in range(self.ratios.shape[1])]

    def summary(self) -> dict:
        return {"trials": int(self.ratios.shape[0]), "dim": int(self.ratios.shape[1]),
                "v_eff": {repr(float(t)): v for t, v in self.v_eff.items()}}


def trial_points(model: Model, pcfg: PerturbationConfig, rng: Rng) -> np.ndarray:
    return model.prior.sample(rng, pcfg.trials)


def spectrum_report(model: Model, trials, pcfg: PerturbationConfig, rng: Rng) -> SpectrumReport:
    """Eigen-decomposition and delta ratios at each trial point (columns of `trials`).

    Trial j draws its Monte Carlo directions from rng.split(j).
    """
    trials, _ = _points(trials)
    vals, vecs, d0, se, ratios = [], [], [], [], []
    for j in range(trials.shape[1]):
        w, v = metric_spectrum(model, trials[:, j])
        d = delta_ratios(model, trials[:, j], v, pcfg, rng.split(j))
        vals.append(w), vecs.append(v), d0.append(d.delta0), se.append(d.delta0_se), ratios.append(d.ratios)
    ratios = np.stack(ratios)
    return SpectrumReport(np.stack(vals), np.stack(vecs), np.array(d0), np.array(se), ratios,
                          {t: v_eff(ratios, t) for t in pcfg.taus})


def perturbation_sweep(model: Model, trials, pcfg: PerturbationConfig, rng: Rng, top_k: int | None = None,
                       report: SpectrumReport | None = None) -> list[dict]:
    """Output point sets for random and eigenvector perturbations at each trial.

    Rows carry (trial, kind, index, x0, x1, ...), where kind is "base",
    "random" (α times a random unit vector from rng.split(j).split(1)),
    "eig+" or "eig-" (α times ± the index-th eigenvector).
    """
    if model.direction != Z_TO_X:
        raise ValueError("perturbation sweeps need a z->x model")
    trials, _ = _points(trials)
    n = trials.shape[0]
    top_k = n if top_k is None else min(top_k, n)
    rows = []

    def emit(j, kind, i, x):
        rows.append({"trial": j, "kind": kind, "index": i, **{f"x{d}": x[d] for d in range(x.shape[0])}})

    for j in range(trials.shape[1]):
        z = trials[:, j]
        vecs = report.eigenvectors[j] if report is not None else metric_spectrum(model, z)[1]
        emit(j, "base", 0, model(z[:, None])[:, 0])
        u = random_directions(rng.split(j).split(1), n, 1)[:, 0]
        emit(j, "random", 0, model((z + pcfg.alpha * u)[:, None])[:, 0])
        for i in range(top_k):
            emit(j, "eig+", i, model((z + pcfg.alpha * vecs[:, i])[:, None])[:, 0])
            emit(j, "eig-", i, model((z - pcfg.alpha * vecs[:, i])[:, None])[:, 0])
    return rows


def sweep_distances(rows: list[dict]) -> dict:
    """Mean output displacement of random vs top-eigenvector perturbations."""
    by = {}
    for r in rows:
        by[(r["trial"], r["kind"], r["index"])] = np.array([v for k, v in r.items() if k.startswith("x")])
    trials = sorted({k[0] for k in by})
    rand = [np.linalg.norm(by[(j, "random", 0)] - by[(j, "base", 0)]) for j in trials]
    top = [np.linalg.norm(by[(j, "eig+", 0)] - by[(j, "base", 0)]) for j in trials]
    return {"random": float(np.mean(rand)), "top_eigen": float(np.mean(top))}
