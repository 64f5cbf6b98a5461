"""KL objectives, Adam, and the training loop for the 2D experiments.

Reverse KL trains a z->x model against an unnormalized energy,

    loss = E_z[ln Q(f(z)) - ln p(f(z))] + rho E_z[lambda_max(M_f(z))],

and forward KL trains an x->z model on samples, loss = -E_x[ln Q(x)].
ln Q always comes from the seeded Chebyshev estimator; the exact value is
computed alongside for monitoring only.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Node, Program, constant, ops, vjp
from .checkpoint import save_checkpoint
from .density import exact_log_likelihood, explicit_metric, log_likelihood
from .energies import Energy, get_energy
from .estimators import EstimatorConfig, draw_probes, draw_start
from .linalg import Rng
from .models import X_TO_Z, Z_TO_X, Model, Prior, ResidualFlow

REVERSE_KL = "reverse-kl"
FORWARD_KL = "forward-kl"
METRIC_COLUMNS = ("iteration", "epoch", "loss", "est_logdet", "exact_logdet", "rel_error",
                  "abs_rel_error", "lambda_max", "penalty")
EPOCH_COLUMNS = ("epoch", "mean_loss", "heldout_nll", "sample_mean_norm", "frac_within_030")
# Wall times vary run to run, so they go to timings.csv rather than epochs.csv.
TIMING_COLUMNS = ("epoch", "wall_time")
PENALIZED_ENERGIES = ("u3", "u4")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, iteration: int, checkpoint: Path | None):
        super().__init__(message)
        self.iteration, self.checkpoint = iteration, checkpoint


# --- objectives ----------------------------------------------------------------

@dataclass
class LossTerms:
    loss: Node
    penalty: Node
    likelihood: object              # density.Likelihood
    log_target: Node | None = None


def _check_direction(model: Model, want: str, objective: str):
    if model.direction != want:
        raise ValueError(f"{objective} needs a {want} model, got {model.direction}")


def reverse_kl_loss(model: Model, energy: Energy, z, cfg: EstimatorConfig, rng: Rng | None = None, *,
                    rho: float = 0.0, params=None, start=None, probes=None) -> LossTerms:
    """Mean over the batch of ln Q(f(z)) - ln p(f(z)), plus rho * mean lambda_max."""
    _check_direction(model, Z_TO_X, REVERSE_KL)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    lik = log_likelihood(model, z, cfg, rng, params=params, start=start, probes=probes)
    log_p = energy.log_density(lik.output)
    penalty = ops.scale(ops.mean(lik.lambda_max), rho)
    loss = ops.add(ops.mean(ops.sub(lik.loglik, log_p)), penalty)
    return LossTerms(loss, penalty, lik, log_p)


def forward_kl_loss(model: Model, x, cfg: EstimatorConfig, rng: Rng | None = None, *,
                    rho: float = 0.0, params=None, start=None, probes=None) -> LossTerms:
    """Mean negative log-likelihood of data x, plus rho * mean lambda_max."""
    _check_direction(model, X_TO_Z, FORWARD_KL)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    lik = log_likelihood(model, x, cfg, rng, params=params, start=start, probes=probes)
    penalty = ops.scale(ops.mean(lik.lambda_max), rho)
    loss = ops.add(ops.scale(ops.mean(lik.loglik), -1.0), penalty)
    return LossTerms(loss, penalty, lik)


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, theta, grad) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update on a flat parameter vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteError(f"non-finite gradient in {bad.size} entries (first at index {bad[0]})")
    m = np.zeros_like(theta) if state.m is None else state.m
    v = np.zeros_like(theta) if state.v is None else state.v
    step = state.step + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m, v)
    return new, theta


# --- configuration -------------------------------------------------------------

@dataclass
class TrainingConfig:
    objective: str = REVERSE_KL
    energy: str = "u1"
    batch_size: int = 64
    iterations: int = 5000          # per epoch
    epochs: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m: int = 10
    p: int = 20
    t: int = 20
    g: float = 1.2
    eps: float | None = None        # None: 0.1 for reverse KL, 1e-2 for forward KL
    rho: float | None = None        # None: 8e-2 for u3/u4, else 0
    power_grad: str = "rayleigh"    # see EstimatorConfig; "full" gives heavy-tailed gradients here
    hidden: int = 32
    blocks: int = 4
    seed: int = 0
    monitor_every: int = 1
    heldout_size: int = 1024
    grid_size: int = 200
    grid_extent: float = 4.0
    scatter_samples: int = 1024

    def __post_init__(self):
        if self.objective not in (REVERSE_KL, FORWARD_KL):
            raise ValueError(f"unknown objective {self.objective!r}")
        get_energy(self.energy)
        for name in ("batch_size", "iterations", "epochs", "m", "p", "t", "hidden", "blocks",
                     "monitor_every", "heldout_size", "grid_size", "scatter_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        self.estimator()
        if self.lr <= 0 or self.grid_extent <= 0:
            raise ValueError("lr and grid_extent must be positive")
        if self.objective == FORWARD_KL and not get_energy(self.energy).can_sample:
            raise ValueError(f"forward KL needs a sampleable energy, {self.energy!r} has no sampler")

    @property
    def resolved_eps(self) -> float:
        if self.eps is not None:
            return self.eps
        return 0.1 if self.objective == REVERSE_KL else 1e-2

    @property
    def resolved_rho(self) -> float:
        if self.rho is not None:
            return self.rho
        return 8e-2 if self.energy.lower() in PENALIZED_ENERGIES else 0.0

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(m=self.m, p=self.p, t=self.t, g=self.g, eps=self.resolved_eps,
                               power_grad=self.power_grad)

    def resolved(self) -> dict:
        d = asdict(self)
        d["eps"], d["rho"] = self.resolved_eps, self.resolved_rho
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def build_model(cfg: TrainingConfig, rng: Rng) -> ResidualFlow:
    direction = Z_TO_X if cfg.objective == REVERSE_KL else X_TO_Z
    return ResidualFlow.init(rng, 2, cfg.hidden, cfg.blocks, direction, Prior(2))


# --- compiled step -------------------------------------------------------------

class CompiledStep:
    """Loss, monitoring values and parameter gradient for fixed batch shapes.

    The graph is recorded once and replayed with new parameters, points,
    start vectors and probes, which is what makes long runs affordable.
    """

    def __init__(self, model: Model, cfg: TrainingConfig, energy: Energy, point: np.ndarray,
                 start: np.ndarray, probes: np.ndarray):
        params = model.bind()
        self.names = model.params.names()
        self.shapes = [model.params[k].shape for k in self.names]
        leaves = [constant(point), constant(start), constant(probes)]
        est = cfg.estimator()
        if cfg.objective == REVERSE_KL:
            terms = reverse_kl_loss(model, energy, leaves[0], est, rho=cfg.resolved_rho, params=params,
                                    start=leaves[1], probes=leaves[2])
        else:
            terms = forward_kl_loss(model, leaves[0], est, rho=cfg.resolved_rho, params=params,
                                    start=leaves[1], probes=leaves[2])
        lik = terms.likelihood
        grads = vjp(terms.loss, [params[k] for k in self.names])
        outputs = [terms.loss, terms.penalty, lik.logdet, lik.lambda_max, lik.operator.jacobian,
                   lik.log_prior, lik.output] + grads
        self.program = Program(outputs, [params[k] for k in self.names] + leaves)
        self.sign = -0.5 if model.direction == Z_TO_X else 0.5

    def __call__(self, theta: list[np.ndarray], point, start, probes) -> dict:
        out = self.program(*theta, point, start, probes)
        loss, penalty, logdet, lam, jac, log_prior, output = out[:7]
        grad = np.concatenate([np.ravel(g) for g in out[7:]])
        return {"loss": float(loss), "penalty": float(penalty), "logdet": logdet, "lambda_max": lam,
                "jacobian": jac, "log_prior": log_prior, "output": output, "grad": grad}


def exact_logdet_from_jacobian(jac: np.ndarray) -> np.ndarray:
    """ln det(J^T J) per batch point from J laid out (n_out, *batch, n_in)."""
    M = np.einsum("i...k,i...l->...kl", jac, jac)
    sign, logdet = np.linalg.slogdet(M)
    return np.where(sign > 0, logdet, np.nan)


# --- sampling and grids ----------------------------------------------------------

def evaluation_grid(size: int = 200, extent: float = 4.0) -> np.ndarray:
    """Cell-centre grid over [-extent, extent]^2 as (2, size*size), x fastest."""
    h = 2 * extent / size
    axis = -extent + h * (np.arange(size) + 0.5)
    gx, gy = np.meshgrid(axis, axis)
    return np.stack([gx.ravel(), gy.ravel()])


def model_log_density_grid(model: Model, grid: np.ndarray) -> np.ndarray:
    """Exact ln Q(x) at grid points. For z->x models this needs an x->z map, so
    only x->z models are supported."""
    if model.direction != X_TO_Z:
        raise ValueError("grid densities need an x->z model")
    with np.errstate(all="ignore"):
        M = explicit_metric(model, grid)
        sign, logdet = np.linalg.slogdet(M)
        logdet = np.where(sign > 0, logdet, -np.inf)
        return model.prior.log_density_np(model(grid)) + 0.5 * logdet


def sample_model(model: Model, rng: Rng, n: int, size: int = 200, extent: float = 4.0) -> np.ndarray:
    """Draw n points from Q.

    z->x models push prior samples through f. x->z models have no inverse, so
    Q is discretized on a size x size grid over [-extent, extent]^2, a cell is
    chosen with probability proportional to its (renormalized) mass, and the
    point is placed uniformly inside the cell.
    """
    if model.direction == Z_TO_X:
        return model(model.prior.sample(rng, n))
    grid = evaluation_grid(size, extent)
    logq = model_log_density_grid(model, grid)
    w = np.exp(logq - np.max(logq[np.isfinite(logq)]))
    w = np.where(np.isfinite(w), w, 0.0)
    idx = rng.split(0).generator().choice(grid.shape[1], size=n, p=w / w.sum())
    h = 2 * extent / size
    return grid[:, idx] + rng.split(1).uniform((2, n), -h / 2, h / 2)


def nearest_mode_counts(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = np.sum((samples[:, :, None] - centers[:, None, :]) ** 2, axis=0)
    return np.bincount(np.argmin(d, axis=1), minlength=centers.shape[1])


# --- loop ----------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: Model
    config: TrainingConfig
    metrics: list[dict]
    epochs: list[dict]
    checkpoints: list[Path] = field(default_factory=list)
    artifacts: list[Path] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.metrics], dtype=np.float64)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, columns, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) if not isinstance(row[c], str) else row[c] for c in columns])
    return path


def _split(theta: np.ndarray, shapes) -> list[np.ndarray]:
    out, k = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(theta[k:k + size].reshape(shape))
        k += size
    return out


def _batch(cfg: TrainingConfig, model: Model, energy: Energy, rng: Rng) -> np.ndarray:
    if cfg.objective == REVERSE_KL:
        return model.prior.sample(rng, cfg.batch_size)
    return energy.sample(rng, cfg.batch_size)


def heldout_nll(model: Model, x: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        return float(-np.mean(exact_log_likelihood(model, x)))


def train(cfg: TrainingConfig, output_dir=None, *, model: Model | None = None, log=None) -> TrainingResult:
    """Run the configured experiment; a pure function of `cfg` (and `model`).

    Streams of Rng(cfg.seed): 0 init, 1 batches, 2 estimator draws, 3 held-out
    data, 4 evaluation samples. With an output directory, writes metrics.csv,
    epochs.csv, one checkpoint per epoch, and per-epoch contour and sample CSVs.
    """
    root = Rng(cfg.seed)
    energy = get_energy(cfg.energy)
    model = model or build_model(cfg, root.split(0))
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n, B = model.dim_in, cfg.batch_size
    batch_rng, est_rng = root.split(1), root.split(2)

    def draws(i):
        r = est_rng.split(i)
        return draw_start(r.split(0), n, (B,)), draw_probes(r.split(1), n, (B,), cfg.p)

    point0 = _batch(cfg, model, energy, batch_rng.split(0))
    step = CompiledStep(model, cfg, energy, point0, *draws(0))
    heldout = energy.sample(root.split(3), cfg.heldout_size) if cfg.objective == FORWARD_KL else None
    grid = evaluation_grid(cfg.grid_size, cfg.grid_extent)
    result = TrainingResult(model, cfg, [], [])
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    theta = model.params.flatten()
    meta = {"config": cfg.resolved(), "model": model.config()}
    if heldout is not None:
        result.epochs.append({"epoch": 0, "mean_loss": math.nan, "heldout_nll": heldout_nll(model, heldout),
                              "sample_mean_norm": math.nan, "frac_within_030": math.nan, "wall_time": 0.0})

    it = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses, within = [], []
        for _ in range(cfg.iterations):
            point = point0 if it == 0 else _batch(cfg, model, energy, batch_rng.split(it))
            start, probes = draws(it)
            vals = step(_split(theta, step.shapes), point, start, probes)
            row = {"iteration": it, "epoch": epoch, "loss": vals["loss"], "penalty": vals["penalty"],
                   "est_logdet": float(np.mean(vals["logdet"])), "lambda_max": float(np.mean(vals["lambda_max"]))}
            if it % cfg.monitor_every == 0:
                with np.errstate(all="ignore"):
                    exact = exact_logdet_from_jacobian(vals["jacobian"])
                diff = step.sign * (vals["logdet"] - exact)     # ln l_hat - ln l per sample
                row.update(exact_logdet=float(np.mean(exact)), rel_error=float(np.mean(diff)),
                           abs_rel_error=float(np.mean(np.abs(diff))))
                within.append(row["abs_rel_error"] < 0.30)
            else:
                row.update(exact_logdet=math.nan, rel_error=math.nan, abs_rel_error=math.nan)
            result.metrics.append(row)
            try:
                if not math.isfinite(vals["loss"]):
                    raise NonFiniteError(f"loss is {vals['loss']} at iteration {it}")
                adam, theta = adam_step(adam, theta, vals["grad"])
            except NonFiniteError as exc:
                last = result.checkpoints[-1] if result.checkpoints else None
                if out is not None:
                    write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
                    write_csv(out / "epochs.csv", EPOCH_COLUMNS, result.epochs)
                raise TrainingAborted(f"aborted at iteration {it}: {exc}", it, last) from exc
            losses.append(vals["loss"])
            it += 1
        model.params = model.params.unflatten(theta)
        summary = _epoch_summary(cfg, model, root, epoch, losses, within, heldout, time.perf_counter() - t0)
        result.epochs.append(summary)
        if log is not None:
            log(f"epoch {epoch}: mean loss {summary['mean_loss']:.4f}")
        if out is not None:
            ck = save_checkpoint(out / f"checkpoint_epoch{epoch}.ckpt", model.params, {**meta, "epoch": epoch})
            result.checkpoints.append(ck)
            result.artifacts += _write_epoch_artifacts(out, epoch, cfg, model, energy, grid, root)
    if out is not None:
        result.artifacts.append(write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics))
        result.artifacts.append(write_csv(out / "epochs.csv", EPOCH_COLUMNS, result.epochs))
        result.artifacts.append(write_csv(out / "timings.csv", TIMING_COLUMNS, result.epochs))
    return result


def _epoch_summary(cfg, model, root, epoch, losses, within, heldout, wall) -> dict:
    samples = sample_model(model, root.split(4).split(epoch), cfg.scatter_samples, cfg.grid_size, cfg.grid_extent)
    return {
        "epoch": epoch,
        "mean_loss": float(np.mean(losses)),
        "heldout_nll": heldout_nll(model, heldout) if heldout is not None else math.nan,
        "sample_mean_norm": float(np.linalg.norm(np.mean(samples, axis=1))),
        "frac_within_030": float(np.mean(within)) if within else math.nan,
        "wall_time": wall,
    }


def _write_epoch_artifacts(out: Path, epoch: int, cfg, model, energy, grid, root) -> list[Path]:
    with np.errstate(all="ignore"):
        log_p = energy.log_density_np(grid)
        if model.direction == X_TO_Z:
            log_q = model_log_density_grid(model, grid)
        else:
            log_q = np.full(grid.shape[1], math.nan)
    rows = [{"x": grid[0, i], "y": grid[1, i], "log_q": log_q[i], "log_p": log_p[i]} for i in range(grid.shape[1])]
    contour = write_csv(out / f"contour_epoch{epoch}.csv", ("x", "y", "log_q", "log_p"), rows)
    samples = sample_model(model, root.split(4).split(epoch), cfg.scatter_samples, cfg.grid_size, cfg.grid_extent)
    srows = [{"x": samples[0, i], "y": samples[1, i]} for i in range(samples.shape[1])]
    scatter = write_csv(out / f"samples_epoch{epoch}.csv", ("x", "y"), srows)
    return [contour, scatter]
