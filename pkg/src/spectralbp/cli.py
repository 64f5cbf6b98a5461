"""Command-line entry point: `spectralbp {estimate,train,analyze,replay}`.

Every run writes its data files and a manifest.json into the output
directory (--out, else $SPECTRALBP_OUTPUT_DIR/<subcommand>, else
./spectralbp-out/<subcommand>). Exit codes: 0 success, 2 usage error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (DegenerateGeneratorError, PerturbationConfig, ml_trajectory, perturbation_sweep,
                       spectrum_report, sweep_distances, trial_points)
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, dump_config, read_section, resolve
from .density import SingularJacobianError, explicit_metric
from .estimators import (DegenerateOperatorError, EstimatorConfig, LinearOperator, power_method,
                         stochastic_logdet_chebyshev, stochastic_logdet_taylor)
from .linalg import NotPositiveDefiniteError, Rng, cholesky_logdet, random_spd
from .models import LinearModel, Prior, model_from_config
from .training import (NonFiniteError, TrainingAborted, TrainingConfig, train, write_csv)

ENV_OUTPUT = "SPECTRALBP_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (TrainingAborted, NonFiniteError, DegenerateOperatorError, NotPositiveDefiniteError,
                    SingularJacobianError, DegenerateGeneratorError, FloatingPointError)


class UsageError(Exception):
    pass


@dataclass
class EstimateConfig:
    dim: int = 64
    kappa: float = 1000.0
    trials: int = 100
    m: int = 10
    p: int = 20
    t: int = 20
    g: float = 1.2
    eps_scale: float = 0.1          # eps = eps_scale * lambda_min (synthetic source)
    eps: float = 0.1                # used for the checkpoint source
    lam_min: float = 1.0
    spread: str = "loguniform"
    seed: int = 0
    checkpoint: str | None = None
    point: tuple | None = None


@dataclass
class AnalyzeConfig:
    checkpoint: str | None = None
    linear: tuple | None = None     # singular values of a synthetic diagonal generator
    trials: int = 12
    taus: tuple = (0.25, 0.5, 1.0, 2.0)
    alpha: float = 0.4
    mc_count: int = 256
    directions: str = "unit"
    steps: int = 1000
    step_size: float = 1e-2
    m: int = 5
    p: int = 20
    t: int = 20
    g: float = 1.1
    eps: float = 1e-4
    top_k: int = 2
    seed: int = 0


@dataclass
class RunManifest:
    subcommand: str
    task: str
    argv: list
    config: dict
    seed: int
    artifacts: list
    status: str = "ok"
    exit_code: int = 0
    error: str = ""
    wall_clock: float = 0.0
    started_at: str = ""
    git_revision: str = "unknown"
    version: str = __version__

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def git_revision() -> str:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# --- argument parsing -------------------------------------------------------------

def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_fields(p: argparse.ArgumentParser, cls, skip=()):
    # One flag per dataclass field; defaults stay None so file values survive.
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for name, f in hints.items():
        if name in skip:
            continue
        flag = "--" + name.replace("_", "-")
        kind = str(f.type)
        if "tuple" in kind:
            p.add_argument(flag, dest=name, type=_floats, default=None)
        elif "int" in kind and "float" not in kind:
            p.add_argument(flag, dest=name, type=int, default=None)
        elif "float" in kind:
            p.add_argument(flag, dest=name, type=float, default=None)
        else:
            p.add_argument(flag, dest=name, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectralbp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    est = sub.add_parser("estimate", help="benchmark the log-det estimators")
    common(est)
    _add_fields(est, EstimateConfig)

    tr = sub.add_parser("train", help="train a flow with a KL objective")
    common(tr)
    tr.add_argument("--dry-run", action="store_true", help="validate the config and write the manifest only")
    tr.add_argument("--plot-script", action="store_true", help="also write a matplotlib script for the CSVs")
    _add_fields(tr, TrainingConfig)

    an = sub.add_parser("analyze", help="latent-space analysis of a trained or synthetic generator")
    an.add_argument("task", choices=["spectrum", "trajectory", "veff", "sweep"])
    common(an)
    _add_fields(an, AnalyzeConfig)
    an.add_argument("--tau", dest="taus", type=_floats, default=None, help="alias of --taus")

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest", type=Path)
    rp.add_argument("--out", type=Path, default=None)
    return parser


def _flags(args, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls) if hasattr(args, f.name)}


def _resolve(args, section: str, cls):
    file_values = read_section(args.config, section, cls) if args.config else {}
    try:
        return resolve(cls, file_values, _flags(args, cls))
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def output_dir(args, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    base = os.environ.get(ENV_OUTPUT)
    return Path(base) / command if base else Path("spectralbp-out") / command


# --- subcommands -------------------------------------------------------------------

def cmd_estimate(cfg: EstimateConfig, out: Path) -> list[Path]:
    """CSV of exact vs Chebyshev and Taylor log-det estimates, one row per trial."""
    root = Rng(cfg.seed)
    rows, times = [], []
    if cfg.checkpoint is not None:
        model = _load_model(cfg.checkpoint)
        point = np.asarray(cfg.point if cfg.point is not None else np.zeros(model.dim_in), dtype=np.float64)
        if point.shape != (model.dim_in,):
            raise UsageError(f"--point needs {model.dim_in} coordinates")
        dense = explicit_metric(model, point)
        op = LinearOperator.dense(dense)
        est_cfg = EstimatorConfig(cfg.m, cfg.p, cfg.t, cfg.g, cfg.eps)
    elif cfg.dim < 1 or cfg.trials < 1:
        raise UsageError("dim and trials must be positive")
    for trial in range(cfg.trials):
        t0 = time.perf_counter()
        if cfg.checkpoint is None:
            a, lam = random_spd(root.split(0).split(trial), cfg.dim, cfg.kappa, cfg.lam_min, cfg.spread)
            op = LinearOperator.dense(a)
            est_cfg = EstimatorConfig(cfg.m, cfg.p, cfg.t, cfg.g, cfg.eps_scale * lam[-1])
            exact = float(cholesky_logdet(a))
        else:
            exact = float(cholesky_logdet(dense))
        r = root.split(1).split(trial)
        cheb = float(stochastic_logdet_chebyshev(op, est_cfg, r))
        tay = float(stochastic_logdet_taylor(op, est_cfg, r))
        lam_hat = float(power_method(op, est_cfg.t, r.split(0)))
        # Relative errors are undefined when ln det is (numerically) zero.
        denom = abs(exact) if abs(exact) > 1e-10 * max(1, op.dim) else float("nan")
        rows.append({"trial": trial, "exact_logdet": exact, "chebyshev": cheb, "taylor": tay,
                     "rel_err_chebyshev": (cheb - exact) / denom, "rel_err_taylor": (tay - exact) / denom,
                     "abs_err_chebyshev": cheb - exact, "abs_err_taylor": tay - exact, "lambda_max": lam_hat})
        times.append({"trial": trial, "wall_time": time.perf_counter() - t0})
    cols = ("trial", "exact_logdet", "chebyshev", "taylor", "rel_err_chebyshev", "rel_err_taylor",
            "abs_err_chebyshev", "abs_err_taylor", "lambda_max")
    main = write_csv(out / "estimate.csv", cols, rows)
    # Wall times vary run to run, so they live apart from the data file.
    timing = write_csv(out / "timings.csv", ("trial", "wall_time"), times)
    errs = np.abs([r["rel_err_chebyshev"] for r in rows])
    finite = errs[np.isfinite(errs)]
    summary = {"trials": cfg.trials,
               "mean_abs_rel_err_chebyshev": _num(np.mean(finite)) if finite.size else None,
               "frac_below_030": _num(np.mean(finite < 0.30)) if finite.size else None,
               "mean_abs_err_chebyshev": _num(np.mean(np.abs([r["abs_err_chebyshev"] for r in rows])))}
    summ = _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return [main, summ, timing]


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    store, meta = load_checkpoint(path)
    if "model" not in meta:
        raise UsageError(f"checkpoint {path} has no model description")
    return model_from_config(meta["model"], store)


def cmd_train(cfg: TrainingConfig, out: Path, plot_script: bool = False) -> list[Path]:
    res = train(cfg, out, log=lambda msg: print(msg, flush=True))
    paths = list(res.artifacts) + list(res.checkpoints)
    if plot_script:
        paths.append(_plot_script(out, cfg.epochs))
    return paths


def _plot_script(out: Path, epochs: int) -> Path:
    text = f'''"""Companion plots for a training run (needs matplotlib)."""
import csv
import matplotlib.pyplot as plt

def read(name):
    with open(name) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}}

m = read("metrics.csv")
fig, ax = plt.subplots(1, 3, figsize=(12, 3.5))
ax[0].plot(m["iteration"], m["loss"]); ax[0].set_title("loss")
ax[1].plot(m["iteration"], m["rel_error"]); ax[1].set_title("ln l_hat - ln l")
s = read("samples_epoch{epochs}.csv")
ax[2].scatter(s["x"], s["y"], s=2); ax[2].set_title("samples")
fig.tight_layout()
fig.savefig("training.png", dpi=120)
'''
    path = out / "plot_training.py"
    path.write_text(text)
    return path


def _analysis_model(cfg: AnalyzeConfig):
    if cfg.checkpoint is not None and cfg.linear is not None:
        raise UsageError("give either --checkpoint or --linear, not both")
    if cfg.linear is not None:
        s = np.asarray(cfg.linear, dtype=np.float64)
        return LinearModel(np.diag(s), prior=Prior(s.size))
    if cfg.checkpoint is None:
        raise UsageError("analyze needs --checkpoint or --linear")
    return _load_model(cfg.checkpoint)


def cmd_analyze(task: str, cfg: AnalyzeConfig, out: Path) -> list[Path]:
    model = _analysis_model(cfg)
    if model.direction != "z->x":
        raise UsageError("analysis needs a z->x (generator) model")
    root = Rng(cfg.seed)
    try:
        pcfg = PerturbationConfig(cfg.alpha, cfg.trials, cfg.taus, cfg.mc_count, cfg.directions)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    trials = trial_points(model, pcfg, root.split(0))
    paths = []
    if task in ("spectrum", "veff", "sweep"):
        rep = spectrum_report(model, trials, pcfg, root.split(1))
        paths.append(write_csv(out / "spectrum.csv", ("trial", "index", "eigenvalue", "delta0", "delta0_se", "delta"),
                               rep.rows()))
        summary = rep.summary()
        if task == "sweep":
            rows = perturbation_sweep(model, trials, pcfg, root.split(2), cfg.top_k, rep)
            cols = ("trial", "kind", "index") + tuple(f"x{d}" for d in range(model.dim_out))
            paths.append(write_csv(out / "sweep.csv", cols, rows))
            summary["displacement"] = sweep_distances(rows)
        if task == "veff":
            vals = [rep.v_eff[t] for t in pcfg.taus]
            summary["non_increasing"] = bool(all(a >= b for a, b in zip(vals, vals[1:])))
        paths.append(_write_json(out / f"{task}.json", summary))
        print(json.dumps(summary, sort_keys=True))
    elif task == "trajectory":
        est = EstimatorConfig(cfg.m, cfg.p, cfg.t, cfg.g, cfg.eps)
        tr = ml_trajectory(model, trials, cfg.steps, cfg.step_size, est, root.split(3))
        rows = []
        for i in range(tr.z.shape[0]):
            for j in range(tr.z.shape[2]):
                rows.append({"step": i, "trial": j, "log_q": tr.log_q[i, j], "exact_log_q": tr.exact_log_q[i, j],
                             **{f"z{d}": tr.z[i, d, j] for d in range(tr.z.shape[1])}})
        cols = ("step", "trial", "log_q", "exact_log_q") + tuple(f"z{d}" for d in range(tr.z.shape[1]))
        paths.append(write_csv(out / "trajectory.csv", cols, rows))
        summary = {"steps": tr.steps, "truncated": tr.truncated, "message": tr.message,
                   "log_ratio": tr.log_ratio.tolist(),
                   "lambda_init": tr.lambda_init.T.tolist(), "lambda_final": tr.lambda_final.T.tolist(),
                   "condition_init": tr.condition_init.tolist(), "condition_final": tr.condition_final.tolist()}
        paths.append(_write_json(out / "trajectory.json", summary))
        print(json.dumps({k: summary[k] for k in ("steps", "truncated", "log_ratio")}))
        if tr.truncated:
            raise NonFiniteError(tr.message)
    return paths


# --- driver ----------------------------------------------------------------------

def _dispatch(args, out: Path, manifest: RunManifest) -> list[Path]:
    if args.command == "estimate":
        cfg = _resolve(args, "estimate", EstimateConfig)
        section, run = "estimate", lambda: cmd_estimate(cfg, out)
    elif args.command == "train":
        cfg = _resolve(args, "train", TrainingConfig)
        section, run = "train", lambda: cmd_train(cfg, out, args.plot_script)
    else:
        cfg = _resolve(args, "analyze", AnalyzeConfig)
        section, run = "analyze", lambda: cmd_analyze(args.task, cfg, out)
    manifest.config = cfg.resolved() if hasattr(cfg, "resolved") else dataclasses.asdict(cfg)
    manifest.seed = cfg.seed
    if args.dump_config:
        print(dump_config(section, cfg), end="")
        return []
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(section, cfg))
    if getattr(args, "dry_run", False):
        return [out / "config.txt"]
    return [out / "config.txt"] + run()


def _strip_out(argv: list[str]) -> list[str]:
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "replay":
        return replay(args.manifest, args.out)
    out = output_dir(args, args.command)
    manifest = RunManifest(args.command, getattr(args, "task", ""), _strip_out(argv), {}, 0, [],
                           started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"), git_revision=git_revision())
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        paths = _dispatch(args, out, manifest)
        manifest.artifacts = sorted(str(Path(p).relative_to(out)) for p in paths)
    except (UsageError, ConfigError, CheckpointError) as exc:
        code, manifest.status, manifest.error = EXIT_USAGE, "usage-error", str(exc)
        print(f"spectralbp: error: {exc}", file=sys.stderr)
    except NUMERICAL_ERRORS as exc:
        code, manifest.status, manifest.error = EXIT_NUMERICAL, "numerical-failure", str(exc)
        print(f"spectralbp: numerical failure: {exc}", file=sys.stderr)
    manifest.exit_code = code
    manifest.wall_clock = time.perf_counter() - t0
    if not args.dump_config:
        out.mkdir(parents=True, exist_ok=True)
        manifest.write(out)
    return code


def replay(manifest_path: Path, out: Path | None = None) -> int:
    """Re-run a recorded command into `out` (default: <manifest dir>/replay).

    The resolved config snapshot (config.txt next to the manifest) drives the
    re-run, so it does not depend on the original config file or flags.
    """
    manifest_path = Path(manifest_path)
    snapshot = manifest_path.parent / "config.txt"
    if not manifest_path.exists() or not snapshot.exists():
        print(f"spectralbp: error: {manifest_path} or its config.txt does not exist", file=sys.stderr)
        return EXIT_USAGE
    data = json.loads(manifest_path.read_text())
    argv = [data["subcommand"]] + ([data["task"]] if data.get("task") else [])
    argv += ["--config", str(snapshot), "--out", str(out or manifest_path.parent / "replay")]
    argv += [a for a in data["argv"] if a in ("--dry-run", "--plot-script")]
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
