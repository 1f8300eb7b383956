"""Ensemble experiments, speed-up tables, the verification suite and file output.

Trajectories are split into fixed-size batches by index. Batches are the unit
of parallel work and are merged in index order, so the merged result does
not depend on the number of workers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .analytics import (
    constants,
    feedback_impurity_bound,
    mean_impurity_unassisted,
    sech_integral,
    speedup_lower_bound,
    speedup_lower_bound_log,
    two_level_bound_L2,
    verify_lemma1,
    closed_form_state,
    closed_form_state_expm,
)
from .core import build_observable, maximally_mixed
from .errors import NumericalError, ValidationError
from .feedback import PermutationSearch, frame_observable, simulate_feedback_batch
from .sme import CounterNoise, SmeConfig, simulate_batch

log = logging.getLogger(__name__)

__all__ = [
    "BATCH_SIZE",
    "CURVE_COLUMNS",
    "FIGURE1_COLUMNS",
    "ExperimentConfig",
    "EnsembleSummary",
    "load_config",
    "worker_count",
    "run_ensemble",
    "figure1_data",
    "verify_suite",
    "write_curves_csv",
    "write_summary_json",
    "write_figure1_csv",
    "plot_curves",
]

BATCH_SIZE = 1024
MAX_FAILURE_FRACTION = 0.01
CSV_SCHEMA = "qpurify-curves/1"
CURVE_COLUMNS = ("t", "mean_L", "stderr_L", "bound_L")
FIGURE1_COLUMNS = ("N", "L_target", "t_m", "t_fb", "speedup_lower", "asymptotic_limit")
VERSION = f"v{__version__}"


@dataclass(frozen=True)
class ExperimentConfig:
    N: int = 2
    gamma: float = 1.0
    dt: float = 1e-4
    t_final: float = 5.0
    n_trajectories: int = 100
    master_seed: int = 0
    mode: str = "unassisted"
    permutation_mode: str = "exhaustive"
    output_path: str = "results.csv"
    thinning: int = 100

    def __post_init__(self) -> None:
        if int(self.N) != self.N or self.N < 2:
            raise ValidationError(f"N must be an integer >= 2, got {self.N}")
        for name in ("gamma", "dt", "t_final"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.n_trajectories < 1:
            raise ValidationError("n_trajectories must be >= 1")
        if self.thinning < 1:
            raise ValidationError("thinning must be >= 1")
        if self.master_seed < 0:
            raise ValidationError("master_seed must be non-negative")
        if self.mode not in ("unassisted", "feedback"):
            raise ValidationError(f"mode must be 'unassisted' or 'feedback', got {self.mode!r}")
        if self.permutation_mode not in ("exhaustive", "greedy"):
            raise ValidationError("permutation_mode must be 'exhaustive' or 'greedy'")
        # reuse the integrator's guards (stability, t_final >= dt)
        self.sme_config()

    def sme_config(self, trajectory_index: int = 0) -> SmeConfig:
        return SmeConfig(
            gamma=self.gamma,
            dt=self.dt,
            t_final=self.t_final,
            master_seed=self.master_seed,
            trajectory_index=trajectory_index,
        )

    @property
    def n_steps(self) -> int:
        return self.sme_config().n_steps


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a flat ``key: value`` file; non-None ``overrides`` win."""
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: expected a flat key/value mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def worker_count(requested: Optional[int] = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("QPURIFY_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@dataclass
class EnsembleSummary:
    config: ExperimentConfig
    times: np.ndarray
    mean_impurity: np.ndarray
    stderr_impurity: np.ndarray
    final_v: np.ndarray
    feedback_bound: np.ndarray
    two_level_bound: np.ndarray
    n_ok: int
    failures: dict = field(default_factory=dict)
    analytic_mean: Optional[np.ndarray] = None
    rate_checks: int = 0
    rate_violations: int = 0
    worst_rate_margin: Optional[float] = None
    initial_impurity: float = 0.0

    @property
    def bound_curve(self) -> np.ndarray:
        return self.feedback_bound if self.config.mode == "feedback" else self.two_level_bound

    def to_dict(self) -> dict:
        out = {
            "version": VERSION,
            "csv_schema": CSV_SCHEMA,
            "config": asdict(self.config),
            "n_trajectories": self.config.n_trajectories,
            "n_ok": self.n_ok,
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
            "initial_impurity": self.initial_impurity,
            "final_mean_impurity": float(self.mean_impurity[-1]),
            "final_stderr_impurity": float(self.stderr_impurity[-1]),
            "final_v": [float(v) for v in self.final_v],
        }
        if self.config.mode == "feedback":
            out["rate_guarantee"] = {
                "checks": self.rate_checks,
                "violations": self.rate_violations,
                "worst_margin": self.worst_rate_margin,
            }
        return out


def _run_batch(cfg: ExperimentConfig, indices: Sequence[int]):
    X = build_observable(cfg.N)
    noise = CounterNoise(cfg.master_seed, indices, cfg.dt)
    rho0 = np.asarray(maximally_mixed(cfg.N))
    if cfg.mode == "unassisted":
        res = simulate_batch(rho0, X, cfg.gamma, cfg.dt, cfg.n_steps, noise, record_every=cfg.thinning)
        extra = (0, 0, -math.inf)
    else:
        res = simulate_feedback_batch(
            rho0, X, cfg.gamma, cfg.dt, cfg.n_steps, noise,
            mode=cfg.permutation_mode, record_every=cfg.thinning,
        )
        extra = (res.rate_checks, res.rate_violations, res.worst_rate_margin)
    failures = {indices[b]: msg for b, msg in res.failures.items()}
    return res.record_times, res.impurities, res.final_v, failures, extra


def _batches(n: int) -> list:
    return [list(range(s, min(n, s + BATCH_SIZE))) for s in range(0, n, BATCH_SIZE)]


def run_ensemble(cfg: ExperimentConfig, workers: Optional[int] = None) -> EnsembleSummary:
    """Run ``cfg.n_trajectories`` independent trajectories and summarise them.

    Raises :class:`NumericalError` when more than 1% of trajectories fail.
    """
    batches = _batches(cfg.n_trajectories)
    n_workers = min(worker_count(workers), len(batches))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_batch, [cfg] * len(batches), batches))
    else:
        results = [_run_batch(cfg, b) for b in batches]

    times = results[0][0]
    L = np.concatenate([r[1] for r in results], axis=0)
    final_v = np.concatenate([r[2] for r in results])
    failures: dict = {}
    for r in results:
        failures.update(r[3])
    checks = sum(r[4][0] for r in results)
    violations = sum(r[4][1] for r in results)
    worst = max(r[4][2] for r in results)

    if len(failures) > MAX_FAILURE_FRACTION * cfg.n_trajectories:
        raise NumericalError(
            f"{len(failures)} of {cfg.n_trajectories} trajectories failed; first: "
            f"{min(failures)}: {failures[min(failures)]}"
        )
    for idx in sorted(failures):
        log.warning("trajectory %d failed: %s", idx, failures[idx])

    ok = np.array([i not in failures for i in range(cfg.n_trajectories)])
    Lok = L[ok]
    n_ok = int(ok.sum())
    mean = Lok.mean(axis=0)
    stderr = Lok.std(axis=0, ddof=1) / math.sqrt(n_ok) if n_ok > 1 else np.zeros_like(mean)

    L0 = 1.0 - 1.0 / cfg.N
    fb = feedback_impurity_bound(times, cfg.N, cfg.gamma, L0)
    l2 = np.array([two_level_bound_L2(t, cfg.N, cfg.gamma) for t in times])
    analytic = None
    if cfg.mode == "unassisted":
        analytic = np.array([mean_impurity_unassisted(t, cfg.N, cfg.gamma) for t in times])
    return EnsembleSummary(
        config=cfg,
        times=times,
        mean_impurity=mean,
        stderr_impurity=stderr,
        final_v=np.where(ok, final_v, np.nan),
        feedback_bound=fb,
        two_level_bound=l2,
        n_ok=n_ok,
        failures=failures,
        analytic_mean=analytic,
        rate_checks=checks,
        rate_violations=violations,
        worst_rate_margin=worst if cfg.mode == "feedback" else None,
        initial_impurity=L0,
    )


# -- speed-up table -----------------------------------------------------------------


def default_targets() -> np.ndarray:
    return np.logspace(-10, math.log10(0.45), 60)


def figure1_data(N_list: Iterable[int], L_targets: Iterable[float], gamma: float = 1.0) -> list:
    """Rows (N, L_target, t_m, t_fb, speedup_lower, asymptotic_limit)."""
    rows = []
    for N in N_list:
        for L in L_targets:
            r = speedup_lower_bound(float(L), int(N), gamma)
            rows.append((r.N, r.L_target, r.t_m, r.t_fb, r.speedup_lower, r.asymptotic_speedup))
    return rows


# -- verification suite ------------------------------------------------------------


def _check(name: str, passed: bool, **detail) -> dict:
    out = {k: _jsonable(v) for k, v in detail.items()}
    out.update(name=name, passed=bool(passed))
    return out


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def verify_suite(N_max: int = 4, gamma: float = 1.0, *, k_override: Optional[float] = None) -> dict:
    """Run the analytic verifiers and return a machine-readable report.

    ``k_override`` substitutes the rate constant everywhere it is used; it
    exists so that the suite can be shown to fail on a wrong k.
    """
    if not 2 <= N_max <= 5:
        raise ValidationError("N_max must be between 2 and 5")
    checks = []
    rng = np.random.default_rng(12345)

    for N in range(2, 9):
        X = build_observable(N)
        c = constants(N, gamma)
        k = c.k if k_override is None else k_override
        trX2_sum = float(np.sum(X.spectrum**2))
        checks.append(_check(
            f"constants N={N}",
            abs(c.trX2 - trX2_sum) <= 1e-12
            and abs(np.trace(np.asarray(X)).real) <= 1e-14
            and np.allclose(np.diff(X.spectrum), 1.0 / N, atol=1e-14, rtol=0)
            and abs(8 * N * N * k - 2 * (N + 1) / 3) <= 1e-12,
            trX2=c.trX2, k=k,
        ))

    for N in range(2, N_max + 1):
        rep = verify_lemma1(N, trials=50, seed=N, random_frames=10, k_override=k_override)
        detail = {k: v for k, v in rep.as_dict().items() if k != "passed"}
        checks.append(_check(f"lemma1 N={N}", rep.passed, **detail))

        X = build_observable(N)
        search = PermutationSearch(frame_observable(X), "exhaustive")
        k = constants(N, gamma).k if k_override is None else k_override
        lam = rng.dirichlet(np.ones(N), size=200)
        _, q = search.choose(lam)
        L = 1.0 - np.sum(lam * lam, axis=1)
        margin = float(np.max(-8 * gamma * q + 8 * gamma * k * L))
        checks.append(_check(f"best permutation rate guarantee N={N}", margin <= 1e-9 * gamma, worst_margin=margin))

        XF = frame_observable(X)
        checks.append(_check(
            f"Fourier frame unbiased N={N}", np.max(np.abs(np.diag(XF))) <= 1e-12,
            max_diag=float(np.max(np.abs(np.diag(XF)))),
        ))

        worst = 0.0
        for _ in range(10):
            t, v = rng.uniform(0.01, 5.0), rng.uniform(-0.5, 0.5)
            a = np.asarray(closed_form_state(t, v, X, gamma))
            b = np.asarray(closed_form_state_expm(t, v, X, gamma))
            worst = max(worst, float(np.max(np.abs(a - b))))
        checks.append(_check(f"closed-form state consistency N={N}", worst <= 1e-12, max_abs_diff=worst))

        C = sech_integral(N, gamma)
        checks.append(_check(
            f"sech integral N={N}", abs(C - constants(N, gamma).C) <= 1e-10, C=C,
        ))

        if N >= 3:
            ts = [0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0]
            gaps = [mean_impurity_unassisted(t, N, gamma) - two_level_bound_L2(t, N, gamma) for t in ts]
            checks.append(_check(f"L2 below unassisted mean N={N}", min(gaps) >= 0, min_gap=min(gaps)))
        else:
            ts = [0.1, 1.0, 5.0]
            d = max(abs(mean_impurity_unassisted(t, 2, gamma) - two_level_bound_L2(t, 2, gamma)) for t in ts)
            checks.append(_check("N=2 unassisted mean equals L2", d <= 1e-10, max_abs_diff=d))

        k = constants(N, gamma).k if k_override is None else k_override
        rep = speedup_lower_bound_log(-1e5, N, gamma)
        # the bound uses the true k; a substituted k shifts the expected limit
        limit = 8 * N * N * k
        rel = abs(rep.speedup_lower - limit) / limit
        checks.append(_check(f"speed-up limit N={N}", rel <= 1e-3, speedup=rep.speedup_lower, limit=limit))

        s = [speedup_lower_bound(L, N, gamma).speedup_lower for L in np.logspace(-8, math.log10(0.3), 25)]
        mono = all(a >= b - 1e-12 for a, b in zip(s, s[1:]))
        checks.append(_check(
            f"speed-up monotone and below limit N={N}", mono and max(s) <= limit + 1e-12,
            speedups=[round(x, 6) for x in s],
        ))

    passed = all(c["passed"] for c in checks)
    return {"version": VERSION, "N_max": N_max, "gamma": gamma, "passed": passed, "checks": checks}


# -- output -------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def write_curves_csv(summary: EnsembleSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in zip(summary.times, summary.mean_impurity, summary.stderr_impurity, summary.bound_curve):
            w.writerow([_fmt(x) for x in row])


def write_summary_json(summary: EnsembleSummary, path) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")


def write_figure1_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIGURE1_COLUMNS)
        for r in rows:
            w.writerow([str(int(r[0]))] + [_fmt(x) for x in r[1:]])


def read_csv_columns(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in reader.fieldnames}


def plot_curves(csv_path, svg_path) -> None:
    """Quick-look SVG line chart (log-scale y) of a curves or speed-up table CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "qpurify"
    cols = read_csv_columns(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    if set(FIGURE1_COLUMNS) <= set(cols):
        styles = ["-", "--", "-."]
        for i, N in enumerate(sorted(set(cols["N"].astype(int)))):
            sel = cols["N"] == N
            ax.plot(cols["L_target"][sel], cols["speedup_lower"][sel], styles[i % 3], label=f"N={N}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.invert_xaxis()
        ax.set_xlabel("target impurity")
        ax.set_ylabel("speed-up lower bound")
    elif set(CURVE_COLUMNS) <= set(cols):
        t = cols["t"]
        ax.plot(t, cols["mean_L"], label="mean L")
        ax.fill_between(t, cols["mean_L"] - 2 * cols["stderr_L"], cols["mean_L"] + 2 * cols["stderr_L"], alpha=0.3)
        ax.plot(t, cols["bound_L"], "--", label="bound")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("impurity")
    else:
        raise ValidationError(f"{csv_path}: unrecognised column set {sorted(cols)}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
