"""Mini-batch SGD with heavy-ball momentum on least squares.

The iteration is

    x_{k+1} = x_k - gamma A^T P_k (A x_k - b) + delta (x_k - x_{k-1}),

where ``P_k`` selects a batch of ``beta`` rows drawn uniformly without
replacement, and ``x_{-1} = x_0``.  Ensembles advance all runs together as
the columns of one iterate matrix, so each step costs two matrix-matrix
products; every run still owns its own random stream.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .spectrum import Spectrum, empirical_spectrum, explicit_spectrum, mp_spectrum
from .volterra import Hyperparams, VolterraSolution, fmt, solve_volterra

DIVERGENCE_LOSS = 1e300


@dataclass
class LeastSquaresProblem:
    """``f(x) = 0.5 * ||A x - b||^2`` with optional generative components.

    Attributes
    ----------
    A : ndarray, shape (n, d)
    b : ndarray, shape (n,)
    x_tilde, eta : ndarray or None
        Signal and noise when ``b`` was generated as ``A x_tilde + eta``.
    x0 : ndarray or None
        Starting point; zero when omitted.
    """

    A: np.ndarray
    b: np.ndarray
    x_tilde: np.ndarray | None = None
    eta: np.ndarray | None = None
    x0: np.ndarray | None = None
    _spectrum: Spectrum | None = field(default=None, repr=False)
    _modes: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64).ravel()
        if self.A.ndim != 2:
            raise ValueError("A must be a matrix")
        n, d = self.A.shape
        if self.b.shape != (n,):
            raise ValueError(f"b has length {self.b.size}, expected {n}")
        if self.x0 is None:
            self.x0 = np.zeros(d)
        self.x0 = np.asarray(self.x0, dtype=np.float64).ravel()
        if self.x0.shape != (d,):
            raise ValueError(f"x0 has length {self.x0.size}, expected {d}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def loss(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def spectrum(self) -> Spectrum:
        if self._spectrum is None:
            self._spectrum = empirical_spectrum(self.A)
        return self._spectrum

    def modes(self) -> tuple[Spectrum, np.ndarray]:
        """Spectrum of ``A A^T`` with the realized initial energy of each mode.

        Mode ``j`` carries ``0.5 * (u_j . r_0)^2`` where ``u_j`` is a left
        singular vector and ``r_0 = A x_0 - b``.  When ``n > d`` the
        ``n - d`` directions outside the column space are merged into one
        zero mode holding the rest of the initial loss.
        """
        if self._modes is None:
            u, s, _ = np.linalg.svd(self.A, full_matrices=False)
            r0 = self.A @ self.x0 - self.b
            proj = u.T @ r0
            energies = 0.5 * proj ** 2
            values = s ** 2
            weights = np.full(values.size, 1.0 / self.n)
            if self.n > self.d:
                rest = max(0.5 * float(r0 @ r0) - float(energies.sum()), 0.0)
                values = np.append(values, 0.0)
                weights = np.append(weights, (self.n - self.d) / self.n)
                energies = np.append(energies, rest)
            self._modes = (explicit_spectrum(values, weights), energies)
        return self._modes

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A, self.b, self.x0):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def gen_gaussian_problem(n: int, d: int, R: float = 1.0, R_tilde: float = 1.0, seed: int = 0,
                         target: str = "generative") -> LeastSquaresProblem:
    """Gaussian least squares instance with unit-norm rows.

    ``A`` has i.i.d. standard normal entries and is then row-normalized.
    ``x_tilde`` and ``eta`` have i.i.d. entries of variance ``R / n`` and
    ``R_tilde / n``.  With ``target="generative"`` (default)
    ``b = A x_tilde + eta``.  With ``target="direct"`` ``b`` is instead drawn
    with variance ``R_tilde d / n`` per entry and each entry divided by the
    norm of the corresponding raw row.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if R < 0 or R_tilde < 0:
        raise ValueError("R and R_tilde must be nonnegative")
    if target not in ("generative", "direct"):
        raise ValueError(f"unknown target recipe {target!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5eed]))
    raw = rng.standard_normal((n, d))
    norms = np.linalg.norm(raw, axis=1)
    A = raw / norms[:, None]
    x_tilde = rng.standard_normal(d) * np.sqrt(R / n)
    eta = rng.standard_normal(n) * np.sqrt(R_tilde / n)
    if target == "generative":
        b = A @ x_tilde + eta
    else:
        b = rng.standard_normal(n) * np.sqrt(R_tilde * d / n) / norms
    return LeastSquaresProblem(A, b, x_tilde, eta)


@dataclass(frozen=True)
class SgdmConfig:
    gamma: float
    delta: float
    zeta: float
    max_iters: int
    seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise ValueError("max_iters must be a nonnegative integer")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")

    def batch_size(self, n: int) -> int:
        """``round(zeta n)`` (halves round up), clamped to ``[1, n]``."""
        return int(min(max(np.floor(self.zeta * n + 0.5), 1), n))

    def realized_zeta(self, n: int) -> float:
        return self.batch_size(n) / n

    def steps(self) -> np.ndarray:
        return np.arange(0, int(self.max_iters) + 1, int(self.record_every))

    def hyperparams(self, n: int, R: float = 1.0, R_tilde: float = 1.0) -> Hyperparams:
        return Hyperparams(self.gamma, self.delta, self.realized_zeta(n), R, R_tilde)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "delta": self.delta, "zeta": self.zeta,
                "max_iters": int(self.max_iters), "seed": int(self.seed),
                "record_every": int(self.record_every)}


def run_stream(seed: int, run_index: int) -> np.random.Generator:
    """Independent generator for one run, derived from ``(seed, run_index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(run_index)]))


def _simulate(problem: LeastSquaresProblem, config: SgdmConfig, run_ids) -> tuple:
    A, b = problem.A, problem.b
    n = problem.n
    beta = config.batch_size(n)
    runs = len(run_ids)
    steps = config.steps()
    record = np.zeros(int(config.max_iters) + 1, dtype=bool)
    record[steps] = True

    rngs = [run_stream(config.seed, r) for r in run_ids]
    pools = [np.arange(n, dtype=np.int64) for _ in run_ids]
    offsets = np.arange(beta, dtype=np.int64)

    x = np.repeat(problem.x0[:, None], runs, axis=1)
    x_prev = x.copy()
    losses = np.full((runs, steps.size), np.nan)
    alive = np.ones(runs, dtype=bool)
    mask = np.zeros((n, runs))
    col = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(int(config.max_iters) + 1):
            resid = A @ x - b[:, None]
            loss = 0.5 * np.einsum("ij,ij->j", resid, resid)
            bad = alive & ~(np.isfinite(loss) & (loss < DIVERGENCE_LOSS))
            if np.any(bad):
                alive &= ~bad
                x[:, bad] = 0.0
                x_prev[:, bad] = 0.0
            if record[t]:
                losses[alive, col] = loss[alive]
                col += 1
            if t == config.max_iters:
                break
            mask.fill(0.0)
            for k in range(runs):
                draws = rngs[k].integers(offsets, n)
                if alive[k]:
                    mask[kernels.fisher_yates(pools[k], draws), k] = 1.0
            grad = A.T @ (resid * mask)
            x_next = x - config.gamma * grad + config.delta * (x - x_prev)
            x_prev, x = x, x_next
    return steps, losses, ~alive


@dataclass(frozen=True)
class RunResult:
    steps: np.ndarray
    losses: np.ndarray
    diverged: bool


def sgdm_run(problem: LeastSquaresProblem, config: SgdmConfig, run_index: int = 0) -> RunResult:
    """One SGD+M trajectory; losses are NaN after a divergence."""
    steps, losses, diverged = _simulate(problem, config, [run_index])
    return RunResult(steps, losses[0], bool(diverged[0]))


@dataclass(frozen=True)
class TrajectoryEnsemble:
    steps: np.ndarray
    losses: np.ndarray  # shape (runs, len(steps))
    diverged: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_runs(self) -> int:
        return self.losses.shape[0]

    def percentile(self, q: float) -> np.ndarray:
        out = np.full(self.steps.size, np.nan)
        ok = np.any(np.isfinite(self.losses), axis=0)
        if np.any(ok):
            out[ok] = np.nanpercentile(self.losses[:, ok], q, axis=0)
        return out

    def bands(self) -> dict:
        return {"p10": self.percentile(10), "p50": self.percentile(50), "p90": self.percentile(90)}

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        csv_path = Path(csv_path)
        bands = self.bands()
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"run_{k}" for k in range(self.num_runs)] + ["p10", "p50", "p90"])
            for i, t in enumerate(self.steps):
                row = [int(t)] + [fmt(v) for v in self.losses[:, i]]
                row += [fmt(bands[q][i]) for q in ("p10", "p50", "p90")]
                w.writerow(row)
        if json_path is None:
            json_path = csv_path.with_suffix(".meta.json")
        meta = dict(self.meta)
        meta["diverged"] = [bool(v) for v in self.diverged]
        Path(json_path).write_text(json.dumps(meta, indent=1) + "\n")


def run_ensemble(problem: LeastSquaresProblem, config: SgdmConfig, num_runs: int) -> TrajectoryEnsemble:
    """``num_runs`` independent runs sharing the problem and differing only in batches."""
    if int(num_runs) != num_runs or num_runs < 1:
        raise ValueError("num_runs must be a positive integer")
    run_ids = list(range(int(num_runs)))
    steps, losses, diverged = _simulate(problem, config, run_ids)
    meta = {
        "config": config.to_dict(),
        "n": problem.n,
        "d": problem.d,
        "batch_size": config.batch_size(problem.n),
        "realized_zeta": config.realized_zeta(problem.n),
        "num_runs": int(num_runs),
        "run_seeds": [[int(config.seed), r] for r in run_ids],
        "problem_hash": problem.fingerprint(),
        "backend": kernels.BACKEND,
    }
    return TrajectoryEnsemble(steps, losses, diverged, meta)


# ---------------------------------------------------------------------------
# Theory for a concrete problem and comparison

THEORY_SOURCES = ("realized", "empirical", "mp")


def predict_for_problem(problem: LeastSquaresProblem, config: SgdmConfig, source: str = "realized",
                        R: float = 1.0, R_tilde: float = 1.0, num_nodes: int = 512) -> VolterraSolution:
    """Volterra prediction matched to ``problem`` and ``config``.

    ``source`` selects the inputs:

    ``"realized"``
        Eigenvalues of ``A A^T`` and the instance's own per-mode initial
        energies; ``psi(0)`` equals the measured initial loss.
    ``"empirical"``
        Eigenvalues of ``A A^T`` with the expected energies implied by
        ``R`` and ``R_tilde``.
    ``"mp"``
        Marchenko-Pastur law with ``r = d / n`` and the expected energies.
    """
    params = config.hyperparams(problem.n, R, R_tilde)
    horizon = int(config.max_iters)
    if source == "realized":
        spec, energies = problem.modes()
        return solve_volterra(spec, params, horizon, psi0=problem.loss(problem.x0), energies=energies)
    if source == "empirical":
        return solve_volterra(problem.spectrum(), params, horizon)
    if source == "mp":
        return solve_volterra(mp_spectrum(problem.d / problem.n, num_nodes), params, horizon)
    raise ValueError(f"unknown theory source {source!r}; expected one of {THEORY_SOURCES}")


@dataclass(frozen=True)
class DeviationReport:
    sup_deviation: np.ndarray
    relative: np.ndarray
    psi0: float

    def quantiles(self, values) -> dict:
        out = {}
        for q in (10, 50, 90):
            with np.errstate(invalid="ignore"):
                v = float(np.percentile(values, q))
            out[f"p{q}"] = v if np.isfinite(v) else None
        return out

    @property
    def median_relative(self) -> float:
        return float(np.median(self.relative))

    def to_dict(self) -> dict:
        def clean(values):
            return [float(v) if np.isfinite(v) else None for v in values]
        return {
            "psi0": self.psi0,
            "sup_deviation": clean(self.sup_deviation),
            "relative_sup_deviation": clean(self.relative),
            "sup_quantiles": self.quantiles(self.sup_deviation),
            "relative_quantiles": self.quantiles(self.relative),
            "median_relative": self.median_relative if np.isfinite(self.median_relative) else None,
        }


def compare_to_theory(ensemble: TrajectoryEnsemble, solution: VolterraSolution) -> DeviationReport:
    """Per-run ``sup_t |f(x_t) - psi(t)|`` over the recorded steps.

    Diverged runs get an infinite deviation.  Relative values divide by
    ``psi(0)``.
    """
    if ensemble.steps[-1] != solution.horizon:
        raise ValueError(f"ensemble ends at step {ensemble.steps[-1]}, "
                         f"solution horizon is {solution.horizon}")
    psi = solution.psi[ensemble.steps]
    with np.errstate(invalid="ignore"):
        dev = np.abs(ensemble.losses - psi[None, :])
    sup = np.where(np.any(np.isnan(dev), axis=1), np.inf, np.nanmax(np.nan_to_num(dev, nan=0.0), axis=1))
    psi0 = float(solution.psi[0])
    rel = sup / psi0 if psi0 > 0 else np.full_like(sup, np.inf)
    return DeviationReport(sup, rel, psi0)
