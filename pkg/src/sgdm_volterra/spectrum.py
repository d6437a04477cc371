"""Eigenvalue spectra of ``A A^T`` and the condition-number functionals.

A :class:`Spectrum` is a finite weighted list of eigenvalues (zero
eigenvalues included) together with the edges of its nonzero support.
Three constructors exist: an explicit list, the spectrum of a data matrix,
and a Chebyshev quadrature of the Marchenko-Pastur law.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASS_TOL = 1e-10
ZERO_FLOOR = 1e-10


@dataclass(frozen=True)
class Spectrum:
    """Weighted eigenvalues of ``A A^T``.

    Attributes
    ----------
    values, weights : ndarray
        Eigenvalues ``sigma^2 >= 0`` and their probability weights.  For a
        Marchenko-Pastur spectrum the zero atom (when ``r < 1``) is the last
        entry.
    kind : {"explicit", "mp"}
    sigma2_min, sigma2_max : float
        Edges of the nonzero support.  For ``kind == "mp"`` these are the
        analytic edges, not the extreme quadrature nodes.
    r : float or None
        Ratio ``d / n`` of the Marchenko-Pastur law.
    num_nodes : int or None
        Number of quadrature nodes.
    """

    values: np.ndarray
    weights: np.ndarray
    kind: str = "explicit"
    sigma2_min: float = field(default=0.0)
    sigma2_max: float = field(default=0.0)
    r: float | None = None
    num_nodes: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if values.shape != weights.shape or values.size == 0:
            raise ValueError("values and weights must be non-empty and of equal length")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(weights))):
            raise ValueError("spectrum entries must be finite")
        if np.any(values < 0):
            raise ValueError("eigenvalues must be nonnegative")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"weights sum to {weights.sum():.17g}, expected 1")
        values.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @property
    def nonzero(self) -> np.ndarray:
        return self.values > 0

    @property
    def zero_mass(self) -> float:
        return float(self.weights[~self.nonzero].sum())

    @property
    def mean(self) -> float:
        """First moment, ``(1/n) tr(A A^T)``."""
        return float(self.values @ self.weights)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "values": [[float(v), float(w)] for v, w in zip(self.values, self.weights)],
            "sigma2_min": self.sigma2_min,
            "sigma2_max": self.sigma2_max,
        }
        if self.kind == "mp":
            out["r"] = self.r
            out["nodes"] = self.num_nodes
        return out

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def explicit_spectrum(values, weights=None) -> Spectrum:
    """Build an explicit spectrum; uniform weights by default.

    Values below ``1e-10 * max(values)`` are snapped to zero.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty spectrum")
    if weights is None:
        weights = np.full(values.size, 1.0 / values.size)
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size and np.all(np.isfinite(values)):
        top = values.max(initial=0.0)
        values = np.where(np.abs(values) < ZERO_FLOOR * top, 0.0, values)
    nz = values[values > 0]
    lo = float(nz.min()) if nz.size else 0.0
    hi = float(nz.max()) if nz.size else 0.0
    return Spectrum(values, weights, "explicit", lo, hi)


def mp_edges(r: float) -> tuple[float, float]:
    s = np.sqrt(1.0 / r)
    return float((1.0 - s) ** 2), float((1.0 + s) ** 2)


def mp_density(lam, r: float):
    """Absolutely continuous part of the Marchenko-Pastur law with ratio ``r = d/n``."""
    lo, hi = mp_edges(r)
    lam = np.asarray(lam, dtype=np.float64)
    inside = (lam > lo) & (lam < hi)
    out = np.zeros_like(lam)
    li = lam[inside]
    out[inside] = r * np.sqrt((li - lo) * (hi - li)) / (2.0 * np.pi * li)
    return out


def mp_spectrum(r: float, num_nodes: int = 512) -> Spectrum:
    """Chebyshev-Gauss quadrature of the Marchenko-Pastur law.

    Nodes are the first-kind Chebyshev points mapped onto
    ``[lambda_-, lambda_+]``; the quadrature weight of each node is the MP
    density divided by the Chebyshev weight function.  The atom at zero,
    of mass ``max(1 - r, 0)``, is appended separately.
    """
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    if int(num_nodes) != num_nodes or num_nodes < 2:
        raise ValueError(f"num_nodes must be an integer >= 2, got {num_nodes}")
    num_nodes = int(num_nodes)
    lo, hi = mp_edges(r)
    center, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    k = np.arange(1, num_nodes + 1)
    x = np.cos((2 * k - 1) * np.pi / (2 * num_nodes))
    lam = center + half * x
    # density * d(lambda) = r h^2 (1 - x^2) / (2 pi lambda) * dx / sqrt(1 - x^2),
    # and Gauss-Chebyshev integrates g(x) / sqrt(1 - x^2) with weights pi / N.
    w = r * half * half * (1.0 - x * x) / (2.0 * num_nodes * lam)
    atom = max(1.0 - r, 0.0)
    if atom > 0:
        lam = np.append(lam, 0.0)
        w = np.append(w, atom)
    # Renormalize away the quadrature's O(1e-16 N) mass error only.
    w = w / w.sum()
    return Spectrum(lam, w, "mp", lo, hi, float(r), num_nodes)


def _gram_eigenvalues(matrix: np.ndarray) -> np.ndarray:
    n, d = matrix.shape
    gram = matrix.T @ matrix if d <= n else matrix @ matrix.T
    gram = 0.5 * (gram + gram.T)
    return np.clip(np.linalg.eigvalsh(gram), 0.0, None)


def empirical_spectrum(matrix) -> Spectrum:
    """Spectrum of ``A A^T`` for an ``n x d`` data matrix, weights ``1/n``.

    The symmetric eigensolve runs on the smaller of the two Gram matrices;
    when ``n > d`` the ``n - d`` structural zeros are added explicitly.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or min(matrix.shape) < 1:
        raise ValueError("expected a non-empty 2-D matrix")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("matrix has non-finite entries")
    n, d = matrix.shape
    eig = _gram_eigenvalues(matrix)
    if n > d:
        eig = np.concatenate([eig, np.zeros(n - d)])
    return explicit_spectrum(np.sort(eig)[::-1], np.full(n, 1.0 / n))


def compress(spectrum: Spectrum) -> Spectrum:
    """Merge identical eigenvalues (notably the zero block) into single modes."""
    vals, inv = np.unique(spectrum.values, return_inverse=True)
    w = np.bincount(inv, weights=spectrum.weights)
    return Spectrum(vals[::-1].copy(), w[::-1].copy(), spectrum.kind, spectrum.sigma2_min,
                    spectrum.sigma2_max, spectrum.r, spectrum.num_nodes)


@dataclass(frozen=True)
class ConditionReport:
    kappa: float
    kappa_bar: float
    icr: float
    saturating_zeta: float

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "kappa_bar": self.kappa_bar, "icr": self.icr,
                "saturating_zeta": self.saturating_zeta}


def saturating_zeta(icr: float) -> float:
    c = 8.0 / np.sqrt(2.0) * icr
    return float(c / (1.0 + c))


def condition_report(spectrum: Spectrum) -> ConditionReport:
    """Condition number, average condition number, ICR and saturating batch fraction."""
    if spectrum.sigma2_max <= 0:
        raise ValueError("spectrum has no positive eigenvalue")
    kappa = spectrum.sigma2_max / spectrum.sigma2_min
    kappa_bar = spectrum.mean / spectrum.sigma2_min
    icr = kappa_bar / np.sqrt(kappa)
    return ConditionReport(float(kappa), float(kappa_bar), float(icr), saturating_zeta(icr))


def spectrum_from_dict(data: dict) -> Spectrum:
    kind = data.get("kind")
    if kind == "mp":
        return mp_spectrum(float(data["r"]), int(data.get("nodes", 512)))
    if kind == "explicit":
        pairs = np.asarray(data["values"], dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("explicit spectrum values must be [[sigma2, weight], ...]")
        return explicit_spectrum(pairs[:, 0], pairs[:, 1])
    raise ValueError(f"unknown spectrum kind {kind!r}")


def load_spectrum(path: str | Path) -> Spectrum:
    return spectrum_from_dict(json.loads(Path(path).read_text()))
