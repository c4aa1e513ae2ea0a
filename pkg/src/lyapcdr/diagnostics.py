"""Error norms, Lyapunov bookkeeping, convergence rates and equilibrium tracking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .mesh import MetricData
from .sbp import TensorOperatorSet

SERIES_COLUMNS = ("t", "V", "dVdt", "DT", "Xi", "forcing", "boundary", "residual",
                  "relative_residual", "gamma", "dt", "dist_P", "dist_Q")


def format_float(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    return f"{float(x):.17g}"


# --------------------------------------------------------------------------
# error norms


@dataclass(frozen=True)
class ErrorNorms:
    """Volume-normalized error norms.

    ``l1`` sums the per-component L1 norms, ``l2`` is the root of the summed
    squared component norms and ``linf`` the max over components.
    """

    l1: float
    l2: float
    linf: float
    per_component: tuple[tuple[float, float, float], ...] = ()

    def component(self, k: int) -> tuple[float, float, float]:
        return self.per_component[k]

    def as_dict(self) -> dict:
        return {"l1": self.l1, "l2": self.l2, "linf": self.linf,
                "per_component": [list(c) for c in self.per_component]}


def _weights(ops: TensorOperatorSet, metrics: MetricData) -> np.ndarray:
    return metrics.mass_jacobian(ops)


def error_norms(u: np.ndarray, u_ref: np.ndarray, ops: TensorOperatorSet, metrics: MetricData) -> ErrorNorms:
    """Discrete L1, L2 and Linf norms of ``u - u_ref`` weighted by ``M J``."""
    u = np.asarray(u, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    mj = _weights(ops, metrics)
    if u.shape != u_ref.shape or u.shape[:-1] != mj.shape:
        raise ConfigurationError(f"layout mismatch: {u.shape} vs {u_ref.shape} (nodes {mj.shape})")
    err = np.abs(u - u_ref)
    omega = float(np.sum(mj))
    per = []
    for k in range(u.shape[-1]):
        e = err[..., k]
        per.append((float(np.sum(mj * e)) / omega,
                    math.sqrt(float(np.sum(mj * e * e)) / omega),
                    float(np.max(e)) if e.size else 0.0))
    l1 = sum(c[0] for c in per)
    l2 = math.sqrt(sum(c[1] ** 2 for c in per))
    linf = max(c[2] for c in per)
    return ErrorNorms(l1=l1, l2=l2, linf=linf, per_component=tuple(per))


def lyapunov_functional(u: np.ndarray, model, ops: TensorOperatorSet, metrics: MetricData) -> float:
    """``sum M J V(u)``; raises :class:`~lyapcdr.errors.AdmissibilityError` for inadmissible states."""
    model.check_admissible(u)
    return float(np.sum(_weights(ops, metrics) * model.lyapunov_V(u)))


def equilibrium_distance(u: np.ndarray, equilibrium: np.ndarray) -> np.ndarray:
    """Max-norm distance to the equilibrium per component."""
    u = np.asarray(u, dtype=float)
    diff = np.abs(u - np.asarray(equilibrium, dtype=float))
    return diff.reshape(-1, u.shape[-1]).max(axis=0)


# --------------------------------------------------------------------------
# balance series


@dataclass(frozen=True)
class BalanceRow:
    t: float
    V: float
    dVdt: float
    DT: float
    Xi: float
    forcing: float
    boundary: float
    residual: float
    relative_residual: float
    gamma: float
    dt: float
    dist_P: float
    dist_Q: float

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in SERIES_COLUMNS)


def balance_sample(t: float, terms, V: float, distance, gamma: float = float("nan"),
                   dt: float = float("nan")) -> BalanceRow:
    """One ledger row from a balance-enabled RHS evaluation at time ``t``.

    ``distance`` is the per-component max-norm distance to equilibrium.  The
    residual is ``dV/dt - Xi - forcing + DT - boundary``; every term comes
    from ``terms`` so the identity is checked, not assumed.
    """
    dist = np.atleast_1d(np.asarray(distance, dtype=float))
    return BalanceRow(t=float(t), V=float(V), dVdt=terms.dVdt, DT=terms.dissipation, Xi=terms.xi,
                      forcing=terms.forcing, boundary=terms.boundary, residual=terms.residual,
                      relative_residual=terms.relative_residual, gamma=float(gamma), dt=float(dt),
                      dist_P=float(dist[0]), dist_Q=float(dist[1]) if dist.size > 1 else 0.0)


@dataclass
class BalanceSeries:
    """Append-only time series of ledger rows."""

    rows: list[BalanceRow] = field(default_factory=list)

    def append(self, row: BalanceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        if name not in SERIES_COLUMNS:
            raise KeyError(name)
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def max_relative_residual(self) -> float:
        return float(np.max(self.column("relative_residual"))) if self.rows else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SERIES_COLUMNS)
            for row in self.rows:
                writer.writerow([format_float(v) for v in row.values()])

    @classmethod
    def read_csv(cls, path: str | Path) -> "BalanceSeries":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != SERIES_COLUMNS:
                raise ConfigurationError(f"unexpected series header {header}")
            rows = [BalanceRow(*(float(v) for v in line)) for line in reader]
        return cls(rows)


# --------------------------------------------------------------------------
# convergence and equilibrium time


def convergence_rates(errors: Sequence[float], h: Sequence[float]) -> list[float | None]:
    """Observed orders between consecutive levels; ``None`` where undefined.

    >>> [round(r, 3) for r in convergence_rates([1e-2, 2.5e-3], [1.0, 0.5])]
    [2.0]
    """
    errors = [float(e) for e in errors]
    h = [float(x) for x in h]
    if len(errors) != len(h) or len(errors) < 2:
        raise ConfigurationError("need at least two levels with matching sizes")
    diffs = np.diff(h)
    if not (np.all(diffs < 0) or np.all(diffs > 0)):
        raise ConfigurationError("grid sizes must be strictly monotone")
    rates: list[float | None] = []
    for k in range(len(errors) - 1):
        e0, e1 = errors[k], errors[k + 1]
        if e0 <= 0.0 or e1 <= 0.0 or not (math.isfinite(e0) and math.isfinite(e1)):
            rates.append(None)
        else:
            rates.append(math.log(e0 / e1) / math.log(h[k] / h[k + 1]))
    return rates


def equilibrium_tracking(times: Sequence[float], distances, threshold: float = 1e-8) -> float | None:
    """First time the max-norm equilibrium distance drops to ``threshold``.

    ``distances`` holds one value per sample (or one row of per-component
    values, reduced by max).  The crossing is linearly interpolated between
    the bracketing samples; ``None`` means the threshold was never reached.
    """
    if threshold <= 0:
        raise ConfigurationError("threshold must be positive")
    t = np.asarray(times, dtype=float)
    dist = np.asarray(distances, dtype=float)
    if dist.ndim == 2:
        dist = dist.max(axis=1)
    if t.shape != dist.shape:
        raise ConfigurationError("times and distances must have the same length")
    if t.size == 0:
        return None
    if np.any(np.diff(t) < 0):
        raise ConfigurationError("times must be nondecreasing")
    if dist[0] <= threshold:
        return float(t[0])
    below = np.nonzero(dist <= threshold)[0]
    if below.size == 0:
        return None
    k = int(below[0])
    d0, d1 = dist[k - 1], dist[k]
    frac = (d0 - threshold) / (d0 - d1) if d0 != d1 else 1.0
    return float(t[k - 1] + frac * (t[k] - t[k - 1]))
