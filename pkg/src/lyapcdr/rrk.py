"""Explicit Runge-Kutta methods with relaxation on a convex functional.

The relaxed update ``u + gamma * dt * sum_i b_i F_i`` is chosen so that the
functional changes by exactly ``gamma`` times the stage estimate of its
change.  Time advances by ``gamma * dt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import AdmissibilityError, ConfigurationError, IntegrationError, RelaxationError, TableauError

ROW_SUM_TOL = 1e-14
GAMMA_MAX = 10.0


# --------------------------------------------------------------------------
# tableaux


@dataclass(frozen=True)
class ButcherTableau:
    """Coefficients of an explicit Runge-Kutta method with optional embedded weights."""

    name: str
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    b_hat: np.ndarray | None = None
    embedded_order: int | None = None
    exact: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        c = np.asarray(self.c, dtype=float)
        s = b.size
        if A.shape != (s, s) or c.shape != (s,):
            raise TableauError(f"{self.name}: inconsistent shapes A{A.shape}, b({s}), c{c.shape}")
        if np.any(np.triu(A) != 0.0):
            raise TableauError(f"{self.name}: A is not strictly lower triangular (explicit)")
        row = np.max(np.abs(A.sum(axis=1) - c))
        if row > ROW_SUM_TOL:
            raise TableauError(f"{self.name}: row-sum condition c_i = sum_j a_ij violated by {row:.3e}")
        if abs(b.sum() - 1.0) > ROW_SUM_TOL:
            raise TableauError(f"{self.name}: weights must sum to one, sum(b) = {b.sum():.17g}")
        b_hat = None
        if self.b_hat is not None:
            b_hat = np.asarray(self.b_hat, dtype=float)
            if b_hat.shape != (s,):
                raise TableauError(f"{self.name}: embedded weights have wrong length")
            if abs(b_hat.sum() - 1.0) > ROW_SUM_TOL:
                raise TableauError(f"{self.name}: embedded weights must sum to one, sum = {b_hat.sum():.17g}")
            if self.embedded_order is None:
                raise TableauError(f"{self.name}: embedded weights given without embedded order")
        if not isinstance(self.order, int) or self.order < 1:
            raise TableauError(f"{self.name}: order must be a positive integer")
        for arr in (A, b, c) + ((b_hat,) if b_hat is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b_hat", b_hat)

    @property
    def stages(self) -> int:
        return self.b.size

    @property
    def is_embedded(self) -> bool:
        return self.b_hat is not None

    @property
    def nonnegative_weights(self) -> bool:
        return bool(np.all(self.b >= 0.0))

    def coefficients(self, dtype=float):
        """``(A, b, c, b_hat)`` in ``dtype``, rounded from the exact rationals when known."""
        dtype = np.dtype(dtype)
        if dtype == np.float64 or self.exact is None:
            return tuple(None if x is None else x.astype(dtype) if dtype != np.float64 else x
                         for x in (self.A, self.b, self.c, self.b_hat))

        def conv(values):
            if values is None:
                return None
            arr = np.array(values, dtype=object)
            flat = [dtype.type(v.numerator) / dtype.type(v.denominator) for v in arr.ravel()]
            return np.array(flat, dtype=dtype).reshape(arr.shape)

        cache = self.__dict__.setdefault("_coefficient_cache", {})
        if dtype not in cache:
            ex = self.exact
            cache[dtype] = (conv(ex["A"]), conv(ex["b"]), conv(ex["c"]), conv(ex["b_hat"]))
        return cache[dtype]

    @property
    def controller_order(self) -> int:
        """Exponent base of the step controller: ``min(order, embedded_order) + 1``."""
        if self.embedded_order is None:
            return self.order + 1
        return min(self.order, self.embedded_order) + 1


def _parse_number(value) -> Fraction:
    if isinstance(value, str):
        return Fraction(value.replace(" ", ""))
    if isinstance(value, (int, Fraction)):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(value)
    raise TableauError(f"cannot interpret tableau entry {value!r}")


def _from_exact(name, A_rows, b, order, b_hat=None, embedded_order=None) -> ButcherTableau:
    s = len(b)
    A = [[_parse_number(A_rows[i][j]) if j < len(A_rows[i]) else Fraction(0) for j in range(s)]
         for i in range(s)]
    bq = [_parse_number(v) for v in b]
    bhq = [_parse_number(v) for v in b_hat] if b_hat is not None else None
    c = [sum(row, Fraction(0)) for row in A]
    exact = {"A": A, "b": bq, "c": c, "b_hat": bhq}
    return ButcherTableau(
        name=name,
        A=np.array([[float(v) for v in row] for row in A]),
        b=np.array([float(v) for v in bq]),
        c=np.array([float(v) for v in c]),
        order=order,
        b_hat=None if bhq is None else np.array([float(v) for v in bhq]),
        embedded_order=embedded_order,
        exact=exact,
    )


_LIBRARY_SPECS = {
    "heun2": dict(A_rows=[[], ["1"]], b=["1/2", "1/2"], order=2),
    "rk4": dict(A_rows=[[], ["1/2"], ["0", "1/2"], ["0", "0", "1"]],
                b=["1/6", "1/3", "1/3", "1/6"], order=4),
    "bs3": dict(A_rows=[[], ["1/2"], ["0", "3/4"], ["2/9", "1/3", "4/9"]],
                b=["2/9", "1/3", "4/9", "0"], b_hat=["7/24", "1/4", "1/3", "1/8"],
                order=3, embedded_order=2),
    "bs5": dict(
        A_rows=[
            [],
            ["1/6"],
            ["2/27", "4/27"],
            ["183/1372", "-162/343", "1053/1372"],
            ["68/297", "-4/11", "42/143", "1960/3861"],
            ["597/22528", "81/352", "63099/585728", "58653/366080", "4617/20480"],
            ["174197/959244", "-30942/79937", "8152137/19744439", "666106/1039181",
             "-29421/29068", "482048/414219"],
            ["587/8064", "0", "4440339/15491840", "24353/124800", "387/44800",
             "2152/5985", "7267/94080"],
        ],
        b=["587/8064", "0", "4440339/15491840", "24353/124800", "387/44800",
           "2152/5985", "7267/94080", "0"],
        b_hat=["2479/34992", "0", "123/416", "612941/3411720", "43/1440",
               "2272/6561", "79937/1113912", "3293/556956"],
        order=5, embedded_order=4),
}

_ALIASES = {"heun": "heun2", "bs32": "bs3", "bs3(2)": "bs3", "bs54": "bs5", "bs5(4)": "bs5",
            "classical": "rk4"}


def available_tableaux(include_aliases: bool = False) -> list[str]:
    names = sorted(_LIBRARY_SPECS)
    return names + sorted(_ALIASES) if include_aliases else names


def tableau_library(name: str) -> ButcherTableau:
    """Shipped methods: ``heun2``, ``rk4``, ``bs3`` (3(2) pair) and ``bs5`` (5(4) pair)."""
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _LIBRARY_SPECS:
        raise ConfigurationError(f"unknown tableau {name!r}; available: {available_tableaux()}")
    return _from_exact(key, **_LIBRARY_SPECS[key])


def load_tableau(path: str | Path, relaxation: bool = False) -> ButcherTableau:
    """Read a tableau from a JSON file and check its invariants.

    Fields: ``s``, ``A`` (row-major nested list or flat list of ``s*s``),
    ``b``, ``c``, optional ``b_hat``, ``order``, optional
    ``embedded_order`` and ``name``.  Entries may be numbers or rational
    strings such as ``"1/6"``.  With ``relaxation=True`` negative weights
    are rejected.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TableauError(f"cannot read tableau file {path}: {exc}") from exc
    for key in ("s", "A", "b", "c", "order"):
        if key not in data:
            raise TableauError(f"tableau file {path} lacks field {key!r}")
    s = int(data["s"])
    A = data["A"]
    if A and not isinstance(A[0], list):
        if len(A) != s * s:
            raise TableauError("flat A must have s*s entries")
        A = [A[i * s:(i + 1) * s] for i in range(s)]
    Aq = [[_parse_number(v) for v in row] for row in A]
    if len(Aq) != s or any(len(row) != s for row in Aq):
        raise TableauError("A must be s x s")
    bq = [_parse_number(v) for v in data["b"]]
    cq = [_parse_number(v) for v in data["c"]]
    bhq = [_parse_number(v) for v in data["b_hat"]] if data.get("b_hat") is not None else None
    if len(bq) != s or len(cq) != s:
        raise TableauError("b and c must have s entries")
    tab = ButcherTableau(
        name=str(data.get("name", path.stem)),
        A=np.array([[float(v) for v in row] for row in Aq]),
        b=np.array([float(v) for v in bq]),
        c=np.array([float(v) for v in cq]),
        order=int(data["order"]),
        b_hat=None if bhq is None else np.array([float(v) for v in bhq]),
        embedded_order=None if data.get("embedded_order") is None else int(data["embedded_order"]),
        exact={"A": Aq, "b": bq, "c": cq, "b_hat": bhq},
    )
    if relaxation and not tab.nonnegative_weights:
        raise TableauError(f"{tab.name}: negative weights b_i are not allowed with relaxation")
    return tab


def dump_tableau(tab: ButcherTableau, path: str | Path) -> None:
    """Write ``tab`` in the JSON format read by :func:`load_tableau`."""
    def conv(v):
        return str(v) if isinstance(v, Fraction) else float(v)
    src = tab.exact or {"A": tab.A.tolist(), "b": tab.b.tolist(), "c": tab.c.tolist(),
                        "b_hat": None if tab.b_hat is None else tab.b_hat.tolist()}
    data = {
        "name": tab.name, "s": tab.stages,
        "A": [[conv(v) for v in row] for row in src["A"]],
        "b": [conv(v) for v in src["b"]], "c": [conv(v) for v in src["c"]],
        "b_hat": None if src["b_hat"] is None else [conv(v) for v in src["b_hat"]],
        "order": tab.order, "embedded_order": tab.embedded_order,
    }
    Path(path).write_text(json.dumps(data, indent=2))


# --------------------------------------------------------------------------
# rooted trees and order conditions


def rooted_trees(max_order: int) -> dict[int, list[tuple]]:
    """All rooted trees up to ``max_order`` nodes, grouped by order.

    A tree is the tuple of its child subtrees in canonical (sorted) order;
    the single node is ``()``.
    """
    by_order: dict[int, list[tuple]] = {1: [()]}
    keyed: list[tuple] = [()]
    rank = {(): 0}

    def forests(total, bound):
        if total == 0:
            yield ()
            return
        for idx in range(min(bound, len(keyed) - 1), -1, -1):
            tree = keyed[idx]
            size = tree_order(tree)
            if size <= total:
                for rest in forests(total - size, idx):
                    yield (tree,) + rest

    for n in range(2, max_order + 1):
        trees = [tuple(f) for f in forests(n - 1, len(keyed) - 1)]
        by_order[n] = trees
        for tree in trees:
            rank[tree] = len(keyed)
            keyed.append(tree)
    return by_order


def tree_order(tree: tuple) -> int:
    return 1 + sum(tree_order(child) for child in tree)


def tree_density(tree: tuple) -> int:
    out = tree_order(tree)
    for child in tree:
        out *= tree_density(child)
    return out


def elementary_weights(A, tree: tuple) -> list:
    """Vector ``Phi_i(tree)`` for the stage matrix ``A`` (exact for Fractions)."""
    s = len(A)
    phi = [1] * s
    for child in tree:
        sub = elementary_weights(A, child)
        inner = [sum(A[i][j] * sub[j] for j in range(s)) for i in range(s)]
        phi = [phi[i] * inner[i] for i in range(s)]
    return phi


def order_condition_residuals(A, b, max_order: int) -> list[tuple[tuple, int, float]]:
    """Residual ``b . Phi(t) - 1/gamma(t)`` for every tree of order up to ``max_order``.

    Accepts nested sequences of floats or Fractions; returns
    ``(tree, order, |residual|)`` triples.
    """
    out = []
    for n, trees in rooted_trees(max_order).items():
        for tree in trees:
            phi = elementary_weights(A, tree)
            value = sum(b[i] * phi[i] for i in range(len(b)))
            residual = value - Fraction(1, tree_density(tree)) if isinstance(value, Fraction) \
                else value - 1.0 / tree_density(tree)
            out.append((tree, n, abs(float(residual))))
    return out


def verified_order(A, b, max_check: int = 6, tol: float = 1e-13) -> int:
    """Largest ``p <= max_check`` such that all conditions up to order ``p`` hold."""
    res = order_condition_residuals(A, b, max_check)
    order = 0
    for n in range(1, max_check + 1):
        if all(r <= tol for (_, k, r) in res if k == n):
            order = n
        else:
            break
    return order


# --------------------------------------------------------------------------
# stages, relaxation and steps


@dataclass(frozen=True)
class Functional:
    """Convex functional and its directional derivative ``grad V(u) . du``."""

    value: Callable[[np.ndarray], float]
    rate: Callable[[np.ndarray, np.ndarray], float]
    # optional size of V's sensitivity to rounding the state, sum |grad V| |u|
    rounding_scale: Callable[[np.ndarray], float] | None = None


@dataclass(frozen=True)
class RelaxationStep:
    """Record of one relaxation root solve."""

    gamma: float
    e: float
    d: np.ndarray = field(repr=False)
    q_residual: float
    iterations: int
    fallback: str | None = None
    v_old: float = 0.0
    v_new: float = 0.0


def rk_stages(u, t: float, dt: float, tableau: ButcherTableau, rhs: Callable, f0=None):
    """Stage values ``Y_i`` and slopes ``F_i = rhs(t + c_i dt, Y_i)``.

    ``f0`` optionally supplies the first slope (the first stage is always
    ``u`` for explicit methods).
    """
    dtype = _state_dtype(u)
    A, _, c, _ = tableau.coefficients(dtype)
    Y, F = [], []
    for i in range(tableau.stages):
        y = np.array(u, dtype=dtype, copy=True)
        for j in range(i):
            if A[i, j] != 0.0:
                y += (dt * A[i, j]) * F[j]
        Y.append(y)
        if i == 0 and f0 is not None:
            F.append(np.asarray(f0, dtype=dtype))
        else:
            F.append(np.asarray(rhs(t + c[i] * dt, y), dtype=dtype))
    return Y, F


def _state_dtype(u) -> np.dtype:
    """Working precision: float64 unless the state carries a wider float type."""
    return np.result_type(np.asarray(u).dtype, np.float64)


def _combine(weights, F) -> np.ndarray:
    out = np.zeros_like(F[0])
    for w, f in zip(weights, F):
        if w != 0.0:
            out += w * f
    return out


def relaxation_estimate(Y, F, b, dt: float, functional: Functional) -> float:
    """``e = dt * sum_i b_i grad V(Y_i) . F_i``."""
    return dt * sum(bi * functional.rate(y, f) for bi, y, f in zip(b, Y, F) if bi != 0.0)


def solve_gamma(u, d, e: float, dt: float, functional: Functional, v_old: float | None = None,
                max_iterations: int = 100, precise: bool = False) -> RelaxationStep:
    """Find the relaxation parameter nearest one.

    Solves ``q(g) = V(u + g dt d) - V(u) - g e = 0``.  The root is bracketed
    starting from ``[0.5, 2]`` and widening towards ``[1e-3, 10]``, then
    refined with Brent's method, to the resolution the residual tolerance
    needs unless ``precise`` asks for full precision.  States wider than float64 get a few
    Newton corrections so the root is resolved to the working precision.
    """
    dtype = _state_dtype(u)
    u = np.asarray(u, dtype=dtype)
    d = np.asarray(d, dtype=dtype)
    if v_old is None:
        v_old = functional.value(u)
    # relative to the functional's own scale so tiny functionals near an
    # equilibrium are still relaxed to full precision
    tol = 1e-12 * max(abs(v_old), abs(e), np.finfo(dtype).tiny)
    if functional.rounding_scale is not None:
        # near an equilibrium q cannot be resolved below the rounding of the state
        tol = max(tol, 64 * np.finfo(dtype).eps * functional.rounding_scale(u))
    step_norm = abs(dt) * float(np.max(np.abs(d))) if d.size else 0.0
    if step_norm <= 1e-14 * float(np.max(np.abs(u))) or step_norm == 0.0:
        v_new = functional.value(u + dt * d)
        return RelaxationStep(1.0, e, d, abs(v_new - v_old - e), 0, "near_equilibrium", v_old, v_new)

    evaluations = [0]
    memo: dict = {}

    def q(g):
        # brentq re-evaluates the bracket ends; the functional can be costly
        if g not in memo:
            evaluations[0] += 1
            memo[g] = functional.value(u + (g * dt) * d) - v_old - g * e
        return memo[g]

    q1 = q(1.0)
    if q1 == 0.0:
        return RelaxationStep(1.0, e, d, 0.0, evaluations[0], None, v_old, v_old + e)
    bracket = None
    # q is convex with q(0) = 0, so one Newton step from 1 lands close to the
    # root; doubling its offset usually gives a tight bracket
    slope = dt * functional.rate(u + dt * d, d) - e
    if slope != 0.0 and np.isfinite(slope):
        guess = 1.0 - float(q1 / slope)
        far = 1.0 + 2.0 * (guess - 1.0)
        if 1e-3 <= far <= GAMMA_MAX and far != 1.0:
            qfar = q(far)
            if q1 * qfar < 0.0:
                bracket = (min(1.0, far), max(1.0, far), None, None)
    lo, hi = 0.5, 2.0
    if bracket is None:
        qlo, qhi = q(lo), q(hi)
    while bracket is None:
        if qlo * q1 < 0.0:
            bracket = (lo, 1.0, qlo, q1)
            break
        if q1 * qhi < 0.0:
            bracket = (1.0, hi, q1, qhi)
            break
        if lo <= 1e-3 and hi >= GAMMA_MAX:
            break
        if lo > 1e-3:
            lo = max(lo * 0.5, 1e-3)
            qlo = q(lo)
        if hi < GAMMA_MAX:
            hi = min(hi * 1.5, GAMMA_MAX)
            qhi = q(hi)
    if bracket is None:
        if abs(q1) <= tol:
            v_new = v_old + e + q1
            return RelaxationStep(1.0, e, d, abs(q1), evaluations[0], "roundoff", v_old, v_new)
        raise RelaxationError(f"no sign change of q(gamma) in [1e-3, {GAMMA_MAX}] (q(1) = {q1:.3e})")
    a, b, _, _ = bracket
    # resolving gamma below tol / |q'| cannot improve the residual
    xtol = 1e-15
    precise = precise or np.finfo(dtype).eps < np.finfo(np.float64).eps
    if not precise and slope != 0.0 and np.isfinite(slope):
        xtol = max(xtol, 0.01 * float(tol / abs(slope)))
    gamma, info = brentq(q, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps,
                         maxiter=max_iterations, full_output=True, disp=False)
    if not info.converged:
        raise RelaxationError(f"relaxation root solve did not converge: {info.flag}")
    if np.finfo(dtype).eps < np.finfo(np.float64).eps:
        gamma = dtype.type(gamma)
        q_gamma = q(gamma)
        for _ in range(3):
            slope = dt * functional.rate(u + (gamma * dt) * d, d) - e
            if slope == 0 or q_gamma == 0:
                break
            trial = gamma - q_gamma / slope
            q_trial = q(trial) if a <= trial <= b else None
            if q_trial is None or abs(q_trial) >= abs(q_gamma):
                break
            gamma, q_gamma = trial, q_trial
    residual = q(gamma)
    if not 0.0 < gamma <= GAMMA_MAX:
        raise RelaxationError(f"relaxation parameter {gamma} outside (0, {GAMMA_MAX}]")
    # tol is the target; near zero the evaluation of V itself rounds above it
    limit = max(tol, 1e-12 * max(1.0, abs(v_old)))
    if abs(residual) > limit:
        raise RelaxationError(f"relaxation residual {abs(residual):.3e} exceeds {limit:.3e}")
    v_new = v_old + gamma * e + residual
    if dtype == np.float64:
        gamma = float(gamma)
    return RelaxationStep(gamma, e, d, abs(residual), evaluations[0], None, v_old, v_new)


@dataclass
class StepResult:
    """Outcome of one (possibly relaxed) Runge-Kutta step."""

    u: np.ndarray
    t: float
    dt: float
    relaxation: RelaxationStep | None
    error_estimate: np.ndarray | None
    direction: np.ndarray = field(repr=False, default=None)


def rrk_step(u, t: float, dt: float, tableau: ButcherTableau, rhs: Callable,
             functional: Functional | None = None, relaxation: bool = True, f0=None) -> StepResult:
    """One Runge-Kutta step, relaxed on ``functional`` when ``relaxation`` is set."""
    Y, F = rk_stages(u, t, dt, tableau, rhs, f0)
    _, b, _, b_hat = tableau.coefficients(F[0].dtype)
    d = _combine(b, F)
    err = None
    if b_hat is not None:
        err = dt * _combine(b - b_hat, F)
    if relaxation:
        if functional is None:
            raise ConfigurationError("relaxation requires a functional")
        e = relaxation_estimate(Y, F, b, dt, functional)
        rel = solve_gamma(u, d, e, dt, functional)
        gamma = rel.gamma
    else:
        rel, gamma = None, 1.0
    return StepResult(u=u + (gamma * dt) * d, t=t + gamma * dt, dt=dt, relaxation=rel,
                      error_estimate=err, direction=d)


# --------------------------------------------------------------------------
# step-size control


@dataclass
class StepController:
    """PI step-size controller on the embedded error estimate."""

    atol: float = 1e-6
    rtol: float = 1e-6
    dt: float | None = None
    safety: float = 0.9
    dt_min: float = 1e-12
    dt_max: float = math.inf
    beta1: float = 0.7
    beta2: float = 0.4
    factor_min: float = 0.2
    factor_max: float = 5.0
    _previous_error: float = field(default=1.0, init=False, repr=False)

    def __post_init__(self):
        if not (self.atol >= 0 and self.rtol >= 0 and self.atol + self.rtol > 0):
            raise ConfigurationError("tolerances must be nonnegative and not both zero")
        if not 0 < self.dt_min < self.dt_max:
            raise ConfigurationError("step bounds must satisfy 0 < dt_min < dt_max")

    def error_norm(self, err: np.ndarray, u: np.ndarray, u_new: np.ndarray) -> float:
        scale = self.atol + self.rtol * np.maximum(np.abs(u), np.abs(u_new))
        return float(np.sqrt(np.mean((err / scale) ** 2)))

    def clamp(self, dt: float) -> float:
        return min(max(dt, self.dt_min), self.dt_max)

    def accept_factor(self, error: float, order: int) -> float:
        error = max(error, 1e-10)
        factor = self.safety * error ** (-self.beta1 / order) * self._previous_error ** (self.beta2 / order)
        self._previous_error = error
        return min(self.factor_max, max(self.factor_min, factor))

    def reject_factor(self, error: float, order: int) -> float:
        factor = self.safety * max(error, 1e-10) ** (-1.0 / order)
        return min(1.0, max(self.factor_min, factor))


def stability_polynomial(tableau: ButcherTableau, z):
    """``R(z) = 1 + z b^T (I - z A)^{-1} 1`` evaluated at (complex) ``z``.

    For an explicit tableau this is the polynomial ``sum_k z^k b^T A^(k-1) 1``.
    """
    A, b = np.asarray(tableau.A, dtype=float), np.asarray(tableau.b, dtype=float)
    coeffs = [1.0]
    v = np.ones(tableau.stages)
    for _ in range(tableau.stages):
        coeffs.append(float(b @ v))
        v = A @ v
    out = np.polyval(coeffs[::-1], np.asarray(z, dtype=complex))
    return out if np.ndim(out) else complex(out)


def real_stability_limit(tableau: ButcherTableau, step: float = 1e-3, x_max: float = 50.0) -> float:
    """Largest ``x`` with ``|R(-y)| <= 1`` for all ``0 <= y <= x``."""
    xs = np.arange(step, x_max, step)
    amp = np.abs(stability_polynomial(tableau, -xs))
    bad = np.nonzero(amp > 1.0 + 1e-12)[0]
    return float(xs[bad[0] - 1]) if bad.size and bad[0] > 0 else float(xs[-1] if not bad.size else 0.0)


def spectral_radius_estimate(rhs: Callable, t: float, u, iterations: int = 40, seed: int = 0) -> float:
    """Power-iteration estimate of the largest Jacobian eigenvalue magnitude.

    Jacobian products use centered differences; the seed makes the
    estimate reproducible.
    """
    u = np.asarray(u, dtype=float)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(u.shape)
    scale = max(float(np.max(np.abs(u))), 1.0)
    lam = 0.0
    for _ in range(iterations):
        v /= np.linalg.norm(v)
        eps = 1e-7 * scale
        jv = (np.asarray(rhs(t, u + eps * v)) - np.asarray(rhs(t, u - eps * v))) / (2.0 * eps)
        lam = float(np.linalg.norm(jv))
        if lam == 0.0:
            return 0.0
        v = jv
    return lam


def initial_step(u, t: float, rhs: Callable, f0, order: int, atol: float, rtol: float) -> float:
    """Standard starting-step heuristic from the solution scale and one trial slope."""
    scale = atol + rtol * np.abs(u)
    d0 = float(np.sqrt(np.mean((u / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    try:
        f1 = rhs(t + h0, u + h0 * f0)
    except AdmissibilityError:
        return h0
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100.0 * h0, h1)


@dataclass
class StepRecord:
    """Diagnostics of one accepted step."""

    t_start: float
    t_end: float
    dt: float
    gamma: float
    error_norm: float
    v_start: float | None
    v_end: float | None
    q_residual: float
    e: float
    start_info: object = field(default=None, repr=False)
    fallback: str | None = None


@dataclass
class AdvanceResult:
    """Final state and per-step history of a time integration."""

    u: np.ndarray
    t: float
    steps: list[StepRecord]
    n_rejected: int = 0
    n_admissibility_rejections: int = 0
    n_relaxation_rejections: int = 0
    n_rhs_evaluations: int = 0


def _time_left(t, t_end):
    return t_end - t > 1e-14 * max(1.0, abs(t_end))


class _Counter:
    def __init__(self, rhs):
        self.rhs = rhs
        self.count = 0

    def __call__(self, t, u):
        self.count += 1
        return self.rhs(t, u)


def _relaxed_update(u, t, dt, tableau, Y, F, functional, relaxation, v_start, precise=False):
    b = tableau.coefficients(F[0].dtype)[1]
    d = _combine(b, F)
    if not relaxation:
        return u + dt * d, t + dt, None
    e = relaxation_estimate(Y, F, b, dt, functional)
    rel = solve_gamma(u, d, e, dt, functional, v_old=v_start, precise=precise)
    return u + (rel.gamma * dt) * d, t + rel.gamma * dt, rel


def _clamp_to_end(u, t, t_end, dt_try, final, tableau, rhs, f0, functional, relaxation,
                  v_start, u_new, t_new, rel, max_iterations: int = 10):
    """Shrink a relaxed step so that ``t + gamma * dt`` lands on ``t_end``.

    Gamma depends weakly on dt, so the landing condition is solved by a
    secant iteration in dt.  If it does not converge the remaining interval
    is covered by one unrelaxed step (flagged ``final_unrelaxed``).
    """
    tol = 1e-14 * max(1.0, abs(t_end))
    if rel is None or not (t_new > t_end + tol or (final and abs(t_new - t_end) > tol)):
        return u_new, t_new, rel, dt_try, final
    prev_dt, prev_gap = dt_try, t_new - t_end
    dt_try = (t_end - t) / rel.gamma
    for _ in range(max_iterations):
        Y, F = rk_stages(u, t, dt_try, tableau, rhs, f0)
        # landing on t_end needs gamma to full precision
        u_new, t_new, rel = _relaxed_update(u, t, dt_try, tableau, Y, F, functional, relaxation, v_start,
                                            precise=True)
        gap = t_new - t_end
        if abs(gap) <= tol:
            return u_new, t_end, rel, dt_try, True
        if gap == prev_gap:
            break
        prev_dt, prev_gap, dt_try = dt_try, gap, dt_try - gap * (dt_try - prev_dt) / (gap - prev_gap)
        if not 0.0 < dt_try < 4.0 * (t_end - t):
            break
    dt_try = t_end - t
    Y, F = rk_stages(u, t, dt_try, tableau, rhs, f0)
    d = _combine(tableau.coefficients(F[0].dtype)[1], F)
    u_new = u + dt_try * d
    v_new = functional.value(u_new)
    rel = RelaxationStep(1.0, v_new - v_start, d, 0.0, 0, "final_unrelaxed", v_start, v_new)
    return u_new, t_end, rel, dt_try, True


def adaptive_advance(u0, t0: float, t_end: float, tableau: ButcherTableau, rhs: Callable,
                     functional: Functional | None, controller: StepController,
                     relaxation: bool = True, first_stage: Callable | None = None,
                     on_step: Callable | None = None, max_steps: int = 10**7) -> AdvanceResult:
    """Integrate from ``t0`` to ``t_end`` with embedded-error step control.

    Parameters
    ----------
    first_stage:
        Optional ``first_stage(t, u) -> (slope, info)`` used for the first
        stage of every step; ``info`` is stored on the step record (used to
        sample the balance ledger at step starts).
    on_step:
        Optional callback ``on_step(record, u_new)`` after each accepted step.
    """
    if not tableau.is_embedded:
        raise ConfigurationError(f"tableau {tableau.name} has no embedded weights for adaptive stepping")
    if relaxation and not tableau.nonnegative_weights:
        raise ConfigurationError(f"tableau {tableau.name} has negative weights; relaxation not allowed")
    if relaxation and functional is None:
        raise ConfigurationError("relaxation requires a functional")
    counted = _Counter(rhs)
    order = tableau.controller_order
    u = np.array(u0, dtype=float, copy=True)
    t = float(t0)
    result = AdvanceResult(u=u, t=t, steps=[])

    def start(t, u):
        if first_stage is not None:
            counted.count += 1
            return first_stage(t, u)
        return counted(t, u), None

    f0, info = start(t, u)
    dt = controller.dt
    if dt is None:
        dt = initial_step(u, t, counted, f0, order, controller.atol, controller.rtol)
    dt = controller.clamp(dt)
    v_start = functional.value(u) if functional is not None else None
    after_reject = False
    while _time_left(t, t_end):
        if len(result.steps) >= max_steps:
            raise IntegrationError("maximum number of steps exceeded", u, t)
        remaining = t_end - t
        final = dt >= remaining
        dt_try = remaining if final else dt
        try:
            Y, F = rk_stages(u, t, dt_try, tableau, counted, f0)
        except AdmissibilityError:
            result.n_rejected += 1
            result.n_admissibility_rejections += 1
            dt = 0.5 * dt_try
            after_reject = True
            if dt < controller.dt_min:
                raise IntegrationError("step size underflow after admissibility failures", u, t,
                                       {"dt": dt, "t": t})
            continue
        err = dt_try * _combine(tableau.b - tableau.b_hat, F)
        u_trial = u + dt_try * _combine(tableau.b, F)
        err_norm = controller.error_norm(err, u, u_trial)
        if not np.isfinite(err_norm) or err_norm > 1.0:
            result.n_rejected += 1
            factor = controller.reject_factor(err_norm if np.isfinite(err_norm) else 1e10, order)
            dt = dt_try * factor
            after_reject = True
            if dt < controller.dt_min:
                raise IntegrationError("step size underflow", u, t,
                                       {"dt": dt, "t": t, "error_norm": err_norm})
            continue
        try:
            u_new, t_new, rel = _relaxed_update(u, t, dt_try, tableau, Y, F, functional, relaxation, v_start)
            u_new, t_new, rel, dt_try, final = _clamp_to_end(
                u, t, t_end, dt_try, final, tableau, counted, f0, functional, relaxation,
                v_start, u_new, t_new, rel)
        except (RelaxationError, AdmissibilityError) as exc:
            result.n_rejected += 1
            if isinstance(exc, RelaxationError):
                result.n_relaxation_rejections += 1
            else:
                result.n_admissibility_rejections += 1
            dt = 0.5 * dt_try
            after_reject = True
            if dt < controller.dt_min:
                raise IntegrationError("step size underflow after relaxation failures", u, t,
                                       {"dt": dt, "t": t})
            continue
        if final and abs(t_new - t_end) <= 1e-12 * max(1.0, abs(t_end)):
            t_new = t_end
        v_end = rel.v_new if rel is not None else (functional.value(u_new) if functional is not None else None)
        record = StepRecord(t_start=t, t_end=t_new, dt=dt_try, gamma=rel.gamma if rel else 1.0,
                            error_norm=err_norm, v_start=v_start, v_end=v_end,
                            q_residual=rel.q_residual if rel else 0.0, e=rel.e if rel else 0.0,
                            start_info=info, fallback=rel.fallback if rel else None)
        factor = controller.accept_factor(err_norm, order)
        if after_reject:
            factor = min(factor, 1.0)
        after_reject = False
        u, t = u_new, t_new
        v_start = functional.value(u) if functional is not None else None
        result.steps.append(record)
        if on_step is not None:
            on_step(record, u)
        if _time_left(t, t_end):
            f0, info = start(t, u)
        if not final:
            dt = controller.clamp(dt_try * factor)
    result.u, result.t = u, t
    result.n_rhs_evaluations = counted.count
    return result


def fixed_advance(u0, t0: float, t_end: float, dt: float, tableau: ButcherTableau, rhs: Callable,
                  functional: Functional | None = None, relaxation: bool = True,
                  on_step: Callable | None = None) -> AdvanceResult:
    """Integrate with a constant nominal step; the last step is clamped to ``t_end``."""
    if dt <= 0:
        raise ConfigurationError("step size must be positive")
    if relaxation and functional is None:
        raise ConfigurationError("relaxation requires a functional")
    counted = _Counter(rhs)
    u = np.array(u0, dtype=_state_dtype(u0), copy=True)
    t = float(t0)
    result = AdvanceResult(u=u, t=t, steps=[])
    v_start = functional.value(u) if functional is not None else None
    while _time_left(t, t_end):
        remaining = t_end - t
        final = dt >= remaining * (1 - 1e-12)
        dt_try = remaining if final else dt
        Y, F = rk_stages(u, t, dt_try, tableau, counted)
        u_new, t_new, rel = _relaxed_update(u, t, dt_try, tableau, Y, F, functional, relaxation, v_start)
        u_new, t_new, rel, dt_try, final = _clamp_to_end(
            u, t, t_end, dt_try, final, tableau, counted, None, functional, relaxation,
            v_start, u_new, t_new, rel)
        if final and abs(t_new - t_end) <= 1e-12 * max(1.0, abs(t_end)):
            t_new = t_end
        v_end = rel.v_new if rel is not None else (functional.value(u_new) if functional is not None else None)
        record = StepRecord(t_start=t, t_end=t_new, dt=dt_try, gamma=rel.gamma if rel else 1.0,
                            error_norm=float("nan"), v_start=v_start, v_end=v_end,
                            q_residual=rel.q_residual if rel else 0.0, e=rel.e if rel else 0.0,
                            fallback=rel.fallback if rel else None)
        u, t = u_new, t_new
        v_start = functional.value(u) if functional is not None else None
        result.steps.append(record)
        if on_step is not None:
            on_step(record, u)
    result.u, result.t = u, t
    result.n_rhs_evaluations = counted.count
    return result
