"""Model contract for convection-diffusion-reaction systems and the dimerization instance.

All pointwise functions take state arrays with the component axis last,
``U[..., c]``, and broadcast over any leading node axes.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AdmissibilityError, ConfigurationError

# Series coefficients 1/(2k+1) of (u = f^2) in ln((1+f)/(1-f)) / (2f)
_LOG_MEAN_SERIES = tuple(1.0 / (2 * k + 1) for k in range(8))
_LOG_MEAN_SWITCH = 1e-2
# z ln z - z + 1 = sum_{k>=2} (-1)^k delta^k / (k (k - 1)) with z = 1 + delta
_ENTROPY_SERIES = tuple((-1.0) ** k / (k * (k - 1)) for k in range(2, 22))
_ENTROPY_SWITCH = 0.1


def relative_entropy_density(z):
    """``z ln z - z + 1`` to full relative precision, including near ``z = 1``."""
    return relative_entropy_deviation(np.asarray(z, dtype=float) - 1.0)


def relative_entropy_deviation(delta):
    """``(1 + delta) ln(1 + delta) - delta``, taking the deviation directly.

    Passing ``delta = (U - eq) / eq`` avoids the rounding of ``U / eq`` that
    would otherwise swamp the density close to equilibrium.
    """
    delta = np.asarray(delta, dtype=float)
    z = 1.0 + delta
    poly = np.zeros_like(delta)
    for coef in reversed(_ENTROPY_SERIES):
        poly = poly * delta + coef
    series = delta * delta * poly
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = z * np.log(z) - delta
    return np.where(np.abs(delta) < _ENTROPY_SWITCH, series, direct)


def log_mean(x, y):
    """Logarithmic mean ``(x - y) / (ln x - ln y)`` with a stable branch near ``x == y``.

    Works elementwise on arrays.  Raises :class:`AdmissibilityError` when an
    argument is not strictly positive.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(x > 0.0) and np.all(y > 0.0)):
        raise AdmissibilityError("logarithmic mean requires strictly positive arguments")
    f = (x - y) / (x + y)
    u = f * f
    poly = np.zeros_like(u)
    for coef in reversed(_LOG_MEAN_SERIES):
        poly = poly * u + coef
    series = (x + y) / (2.0 * poly)
    near = u < _LOG_MEAN_SWITCH
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = (x - y) / (np.log(x) - np.log(y))
    out = np.where(near, series, direct)
    return out if out.ndim else float(out)


class ModelContract(abc.ABC):
    """Interface for a convection-diffusion-reaction system with a Lyapunov function.

    Subclasses provide the pointwise physics.  ``direction``/``l`` arguments
    index the physical coordinate; ``normal`` arguments are arrays of shape
    ``(..., dim)`` holding metric-weighted normals.
    """

    n_components: int
    dim: int

    @abc.abstractmethod
    def equilibrium_state(self) -> np.ndarray:
        """Reference equilibrium state, shape ``(r,)``."""

    @abc.abstractmethod
    def reaction(self, U: np.ndarray, t: float) -> np.ndarray:
        ...

    @abc.abstractmethod
    def convective_flux(self, U: np.ndarray, direction: int) -> np.ndarray:
        ...

    @abc.abstractmethod
    def two_point_flux(self, Ua: np.ndarray, Ub: np.ndarray, direction: int) -> np.ndarray:
        ...

    @abc.abstractmethod
    def lyapunov_V(self, U: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def lyapunov_W(self, U: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def lyapunov_potential_psi(self, U: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def du_dw(self, U: np.ndarray) -> np.ndarray:
        """Jacobian ``dU/dW`` with shape ``(..., r, r)``."""

    @abc.abstractmethod
    def viscous_chat(self, U: np.ndarray, t: float) -> np.ndarray:
        """Blocks ``C_hat[l, m]`` with shape ``(..., dim, dim, r, r)``."""

    @abc.abstractmethod
    def normal_wave_speed(self, Ua: np.ndarray, Ub: np.ndarray, normal: np.ndarray) -> np.ndarray:
        """Magnitude of the largest convective wave speed along ``normal``."""

    def transport_velocity(self) -> np.ndarray | None:
        """Constant velocity ``a`` if ``F_l(Ua, Ub) = a_l * G(Ua, Ub)`` for every ``l``.

        Models of this transport form enable a faster volume kernel that
        only needs the symmetric mean ``G``.  Returns ``None`` for general
        fluxes.
        """
        return None

    def transport_mean(self, Ua: np.ndarray, Ub: np.ndarray) -> np.ndarray:
        """Symmetric mean ``G`` of a transport-form model."""
        raise NotImplementedError

    def transport_line_means(self, line: np.ndarray) -> list[np.ndarray]:
        """Means of all node pairs along tensor lines, grouped by index offset.

        ``line`` has shape ``(..., N, r)``.  Entry ``s - 1`` of the result has
        shape ``(..., N - s, r)`` and holds ``G(line[j], line[j + s])``.
        """
        n = line.shape[-2]
        return [self.transport_mean(line[..., : n - s, :], line[..., s:, :]) for s in range(1, n)]

    def admissible_mask(self, U: np.ndarray) -> np.ndarray:
        """Boolean mask of admissible entries, same shape as ``U``."""
        return np.isfinite(U)

    def check_admissible(self, U: np.ndarray) -> None:
        """Raise :class:`AdmissibilityError` at the first inadmissible entry."""
        ok = self.admissible_mask(U)
        if not np.all(ok):
            bad = np.unravel_index(int(np.argmin(ok.reshape(-1))), ok.shape)
            raise AdmissibilityError(f"inadmissible state at index {tuple(int(b) for b in bad)}")

    def contravariant_flux(self, U: np.ndarray, normal: np.ndarray) -> np.ndarray:
        """``sum_l normal_l F_l(U)``."""
        return sum(normal[..., l, None] * self.convective_flux(U, l) for l in range(self.dim))

    def contravariant_two_point_flux(self, Ua: np.ndarray, Ub: np.ndarray, normal: np.ndarray) -> np.ndarray:
        """``sum_l normal_l F_l(Ua, Ub)``."""
        return sum(normal[..., l, None] * self.two_point_flux(Ua, Ub, l) for l in range(self.dim))

    def viscous_flux(self, U: np.ndarray, t: float, grad_w: np.ndarray) -> np.ndarray:
        """``f_l = sum_m C_hat[l, m] grad_m W``.

        ``grad_w`` and the result are direction-major, shape ``(dim, ..., r)``.
        """
        return np.einsum("...lmab,m...b->l...a", self.viscous_chat(U, t), grad_w)

    def contravariant_viscous_matrix(self, U: np.ndarray, t: float, na: np.ndarray, nb: np.ndarray) -> np.ndarray:
        """``sum_{l,m} na_l C_hat[l, m] nb_m`` with shape ``(..., r, r)``."""
        return np.einsum("...l,...lmab,...m->...ab", na, self.viscous_chat(U, t), nb)


@dataclass(frozen=True)
class DimerParams:
    """Rate constants, diffusion and transport velocity of the dimerization system."""

    k_f: float = 10.0
    k_r: float = 1.0
    d: float = 0.05
    a: tuple[float, ...] = (1.0, 1.0)
    time_dependent_diffusion: bool = False

    def __post_init__(self):
        if not self.k_f >= 0.0:
            raise ConfigurationError("k_f must be nonnegative")
        if not self.k_r > 0.0:
            raise ConfigurationError("k_r must be positive")
        if not self.d >= 0.0:
            raise ConfigurationError("d must be nonnegative")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))

    def diffusion_factor(self, t: float) -> float:
        if self.time_dependent_diffusion:
            return 1.0 + 0.5 * math.sin(2.0 * math.pi * t)
        return 1.0


@dataclass(frozen=True)
class EquilibriumPoint:
    """Monomer and dimer concentrations at chemical equilibrium."""

    P_eq: float
    Q_eq: float

    def __post_init__(self):
        if not (self.P_eq > 0.0 and self.Q_eq > 0.0):
            raise ConfigurationError("equilibrium concentrations must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.P_eq, self.Q_eq])

    @property
    def mass(self) -> float:
        return self.P_eq + 2.0 * self.Q_eq


def equilibrium_from_mass(mass: float, k_f: float, k_r: float) -> EquilibriumPoint:
    """Equilibrium reached by a well-mixed system with conserved mass ``P + 2Q``."""
    if not (mass > 0.0 and k_f > 0.0 and k_r > 0.0):
        raise ConfigurationError("mass, k_f and k_r must all be positive")
    # rationalized root and Q = k_f P^2 / k_r avoid cancellation at small mass
    P_eq = 2.0 * k_r * mass / (math.sqrt(k_r * (8.0 * k_f * mass + k_r)) + k_r)
    return EquilibriumPoint(P_eq=P_eq, Q_eq=k_f * P_eq * P_eq / k_r)


@dataclass(frozen=True)
class DimerizationModel(ModelContract):
    """Reversible dimerization ``2P <-> Q`` with linear transport and diffusion."""

    params: DimerParams
    equilibrium: EquilibriumPoint
    n_components: int = field(default=2, init=False)

    def __post_init__(self):
        if len(self.params.a) not in (1, 2, 3):
            raise ConfigurationError("velocity must have 1 to 3 components")

    @property
    def dim(self) -> int:
        return len(self.params.a)

    def equilibrium_state(self) -> np.ndarray:
        return self.equilibrium.as_array()

    def admissible_mask(self, U):
        return np.isfinite(U) & (U > 0.0)

    def _require(self, U):
        if not np.all(U > 0.0):
            self.check_admissible(U)

    def reaction(self, U, t=0.0):
        P, Q = U[..., 0], U[..., 1]
        rate = self.params.k_f * P * P - self.params.k_r * Q
        return np.stack([-2.0 * rate, rate], axis=-1)

    def convective_flux(self, U, direction):
        return self.params.a[direction] * U

    def two_point_flux(self, Ua, Ub, direction):
        eq = self.equilibrium_state()
        return self.params.a[direction] * eq * log_mean(Ua / eq, Ub / eq)

    def contravariant_two_point_flux(self, Ua, Ub, normal):
        speed = normal @ np.asarray(self.params.a)
        eq = self.equilibrium_state()
        return speed[..., None] * eq * log_mean(Ua / eq, Ub / eq)

    def contravariant_flux(self, U, normal):
        return (normal @ np.asarray(self.params.a))[..., None] * U

    def transport_velocity(self):
        return np.asarray(self.params.a)

    def transport_mean(self, Ua, Ub):
        eq = self.equilibrium_state()
        return eq * log_mean(Ua / eq, Ub / eq)

    def transport_line_means(self, line):
        eq = self.equilibrium_state()
        z = line / eq
        if not np.all(z > 0.0):
            self.check_admissible(line)
        logs = np.log(z)
        n = line.shape[-2]
        out = []
        for s in range(1, n):
            za, zb = z[..., : n - s, :], z[..., s:, :]
            diff = za - zb
            total = za + zb
            f = diff / total
            u = f * f
            poly = np.full_like(u, _LOG_MEAN_SERIES[-1])
            for coef in reversed(_LOG_MEAN_SERIES[:-1]):
                poly *= u
                poly += coef
            series = total / (2.0 * poly)
            with np.errstate(divide="ignore", invalid="ignore"):
                direct = diff / (logs[..., : n - s, :] - logs[..., s:, :])
            out.append(eq * np.where(u < _LOG_MEAN_SWITCH, series, direct))
        return out

    def lyapunov_V(self, U):
        self._require(U)
        eq = self.equilibrium_state()
        return np.sum(eq * relative_entropy_deviation((U - eq) / eq), axis=-1)

    def lyapunov_W(self, U):
        self._require(U)
        eq = self.equilibrium_state()
        return np.log1p((U - eq) / eq)

    def lyapunov_potential_psi(self, U):
        return np.sum(U - self.equilibrium_state(), axis=-1)

    def du_dw(self, U):
        self._require(U)
        out = np.zeros(U.shape + (2,))
        out[..., 0, 0] = U[..., 0]
        out[..., 1, 1] = U[..., 1]
        return out

    def viscous_chat(self, U, t=0.0):
        self._require(U)
        dim = self.dim
        scale = self.params.d * self.params.diffusion_factor(t)
        out = np.zeros(U.shape[:-1] + (dim, dim, 2, 2))
        for l in range(dim):
            out[..., l, l, 0, 0] = scale * U[..., 0]
            out[..., l, l, 1, 1] = scale * U[..., 1]
        return out

    def viscous_flux(self, U, t, grad_w):
        scale = self.params.d * self.params.diffusion_factor(t)
        return scale * U[None] * grad_w

    def contravariant_viscous_matrix(self, U, t, na, nb):
        scale = self.params.d * self.params.diffusion_factor(t)
        dot = np.sum(na * nb, axis=-1)
        out = np.zeros(U.shape + (2,))
        out[..., 0, 0] = scale * dot * U[..., 0]
        out[..., 1, 1] = scale * dot * U[..., 1]
        return out

    def normal_wave_speed(self, Ua, Ub, normal):
        return np.abs(normal @ np.asarray(self.params.a))

    def conserved_mass_density(self, U):
        """Pointwise ``P + 2Q``; its integral is invariant under the reaction."""
        return U[..., 0] + 2.0 * U[..., 1]


@dataclass(frozen=True)
class ManufacturedSolution:
    """Smooth periodic manufactured solution with ``P = Q = prod_i g(x_i - t)``.

    ``g(s) = base + amplitude * cos(k s)`` by default.  With
    ``form="sqrt"`` the profile is ``base + amplitude * sqrt(cos(k s))``,
    which is only defined where ``cos(k s) >= 0``.
    """

    params: DimerParams
    wavenumber: float = 3.0
    base: float = 1.25
    amplitude: float = 0.75
    form: str = "cos"

    def __post_init__(self):
        if self.form not in ("cos", "sqrt"):
            raise ConfigurationError(f"unknown manufactured-solution form {self.form!r}")

    @property
    def dim(self) -> int:
        return len(self.params.a)

    def _profile(self, s):
        k, amp = self.wavenumber, self.amplitude
        c, sn = np.cos(k * s), np.sin(k * s)
        if self.form == "cos":
            return self.base + amp * c, -amp * k * sn, -amp * k * k * c
        if np.any(c <= 0.0):
            raise ConfigurationError("square-root profile evaluated where cos(k s) <= 0")
        root = np.sqrt(c)
        g = self.base + amp * root
        dg = -amp * k * sn / (2.0 * root)
        d2g = amp * (-0.5 * k * k * root - 0.25 * k * k * sn * sn / (c * root))
        return g, dg, d2g

    def _factors(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ConfigurationError("coordinate array does not match model dimension")
        return self._profile(x - t)

    def scalar(self, x, t):
        g, _, _ = self._factors(x, t)
        return np.prod(g, axis=-1)

    def solution(self, x, t):
        """Manufactured state at coordinates ``x[..., dim]``, shape ``(..., 2)``."""
        s = self.scalar(x, t)
        return np.stack([s, s], axis=-1)

    def forcing(self, x, t):
        """``dU/dt + a . grad U - d C(t) lap U - R(U)`` evaluated in closed form."""
        g, dg, d2g = self._factors(x, t)
        dim = self.dim
        a = self.params.a
        dt = np.zeros(g.shape[:-1])
        adv = np.zeros(g.shape[:-1])
        lap = np.zeros(g.shape[:-1])
        for i in range(dim):
            others = np.prod(np.delete(g, i, axis=-1), axis=-1) if dim > 1 else 1.0
            dt = dt - dg[..., i] * others
            adv = adv + a[i] * dg[..., i] * others
            lap = lap + d2g[..., i] * others
        s = np.prod(g, axis=-1)
        k_f, k_r = self.params.k_f, self.params.k_r
        rate = k_f * s * s - k_r * s
        reaction = np.stack([-2.0 * rate, rate], axis=-1)
        diffusion = self.params.d * self.params.diffusion_factor(t) * lap
        transport = dt + adv - diffusion
        return np.stack([transport, transport], axis=-1) - reaction
