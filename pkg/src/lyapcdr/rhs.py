"""Element-wise semi-discrete right-hand side with its Lyapunov balance ledger.

Every element array has the layout ``(n_elements, N, ..., N, r)`` (see
:mod:`lyapcdr.sbp`).  Interface terms are evaluated once per paired face:
the element owning the high face in direction ``i`` is the "left" side and
its neighbor (owning the matching low face) the "right" side.  Because the
neighbor map of a periodic box is a permutation, contributions are scattered
without collisions, also when an element is paired with itself.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AdmissibilityError, ConfigurationError
from .mesh import MeshGeometry, MetricData, face_values
from .model import ModelContract
from .sbp import TensorOperatorSet, flat_to_grid, grid_to_flat


@dataclass(frozen=True)
class RhsConfig:
    """Switches for the individual terms of the semi-discrete operator."""

    enable_convection: bool = True
    enable_diss_c: bool = True
    enable_diss_d: bool = True
    enable_viscous: bool = True
    enable_reaction: bool = True
    mms_forcing: bool = False


@dataclass(frozen=True)
class LyapunovBalanceTerms:
    """Decomposition of ``dV/dt = w^T M J du/dt``.

    ``xi`` is the reaction contribution (nonpositive for a dissipative
    reaction), ``dissipation`` the total dissipation (nonnegative), and
    ``forcing`` the contribution of a source term.  The residual
    ``dVdt - xi - forcing + dissipation - boundary`` vanishes analytically.
    """

    dVdt: float
    xi: float
    dissipation: float
    dissipation_volume: float
    dissipation_convective: float
    dissipation_viscous: float
    forcing: float
    boundary: float = 0.0

    @property
    def residual(self) -> float:
        return self.dVdt - self.xi - self.forcing + self.dissipation - self.boundary

    @property
    def scale(self) -> float:
        """Magnitude of the largest ledger entry."""
        return max(abs(self.dVdt), abs(self.xi), abs(self.dissipation), abs(self.forcing),
                   abs(self.boundary), abs(self.dissipation_volume),
                   abs(self.dissipation_convective), abs(self.dissipation_viscous))

    @property
    def relative_residual(self) -> float:
        s = self.scale
        return abs(self.residual) / s if s > 0.0 else 0.0


@dataclass
class GlobalState:
    """Solution values on every element node plus the simulation clock."""

    u: np.ndarray
    t: float = 0.0

    @property
    def n_elements(self) -> int:
        return self.u.shape[0]

    def flat(self) -> np.ndarray:
        return grid_to_flat(self.u, self.u.ndim - 2)

    @classmethod
    def from_flat(cls, vec, t: float, ops: TensorOperatorSet, n_elements: int) -> "GlobalState":
        u = flat_to_grid(vec, n_elements, ops.n1d, ops.dim, ops.n_components)
        return cls(u=u, t=t)


@dataclass
class RhsEvaluation:
    """Full output of one right-hand-side evaluation."""

    rhs: np.ndarray
    reaction: np.ndarray | None = None
    forcing: np.ndarray | None = None
    balance: LyapunovBalanceTerms | None = None
    parts: dict = field(default_factory=dict)


def _locate(mask: np.ndarray) -> tuple[int, int, int]:
    """Element, flat node number and component of the first ``False`` entry."""
    pos = np.unravel_index(int(np.argmin(mask.reshape(-1))), mask.shape)
    element, grid, comp = pos[0], pos[1:-1], pos[-1]
    if grid:
        shape = mask.shape[1:-1]
        node = int(np.ravel_multi_index(tuple(grid[::-1]), shape[::-1]))
    else:
        node = 0
    return int(element), node, int(comp)


class SemiDiscreteOperator:
    """Callable ``rhs(t, u)`` for a periodic tensor-product mesh.

    Parameters
    ----------
    mesh, ops, metrics, model:
        Discretization and physics.
    config:
        Term switches.
    forcing:
        Optional ``forcing(x, t)`` source evaluated at the node coordinates
        when ``config.mms_forcing`` is set.
    threads:
        Number of worker threads for the convective volume term.  Work is
        split into fixed element chunks written to disjoint slices, so the
        result does not depend on the thread count.
    """

    def __init__(self, mesh: MeshGeometry, ops: TensorOperatorSet, metrics: MetricData,
                 model: ModelContract, config: RhsConfig = RhsConfig(),
                 forcing: Callable | None = None, threads: int = 1):
        if not all(mesh.periodic):
            raise ConfigurationError("only fully periodic meshes are supported")
        if ops.dim != mesh.dim or model.dim != mesh.dim:
            raise ConfigurationError("mesh, operators and model must share the same dimension")
        if config.mms_forcing and forcing is None:
            raise ConfigurationError("mms_forcing requested without a forcing function")
        if threads < 1:
            raise ConfigurationError("threads must be positive")
        self.mesh = mesh
        self.ops = ops
        self.metrics = metrics
        self.model = model
        self.config = config
        self.forcing_function = forcing
        self.threads = int(threads)
        self.dim = mesh.dim
        self.r = model.n_components
        self.jacobian = metrics.jacobian
        self.inv_jacobian = 1.0 / metrics.jacobian
        self.mass_jacobian = ops.mass[None] * metrics.jacobian
        self.metric_terms = metrics.metric_terms
        self.inv_end_weight = 1.0 / ops.end_weight
        self.face_weights = ops.face_weights_grid()
        self.neighbors = [mesh.neighbor_elements(i) for i in range(self.dim)]
        self.n_evaluations = 0
        self._normals = []
        for i in range(self.dim):
            Ja_i = self.metric_terms[..., i, :]
            own = face_values(Ja_i, i, 1)
            adj = face_values(Ja_i, i, 0)[self.neighbors[i]]
            self._normals.append((own, adj, 0.5 * (own + adj)))
        # transport-form models: fold -2 D_jk and the averaged contravariant
        # speed of each node pair into one weight per line pair
        self._line_weights = None
        velocity = model.transport_velocity()
        if velocity is not None:
            D = ops.op1d.D
            n = ops.n1d
            self._line_weights = []
            for i in range(self.dim):
                speed = np.moveaxis(self.metric_terms[..., i, :] @ velocity, 1 + i, -1)
                weights = -2.0 * D * 0.5 * (speed[..., :, None] + speed[..., None, :])
                diag = np.diagonal(weights, axis1=-2, axis2=-1).copy()
                upper = [np.diagonal(weights, s, axis1=-2, axis2=-1).copy() for s in range(1, n)]
                lower = [np.diagonal(weights, -s, axis1=-2, axis2=-1).copy() for s in range(1, n)]
                self._line_weights.append((diag, upper, lower))
        # metric entries that vanish identically (Cartesian meshes) are skipped
        self._metric_pairs = [(j, m) for j in range(self.dim) for m in range(self.dim)
                              if np.any(self.metric_terms[..., j, m] != 0.0)]

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self.mesh.n_elements,) + self.ops.grid_shape + (self.r,)

    # state checks -----------------------------------------------------------
    def check_admissible(self, u: np.ndarray) -> None:
        mask = self.model.admissible_mask(u)
        if not np.all(mask):
            e, n, c = _locate(mask)
            raise AdmissibilityError("inadmissible state", element=e, node=n, component=c)

    # face helpers -----------------------------------------------------------
    def _face_pair(self, arr: np.ndarray, direction: int) -> tuple[np.ndarray, np.ndarray]:
        own = face_values(arr, direction, 1)
        adj = face_values(arr, direction, 0)[self.neighbors[direction]]
        return own, adj

    def _scatter(self, out: np.ndarray, direction: int, left: np.ndarray, right: np.ndarray) -> None:
        """Add ``left`` to the high faces and ``right`` to the matching low faces."""
        hi = [slice(None)] * out.ndim
        hi[1 + direction] = -1
        lo = [slice(None)] * out.ndim
        lo[1 + direction] = 0
        out[tuple(hi)] += left
        low_view = out[tuple(lo)]
        low_view[self.neighbors[direction]] += right

    # convective terms -------------------------------------------------------
    def _convective_volume_chunk(self, u: np.ndarray, elements: slice) -> np.ndarray:
        out = np.zeros_like(u)
        if self._line_weights is not None:
            n = self.ops.n1d
            for i in range(self.dim):
                line = np.moveaxis(u, 1 + i, -2)
                diag, upper, lower = self._line_weights[i]
                contrib = diag[elements][..., None] * line
                for s, mean in enumerate(self.model.transport_line_means(line), start=1):
                    contrib[..., : n - s, :] += upper[s - 1][elements][..., None] * mean
                    contrib[..., s:, :] += lower[s - 1][elements][..., None] * mean
                out += np.moveaxis(contrib, -2, 1 + i)
            return out
        D = self.ops.op1d.D
        Ja = self.metric_terms[elements]
        for i in range(self.dim):
            line_u = np.moveaxis(u, 1 + i, -2)
            line_n = np.moveaxis(Ja[..., i, :], 1 + i, -2)
            avg = 0.5 * (line_n[..., :, None, :] + line_n[..., None, :, :])
            pair = self.model.contravariant_two_point_flux(line_u[..., :, None, :],
                                                           line_u[..., None, :, :], avg)
            contrib = -2.0 * np.einsum("jk,...jkr->...jr", D, pair)
            out += np.moveaxis(contrib, -2, 1 + i)
        return out

    def convective_volume(self, u: np.ndarray) -> np.ndarray:
        """Hadamard-form volume term ``-sum_i 2 D_i o F_tilde_i 1`` (not yet divided by J)."""
        nel = u.shape[0]
        if self.threads == 1 or nel < 2 * self.threads:
            return self._convective_volume_chunk(u, slice(None))
        bounds = np.linspace(0, nel, self.threads + 1).astype(int)
        out = np.empty_like(u)

        def work(k):
            a, b = bounds[k], bounds[k + 1]
            out[a:b] = self._convective_volume_chunk(u[a:b], slice(a, b))

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            list(pool.map(work, range(self.threads)))
        return out

    def sat_convective(self, u: np.ndarray, direction: int) -> tuple[np.ndarray, np.ndarray]:
        """Convective interface coupling for the faces normal to ``direction``.

        Returns the contributions to the high-face owners and to their
        neighbors' low faces.
        """
        own, adj = self._face_pair(u, direction)
        n_own, n_adj, n_avg = self._normals[direction]
        shared = self.model.contravariant_two_point_flux(own, adj, n_avg)
        left = (self.model.contravariant_flux(own, n_own) - shared) * self.inv_end_weight
        right = -(self.model.contravariant_flux(adj, n_adj) - shared) * self.inv_end_weight
        return left, right

    def convective_dissipation(self, u: np.ndarray, w: np.ndarray, direction: int):
        """Upwind-type interface dissipation scaled by ``dU/dW``.

        Returns ``(left, right, quadratic)`` where ``quadratic`` is the
        nonnegative pointwise face quantity ``1/2 |lambda| jump^T Y jump``.
        """
        own, adj = self._face_pair(u, direction)
        w_own, w_adj = self._face_pair(w, direction)
        n_avg = self._normals[direction][2]
        speed = self.model.normal_wave_speed(own, adj, n_avg)
        scaling = 0.5 * (self.model.du_dw(own) + self.model.du_dw(adj))
        jump = w_own - w_adj
        flux = 0.5 * speed[..., None] * np.einsum("...ab,...b->...a", scaling, jump)
        quad = np.sum(jump * flux, axis=-1)
        return -flux * self.inv_end_weight, flux * self.inv_end_weight, quad

    # viscous terms ----------------------------------------------------------
    def viscous_theta(self, w: np.ndarray) -> np.ndarray:
        """Penalized reference gradients ``Theta_j``, stacked direction-major as ``(dim, ...)``."""
        theta = np.empty((self.dim,) + w.shape)
        for j in range(self.dim):
            theta[j] = self.ops.apply_derivative(w, j)
            w_own, w_adj = self._face_pair(w, j)
            half_jump = 0.5 * (w_own - w_adj) * self.inv_end_weight
            self._scatter(theta[j], j, -half_jump, -half_jump)
        return theta

    def physical_gradient(self, theta: np.ndarray) -> np.ndarray:
        """``grad_m W = J^-1 sum_j (J dxi_j/dx_m) Theta_j``, direction-major ``(dim, ...)``."""
        Ja = self.metric_terms
        grad = np.zeros_like(theta)
        for j, m in self._metric_pairs:
            grad[m] += Ja[..., j, m, None] * theta[j]
        grad *= self.inv_jacobian[None, ..., None]
        return grad

    def viscous_volume_and_sat(self, u: np.ndarray, t: float, grad: np.ndarray):
        """Viscous volume term plus the averaged-flux interface coupling.

        ``grad`` is the direction-major physical gradient of ``W``.  Returns
        ``(contribution, viscous_flux)``; the contribution is not yet
        divided by J.
        """
        flux = self.model.viscous_flux(u, t, grad)
        Ja = self.metric_terms
        out = np.zeros_like(u)
        for i in range(self.dim):
            g_i = sum(Ja[..., i, l, None] * flux[l] for (j, l) in self._metric_pairs if j == i)
            out += self.ops.apply_derivative(g_i, i)
            g_own, g_adj = self._face_pair(g_i, i)
            half = 0.5 * (g_adj - g_own) * self.inv_end_weight
            self._scatter(out, i, half, half)
        return out, flux

    def viscous_dissipation(self, u: np.ndarray, w: np.ndarray, t: float, direction: int):
        """Interior-penalty dissipation using the face average of ``V_tilde_ii``.

        Returns ``(left, right, quadratic)`` with ``quadratic = jump^T Co jump``.
        """
        own, adj = self._face_pair(u, direction)
        w_own, w_adj = self._face_pair(w, direction)
        n_own, n_adj, _ = self._normals[direction]
        j_own, j_adj = self._face_pair(self.jacobian, direction)
        v_own = self.model.contravariant_viscous_matrix(own, t, n_own, n_own) / j_own[..., None, None]
        v_adj = self.model.contravariant_viscous_matrix(adj, t, n_adj, n_adj) / j_adj[..., None, None]
        coeff = 0.5 * (v_own + v_adj)
        jump = w_own - w_adj
        flux = np.einsum("...ab,...b->...a", coeff, jump)
        quad = np.sum(jump * flux, axis=-1)
        return -flux * self.inv_end_weight, flux * self.inv_end_weight, quad

    def interface_dissipation(self, u: np.ndarray, w: np.ndarray, t: float, direction: int):
        """Sum of the enabled interface dissipation terms for one direction.

        Returns ``(left, right, quadratic_convective, quadratic_viscous)``.
        """
        face_shape = face_values(u, direction, 1).shape
        left = np.zeros(face_shape)
        right = np.zeros(face_shape)
        zero = np.zeros(face_shape[:-1])
        quad_c, quad_d = zero, zero
        if self.config.enable_diss_c:
            lc, rc, quad_c = self.convective_dissipation(u, w, direction)
            left += lc
            right += rc
        if self.config.enable_diss_d and self.config.enable_viscous:
            ld, rd, quad_d = self.viscous_dissipation(u, w, t, direction)
            left += ld
            right += rd
        return left, right, quad_c, quad_d

    # assembly -----------------------------------------------------------------
    def evaluate(self, t: float, u: np.ndarray, balance: bool = False) -> RhsEvaluation:
        """Evaluate ``du/dt`` and optionally the Lyapunov balance ledger."""
        u = np.asarray(u, dtype=float)
        if u.shape != self.state_shape:
            raise ConfigurationError(f"state shape {u.shape} does not match {self.state_shape}")
        self.check_admissible(u)
        self.n_evaluations += 1
        cfg = self.config
        spatial = np.zeros_like(u)
        parts = {}
        w = self.model.lyapunov_W(u)
        volume_dissipation = 0.0
        quad_c_total = 0.0
        quad_d_total = 0.0
        if cfg.enable_convection:
            spatial += self.convective_volume(u)
            for i in range(self.dim):
                left, right = self.sat_convective(u, i)
                self._scatter(spatial, i, left, right)
        if cfg.enable_viscous:
            theta = self.viscous_theta(w)
            grad = self.physical_gradient(theta)
            visc, flux = self.viscous_volume_and_sat(u, t, grad)
            spatial += visc
            if balance:
                contraction = np.sum(grad * flux, axis=(0, -1))
                volume_dissipation = float(np.sum(self.mass_jacobian * contraction))
        if cfg.enable_diss_c or (cfg.enable_diss_d and cfg.enable_viscous):
            for i in range(self.dim):
                left, right, qc, qd = self.interface_dissipation(u, w, t, i)
                self._scatter(spatial, i, left, right)
                if balance:
                    quad_c_total += float(np.sum(self.face_weights * qc))
                    quad_d_total += float(np.sum(self.face_weights * qd))
        rhs = spatial * self.inv_jacobian[..., None]
        reaction = None
        if cfg.enable_reaction:
            reaction = self.model.reaction(u, t)
            rhs = rhs + reaction
        forcing = None
        if cfg.mms_forcing:
            forcing = np.asarray(self.forcing_function(self.metrics.coordinates, t), dtype=float)
            rhs = rhs + forcing
        terms = None
        if balance:
            weighted = self.mass_jacobian[..., None] * w
            terms = LyapunovBalanceTerms(
                dVdt=float(np.sum(weighted * rhs)),
                xi=float(np.sum(weighted * reaction)) if reaction is not None else 0.0,
                dissipation=volume_dissipation + quad_c_total + quad_d_total,
                dissipation_volume=volume_dissipation,
                dissipation_convective=quad_c_total,
                dissipation_viscous=quad_d_total,
                forcing=float(np.sum(weighted * forcing)) if forcing is not None else 0.0,
                boundary=0.0,
            )
        return RhsEvaluation(rhs=rhs, reaction=reaction, forcing=forcing, balance=terms, parts=parts)

    def __call__(self, t: float, u: np.ndarray) -> np.ndarray:
        return self.evaluate(t, u).rhs

    # functionals ----------------------------------------------------------------
    def lyapunov_functional(self, u: np.ndarray) -> float:
        """``sum M J V(u)`` over all nodes."""
        return float(np.sum(self.mass_jacobian * self.model.lyapunov_V(u)))

    def lyapunov_rate(self, u: np.ndarray, du: np.ndarray) -> float:
        """``w(u)^T M J du``, the directional derivative of the functional."""
        return float(np.sum(self.mass_jacobian[..., None] * self.model.lyapunov_W(u) * du))

    def lyapunov_rounding_scale(self, u: np.ndarray) -> float:
        """``sum M J |w(u)| |u|``: how much rounding ``u`` can move the functional."""
        return float(np.sum(self.mass_jacobian[..., None] * np.abs(self.model.lyapunov_W(u) * u)))


def assemble_rhs(operator: SemiDiscreteOperator, state: GlobalState) -> tuple[np.ndarray, LyapunovBalanceTerms]:
    """Evaluate ``du/dt`` at a :class:`GlobalState` together with its balance ledger."""
    result = operator.evaluate(state.t, state.u, balance=True)
    return result.rhs, result.balance
