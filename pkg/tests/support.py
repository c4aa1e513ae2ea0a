"""Shared builders and independent reference operators for the test suite."""

import numpy as np

from lyapcdr.mesh import apply_mapping, build_box_mesh, compute_metrics
from lyapcdr.model import DimerizationModel, DimerParams, EquilibriumPoint
from lyapcdr.rhs import RhsConfig, SemiDiscreteOperator
from lyapcdr.sbp import build_sbp_d1, extend_tensor

EQ = EquilibriumPoint(0.3, 0.9)

CONVECTIVE_ONLY = RhsConfig(enable_diss_c=False, enable_diss_d=False, enable_viscous=False,
                            enable_reaction=False)
SPATIAL_ONLY = RhsConfig(enable_reaction=False)


class GenericFluxModel(DimerizationModel):
    """Same physics, but hides the transport form so the generic kernel runs."""

    def transport_velocity(self):
        return None


def make_operator(dim=2, K=3, p=2, config=RhsConfig(), mapping="affine", alpha=0.0, box=None,
                  velocity=None, d=0.05, k_f=10.0, k_r=1.0, model_cls=DimerizationModel, threads=1,
                  forcing=None, time_dependent_diffusion=False, eq=EQ):
    mesh = build_box_mesh(dim, K, box)
    ops = extend_tensor(build_sbp_d1(p), dim, 2)
    metrics = compute_metrics(mesh, ops, apply_mapping(mesh, ops, mapping, alpha))
    a = tuple(velocity) if velocity is not None else tuple(np.linspace(1.0, 0.6, dim))
    params = DimerParams(k_f=k_f, k_r=k_r, d=d, a=a, time_dependent_diffusion=time_dependent_diffusion)
    model = model_cls(params, eq)
    return SemiDiscreteOperator(mesh, ops, metrics, model, config, forcing=forcing, threads=threads)


def random_state(op, seed=0, spread=0.5):
    """Admissible state with independent log-normal values at every node."""
    rng = np.random.default_rng(seed)
    eq = op.model.equilibrium_state()
    return eq * np.exp(spread * rng.standard_normal(op.state_shape))


def relative_inner(op, u, du):
    """``w^T M J du`` and the sum of the absolute summands."""
    terms = op.mass_jacobian[..., None] * op.model.lyapunov_W(u) * du
    return float(np.sum(terms)), float(np.sum(np.abs(terms)))


# ---------------------------------------------------------------------------
# materialized global operators on periodic 1D meshes


def global_skew(p, K):
    """``S_G = blockdiag(S) + (B - B^T) / 2`` with ``B`` coupling each last node to the next first node."""
    op = build_sbp_d1(p)
    n = p + 1
    S = np.zeros((n * K, n * K))
    for k in range(K):
        S[k * n:(k + 1) * n, k * n:(k + 1) * n] += op.S
    for k in range(K):
        i, j = k * n + n - 1, ((k + 1) % K) * n
        S[i, j] += 0.5
        S[j, i] -= 0.5
    return S, np.tile(op.weights, K)


def global_convective_rhs(op, u):
    """``-J^-1 M_G^-1 (2 S_G o F_G) 1`` per component for a 1D affine mesh."""
    K = op.mesh.n_elements
    p = op.ops.n1d - 1
    S, w = global_skew(p, K)
    J = op.metrics.jacobian.reshape(-1)
    flat = u.reshape(-1, op.r)
    out = np.zeros_like(flat)
    for i in range(flat.shape[0]):
        for j in range(flat.shape[0]):
            if S[i, j] != 0.0:
                F = op.model.two_point_flux(flat[i], flat[j], 0)
                out[i] -= 2.0 * S[i, j] * F
    return (out / (w * J)[:, None]).reshape(u.shape)


def global_gradient_matrix(op):
    """Chain-rule derivative with central interface coupling, ``J^-1 M_G^-1 S_G``."""
    K = op.mesh.n_elements
    S, w = global_skew(op.ops.n1d - 1, K)
    J = op.metrics.jacobian.reshape(-1)
    return S / (w * J)[:, None]


def global_viscous_rhs(op, u, t=0.0):
    """``D_sc diag(C_hat) D_c w`` assembled from the global matrices (1D, metric term 1)."""
    G = global_gradient_matrix(op)
    flat = u.reshape(-1, op.r)
    w = op.model.lyapunov_W(flat)
    chat = op.model.viscous_chat(flat, t)[:, 0, 0]
    grad = G @ w
    flux = np.einsum("nab,nb->na", chat, grad)
    return (G @ flux).reshape(u.shape)
