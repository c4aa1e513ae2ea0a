"""Operator certification: SBP, tensor-product and metric invariants per (degree, dim)."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .mesh import apply_mapping, build_box_mesh, check_gcl, compute_metrics, face_metric_mismatch
from .sbp import MAX_DEGREE, SbpOperator1D, build_sbp_d1, dump_operator, extend_tensor, verify_sbp

DEFECTS = ("skew", "accuracy", "weights")
DEFECT_SIZE = 1e-6


def inject_defect(op: SbpOperator1D, defect: str) -> SbpOperator1D:
    """Return a copy of ``op`` with a deliberate flaw, for exercising the checks.

    ``skew`` breaks ``Q + Q^T = E``, ``accuracy`` perturbs one row of ``D``
    and ``weights`` perturbs the first quadrature weight.
    """
    if defect not in DEFECTS:
        raise ConfigurationError(f"unknown defect {defect!r}; choose from {DEFECTS}")
    D, Q, w = op.D.copy(), op.Q.copy(), op.weights.copy()
    if defect == "skew":
        Q[0, 1] += DEFECT_SIZE
        D = Q / w[:, None]
    elif defect == "accuracy":
        D[1, 1] += DEFECT_SIZE
    else:
        w[0] *= 1.0 + DEFECT_SIZE
    return dataclasses.replace(op, D=D, Q=Q, weights=w)


def _tensor_checks(op: SbpOperator1D, dim: int, rng: np.random.Generator) -> dict[str, float]:
    ops = extend_tensor(op, dim)
    n = ops.n1d
    w = np.asarray(op.weights)
    kron_mass = np.ones(1)
    for _ in range(dim):
        kron_mass = np.kron(w, kron_mass)
    flat_mass = ops.mass.reshape(-1, order="F")
    out = {"tensor_mass": float(np.max(np.abs(flat_mass - kron_mass)))}
    u = rng.standard_normal((1,) + ops.grid_shape)
    E1 = np.zeros((n, n))
    E1[0, 0], E1[-1, -1] = -1.0, 1.0
    deriv, sbp = 0.0, 0.0
    for i in range(dim):
        Di = ops.materialize_derivative(i)
        fast = ops.apply_derivative(u, i)[0].reshape(-1, order="F")
        deriv = max(deriv, float(np.max(np.abs(Di @ u[0].reshape(-1, order="F") - fast))))
        Ei = np.ones((1, 1))
        for axis in reversed(range(dim)):
            Ei = np.kron(Ei, E1 if axis == i else np.diag(w))
        Qi = kron_mass[:, None] * Di
        sbp = max(sbp, float(np.max(np.abs(Qi + Qi.T - Ei))))
    out["tensor_derivative"] = deriv
    out["tensor_sbp"] = sbp
    ref = ops.reference_coordinates().reshape(-1, dim, order="F")
    face = 0.0
    for i in range(dim):
        for side in (0, 1):
            f = ops.face(i, side)
            face = max(face, float(np.max(np.abs(ref[f.indices, i] - (2 * side - 1)))))
    out["face_restriction"] = face
    return out


def _metric_checks(op: SbpOperator1D, dim: int) -> dict[str, float]:
    ops = extend_tensor(op, dim, 2)
    mesh = build_box_mesh(dim, [2] * dim)
    metrics = compute_metrics(mesh, ops, apply_mapping(mesh, ops))
    out = {"gcl_affine": check_gcl(metrics, ops), "face_metric_match": face_metric_mismatch(mesh, metrics)}
    if dim == 2:
        warped = compute_metrics(mesh, ops, apply_mapping(mesh, ops, "warp", 0.05))
        out["gcl_warp"] = check_gcl(warped, ops)
    return out


def verify_operators(degrees, dims, defect: str | None = None, dump_dir: str | Path | None = None,
                     tolerance: float = 1e-12) -> dict:
    """Check every invariant for each ``(degree, dim)`` pair.

    Returns a JSON-ready report with one entry per pair listing residuals,
    the tolerance and any failing invariant names.
    """
    degrees = [int(p) for p in degrees]
    dims = [int(d) for d in dims]
    for p in degrees:
        if not 1 <= p <= MAX_DEGREE:
            raise ConfigurationError(f"polynomial degree {p} outside supported range 1..{MAX_DEGREE}")
    for d in dims:
        if d not in (1, 2, 3):
            raise ConfigurationError(f"dimension {d} not supported")
    if defect is not None and defect not in DEFECTS:
        raise ConfigurationError(f"unknown defect {defect!r}; choose from {DEFECTS}")
    rng = np.random.default_rng(0)
    entries = []
    for p in degrees:
        op = build_sbp_d1(p)
        if defect is not None:
            op = inject_defect(op, defect)
        if dump_dir is not None:
            dump_operator(op, Path(dump_dir) / f"p{p}")
        sbp_report = verify_sbp(op, tolerance)
        for d in dims:
            residuals = dict(sbp_report.residuals)
            residuals.update(_tensor_checks(op, d, rng))
            residuals.update(_metric_checks(op, d))
            failures = [k for k, v in residuals.items() if not v <= tolerance]
            entries.append({"degree": p, "dim": d, "passed": not failures, "failures": failures,
                            "residuals": residuals})
    return {"tolerance": tolerance, "defect": defect, "passed": all(e["passed"] for e in entries),
            "entries": entries}
