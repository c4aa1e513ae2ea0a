"""Diagonal-norm summation-by-parts operators on Legendre-Gauss-Lobatto nodes.

The one-dimensional operator is built once per degree and extended to
``dim`` reference directions by applying it along tensor lines.  Element
arrays use the layout ``(n_elements, N, ..., N, *trailing)`` where array
axis ``1 + i`` runs along reference direction ``i``.  The flat (global
vector) ordering is lexicographic with the first direction fastest and the
solution components contiguous per node; :func:`grid_to_flat` and
:func:`flat_to_grid` convert between the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MAX_DEGREE = 12
_NEWTON_TOL = 1e-15
_NEWTON_MAXITER = 100


def _legendre_pair(p: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(P_p(x), P_{p-1}(x))`` via the three-term recurrence."""
    prev = np.ones_like(x)
    cur = x.copy()
    for k in range(2, p + 1):
        prev, cur = cur, ((2 * k - 1) * x * cur - (k - 1) * prev) / k
    return cur, prev


def _check_degree(p) -> int:
    if isinstance(p, bool) or not isinstance(p, (int, np.integer)):
        raise ConfigurationError(f"polynomial degree must be an integer, got {p!r}")
    if not 1 <= p <= MAX_DEGREE:
        raise ConfigurationError(
            f"polynomial degree {p} outside supported range 1..{MAX_DEGREE}"
        )
    return int(p)


def build_lgl_nodes(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Legendre-Gauss-Lobatto nodes and weights for degree ``p``.

    The interior nodes are the roots of ``P'_p``; Newton's method is applied
    to ``(1 - x^2) P'_p(x)`` starting from the Chebyshev-Lobatto points.
    The result is symmetrized so that ``nodes == -nodes[::-1]`` holds
    bitwise and the endpoints are exactly -1 and 1.
    """
    p = _check_degree(p)
    x = -np.cos(np.pi * np.arange(p + 1) / p)
    for _ in range(_NEWTON_MAXITER):
        lp, lpm1 = _legendre_pair(p, x)
        # (1-x^2) P'_p = p (P_{p-1} - x P_p) and its derivative is -p(p+1) P_p
        step = (x * lp - lpm1) / ((p + 1) * lp)
        x = x - step
        if np.max(np.abs(step)) < _NEWTON_TOL:
            break
    x = 0.5 * (x - x[::-1])
    x[0], x[-1] = -1.0, 1.0
    lp, _ = _legendre_pair(p, x)
    w = 2.0 / (p * (p + 1) * lp**2)
    w = 0.5 * (w + w[::-1])
    return x, w


def _collocation_derivative(x: np.ndarray) -> np.ndarray:
    """Lagrange collocation derivative matrix via barycentric weights."""
    n = x.size
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    bary = 1.0 / np.prod(diff, axis=1)
    D = (bary[None, :] / bary[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    D[np.arange(n), np.arange(n)] = -D.sum(axis=1)
    return D


@dataclass(frozen=True)
class SbpOperator1D:
    """First-derivative SBP operator on the reference interval [-1, 1].

    ``Q`` is stored as ``S + E/2`` with ``S`` exactly skew-symmetric, so
    ``Q + Q.T == E`` holds bitwise.  ``D = Q / weights`` row-wise.
    """

    degree: int
    nodes: np.ndarray
    weights: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    E: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.degree + 1

    @property
    def mass(self) -> np.ndarray:
        return np.diag(self.weights)


def build_sbp_d1(p: int) -> SbpOperator1D:
    """Build the LGL collocation SBP first-derivative operator of degree ``p``."""
    x, w = build_lgl_nodes(p)
    D0 = _collocation_derivative(x)
    Q0 = w[:, None] * D0
    S = 0.5 * (Q0 - Q0.T)
    E = np.zeros_like(S)
    E[0, 0], E[-1, -1] = -1.0, 1.0
    Q = S + 0.5 * E
    D = Q / w[:, None]
    for arr in (x, w, D, Q, S, E):
        arr.setflags(write=False)
    return SbpOperator1D(degree=int(p), nodes=x, weights=w, D=D, Q=Q, S=S, E=E)


@dataclass(frozen=True)
class SbpVerificationReport:
    """Maximum residual of every SBP invariant for one operator."""

    degree: int
    residuals: dict[str, float]
    accuracy_by_power: dict[int, float]
    tolerance: float = 1e-12

    @property
    def failures(self) -> list[str]:
        return [name for name, val in self.residuals.items() if not val <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "residuals": dict(self.residuals),
            "accuracy_by_power": {str(k): v for k, v in self.accuracy_by_power.items()},
            "failures": self.failures,
        }


def verify_sbp(op: SbpOperator1D, tolerance: float = 1e-12) -> SbpVerificationReport:
    """Evaluate every SBP invariant of ``op`` and collect the residuals.

    The report never raises; failing invariants are listed in
    ``report.failures``.
    """
    p = op.degree
    x = np.asarray(op.nodes, dtype=float)
    h = np.asarray(op.weights, dtype=float)
    E = np.zeros((x.size, x.size))
    E[0, 0], E[-1, -1] = -1.0, 1.0
    accuracy = {}
    for k in range(p + 1):
        exact = k * x ** (k - 1) if k > 0 else np.zeros_like(x)
        accuracy[k] = float(np.max(np.abs(op.D @ x**k - exact)))
    quad = 0.0
    for k in range(2 * p):
        exact = (1.0 - (-1.0) ** (k + 1)) / (k + 1)
        quad = max(quad, abs(float(np.sum(h * x**k)) - exact))
    residuals = {
        "sbp_symmetry": float(np.max(np.abs(op.Q + op.Q.T - E))),
        "norm_consistency": float(np.max(np.abs(op.D - op.Q / h[:, None]))),
        "derivative_accuracy": max(accuracy.values()),
        "quadrature": quad,
        "weight_positivity": float(max(0.0, -np.min(h))),
        "boundary_nodes": float(max(abs(x[0] + 1.0), abs(x[-1] - 1.0))),
    }
    return SbpVerificationReport(degree=p, residuals=residuals,
                                 accuracy_by_power=accuracy, tolerance=tolerance)


@dataclass(frozen=True)
class FaceDescriptor:
    """One of the ``2 * dim`` faces of the reference element.

    ``side`` is 0 for the face at -1 and 1 for the face at +1 along
    ``direction``; ``normal_sign`` is the matching outward sign.
    ``indices`` are the flat lexicographic node numbers on the face and
    ``weights`` the face quadrature diagonal in the same order.
    """

    face_id: int
    direction: int
    side: int
    normal_sign: float
    indices: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class TensorOperatorSet:
    """Tensor-product extension of a 1D SBP operator to ``dim`` directions."""

    op1d: SbpOperator1D
    dim: int
    n_components: int
    mass: np.ndarray
    faces: tuple[FaceDescriptor, ...] = field(repr=False)

    @property
    def n1d(self) -> int:
        return self.op1d.n_nodes

    @property
    def nodes_per_element(self) -> int:
        return self.n1d**self.dim

    @property
    def end_weight(self) -> float:
        """Quadrature weight at an end node (identical at both ends)."""
        return float(self.op1d.weights[0])

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.n1d,) * self.dim

    def face(self, direction: int, side: int) -> FaceDescriptor:
        return self.faces[2 * direction + side]

    def face_weights_grid(self) -> np.ndarray:
        """Face quadrature (product of the other directions' weights) as a grid.

        Shape ``(N,) * (dim - 1)``; identical for every face of a cube.
        """
        w = np.asarray(self.op1d.weights)
        out = np.ones(())
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, w)
        return out

    def apply_derivative(self, u: np.ndarray, direction: int, first_node_axis: int = 1) -> np.ndarray:
        """Apply ``D`` along one reference direction of an element array."""
        axis = first_node_axis + direction
        moved = np.moveaxis(u, axis, -1)
        return np.moveaxis(moved @ self.op1d.D.T, -1, axis)

    def materialize_derivative(self, direction: int) -> np.ndarray:
        """Dense Kronecker matrix of ``D`` along ``direction`` (test oracle only).

        Acts on flat lexicographic scalar node vectors of one element.
        """
        n = self.n1d
        out = np.ones((1, 1))
        for axis in reversed(range(self.dim)):
            factor = self.op1d.D if axis == direction else np.eye(n)
            out = np.kron(out, factor)
        return out

    def reference_coordinates(self) -> np.ndarray:
        """Reference node coordinates as an array of shape ``(N,)*dim + (dim,)``."""
        x = np.asarray(self.op1d.nodes)
        grids = np.meshgrid(*([x] * self.dim), indexing="ij")
        return np.stack(grids, axis=-1)


def extend_tensor(op: SbpOperator1D, dim: int, n_components: int = 1) -> TensorOperatorSet:
    """Extend ``op`` to a ``dim``-dimensional element with ``n_components`` fields."""
    if dim not in (1, 2, 3):
        raise ConfigurationError(f"dim must be 1, 2 or 3, got {dim!r}")
    if n_components < 1:
        raise ConfigurationError("n_components must be positive")
    n = op.n_nodes
    w = np.asarray(op.weights)
    mass = np.ones(())
    for _ in range(dim):
        mass = np.multiply.outer(mass, w)
    mass.setflags(write=False)
    numbering = _flat_numbering(n, dim)
    faces = []
    for direction in range(dim):
        for side in (0, 1):
            sl = [slice(None)] * dim
            sl[direction] = 0 if side == 0 else n - 1
            on_face = numbering[tuple(sl)]
            weights = np.ones(())
            for _ in range(dim - 1):
                weights = np.multiply.outer(weights, w)
            idx = _grid_to_flat_scalar(on_face, dim - 1)
            wts = _grid_to_flat_scalar(weights, dim - 1)
            idx.setflags(write=False)
            wts.setflags(write=False)
            faces.append(FaceDescriptor(face_id=2 * direction + side, direction=direction,
                                        side=side, normal_sign=-1.0 if side == 0 else 1.0,
                                        indices=idx, weights=wts))
    return TensorOperatorSet(op1d=op, dim=dim, n_components=int(n_components),
                             mass=mass, faces=tuple(faces))


def _flat_numbering(n: int, dim: int) -> np.ndarray:
    """Grid of flat lexicographic node numbers (first direction fastest)."""
    grids = np.meshgrid(*([np.arange(n)] * dim), indexing="ij")
    number = np.zeros((n,) * dim, dtype=np.int64)
    for axis, g in enumerate(grids):
        number += g * n**axis
    return number


def _grid_to_flat_scalar(grid: np.ndarray, ndim: int) -> np.ndarray:
    """Flatten a ``ndim``-axis grid so that axis 0 varies fastest."""
    if ndim == 0:
        return np.asarray(grid).reshape(1)
    return np.transpose(grid, tuple(reversed(range(ndim)))).reshape(-1).copy()


def grid_to_flat(u: np.ndarray, dim: int) -> np.ndarray:
    """Element grid array ``(nel, N..., r)`` to the flat global vector.

    Node order is lexicographic with direction 0 fastest; the ``r``
    components of each node are contiguous.
    """
    axes = (0,) + tuple(range(dim, 0, -1)) + tuple(range(dim + 1, u.ndim))
    return np.ascontiguousarray(np.transpose(u, axes)).reshape(-1)


def flat_to_grid(vec: np.ndarray, n_elements: int, n1d: int, dim: int, n_components: int) -> np.ndarray:
    """Inverse of :func:`grid_to_flat`."""
    expected = n_elements * n1d**dim * n_components
    vec = np.asarray(vec)
    if vec.size != expected:
        raise ConfigurationError(f"state length {vec.size} does not match layout size {expected}")
    arr = vec.reshape((n_elements,) + (n1d,) * dim + (n_components,))
    axes = (0,) + tuple(range(dim, 0, -1)) + (dim + 1,)
    return np.ascontiguousarray(np.transpose(arr, axes))


def dump_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a dense matrix as row-major plain text with 17 significant digits."""
    np.savetxt(Path(path), np.atleast_2d(matrix), fmt="%.17g")


def dump_operator(op: SbpOperator1D, directory: str | Path) -> list[Path]:
    """Dump nodes, weights, D, Q and E of ``op`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("nodes", "weights", "D", "Q", "E"):
        path = directory / f"p{op.degree}_{name}.txt"
        dump_matrix(path, getattr(op, name))
        written.append(path)
    return written
