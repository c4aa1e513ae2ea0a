"""Periodic tensor-product box meshes, mappings and metric terms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, GeometryError
from .sbp import TensorOperatorSet, grid_to_flat

MAX_WARP_AMPLITUDE = 0.1


@dataclass(frozen=True)
class MeshGeometry:
    """Uniform Cartesian partition of a box into ``prod(K)`` elements.

    Elements are numbered lexicographically with the first direction
    fastest.  ``neighbors[e, f] = (element, face)`` gives the face paired
    with face ``f`` of element ``e``; face ``2*i`` sits at the low end of
    direction ``i`` and face ``2*i + 1`` at the high end.  A face on a
    non-periodic boundary has neighbor ``(-1, -1)``.
    """

    dim: int
    elements_per_dim: tuple[int, ...]
    box_lo: tuple[float, ...]
    box_hi: tuple[float, ...]
    periodic: tuple[bool, ...]
    neighbors: np.ndarray

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.elements_per_dim))

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.box_hi) - np.asarray(self.box_lo)

    @property
    def element_widths(self) -> np.ndarray:
        return self.lengths / np.asarray(self.elements_per_dim)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def element_index(self, element: int) -> tuple[int, ...]:
        """Integer position ``(k_1, ..., k_dim)`` of an element in the grid."""
        out = []
        for k in self.elements_per_dim:
            out.append(element % k)
            element //= k
        return tuple(out)

    def element_indices(self) -> np.ndarray:
        """Array ``(n_elements, dim)`` of all element grid positions."""
        return np.array([self.element_index(e) for e in range(self.n_elements)], dtype=np.int64)

    def neighbor_elements(self, direction: int) -> np.ndarray:
        """Element adjoining each element across its high face in ``direction``."""
        return self.neighbors[:, 2 * direction + 1, 0]

    def interface_count(self) -> int:
        """Number of distinct paired faces, each counted once."""
        return int(np.sum(self.neighbors[:, 1::2, 0] >= 0))


def _normalize_box(dim: int, box) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if box is None:
        return (0.0,) * dim, (1.0,) * dim
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        arr = np.tile(arr, (dim, 1))
    if arr.shape != (dim, 2):
        raise ConfigurationError(f"box must be (lo, hi) or {dim} (lo, hi) pairs, got {box!r}")
    lo, hi = arr[:, 0], arr[:, 1]
    if not np.all(np.isfinite(arr)) or np.any(hi <= lo):
        raise ConfigurationError(f"degenerate box {box!r}")
    return tuple(float(v) for v in lo), tuple(float(v) for v in hi)


def build_box_mesh(dim: int, elements_per_dim, box=None, periodic: Sequence[bool] | bool = True) -> MeshGeometry:
    """Uniform periodic mesh of ``box`` (default unit box) with ``K_i`` elements per direction."""
    if dim not in (1, 2, 3):
        raise ConfigurationError(f"dim must be 1, 2 or 3, got {dim!r}")
    K = np.atleast_1d(np.asarray(elements_per_dim))
    if K.size == 1:
        K = np.repeat(K, dim)
    if K.size != dim or not np.all(np.equal(np.mod(K, 1), 0)) or np.any(K < 1):
        raise ConfigurationError(f"elements per dimension must be positive integers, got {elements_per_dim!r}")
    K = tuple(int(k) for k in K)
    if isinstance(periodic, (bool, np.bool_)):
        periodic = (bool(periodic),) * dim
    periodic = tuple(bool(v) for v in periodic)
    if len(periodic) != dim:
        raise ConfigurationError("periodic flags must match dim")
    lo, hi = _normalize_box(dim, box)
    n_el = int(np.prod(K))
    strides = np.cumprod((1,) + K[:-1])
    idx = np.stack(np.meshgrid(*[np.arange(k) for k in reversed(K)], indexing="ij"), axis=-1)
    idx = idx.reshape(-1, dim)[:, ::-1]
    neighbors = np.full((n_el, 2 * dim, 2), -1, dtype=np.int64)
    ids = idx @ strides
    for i in range(dim):
        for side, shift in ((0, -1), (1, 1)):
            nb = idx.copy()
            nb[:, i] += shift
            wrapped = (nb[:, i] < 0) | (nb[:, i] >= K[i])
            nb[:, i] %= K[i]
            nb_id = nb @ strides
            valid = ~wrapped | periodic[i]
            neighbors[ids[valid], 2 * i + side, 0] = nb_id[valid]
            neighbors[ids[valid], 2 * i + side, 1] = 2 * i + (1 - side)
    neighbors.setflags(write=False)
    return MeshGeometry(dim=dim, elements_per_dim=K, box_lo=lo, box_hi=hi,
                        periodic=periodic, neighbors=neighbors)


def _unit_coordinates(mesh: MeshGeometry, ops: TensorOperatorSet) -> np.ndarray:
    """Node positions normalized to [0, 1] per direction, shape ``(nel, N..., dim)``.

    Shared face nodes of neighboring elements get bitwise identical values.
    """
    ref = ops.reference_coordinates()
    idx = mesh.element_indices()
    K = np.asarray(mesh.elements_per_dim, dtype=float)
    local = 0.5 * (ref + 1.0)
    shape = (mesh.n_elements,) + (1,) * mesh.dim + (mesh.dim,)
    return (idx.reshape(shape) + local[None]) / K


def apply_mapping(mesh: MeshGeometry, ops: TensorOperatorSet, mapping: str = "affine",
                  alpha: float = 0.0) -> np.ndarray:
    """Physical coordinates of every element node, shape ``(nel, N..., dim)``.

    ``mapping`` is ``"affine"`` or ``"warp"``.  The warp (2D only) displaces
    each coordinate by ``alpha * L_l * sin(pi s_1) sin(pi s_2)`` where ``s``
    is the position normalized to the unit box; the displacement vanishes on
    the domain boundary, so periodic faces stay matched.
    """
    if ops.dim != mesh.dim:
        raise ConfigurationError("operator set and mesh dimensions differ")
    s = _unit_coordinates(mesh, ops)
    lo = np.asarray(mesh.box_lo)
    L = mesh.lengths
    if mapping == "affine":
        return lo + L * s
    if mapping == "warp":
        if mesh.dim != 2:
            raise ConfigurationError("the smooth warp is only available in 2D")
        if not 0.0 <= abs(alpha) <= MAX_WARP_AMPLITUDE:
            raise ConfigurationError(f"warp amplitude {alpha} exceeds {MAX_WARP_AMPLITUDE}")
        bump = np.sin(np.pi * s[..., 0]) * np.sin(np.pi * s[..., 1])
        return lo + L * (s + alpha * bump[..., None])
    raise ConfigurationError(f"unknown mapping {mapping!r}")


@dataclass(frozen=True)
class MetricData:
    """Metric Jacobian and contravariant metric terms at every node.

    ``jacobian`` has shape ``(nel, N...)``; ``metric_terms[..., i, l]``
    holds ``J * d(xi_i)/d(x_l)`` with shape ``(nel, N..., dim, dim)``.
    """

    coordinates: np.ndarray
    jacobian: np.ndarray
    metric_terms: np.ndarray

    @property
    def dim(self) -> int:
        return self.coordinates.shape[-1]

    def mass_jacobian(self, ops: TensorOperatorSet) -> np.ndarray:
        """Diagonal of ``M J`` per element node, shape ``(nel, N...)``."""
        return ops.mass[None] * self.jacobian


def compute_metrics(mesh: MeshGeometry, ops: TensorOperatorSet, coordinates: np.ndarray) -> MetricData:
    """Differentiate the nodal coordinates and form ``J`` and the cofactor metric terms.

    In 1D and 2D the cofactor form satisfies the discrete metric identities
    up to roundoff for any mapping; 3D is exact only for affine maps.
    """
    dim = mesh.dim
    if coordinates.shape != (mesh.n_elements,) + ops.grid_shape + (dim,):
        raise ConfigurationError("coordinate array does not match mesh and operator layout")
    # dx[..., l, i] = d x_l / d xi_i; differentiating relative to the first
    # node keeps the rounding at the element size instead of the box size
    origin = coordinates[(slice(None),) + (slice(0, 1),) * dim]
    local = coordinates - origin
    dx = np.stack([np.stack([ops.apply_derivative(local[..., l], i) for i in range(dim)], axis=-1)
                   for l in range(dim)], axis=-2)
    # affine elements have constant tangents; use the element mean so the
    # metric terms are exactly constant instead of carrying roundoff
    node_axes = tuple(range(1, dim + 1))
    mean = dx.mean(axis=node_axes, keepdims=True)
    spread = np.max(np.abs(dx - mean), axis=node_axes + (dim + 1, dim + 2))
    scale = np.max(np.abs(mean), axis=node_axes + (dim + 1, dim + 2))
    affine = spread <= 1e-12 * scale
    dx = np.where(affine.reshape((-1,) + (1,) * (dim + 2)), mean, dx)
    Ja = np.empty_like(dx)
    if dim == 1:
        jac = dx[..., 0, 0].copy()
        Ja[..., 0, 0] = 1.0
    elif dim == 2:
        x1, x2 = dx[..., 0, 0], dx[..., 0, 1]
        y1, y2 = dx[..., 1, 0], dx[..., 1, 1]
        jac = x1 * y2 - x2 * y1
        Ja[..., 0, 0], Ja[..., 0, 1] = y2, -x2
        Ja[..., 1, 0], Ja[..., 1, 1] = -y1, x1
    else:
        tangents = [dx[..., :, i] for i in range(3)]
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            Ja[..., i, :] = np.cross(tangents[j], tangents[k])
        jac = np.einsum("...l,...l->...", tangents[0], Ja[..., 0, :])
    bad = np.argwhere(~(jac > 0.0))
    if bad.size:
        e = int(bad[0, 0])
        node = int(np.ravel_multi_index(tuple(bad[0, 1:][::-1]), ops.grid_shape))
        raise GeometryError("nonpositive metric Jacobian", element=e, node=node)
    for arr in (coordinates, jac, Ja):
        arr.setflags(write=False)
    return MetricData(coordinates=coordinates, jacobian=jac, metric_terms=Ja)


def gcl_residual_per_element(metrics: MetricData, ops: TensorOperatorSet) -> np.ndarray:
    """``max_l || sum_i D_i (J dxi_i/dx_l) ||_inf`` for each element."""
    Ja = metrics.metric_terms
    dim = metrics.dim
    worst = np.zeros(Ja.shape[0])
    axes = tuple(range(1, dim + 1))
    for l in range(dim):
        div = sum(ops.apply_derivative(Ja[..., i, l], i) for i in range(dim))
        worst = np.maximum(worst, np.max(np.abs(div), axis=axes))
    return worst


def check_gcl(metrics: MetricData, ops: TensorOperatorSet) -> float:
    """Largest discrete metric-identity residual over all elements and directions."""
    return float(np.max(gcl_residual_per_element(metrics, ops)))


def face_values(arr: np.ndarray, direction: int, side: int) -> np.ndarray:
    """Restrict an element array to one face (node axes start at axis 1)."""
    index = [slice(None)] * arr.ndim
    index[1 + direction] = 0 if side == 0 else -1
    return arr[tuple(index)]


def face_metric_mismatch(mesh: MeshGeometry, metrics: MetricData) -> float:
    """Largest disagreement of the face-normal metric terms across paired faces."""
    worst = 0.0
    for i in range(mesh.dim):
        nb = mesh.neighbor_elements(i)
        own = face_values(metrics.metric_terms[..., i, :], i, 1)
        other = face_values(metrics.metric_terms[..., i, :], i, 0)[nb]
        worst = max(worst, float(np.max(np.abs(own - other))))
    return worst


def face_coordinate_mismatch(mesh: MeshGeometry, metrics: MetricData) -> float:
    """Largest gap between coincident face nodes, with periodic shifts removed."""
    worst = 0.0
    L = mesh.lengths
    for i in range(mesh.dim):
        nb = mesh.neighbor_elements(i)
        own = face_values(metrics.coordinates, i, 1)
        other = face_values(metrics.coordinates, i, 0)[nb]
        gap = own - other
        gap[..., i] -= np.round(gap[..., i] / L[i]) * L[i]
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst


def dump_coordinates(path: str | Path, metrics: MetricData) -> None:
    """CSV with columns ``element, node, x1, ..., x_dim`` (17 significant digits)."""
    coords = metrics.coordinates
    dim = coords.shape[-1]
    nel = coords.shape[0]
    flat = grid_to_flat(coords, dim).reshape(nel, -1, dim)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["element", "node"] + [f"x{l + 1}" for l in range(dim)])
        for e in range(nel):
            for n in range(flat.shape[1]):
                writer.writerow([e, n] + [format(v, ".17g") for v in flat[e, n]])
