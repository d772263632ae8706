"""Lowest-order compatible finite elements on the periodic interval [0, 3).

Indexing (0-based throughout the package):

    node m        x_m = m h,              m = 0..M-1   (node M == node 0)
    element m     I_m = (x_m, x_{m+1}),   DOF at midpoint (m + 1/2) h

Velocity components live in P1 (continuous piecewise linear, nodal DOF),
pressure lives in P0 (piecewise constant, one DOF per element).  Every
matrix here is circulant, so they are stored by their bands.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DOMAIN_LENGTH = 3.0


class InvalidMeshError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class PeriodicMesh:
    num_elements: int
    domain_length: float = DOMAIN_LENGTH

    def __post_init__(self):
        if int(self.num_elements) != self.num_elements or self.num_elements < 2:
            raise InvalidMeshError(f"need at least 2 elements, got {self.num_elements!r}")

    @property
    def element_size(self) -> float:
        return self.domain_length / self.num_elements

    @property
    def h(self) -> float:
        return self.element_size

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.num_elements) * self.element_size

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.num_elements) + 0.5) * self.element_size


def build_mesh(num_elements: int) -> PeriodicMesh:
    return PeriodicMesh(num_elements)


@dataclass(frozen=True)
class FieldP1:
    mesh: PeriodicMesh
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.mesh.num_elements,):
            raise DimensionError(
                f"P1 field needs {self.mesh.num_elements} nodal values, got shape {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class FieldP0:
    mesh: PeriodicMesh
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.mesh.num_elements,):
            raise DimensionError(
                f"P0 field needs {self.mesh.num_elements} element values, got shape {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class BandedMatrix:
    """Circulant matrix stored by bands.

    ``bands[k]`` is the value on every entry ``(i, (i + k) mod M)``, so
    ``(A x)_i = sum_k bands[k] * x[(i + k) mod M]``.
    """

    dimension: int
    bands: Mapping[int, float] = field(default_factory=dict)

    @property
    def symmetric(self) -> bool:
        n = self.dimension
        return np.array_equal(self.toarray(), self.toarray().T) if n else True

    def toarray(self) -> np.ndarray:
        n = self.dimension
        out = np.zeros((n, n))
        rows = np.arange(n)
        for k, val in self.bands.items():
            # bands that alias onto the same diagonal (small M) add up
            np.add.at(out, (rows, (rows + k) % n), val)
        return out

    @property
    def T(self) -> "BandedMatrix":
        return BandedMatrix(self.dimension, {-k: v for k, v in self.bands.items()})

    def __neg__(self) -> "BandedMatrix":
        return BandedMatrix(self.dimension, {k: -v for k, v in self.bands.items()})

    def __matmul__(self, x):
        """Apply along the last axis of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dimension:
            raise DimensionError(f"matrix of size {self.dimension} applied to axis of length {x.shape[-1]}")
        out = np.zeros_like(x)
        for k, val in self.bands.items():
            out += val * np.roll(x, -k, axis=-1)
        return out

    def quadratic_form(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.sum(x * (self @ x), axis=-1)


def mass_matrix_p1(mesh: PeriodicMesh) -> BandedMatrix:
    h = mesh.element_size
    return BandedMatrix(mesh.num_elements, {-1: h / 6.0, 0: 2.0 * h / 3.0, 1: h / 6.0})


def mass_matrix_p0(mesh: PeriodicMesh) -> BandedMatrix:
    return BandedMatrix(mesh.num_elements, {0: mesh.element_size})


def divergence_matrix(mesh: PeriodicMesh) -> BandedMatrix:
    """G[m, j] = <phi_j', chi_m>: maps P1 nodal values to int_{I_m} U_x = u_{m+1} - u_m."""
    return BandedMatrix(mesh.num_elements, {0: -1.0, 1: 1.0})


def gradient_matrix(mesh: PeriodicMesh) -> BandedMatrix:
    """Weak pressure gradient, (K p)_j = -<P, phi_j'> = p_j - p_{j-1}.

    Equals minus the transpose of :func:`divergence_matrix`.
    """
    return BandedMatrix(mesh.num_elements, {0: 1.0, -1: -1.0})


def interpolate_p1(func: Callable, mesh: PeriodicMesh) -> FieldP1:
    return FieldP1(mesh, _evaluate(func, mesh.nodes))


def interpolate_p0(func: Callable, mesh: PeriodicMesh) -> FieldP0:
    return FieldP0(mesh, _evaluate(func, mesh.midpoints))


def _evaluate(func, points):
    try:
        vals = np.asarray(func(points), dtype=np.float64)
        if vals.shape == points.shape:
            return vals
        if vals.ndim == 0:
            return np.full(points.shape, float(vals))
    except (TypeError, ValueError):
        pass
    return np.array([float(func(x)) for x in points])


def energy(u: FieldP1, v: FieldP1, p: FieldP0, g: float, mesh: PeriodicMesh) -> float:
    """g<U,U> + g<V,V> + <P,P> with exact mass-matrix inner products."""
    for fld in (u, v, p):
        if fld.mesh != mesh:
            raise DimensionError(f"field on {fld.mesh} used with {mesh}")
    m1 = mass_matrix_p1(mesh)
    m0 = mass_matrix_p0(mesh)
    return float(g * m1.quadratic_form(u.values) + g * m1.quadratic_form(v.values)
                 + m0.quadratic_form(p.values))
