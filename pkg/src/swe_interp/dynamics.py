"""Crank-Nicolson (implicit midpoint) integration of the linear rotating SWE.

The semidiscrete system is written as  Mhat x' = Lhat x  for the flat
state x = [u | v | p] (D = 3M), with

    Mhat = diag(M1, M1, M0)

           [   0     f M1   -K ]
    Lhat = [ -f M1    0      0 ]
           [ -g G     0      0 ]

and K = -G^T, which makes Lhat Mhat^{-1}-skew with respect to the energy
inner product diag(g M1, g M1, M0).  One step solves

    (Mhat - tau/2 Lhat) x1 = (Mhat + tau/2 Lhat) x0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .fe_core import (DimensionError, FieldP0, FieldP1, PeriodicMesh,
                      divergence_matrix, gradient_matrix, mass_matrix_p0,
                      mass_matrix_p1)


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhysicsParams:
    coriolis: float = 0.1
    g: float = 1.0
    dt: float = 0.01

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError(f"g must be positive, got {self.g}")
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        if not self.coriolis >= 0:
            raise ValueError(f"Coriolis parameter must be nonnegative, got {self.coriolis}")


@dataclass(frozen=True)
class State:
    u: FieldP1
    v: FieldP1
    p: FieldP0

    @property
    def mesh(self) -> PeriodicMesh:
        return self.p.mesh

    def flat(self) -> np.ndarray:
        return np.concatenate([self.u.values, self.v.values, self.p.values])

    @classmethod
    def from_flat(cls, x, mesh: PeriodicMesh) -> "State":
        x = np.asarray(x, dtype=np.float64)
        m = mesh.num_elements
        if x.shape != (3 * m,):
            raise DimensionError(f"flat state must have length {3 * m}, got {x.shape}")
        return cls(FieldP1(mesh, x[:m].copy()), FieldP1(mesh, x[m:2 * m].copy()),
                   FieldP0(mesh, x[2 * m:].copy()))

    @classmethod
    def zeros(cls, mesh: PeriodicMesh) -> "State":
        return cls.from_flat(np.zeros(3 * mesh.num_elements), mesh)


@dataclass(frozen=True)
class Trajectory:
    """N time levels stored row-major as an N x D array (level 0 is the initial state)."""

    mesh: PeriodicMesh
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] != 3 * self.mesh.num_elements:
            raise DimensionError(f"trajectory on M={self.mesh.num_elements} cannot have shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def num_levels(self) -> int:
        return self.data.shape[0]

    def state(self, n: int) -> State:
        return State.from_flat(self.data[n], self.mesh)


def split_fields(x, num_elements: int):
    """View the last axis of ``x`` as (u, v, p) blocks."""
    m = num_elements
    return x[..., :m], x[..., m:2 * m], x[..., 2 * m:3 * m]


def flat_energy(x, mesh: PeriodicMesh, g: float) -> np.ndarray:
    """Discrete energy of flat state(s) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3 * mesh.num_elements:
        raise DimensionError(f"flat state length {x.shape[-1]} does not match M={mesh.num_elements}")
    u, v, p = split_fields(x, mesh.num_elements)
    m1 = mass_matrix_p1(mesh)
    return g * m1.quadratic_form(u) + g * m1.quadratic_form(v) + mass_matrix_p0(mesh).quadratic_form(p)


def assemble_generator(mesh: PeriodicMesh, params: PhysicsParams):
    """Dense block matrices (Mhat, Lhat) with Mhat x' = Lhat x."""
    m = mesh.num_elements
    m1 = mass_matrix_p1(mesh).toarray()
    m0 = mass_matrix_p0(mesh).toarray()
    grad = gradient_matrix(mesh).toarray()
    div = divergence_matrix(mesh).toarray()
    f, g = params.coriolis, params.g
    z = np.zeros((m, m))
    mass = np.block([[m1, z, z], [z, m1, z], [z, z, m0]])
    gen = np.block([[z, f * m1, -grad],
                    [-f * m1, z, z],
                    [-g * div, z, z]])
    return mass, gen


@dataclass(frozen=True)
class SystemFactorization:
    mesh: PeriodicMesh
    params: PhysicsParams
    lu: tuple
    rhs: np.ndarray
    lhs: np.ndarray

    @classmethod
    def build(cls, mesh: PeriodicMesh, params: PhysicsParams) -> "SystemFactorization":
        mass, gen = assemble_generator(mesh, params)
        half = 0.5 * params.dt
        lhs = mass - half * gen
        lu, piv = scipy.linalg.lu_factor(lhs, check_finite=True)
        if not np.all(np.isfinite(lu)) or np.min(np.abs(np.diag(lu))) == 0.0:
            raise AssemblyError("Crank-Nicolson system matrix is singular")
        return cls(mesh, params, (lu, piv), mass + half * gen, lhs)

    def solve(self, b):
        return scipy.linalg.lu_solve(self.lu, b, check_finite=False)


@lru_cache(maxsize=16)
def factorize(mesh: PeriodicMesh, params: PhysicsParams) -> SystemFactorization:
    return SystemFactorization.build(mesh, params)


def step_flat(x, fact: SystemFactorization) -> np.ndarray:
    return fact.solve(fact.rhs @ np.asarray(x, dtype=np.float64))


def step(state: State, fact: SystemFactorization) -> State:
    if state.mesh != fact.mesh:
        raise DimensionError(f"state on {state.mesh} but factorization on {fact.mesh}")
    return State.from_flat(step_flat(state.flat(), fact), fact.mesh)


def step_back_flat(x, fact: SystemFactorization) -> np.ndarray:
    """Inverse of one step: solve with the roles of the two sides swapped."""
    return scipy.linalg.solve(fact.rhs, fact.lhs @ np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class FlowMap:
    matrix: np.ndarray
    mesh: PeriodicMesh
    params: PhysicsParams

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, x):
        return self.matrix @ x


def flow_map(mesh: PeriodicMesh, params: PhysicsParams) -> FlowMap:
    fact = factorize(mesh, params)
    # one solve against every identity column at once
    return FlowMap(fact.solve(fact.rhs), mesh, params)


def simulate(initial: State, n_steps: int, params: PhysicsParams) -> Trajectory:
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    mesh = initial.mesh
    fact = factorize(mesh, params)
    out = np.empty((n_steps + 1, 3 * mesh.num_elements))
    out[0] = initial.flat()
    for n in range(n_steps):
        out[n + 1] = step_flat(out[n], fact)
    return Trajectory(mesh, out)


def energy_drift(traj: Trajectory, g: float, eps: float = 1e-30) -> float:
    """max_n |E_n - E_0| / max(E_0, eps)."""
    e = flat_energy(traj.data, traj.mesh, g)
    return float(np.max(np.abs(e - e[0])) / max(e[0], eps))
