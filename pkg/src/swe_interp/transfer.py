"""Exact prolongation between nested periodic meshes."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .dynamics import Trajectory
from .fe_core import DimensionError, FieldP0, FieldP1, PeriodicMesh


class NestingError(ValueError):
    pass


@dataclass(frozen=True)
class MeshPair:
    coarse: PeriodicMesh
    fine: PeriodicMesh

    def __post_init__(self):
        mc, mf = self.coarse.num_elements, self.fine.num_elements
        if mf % mc != 0 or mf // mc < 2:
            raise NestingError(f"fine mesh M={mf} is not a refinement (ratio >= 2) of coarse M={mc}")

    @property
    def ratio(self) -> int:
        return self.fine.num_elements // self.coarse.num_elements

    @cached_property
    def p1_matrix(self) -> sp.csr_matrix:
        """Fine node j = m r + s takes (1 - s/r) u_m + (s/r) u_{m+1}."""
        r, mc = self.ratio, self.coarse.num_elements
        j = np.arange(self.fine.num_elements)
        m, s = np.divmod(j, r)
        t = s / r
        rows = np.concatenate([j, j[s > 0]])
        cols = np.concatenate([m, (m[s > 0] + 1) % mc])
        vals = np.concatenate([1.0 - t, t[s > 0]])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.fine.num_elements, mc))

    @cached_property
    def p0_matrix(self) -> sp.csr_matrix:
        """Fine element i inherits the value of its parent i // r."""
        i = np.arange(self.fine.num_elements)
        return sp.csr_matrix((np.ones(i.size), (i, i // self.ratio)),
                             shape=(self.fine.num_elements, self.coarse.num_elements))


def _check_on(field, mesh):
    if field.mesh != mesh:
        raise DimensionError(f"field lives on {field.mesh}, expected {mesh}")


def prolong_p1(coarse_field: FieldP1, pair: MeshPair) -> FieldP1:
    _check_on(coarse_field, pair.coarse)
    return FieldP1(pair.fine, pair.p1_matrix @ coarse_field.values)


def prolong_p0(coarse_field: FieldP0, pair: MeshPair) -> FieldP0:
    _check_on(coarse_field, pair.coarse)
    return FieldP0(pair.fine, pair.p0_matrix @ coarse_field.values)


def prolong_flat(x, pair: MeshPair) -> np.ndarray:
    """Prolong flat [u | v | p] rows (any leading shape) from coarse to fine."""
    x = np.asarray(x, dtype=np.float64)
    mc = pair.coarse.num_elements
    if x.shape[-1] != 3 * mc:
        raise DimensionError(f"expected coarse flat length {3 * mc}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    rows = x.reshape(-1, 3 * mc)
    u = (pair.p1_matrix @ rows[:, :mc].T).T
    v = (pair.p1_matrix @ rows[:, mc:2 * mc].T).T
    p = (pair.p0_matrix @ rows[:, 2 * mc:].T).T
    return np.concatenate([u, v, p], axis=1).reshape(*lead, 3 * pair.fine.num_elements)


def prolong_trajectory(traj: Trajectory, pair: MeshPair) -> Trajectory:
    if traj.mesh != pair.coarse:
        raise DimensionError(f"trajectory lives on {traj.mesh}, expected {pair.coarse}")
    return Trajectory(pair.fine, prolong_flat(traj.data, pair))
