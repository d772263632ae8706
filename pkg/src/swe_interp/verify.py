"""Invariant checks run by ``swe-interp verify``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import fe_core
from .dataset import DatasetConfig, generate_dataset, initial_state, sample_params
from .dynamics import PhysicsParams, energy_drift, factorize, flat_energy, flow_map, simulate, step_flat
from .neural_net import build_model
from .trainer import total_loss
from .transfer import MeshPair, prolong_flat


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28s} {self.value:10.3e}  (tol {self.tolerance:.0e})"


def _result(name, value, tol):
    return CheckResult(name, bool(value <= tol), float(value), tol)


def check_skew_duality(mesh):
    k = fe_core.gradient_matrix(mesh).toarray()
    g = fe_core.divergence_matrix(mesh).toarray()
    return _result("skew-duality K = -G^T", np.max(np.abs(k + g.T)), 0.0)


def check_constants(mesh):
    ones = np.ones(mesh.num_elements)
    worst = max(np.max(np.abs(fe_core.gradient_matrix(mesh) @ ones)),
                np.max(np.abs(fe_core.divergence_matrix(mesh) @ ones)))
    return _result("derivatives kill constants", worst, 0.0)


def check_mass(mesh):
    m1 = fe_core.mass_matrix_p1(mesh)
    unity = np.max(np.abs(m1 @ np.ones(mesh.num_elements) - mesh.h)) / mesh.h
    spd = np.min(np.linalg.eigvalsh(m1.toarray())) > 0
    return _result("P1 mass SPD, partition of 1", unity if spd else np.inf, 1e-14)


def check_conservation(pair: MeshPair, physics: PhysicsParams, rng, samples=5, steps=100):
    worst = 0.0
    for _ in range(samples):
        sp = sample_params(rng)
        for mesh in (pair.coarse, pair.fine):
            worst = max(worst, energy_drift(simulate(initial_state(sp, mesh), steps, physics), physics.g))
    return _result("energy drift, 100 CN steps", worst, 1e-10)


def check_flow_map(mesh, physics, rng, samples=5):
    a = flow_map(mesh, physics).matrix
    fact = factorize(mesh, physics)
    worst_step, worst_energy = 0.0, 0.0
    for _ in range(samples):
        x = rng.standard_normal(3 * mesh.num_elements)
        ax = a @ x
        worst_step = max(worst_step, np.max(np.abs(ax - step_flat(x, fact))) / np.max(np.abs(x)))
        e0 = flat_energy(x, mesh, physics.g)
        worst_energy = max(worst_energy, abs(flat_energy(ax, mesh, physics.g) - e0) / e0)
    return [_result("flow map == step", worst_step, 1e-12),
            _result("flow map energy", worst_energy, 1e-10)]


def prolongation_error(pair: MeshPair, x_coarse, oversample=10, order=4) -> float:
    """L2 distance between a coarse flat state and its prolongation, by oversampled Gauss quadrature."""
    mc, mf = pair.coarse.num_elements, pair.fine.num_elements
    fine = prolong_flat(x_coarse, pair)
    xg, wg = np.polynomial.legendre.leggauss(order)
    cells = oversample * mf
    h = 3.0 / cells
    pts = (np.arange(cells)[:, None] * h + 0.5 * h * (xg + 1.0)).ravel()
    wts = np.tile(0.5 * h * wg, cells)

    def p1(vals, m):
        s = pts / (3.0 / m)
        i = np.floor(s).astype(int) % m
        t = s - np.floor(s)
        return (1 - t) * vals[i] + t * vals[(i + 1) % m]

    def p0(vals, m):
        return vals[np.floor(pts / (3.0 / m)).astype(int) % m]

    err = 0.0
    for k, ev in ((0, p1), (1, p1), (2, p0)):
        diff = ev(fine[k * mf:(k + 1) * mf], mf) - ev(x_coarse[k * mc:(k + 1) * mc], mc)
        err += np.sum(wts * diff * diff)
    return float(np.sqrt(err))


def check_prolongation(pair: MeshPair, rng, samples=5):
    worst = max(prolongation_error(pair, rng.standard_normal(3 * pair.coarse.num_elements))
                for _ in range(samples))
    return _result("prolongation exactness", worst, 1e-13)


def gradient_check(model, x_c, x_f, sigma, mesh, g, step=1e-5) -> dict:
    """Max relative error of autograd vs central differences, per parameter tensor.

    Each tensor is normalised by its largest finite-difference gradient, floored at 1e-6 of the
    largest over all tensors, so tensors whose gradient is pure round-off do not dominate.
    """
    x_c, x_f = torch.as_tensor(x_c), torch.as_tensor(x_f)

    def loss():
        return total_loss(model(x_c), x_f, x_c, sigma, mesh, g).total

    model.zero_grad()
    loss().backward()
    pairs = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone()
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                base = flat[i].item()
                flat[i] = base + step
                up = loss().item()
                flat[i] = base - step
                down = loss().item()
                flat[i] = base
                numeric.view(-1)[i] = (up - down) / (2 * step)
            pairs[name] = (analytic, numeric)
    floor = 1e-6 * max(n.abs().max().item() for _, n in pairs.values())
    return {name: (a - n).abs().max().item() / max(n.abs().max().item(), floor, 1e-300)
            for name, (a, n) in pairs.items()}


def tiny_gradient_setup(seed=0):
    config = DatasetConfig(coarse_elems=3, fine_elems=12, num_levels=3)
    ds = generate_dataset(4, seed=seed, config=config)
    flow = flow_map(config.mesh_pair.fine, config.physics)
    rng = np.random.default_rng(seed)
    model = build_model(3, 2, 4, flow, rng)
    # zero biases on zero inputs sit exactly on the ReLU kink, where differences are meaningless
    with torch.no_grad():
        for layer in model.conv_layers():
            layer.bias.copy_(torch.from_numpy(0.1 * rng.standard_normal(layer.bias.shape[0])))
    xc, xf = ds.arrays()
    return model, xc, xf, config


def check_gradients(seed=0, sigmas=(0.0, 1.0)):
    model, xc, xf, config = tiny_gradient_setup(seed)
    worst = 0.0
    for sigma in sigmas:
        errs = gradient_check(model, xc, xf, sigma, config.mesh_pair.fine, config.physics.g)
        worst = max(worst, max(errs.values()))
    return _result("gradient vs finite diff", worst, 1e-5)


def run_all(fine_elems=300, physics=None, seed=0):
    physics = physics or PhysicsParams()
    ratio = 4 if fine_elems % 4 == 0 and fine_elems >= 8 else 2
    if fine_elems % ratio or fine_elems < 4:
        raise ValueError(f"verify needs an even fine mesh with at least 4 elements, got {fine_elems}")
    coarse = fine_elems // ratio
    pair = MeshPair(fe_core.build_mesh(coarse), fe_core.build_mesh(fine_elems))
    rng = np.random.default_rng(seed)
    results = [check_skew_duality(pair.fine), check_constants(pair.fine), check_mass(pair.fine),
               check_conservation(pair, physics, rng)]
    results += check_flow_map(pair.fine, physics, rng)
    results += [check_prolongation(pair, rng), check_gradients(seed)]
    return results
