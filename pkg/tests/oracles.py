"""Independent numerical oracles used to check the analytic machinery.

Everything here deliberately avoids the closed-form packet algebra: the grid
solver time-steps the free wave equation directly, gradients come from
central differences, integrals from dense quadrature.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from bohmsim.packets import WaveFunction, spinor_components_at


def crank_nicolson_free(
    psi0: np.ndarray, xs: np.ndarray, dt: float, steps: int, m: float = 1.0, hbar: float = 1.0
) -> np.ndarray:
    """Crank-Nicolson time stepping of the free 1D wave equation.

    Dirichlet ends; the caller is responsible for a domain wide enough that
    nothing reaches the boundary.
    """
    n = xs.size
    dx = xs[1] - xs[0]
    c = 1j * hbar * dt / (4.0 * m * dx * dx)
    ab = np.zeros((3, n), dtype=complex)
    ab[0, 1:] = -c
    ab[1, :] = 1.0 + 2.0 * c
    ab[2, :-1] = -c
    psi = psi0.astype(complex).copy()
    rhs = np.empty_like(psi)
    for _ in range(steps):
        rhs[:] = (1.0 - 2.0 * c) * psi
        rhs[1:] += c * psi[:-1]
        rhs[:-1] += c * psi[1:]
        psi = solve_banded((1, 1), ab, rhs)
    return psi


def grid_moments(psi: np.ndarray, xs: np.ndarray) -> tuple[float, float]:
    """Mean and standard deviation of |psi|^2 on the grid."""
    rho = np.abs(psi) ** 2
    total = np.trapezoid(rho, xs)
    mean = np.trapezoid(xs * rho, xs) / total
    var = np.trapezoid((xs - mean) ** 2 * rho, xs) / total
    return float(mean), float(np.sqrt(var))


def l2_error(psi_a: np.ndarray, psi_b: np.ndarray, xs: np.ndarray) -> float:
    return float(np.sqrt(np.trapezoid(np.abs(psi_a - psi_b) ** 2, xs)))


def fd_gradient(wf: WaveFunction, Q: np.ndarray, t: float, step: float) -> dict:
    """Central-difference gradient of each spin assignment's amplitude."""
    Q = np.asarray(Q, dtype=float)
    base = spinor_components_at(wf, Q, t)
    out = {k: np.zeros(Q.size, dtype=complex) for k in base}
    for d in range(Q.size):
        qp, qm = Q.copy(), Q.copy()
        qp[d] += step
        qm[d] -= step
        up = spinor_components_at(wf, qp, t)
        dn = spinor_components_at(wf, qm, t)
        for k in out:
            out[k][d] = (up[k] - dn[k]) / (2.0 * step)
    return out


def biased_gaussian_samples(
    rng: np.random.Generator, n: int, center: float, sigma: float, inflate: float = 1.5
) -> np.ndarray:
    """Deliberately wrong sampler for the equivariance power check."""
    return center + inflate * sigma * rng.standard_normal(n)
