"""Spectral stability analysis of linear delay systems.

The state history on [-tau_max, 0] is collocated on Chebyshev nodes; the
resulting matrix A_N approximates the infinitesimal generator and its
rightmost eigenvalues converge spectrally to the rightmost characteristic
roots. Candidates are then polished by Newton iteration on the
characteristic matrix itself.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .model import DelaySystem

log = logging.getLogger(__name__)

__all__ = [
    "ChebyshevGrid",
    "SpectralDiscretization",
    "StabilityReport",
    "ConvergenceError",
    "chebyshev_grid",
    "chebyshev_diff_matrix",
    "interpolation_row",
    "discretize",
    "stability_index",
    "char_residual",
    "refine_root",
    "parameter_sweep",
    "write_sweep_csv",
]

DEFAULT_N = 20
DEFAULT_CANDIDATES = 10
DEFAULT_TOL = 1e-8
NEAREST_NODE_MAX_OFFSET = 0.05


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ChebyshevGrid:
    n_points: int
    tau_max: float
    nodes: np.ndarray
    weights: np.ndarray  # barycentric weights

    @property
    def N(self) -> int:
        return self.n_points - 1


def chebyshev_grid(N: int, tau_max: float) -> ChebyshevGrid:
    """N+1 Chebyshev-Lobatto nodes on [-tau_max, 0], ascending so the last node is 0."""
    if int(N) != N or N < 2:
        raise ValueError(f"N must be an integer >= 2, got {N!r}")
    if not (tau_max > 0 and math.isfinite(tau_max)):
        raise ValueError(f"tau_max must be > 0, got {tau_max!r}")
    N = int(N)
    k = np.arange(N + 1)
    nodes = (np.cos((N - k) * np.pi / N) - 1.0) * tau_max / 2.0
    nodes[0], nodes[-1] = -tau_max, 0.0
    weights = (-1.0) ** k
    weights[0] *= 0.5
    weights[-1] *= 0.5
    for arr in (nodes, weights):
        arr.setflags(write=False)
    return ChebyshevGrid(N + 1, float(tau_max), nodes, weights)


def chebyshev_diff_matrix(grid: ChebyshevGrid) -> np.ndarray:
    """Barycentric differentiation matrix on the grid nodes; rows sum to zero."""
    th, w = grid.nodes, grid.weights
    diff = th[:, None] - th[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (w[None, :] / w[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    D -= np.diag(D.sum(axis=1))
    return D


def interpolation_row(grid: ChebyshevGrid, theta: float) -> np.ndarray:
    """Lagrange basis values l_j(theta) via the barycentric formula."""
    th, w = grid.nodes, grid.weights
    diff = theta - th
    hit = np.flatnonzero(np.abs(diff) <= 1e-14 * grid.tau_max)
    row = np.zeros(grid.n_points)
    if hit.size:
        row[hit[0]] = 1.0
        return row
    terms = w / diff
    return terms / terms.sum()


@dataclass(frozen=True, eq=False)
class SpectralDiscretization:
    a_n: np.ndarray
    grid: ChebyshevGrid
    source: DelaySystem
    delay_rows: dict = field(default_factory=dict)
    mode: str = "interpolation_row"


def discretize(sys: DelaySystem, N: int = DEFAULT_N, mode: str = "interpolation_row") -> SpectralDiscretization:
    """Build A_N = [D_N (x) I_n ; e_{N+1}^T (x) A0 + sum_i l_i^T (x) A_i].

    ``mode`` selects how x(t - tau_i) is read from the collocated history:
    ``"nearest_node"`` uses the unit vector of the closest node, while
    ``"interpolation_row"`` uses the exact barycentric interpolant.
    """
    if mode not in ("nearest_node", "interpolation_row"):
        raise ValueError(f"unknown mode {mode!r}")
    n = sys.dim
    if sys.terms:
        tau_max = sys.tau_max
    else:
        # Spurious eigenvalues of the collocation sit left of -4/tau_max; keep
        # them clear of the ODE spectrum.
        rho = float(np.max(np.abs(np.linalg.eigvals(sys.a0)))) if n else 0.0
        tau_max = min(1.0, 1.0 / (rho + 1.0))
    grid = chebyshev_grid(N, tau_max)
    D = chebyshev_diff_matrix(grid)
    eye = np.eye(n)
    bottom = np.zeros(grid.n_points)
    bottom[-1] = 1.0
    last = np.kron(bottom, sys.a0)
    rows = {}
    for term in sys.terms:
        if mode == "nearest_node":
            k = int(np.argmin(np.abs(grid.nodes + term.tau)))
            offset = abs(grid.nodes[k] + term.tau)
            if offset >= NEAREST_NODE_MAX_OFFSET * tau_max:
                raise ValueError(
                    f"delay {term.tau} is {offset:.4g} s from the nearest node; "
                    f"increase N (limit {NEAREST_NODE_MAX_OFFSET:.0%} of tau_max)"
                )
            row = np.zeros(grid.n_points)
            row[k] = 1.0
        else:
            row = interpolation_row(grid, -term.tau)
        rows[term.tau] = row
        last = last + np.kron(row, term.a)
    a_n = np.vstack([np.kron(D[:-1], eye), last])
    return SpectralDiscretization(a_n, grid, sys, rows, mode)


def char_residual(sys: DelaySystem, lam: complex) -> float:
    """Smallest singular value of the characteristic matrix at ``lam``."""
    return float(np.linalg.svd(sys.char_matrix(complex(lam)), compute_uv=False)[-1])


def refine_root(sys: DelaySystem, lam0: complex, tol: float, maxiter: int = 50) -> tuple[complex, bool]:
    """Newton iteration on the bordered characteristic system.

    The border vectors are the singular vectors of the smallest singular
    value at the starting point; g(lambda) vanishes exactly where the
    characteristic matrix is singular.
    """
    n = sys.dim
    lam = complex(lam0)
    if not np.isfinite(lam):
        return lam, False
    U, _, Vh = np.linalg.svd(sys.char_matrix(lam))
    b = U[:, -1]
    c = Vh[-1].conj()
    border = np.zeros((n + 1, n + 1), dtype=complex)
    rhs = np.zeros(n + 1, dtype=complex)
    rhs[-1] = 1.0
    for _ in range(maxiter):
        M = sys.char_matrix(lam)
        border[:n, :n] = M
        border[:n, n] = b
        border[n, :n] = c.conj()
        border[n, n] = 0.0
        try:
            sol = np.linalg.solve(border, rhs)
            adj = np.linalg.solve(border.conj().T, rhs)
        except np.linalg.LinAlgError:
            break
        v, g = sol[:n], sol[n]
        w = adj[:n]
        dg = -(w.conj() @ sys.char_matrix_derivative(lam) @ v)
        if dg == 0:
            break
        step = g / dg
        lam = lam - step
        if not np.isfinite(lam):
            return lam, False
        if abs(step) <= 1e-13 * (1.0 + abs(lam)):
            break
    return lam, char_residual(sys, lam) <= tol


@dataclass(frozen=True, eq=False)
class StabilityReport:
    rightmost: complex
    index: float
    all_eigs: np.ndarray
    residuals: np.ndarray  # per entry of ``refined``
    refined: np.ndarray
    converged: bool
    N: int

    def __repr__(self) -> str:
        return (f"StabilityReport(index={self.index:.8g}, rightmost={self.rightmost:.8g}, "
                f"converged={self.converged}, N={self.N})")


def stability_index(
    sys: DelaySystem,
    N: int = DEFAULT_N,
    *,
    candidates: int = DEFAULT_CANDIDATES,
    tol: float = DEFAULT_TOL,
    mode: str = "interpolation_row",
    refine: bool = True,
    strict: bool = False,
) -> StabilityReport:
    """Rightmost characteristic root of ``sys`` and its real part.

    The ``candidates`` rightmost eigenvalues of A_N are refined by Newton
    iteration; a candidate counts as converged when its characteristic
    residual is below ``tol * (1 + |A0| + sum |A_i|)``. With ``strict`` a
    non-converged rightmost candidate raises :class:`ConvergenceError`,
    otherwise it is logged and flagged in the report.
    """
    disc = discretize(sys, N, mode)
    try:
        eigs = scipy.linalg.eigvals(disc.a_n, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceError(f"eigenvalue solver failed: {exc}") from exc
    order = np.lexsort((-eigs.imag, -eigs.real))
    eigs = eigs[order]
    scale = 1.0 + sys.matrix_norm_sum()
    k = min(candidates, eigs.size) if refine else 0
    refined = eigs[:k].copy()
    ok = np.zeros(k, dtype=bool)
    for i in range(k):
        lam, good = refine_root(sys, eigs[i], tol * scale)
        # a refinement that wanders far away has locked onto another root
        if good and abs(lam - eigs[i]) <= 0.1 * (1.0 + abs(eigs[i])):
            refined[i], ok[i] = lam, True
    residuals = np.array([char_residual(sys, lam) for lam in refined])
    all_eigs = eigs.copy()
    all_eigs[:k] = refined
    top = int(np.argmax(all_eigs.real))
    converged = bool(top < k and ok[top])
    if refine and not converged:
        msg = f"rightmost eigenvalue {all_eigs[top]:.6g} failed Newton refinement"
        if strict:
            raise ConvergenceError(msg)
        log.warning(msg)
    rightmost = complex(all_eigs[top])
    if rightmost.imag < 0:
        rightmost = rightmost.conjugate()
    return StabilityReport(rightmost, rightmost.real, all_eigs, residuals, refined, converged, int(N))


def parameter_sweep(
    model_builder: Callable[[float, float], DelaySystem],
    kp_grid: Sequence[float],
    ki_grid: Sequence[float],
    metric: str | Callable[[DelaySystem], float] = "stability_index",
    *,
    N: int = DEFAULT_N,
    jobs: int = 1,
) -> np.ndarray:
    """Evaluate ``metric`` on every (kp, ki) grid point.

    Returns an array of shape ``(len(ki_grid), len(kp_grid))``. ``metric`` is
    ``"stability_index"``, ``"h2"`` (unit-step H2 over 100 s, +inf on
    divergence) or any callable taking the built system.
    """
    kp_grid = np.asarray(kp_grid, dtype=float)
    ki_grid = np.asarray(ki_grid, dtype=float)
    for name, g in (("kp", kp_grid), ("ki", ki_grid)):
        if g.size == 0:
            raise ValueError(f"{name} grid is empty")
        if np.any(np.diff(g) <= 0):
            raise ValueError(f"{name} grid must be strictly ascending")
    if metric in ("stability_index", "index"):
        func = lambda sys: stability_index(sys, N).index
    elif metric == "h2":
        from .analysis import step_h2

        func = step_h2
    elif callable(metric):
        func = metric
    else:
        raise ValueError(f"unknown metric {metric!r}")

    points = [(j, i) for j in range(ki_grid.size) for i in range(kp_grid.size)]

    def evaluate(point):
        j, i = point
        kp, ki = float(kp_grid[i]), float(ki_grid[j])
        try:
            return float(func(model_builder(kp, ki)))
        except Exception as exc:
            raise RuntimeError(f"sweep failed at kp={kp:g}, ki={ki:g}: {exc}") from exc

    if jobs == 1:
        values = [evaluate(p) for p in points]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(evaluate, points))
    return np.array(values).reshape(ki_grid.size, kp_grid.size)


def sweep_rows(kp_grid, ki_grid, values) -> Iterable[tuple[float, float, float]]:
    """Row-major in ki, then kp."""
    for j, ki in enumerate(ki_grid):
        for i, kp in enumerate(kp_grid):
            yield float(kp), float(ki), float(values[j][i])


def write_sweep_csv(path, kp_grid, ki_grid, values) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["kp", "ki", "value"])
        for kp, ki, v in sweep_rows(kp_grid, ki_grid, values):
            out.writerow([f"{kp:.6f}", f"{ki:.6f}", "inf" if math.isinf(v) else f"{v:.6f}"])
