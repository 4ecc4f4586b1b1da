"""Grid densities, the end-state Gaussian kernel, and the potential solver.

Densities live on regular cell-centered grids and integrate to one against
the cell volume.  The end-state kernel K[i, j] is the Gaussian transition
density from source point i to target point j of the passive averaged
process; the alternating solver rescales a pair of positive potentials
(phi0, phif) until both marginal equations

    rho0 = phi0 * (K phif vol_f),      rhof = phif * (K^T phi0 vol_0)

hold in L1.  Updates switch to log-space automatically when the kernel's
dynamic range underflows linear arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .ensembles import EnsembleSystem, PropagatorCache, gaussian_logpdf
from .errors import ConvergenceError, SupportMismatchError


@dataclass(frozen=True)
class GridAxis:
    """One regular cell-centered axis: n cells covering [lo, hi]."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 1 or self.hi < self.lo:
            raise ValueError("axis needs hi >= lo and n >= 1")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.n if self.hi > self.lo else 1.0

    @property
    def centers(self) -> np.ndarray:
        if self.hi == self.lo:
            return np.array([self.lo])
        return self.lo + (np.arange(self.n) + 0.5) * self.spacing

    @property
    def edges(self) -> np.ndarray:
        if self.hi == self.lo:
            return np.array([self.lo - 0.5, self.lo + 0.5])
        return self.lo + np.arange(self.n + 1) * self.spacing

    def extended(self, pad_cells: int) -> "GridAxis":
        """Same spacing, pad_cells extra cells on each side."""
        h = self.spacing
        return GridAxis(self.lo - pad_cells * h, self.hi + pad_cells * h,
                        self.n + 2 * pad_cells)


class GridDensity:
    """A nonnegative density sampled at the cell centers of a regular grid."""

    def __init__(self, axes, values, normalize=True):
        if isinstance(axes, GridAxis):
            axes = (axes,)
        self.axes = tuple(axes)
        values = np.asarray(values, dtype=float).reshape(-1)
        npts = int(np.prod([ax.n for ax in self.axes]))
        if values.shape[0] != npts:
            raise ValueError("values length does not match the grid")
        if np.any(values < 0.0) or not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite and nonnegative")
        self.norm_factor = 1.0
        if normalize:
            mass = values.sum() * self.cell_volume
            if mass <= 0.0:
                raise ValueError("density has zero mass")
            values = values / mass
            self.norm_factor = mass
        self.values = values

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([ax.spacing for ax in self.axes]))

    @property
    def points(self) -> np.ndarray:
        """Cell centers as an (N, dim) array in row-major axis order."""
        grids = np.meshgrid(*[ax.centers for ax in self.axes], indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=-1)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def to_csv(self, path):
        if self.dim != 1:
            raise ValueError("CSV export is defined for 1-d densities")
        data = np.column_stack([self.axes[0].centers, self.values])
        np.savetxt(path, data, delimiter=",", fmt="%.17e",
                   header="x,value", comments="")

    @classmethod
    def from_csv(cls, path, normalize=True) -> "GridDensity":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        x, v = data[:, 0], data[:, 1]
        if len(x) < 1:
            raise ValueError("empty density file")
        if len(x) == 1:
            return cls(GridAxis(x[0], x[0], 1), v, normalize=normalize)
        h = np.diff(x)
        if np.abs(h - h[0]).max() > 1e-9 * max(abs(x[-1]), 1.0):
            raise ValueError("density grid must be uniform")
        ax = GridAxis(x[0] - h[0] / 2, x[-1] + h[0] / 2, len(x))
        return cls(ax, v, normalize=normalize)


def dirac_density(point) -> GridDensity:
    """Single-cell density: all mass in one unit cell at the given point."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    axes = tuple(GridAxis(p, p, 1) for p in point)
    return GridDensity(axes, np.array([1.0]))


def cosine_profile(x) -> np.ndarray:
    """Raw (unnormalized) piecewise-cosine density on [0, 1]; total mass 2."""
    x = np.asarray(x, dtype=float)
    low = 0.4 - 0.2 * np.cos(3.0 * np.pi * x)
    high = 5.2 - 5.0 * np.cos(6.0 * np.pi * x - 4.0 * np.pi)
    return np.where(x < 2.0 / 3.0, low, high)


def build_cosine_marginals(n: int) -> tuple[GridDensity, GridDensity]:
    """The mirrored cosine pair on [0, 1]: rho_f(x) = rho_0(1 - x)."""
    if n < 16:
        raise ValueError("cosine marginals need at least 16 grid points")
    ax = GridAxis(0.0, 1.0, n)
    raw0 = cosine_profile(ax.centers)
    rho0 = GridDensity(ax, raw0)
    # Cell centers are symmetric about 1/2, so the mirror is an exact reversal.
    rhof = GridDensity(ax, raw0[::-1])
    return rho0, rhof


@dataclass
class EndKernel:
    """Gaussian end-state kernel between two grids: K[i, j] = q(0, x0_i, t_f, xf_j)."""

    K: np.ndarray
    logK: np.ndarray
    source_grid: GridDensity
    target_grid: GridDensity


def build_end_kernel(ens: EnsembleSystem, cache: PropagatorCache,
                     g0: GridDensity, gf: GridDensity) -> EndKernel:
    """Kernel rows are Gaussians with mean M(t_f) x0 and covariance eps G_{t_f,0}."""
    x0 = g0.points
    xf = gf.points
    cov = ens.epsilon * cache.G[0]
    means = x0 @ cache.M_tf.T
    logK = np.empty((x0.shape[0], xf.shape[0]))
    for i in range(x0.shape[0]):
        logK[i] = np.atleast_1d(gaussian_logpdf(means[i], cov, xf))
    return EndKernel(K=np.exp(logK), logK=logK, source_grid=g0, target_grid=gf)


@dataclass
class SchrodingerPotentials:
    """Positive potentials tilting the passive kernel into the optimal coupling."""

    phi0: np.ndarray
    phif: np.ndarray
    residual: float
    iterations: int
    log_space: bool = False
    residual_history: np.ndarray | None = None

    @property
    def log_phif(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.phif)


def _residual(rho0, rhof, rec0, recf, v0, vf) -> float:
    return float(np.abs(rec0 - rho0).sum() * v0 + np.abs(recf - rhof).sum() * vf)


def sinkhorn(rho0: GridDensity, rhof: GridDensity, kernel: EndKernel,
             tol: float = 1e-9, max_iter: int = 100_000) -> SchrodingerPotentials:
    """Alternating marginal rescaling for the potential pair (phi0, phif).

    Gauge-fixed so that max(phif) = 1.  Raises ConvergenceError with the last
    residual when max_iter is reached, and SupportMismatchError when a
    marginal asks for mass the kernel cannot reach.
    """
    if abs(rho0.mass - 1.0) > 1e-9 or abs(rhof.mass - 1.0) > 1e-9:
        raise ValueError("marginals must be normalized to unit mass")
    K = kernel.K
    r0 = rho0.values
    rf = rhof.values
    v0 = rho0.cell_volume
    vf = rhof.cell_volume

    if np.all(K > 0.0):
        out = _sinkhorn_linear(K, r0, rf, v0, vf, tol, max_iter)
        if out is not None:
            return out
    return _sinkhorn_log(kernel.logK, r0, rf, v0, vf, tol, max_iter)


def _sinkhorn_linear(K, r0, rf, v0, vf, tol, max_iter):
    phif = np.ones_like(rf)
    history = []
    for it in range(1, max_iter + 1):
        den0 = (K @ phif) * vf
        if np.any(den0 <= 0.0) or not np.all(np.isfinite(den0)):
            return None
        phi0 = r0 / den0
        denf = (K.T @ phi0) * v0
        if np.any(denf <= 0.0) or not np.all(np.isfinite(denf)):
            return None
        phif = rf / denf
        rec0 = phi0 * (K @ phif) * vf
        res = _residual(r0, rf, rec0, phif * denf, v0, vf)
        history.append(res)
        if res <= tol:
            c = phif.max()
            return SchrodingerPotentials(
                phi0 * c, phif / c, res, it, log_space=False,
                residual_history=np.asarray(history))
    raise ConvergenceError("no convergence", residual=history[-1], iterations=max_iter)


def _sinkhorn_log(logK, r0, rf, v0, vf, tol, max_iter):
    with np.errstate(divide="ignore"):
        lr0 = np.log(r0)
        lrf = np.log(rf)
    lphif = np.zeros_like(rf)
    history = []
    for it in range(1, max_iter + 1):
        lden0 = logsumexp(logK + lphif[None, :], axis=1) + np.log(vf)
        if np.any(np.isneginf(lden0) & np.isfinite(lr0)):
            raise SupportMismatchError("marginal support mismatch")
        lphi0 = lr0 - lden0
        ldenf = logsumexp(logK + lphi0[:, None], axis=0) + np.log(v0)
        if np.any(np.isneginf(ldenf) & np.isfinite(lrf)):
            raise SupportMismatchError("marginal support mismatch")
        lphif = lrf - ldenf
        lrec0 = lphi0 + logsumexp(logK + lphif[None, :], axis=1) + np.log(vf)
        res = _residual(r0, rf, np.exp(lrec0), np.exp(lphif + ldenf), v0, vf)
        history.append(res)
        if res <= tol:
            c = lphif.max()
            return SchrodingerPotentials(
                np.exp(lphi0 + c), np.exp(lphif - c), res, it, log_space=True,
                residual_history=np.asarray(history))
    raise ConvergenceError("no convergence", residual=history[-1], iterations=max_iter)


def joint_coupling(pot: SchrodingerPotentials, kernel: EndKernel) -> np.ndarray:
    """Probability-mass matrix of the optimal endpoint coupling.

    Row sums recover the source masses rho0 * vol, column sums the target
    masses rhof * vol, total mass 1.
    """
    v0 = kernel.source_grid.cell_volume
    vf = kernel.target_grid.cell_volume
    return pot.phi0[:, None] * kernel.K * pot.phif[None, :] * v0 * vf


def sample_from_density(rho: GridDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws with linear interpolation inside cells (1-d grids).

    Exact for the piecewise-constant cell representation of the density.
    """
    if rho.dim != 1:
        raise ValueError("sampling is implemented for 1-d densities")
    ax = rho.axes[0]
    pmass = rho.values * ax.spacing
    cdf = np.concatenate([[0.0], np.cumsum(pmass)])
    cdf = cdf / cdf[-1]
    u = rng.uniform(0.0, 1.0, size=n)
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, ax.n - 1)
    w = cdf[idx + 1] - cdf[idx]
    frac = np.where(w > 0, (u - cdf[idx]) / np.where(w > 0, w, 1.0), 0.5)
    return ax.edges[idx] + frac * ax.spacing
