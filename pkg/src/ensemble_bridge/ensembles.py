"""Linear-algebra and quadrature substrate for parameter-perturbed linear ensembles.

An ensemble is a family of linear systems (A(theta), B(theta)) indexed by
theta in [0, 1], all driven by one control and one Wiener process.  Everything
downstream is built from three theta-averaged objects evaluated here:

* the averaged state map  M(t)   = int_0^1 exp(A(theta) t) dtheta,
* the averaged input map  Phi(t, tau) = int_0^1 exp(A(theta)(t - tau)) B(theta) dtheta,
* the averaged Gramian    G_{t,s} = int_s^t Phi(t, tau) Phi(t, tau)^T dtau.

The theta-integrals use Gauss-Legendre nodes on [0, 1]; the tau-integral uses
composite Gauss-Legendre panels.  A ``PropagatorCache`` tabulates the maps on
a uniform time grid once, after which all controller and simulator queries are
O(1) lookups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .errors import ControllabilityError, NotSPDError

DEFAULT_THETA_NODES = 64


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, t_f] into k steps."""

    tf: float
    k: int

    def __post_init__(self):
        if not (self.tf > 0.0 and math.isfinite(self.tf)):
            raise ValueError("horizon tf must be positive and finite")
        if self.k < 2:
            raise ValueError("time grid needs k >= 2 steps")

    @property
    def dt(self) -> float:
        return self.tf / self.k

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.tf, self.k + 1)

    def index_of(self, t: float) -> int:
        """Map a grid time to its step index, rejecting off-grid times."""
        i = int(round(t / self.dt))
        if i < 0 or i > self.k or abs(t - i * self.dt) > 1e-9 * max(self.tf, 1.0):
            raise ValueError(f"t={t} is not on the time grid")
        return i


def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights transplanted to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


class EnsembleSystem:
    """The parameter family (A(theta), B(theta)) on a theta-quadrature over [0, 1].

    Parameters
    ----------
    A_nodes : (n, d, d) array
        Drift matrix at each quadrature node.
    B_nodes : (n, d, m) array
        Input matrix at each quadrature node.
    theta_nodes, theta_weights : (n,) arrays
        Quadrature rule on [0, 1]; weights must sum to 1.
    epsilon : float
        Noise intensity, > 0 (0 is accepted for deterministic runs).
    t_f : float
        Horizon.
    """

    def __init__(self, A_nodes, B_nodes, theta_nodes, theta_weights,
                 epsilon, t_f, name="custom"):
        A_nodes = np.asarray(A_nodes, dtype=float)
        B_nodes = np.asarray(B_nodes, dtype=float)
        theta_nodes = np.asarray(theta_nodes, dtype=float)
        theta_weights = np.asarray(theta_weights, dtype=float)
        if A_nodes.ndim != 3 or A_nodes.shape[1] != A_nodes.shape[2]:
            raise ValueError("A_nodes must have shape (n, d, d)")
        if B_nodes.ndim != 3 or B_nodes.shape[0] != A_nodes.shape[0] \
                or B_nodes.shape[1] != A_nodes.shape[1]:
            raise ValueError("B_nodes must have shape (n, d, m)")
        if theta_nodes.shape != theta_weights.shape or theta_nodes.ndim != 1:
            raise ValueError("theta nodes/weights must be matching 1-d arrays")
        if abs(theta_weights.sum() - 1.0) > 1e-12:
            raise ValueError("theta weights must sum to 1 within 1e-12")
        if np.any(theta_weights <= 0.0):
            raise ValueError("theta weights must be positive")
        if not (np.all(np.isfinite(A_nodes)) and np.all(np.isfinite(B_nodes))):
            raise ValueError("ensemble family has non-finite entries")
        if A_nodes.shape[1] < 1 or B_nodes.shape[2] < 1:
            raise ValueError("state and input dimensions must be >= 1")
        if not (epsilon >= 0.0 and math.isfinite(epsilon)):
            raise ValueError("epsilon must be nonnegative and finite")
        if not (t_f > 0.0 and math.isfinite(t_f)):
            raise ValueError("t_f must be positive and finite")
        self.A_nodes = A_nodes
        self.B_nodes = B_nodes
        self.theta_nodes = theta_nodes
        self.theta_weights = theta_weights
        self.epsilon = float(epsilon)
        self.t_f = float(t_f)
        self.name = name

    @property
    def d(self) -> int:
        return self.A_nodes.shape[1]

    @property
    def m(self) -> int:
        return self.B_nodes.shape[2]

    @property
    def n_nodes(self) -> int:
        return self.theta_nodes.shape[0]

    def is_constant(self) -> bool:
        """True when every node carries the same (A, B)."""
        return (np.ptp(self.A_nodes, axis=0).max(initial=0.0) == 0.0
                and np.ptp(self.B_nodes, axis=0).max(initial=0.0) == 0.0)

    @classmethod
    def from_callables(cls, A_of: Callable, B_of: Callable, epsilon, t_f,
                       n_nodes=DEFAULT_THETA_NODES, name="custom"):
        nodes, weights = gauss_legendre_01(n_nodes)
        A_nodes = np.stack([np.atleast_2d(np.asarray(A_of(th), dtype=float)) for th in nodes])
        B_nodes = np.stack([np.atleast_2d(np.asarray(B_of(th), dtype=float)) for th in nodes])
        return cls(A_nodes, B_nodes, nodes, weights, epsilon, t_f, name=name)


def scalar_decay(epsilon, t_f=1.0, n_nodes=DEFAULT_THETA_NODES) -> EnsembleSystem:
    """1-d family dX = -theta X dt + u dt + sqrt(eps) dW, theta in [0, 1]."""
    return EnsembleSystem.from_callables(
        lambda th: [[-th]], lambda th: [[1.0]], epsilon, t_f,
        n_nodes=n_nodes, name="scalar-decay")


def planar_rotation(epsilon, t_f=1.0, n_nodes=DEFAULT_THETA_NODES) -> EnsembleSystem:
    """2-d rotation family A(theta) = [[0, -theta], [theta, 0]], B = I."""
    return EnsembleSystem.from_callables(
        lambda th: [[0.0, -th], [th, 0.0]], lambda th: np.eye(2), epsilon, t_f,
        n_nodes=n_nodes, name="planar-rotation")


def constant_system(A, B, epsilon, t_f, name="constant") -> EnsembleSystem:
    """Degenerate one-node ensemble: a single linear system (A, B)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return EnsembleSystem(A[None], B[None], np.array([0.5]), np.array([1.0]),
                          epsilon, t_f, name=name)


def tabulated_system(theta_nodes, theta_weights, A_nodes, B_nodes,
                     epsilon, t_f, name="tabulated") -> EnsembleSystem:
    return EnsembleSystem(np.asarray(A_nodes), np.asarray(B_nodes),
                          np.asarray(theta_nodes), np.asarray(theta_weights),
                          epsilon, t_f, name=name)


def mat_exp(A, t: float) -> np.ndarray:
    """exp(A t) by scaling-and-squaring (degree-13 Pade, via scipy)."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)) or not math.isfinite(t):
        raise ValueError("invalid matrix")
    if t == 0.0:
        return np.eye(A.shape[0])
    return expm(A * t)


def _expm_nodes(ens: EnsembleSystem, s: float) -> np.ndarray:
    """exp(A(theta_j) s) stacked over nodes, shape (n, d, d)."""
    return np.stack([mat_exp(Aj, s) for Aj in ens.A_nodes])


def averaged_state_map(ens: EnsembleSystem, t: float) -> np.ndarray:
    """M(t): the theta-average of exp(A(theta) t)."""
    if not (0.0 <= t <= ens.t_f + 1e-12):
        raise ValueError(f"t={t} outside [0, t_f]")
    return np.einsum("j,jab->ab", ens.theta_weights, _expm_nodes(ens, t))


def averaged_input_map(ens: EnsembleSystem, t: float, tau: float) -> np.ndarray:
    """Phi(t, tau): the theta-average of exp(A(theta)(t - tau)) B(theta).

    Defined for tau <= t; at tau = t it is the plain average of B(theta)
    (the closed forms quoted for specific families have removable
    singularities there, the definition does not).
    """
    if tau > t:
        raise ValueError(f"tau={tau} must not exceed t={t}")
    if not (0.0 <= tau and t <= ens.t_f + 1e-12):
        raise ValueError("(t, tau) outside [0, t_f]")
    E = _expm_nodes(ens, t - tau)
    return np.einsum("j,jab,jbc->ac", ens.theta_weights, E, ens.B_nodes)


def _input_map_many(ens: EnsembleSystem, t: float, taus: np.ndarray) -> np.ndarray:
    """Phi(t, tau) for many tau at once, shape (len(taus), d, m).

    Uses a per-node eigendecomposition so that exp(A s) over all the s values
    is a single vectorized evaluation; falls back to direct matrix
    exponentials for nodes where the eigenbasis is ill-conditioned.
    """
    taus = np.asarray(taus, dtype=float)
    s = t - taus
    out = np.zeros((len(taus), ens.d, ens.m))
    for w, Aj, Bj in zip(ens.theta_weights, ens.A_nodes, ens.B_nodes):
        lam, V = np.linalg.eig(Aj)
        ok = False
        if np.linalg.cond(V) < 1e8:
            Vinv = np.linalg.inv(V)
            E = np.einsum("ab,sb,bc->sac", V, np.exp(np.outer(s, lam)), Vinv).real
            smax = s[np.argmax(np.abs(s))]
            ok = np.allclose(E[np.argmax(np.abs(s))], mat_exp(Aj, smax),
                             rtol=1e-11, atol=1e-13)
        if not ok:
            E = np.stack([mat_exp(Aj, sv) for sv in s])
        out += w * (E @ Bj)
    return out


def gramian(ens: EnsembleSystem, t: float, s: float,
            quad_pts: int = 8, panels: int | None = None) -> np.ndarray:
    """G_{t,s} = int_s^t Phi(t, tau) Phi(t, tau)^T dtau, composite Gauss-Legendre.

    Raises ControllabilityError when the smallest eigenvalue falls at or below
    the scale-relative floor 1e-10 * trace(G) / d.
    """
    if s >= t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    if panels is None:
        panels = 64
    x, w = gauss_legendre_01(quad_pts)
    h = (t - s) / panels
    G = np.zeros((ens.d, ens.d))
    for p in range(panels):
        taus = s + (p + x) * h
        Phis = _input_map_many(ens, t, taus)
        G += h * np.einsum("q,qab,qcb->ac", w, Phis, Phis)
    G = 0.5 * (G + G.T)
    eig_tol = 1e-10 * np.trace(G) / ens.d
    if np.linalg.eigvalsh(G).min() <= eig_tol:
        raise ControllabilityError(
            f"ensemble not averaged-controllable on [{s}, {t}]")
    return G


def gaussian_logpdf(mean, cov, x) -> float | np.ndarray:
    """log N(x; mean, cov) via Cholesky; x may be a batch of points (N, d)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    x = np.asarray(x, dtype=float)
    d = mean.shape[0]
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("covariance not SPD") from exc
    single = x.ndim <= 1
    pts = np.atleast_2d(x)
    diff = pts - mean
    y = np.linalg.solve(L, diff.T).T
    quad = np.einsum("na,na->n", y, y)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    out = -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)
    return float(out[0]) if single else out


class PropagatorCache:
    """Tabulated averaged maps on a time grid, immutable after construction.

    Per step i of the grid the cache holds the cell average of the input map,

        phi_steps[i] = (1/dt) * int_{t_i}^{t_{i+1}} Phi(t_f, tau) dtau,

    and the matching zero-order-hold Gramian tails

        G[i] = sum_{j >= i} dt * phi_steps[j] phi_steps[j]^T,   G[k] = 0.

    Controllers built from these cell averages steer the simulator's
    zero-order-hold dynamics exactly: with eps = 0 the terminal defect is pure
    rounding, and G[0] agrees with the continuous Gramian to O(dt^2).
    Pointwise maps Phi(t_f, t_i) and M(t_i) are tabulated alongside.
    """

    def __init__(self, ens: EnsembleSystem, grid: TimeGrid, pts_per_cell: int = 8):
        self.ens = ens
        self.grid = grid
        if abs(grid.tf - ens.t_f) > 1e-12:
            raise ValueError("grid horizon must match the ensemble horizon")
        d, m, k = ens.d, ens.m, grid.k
        dt = grid.dt
        w_theta = ens.theta_weights

        # exp(A_j * n dt) for n = 0..k via repeated squaring-free products;
        # exact on the grid because exp(A n dt) = (exp(A dt))^n.
        E_dt = np.stack([mat_exp(Aj, dt) for Aj in ens.A_nodes])
        P = np.empty((ens.n_nodes, k + 1, d, d))
        P[:, 0] = np.eye(d)
        for n in range(1, k + 1):
            P[:, n] = P[:, n - 1] @ E_dt
        self.M = np.einsum("j,jnab->nab", w_theta, P)

        # Gauss-Legendre offsets inside one cell; t_f - (t_i + delta_q) =
        # (k-1-i) dt + r_q with r_q = dt - delta_q, so each quadrature point
        # reuses the tabulated powers above.
        x, wq = gauss_legendre_01(pts_per_cell)
        delta = x * dt
        r = dt - delta
        D = np.stack([[mat_exp(Aj, rq) @ Bj for rq in r]
                      for Aj, Bj in zip(ens.A_nodes, ens.B_nodes)])
        phi_cells = np.einsum("j,jnab,jqbc->nqac", w_theta, P[:, :k], D)
        phi_cells = phi_cells[::-1]            # cell i pairs with power k-1-i
        self.phi_steps = np.einsum("q,iqam->iam", wq, phi_cells)
        # Phi(t_f, t_i) = sum_j w_j exp(A_j (k-i) dt) B_j, i = 0..k.
        self.phi_pts = np.einsum("j,jnab,jbc->nac", w_theta, P[:, ::-1], ens.B_nodes)

        G = np.zeros((k + 1, d, d))
        acc = np.zeros((d, d))
        for i in range(k - 1, -1, -1):
            acc = acc + dt * (self.phi_steps[i] @ self.phi_steps[i].T)
            G[i] = 0.5 * (acc + acc.T)
        self.G = G

        eig_tol = 1e-10 * np.trace(G[0]) / d
        eigs = np.linalg.eigvalsh(G[0])
        self.min_eig = float(eigs.min())
        if self.min_eig <= eig_tol:
            raise ControllabilityError(
                f"ensemble not averaged-controllable on [0, {grid.tf}]")

        self.G_chol = np.empty((k, d, d))
        self.ginv_phi = np.empty((k, d, m))
        for i in range(k):
            try:
                self.G_chol[i] = np.linalg.cholesky(G[i])
            except np.linalg.LinAlgError as exc:
                raise ControllabilityError(
                    f"Gramian tail singular at grid step {i}") from exc
            self.ginv_phi[i] = np.linalg.solve(G[i], self.phi_steps[i])

    @property
    def M_tf(self) -> np.ndarray:
        return self.M[-1]

    def state_map(self, t: float) -> np.ndarray:
        """M(t) at a grid time."""
        return self.M[self.grid.index_of(t)]

    def input_map(self, t: float, tau: float) -> np.ndarray:
        """Pointwise Phi(t, tau); grid-accelerated when t = t_f, tau on grid."""
        if abs(t - self.grid.tf) < 1e-12:
            try:
                return self.phi_pts[self.grid.index_of(tau)]
            except ValueError:
                pass
        return averaged_input_map(self.ens, t, tau)

    def gramian_tail(self, t: float) -> np.ndarray:
        """G_{t_f, t} at a grid time."""
        return self.G[self.grid.index_of(t)]
