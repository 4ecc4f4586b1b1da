"""Control laws for steering the averaged state of an ensemble.

Two families live here.

* The noise-history feedforward laws: the pinned control steering the
  averaged state to an exact terminal point,

      u(t) = Phi(t_f, t)^T [ -sqrt(eps) S(t) + G_{t_f,0}^{-1} (x_f - M(t_f) x0) ],
      S(t) = int_0^t G_{t_f,tau}^{-1} Phi(t_f, tau) dW(tau),

  and its posterior average over terminal points (the distribution bridge),
  where the posterior over x_f combines the conditional end-state density
  with the target potential phif.  Both are functions of the initial state
  and the realized noise increments, never of the current state.

* Markov feedback laws for the constant family, used only to cross-check the
  feedforward laws: u(t, x) = eps B^T grad log phi(t, x), with phi the
  potential-smoothed end-state density.

Stochastic integrals are discretized with the left-point (Ito) rule on the
simulation grid; the per-step maps come from the PropagatorCache, so the
controller and the zero-order-hold simulator share one discretization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensembles import (EnsembleSystem, PropagatorCache, TimeGrid,
                        gaussian_logpdf, mat_exp)
from .errors import HorizonSingularError, PosteriorSupportError
from .marginals import GridDensity, SchrodingerPotentials


@dataclass
class NoiseHistory:
    """Brownian increments dW_i ~ N(0, dt I_m) on a simulation grid."""

    grid: TimeGrid
    dW: np.ndarray           # (k, m)
    seed: object = None

    def __post_init__(self):
        self.dW = np.asarray(self.dW, dtype=float)
        if self.dW.shape[0] != self.grid.k or self.dW.ndim != 2:
            raise ValueError("noise history length must match the grid")
        if not np.all(np.isfinite(self.dW)):
            raise ValueError("noise increments must be finite")


@dataclass
class FeedforwardState:
    """Running state of a feedforward controller along one realization.

    S accumulates the left-point discretization of
    int G_{t_f,tau}^{-1} Phi(t_f,tau) dW and shift accumulates
    int Phi(t_f,tau) dW (the conditional-mean displacement); both consume
    exactly one increment per step.
    """

    x0: np.ndarray
    hist: NoiseHistory
    S: np.ndarray
    shift: np.ndarray
    step_index: int = 0
    target_term: np.ndarray | None = None

    @classmethod
    def pinned(cls, cache: PropagatorCache, x0, xf, hist: NoiseHistory):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        xf = np.atleast_1d(np.asarray(xf, dtype=float))
        term = np.linalg.solve(cache.G[0], xf - cache.M_tf @ x0)
        return cls(x0=x0, hist=hist, S=np.zeros(cache.ens.d),
                   shift=np.zeros(cache.ens.d), target_term=term)

    @classmethod
    def bridge(cls, cache: PropagatorCache, x0, hist: NoiseHistory):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return cls(x0=x0, hist=hist, S=np.zeros(cache.ens.d),
                   shift=np.zeros(cache.ens.d))

    def advance(self, cache: PropagatorCache, i: int):
        dw = self.hist.dW[i]
        self.S = self.S + cache.ginv_phi[i] @ dw
        self.shift = self.shift + cache.phi_steps[i] @ dw
        self.step_index += 1


def _checked_index(cache: PropagatorCache, t: float) -> int:
    i = cache.grid.index_of(t)
    if i >= cache.grid.k:
        raise HorizonSingularError("Gramian tail singular at horizon")
    return i


def pinned_control(ff: FeedforwardState, cache: PropagatorCache, t: float) -> np.ndarray:
    """Feedforward control pinning the averaged state to x_f, one grid step.

    Evaluates u at the grid time t from the increments consumed so far, then
    consumes the step's increment (left-point rule).  Must be called once per
    step in order.
    """
    i = _checked_index(cache, t)
    if i != ff.step_index:
        raise ValueError(f"controller expected step {ff.step_index}, got {i}")
    if ff.target_term is None:
        raise ValueError("feedforward state was not initialized with a pin target")
    eps = cache.ens.epsilon
    u = cache.phi_steps[i].T @ (-np.sqrt(eps) * ff.S + ff.target_term)
    ff.advance(cache, i)
    return u


def noise_shift(cache: PropagatorCache, hist: NoiseHistory, i: int) -> np.ndarray:
    """Left-point sum of Phi(t_f, tau) dW over increments strictly before step i."""
    if i == 0:
        return np.zeros(cache.ens.d)
    return np.einsum("jam,jm->a", cache.phi_steps[:i], hist.dW[:i])


def conditional_mean(cache: PropagatorCache, x0, hist: NoiseHistory, i: int) -> np.ndarray:
    """Mean of the end state given x0 and the noise up to grid step i."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return cache.M_tf @ x0 + np.sqrt(cache.ens.epsilon) * noise_shift(cache, hist, i)


def conditional_kernel(cache: PropagatorCache, x0, hist: NoiseHistory,
                       t: float, y) -> float:
    """Conditional end-state transition density given the noise history up to t.

    Gaussian at y with mean M(t_f) x0 + sqrt(eps) sum_{tau_j < t} Phi dW_j and
    covariance eps G_{t_f,t}.
    """
    i = cache.grid.index_of(t)
    if i >= cache.grid.k:
        raise HorizonSingularError("conditional covariance singular at horizon")
    mean = conditional_mean(cache, x0, hist, i)
    cov = cache.ens.epsilon * cache.G[i]
    return float(np.exp(gaussian_logpdf(mean, cov, y)))


@dataclass
class PosteriorWeights:
    """Normalized weights of the terminal-state posterior on the target grid."""

    weights: np.ndarray
    posterior_mean: np.ndarray


def _posterior_from_mean(cache: PropagatorCache, mean: np.ndarray, i: int,
                         log_phif: np.ndarray, pts: np.ndarray) -> PosteriorWeights:
    eps = cache.ens.epsilon
    logq = gaussian_logpdf(mean, eps * cache.G[i], pts)
    logw = np.atleast_1d(logq) + log_phif
    top = logw.max()
    if not np.isfinite(top):
        raise PosteriorSupportError("posterior support error")
    w = np.exp(logw - top)
    w = w / w.sum()
    return PosteriorWeights(weights=w, posterior_mean=w @ pts)


def posterior_weights(cache: PropagatorCache, x0, hist: NoiseHistory, t: float,
                      pot: SchrodingerPotentials, target: GridDensity) -> PosteriorWeights:
    """Posterior over terminal grid states: w_j proportional to q_hat(x_f^j) phif_j."""
    i = cache.grid.index_of(t)
    if i >= cache.grid.k:
        raise HorizonSingularError("posterior undefined at the horizon")
    mean = conditional_mean(cache, x0, hist, i)
    return _posterior_from_mean(cache, mean, i, pot.log_phif, target.points)


def bridge_control(ff: FeedforwardState, cache: PropagatorCache,
                   pot: SchrodingerPotentials, target: GridDensity,
                   t: float, check: bool = False):
    """Path-integral control: the posterior average of pinned controls.

    The pinned control is affine in x_f, so the average collapses to the
    pinned formula evaluated at the posterior mean; with check=True the
    explicit quadrature over the target grid is also formed and the pair
    (u, gap) is returned.
    """
    i = _checked_index(cache, t)
    if i != ff.step_index:
        raise ValueError(f"controller expected step {ff.step_index}, got {i}")
    eps = cache.ens.epsilon
    base = cache.M_tf @ ff.x0
    mean = base + np.sqrt(eps) * ff.shift
    post = _posterior_from_mean(cache, mean, i, pot.log_phif, target.points)
    stoch = -np.sqrt(eps) * ff.S
    u = cache.phi_steps[i].T @ (stoch + np.linalg.solve(cache.G[0], post.posterior_mean - base))
    gap = None
    if check:
        pins = cache.phi_steps[i].T @ (
            stoch[:, None] + np.linalg.solve(cache.G[0], (target.points - base).T))
        u_quad = pins @ post.weights
        gap = float(np.abs(u - u_quad).max())
    ff.advance(cache, i)
    return (u, gap) if check else u


def smoothed_potential(A, B, epsilon, pot: SchrodingerPotentials,
                       target: GridDensity, t_f: float, t: float, x,
                       gramian_tail: np.ndarray) -> float:
    """phi(t, x) = int q(t, x, t_f, y) phif(y) dy by target-grid quadrature."""
    F = mat_exp(np.atleast_2d(A), t_f - t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    logq = gaussian_logpdf(F @ x, epsilon * gramian_tail, target.points)
    vals = np.exp(np.atleast_1d(logq)) * pot.phif
    return float(vals.sum() * target.cell_volume)


def markov_feedback_control(A, B, epsilon, pot: SchrodingerPotentials,
                            cache: PropagatorCache, t: float, x,
                            target: GridDensity) -> np.ndarray:
    """Markov strategy eps B^T grad log phi(t, x) for the constant family.

    The gradient of the Gaussian kernel is closed-form, which collapses the
    strategy to B^T F^T G_{t_f,t}^{-1} (y_bar - F x) with F = exp(A (t_f - t))
    and y_bar the phif-tilted conditional mean of the end state.  Verification
    oracle only; requires a constant family.
    """
    i = cache.grid.index_of(t)
    if i >= cache.grid.k:
        raise HorizonSingularError("feedback law singular at the horizon")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    F = mat_exp(A, cache.grid.tf - t)
    G = cache.G[i]
    pts = target.points
    logq = np.atleast_1d(gaussian_logpdf(F @ x, epsilon * G, pts))
    logw = logq + pot.log_phif
    top = logw.max()
    if not np.isfinite(top):
        raise PosteriorSupportError("posterior support error")
    w = np.exp(logw - top)
    ybar = (w / w.sum()) @ pts
    return B.T @ F.T @ np.linalg.solve(G, ybar - F @ x)


def lyapunov_matrix(A, B, t: float, t_f: float, quad_pts: int = 8,
                    panels: int = 64) -> np.ndarray:
    """P(t) = exp(A(t - t_f)) G_{t_f,t} exp(A^T (t - t_f)) for the constant family.

    Solves dP/dt = A P + P A^T - B B^T backward from P(t_f) = 0; equal to
    int_0^{t_f - t} exp(-A xi) B B^T exp(-A^T xi) dxi.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    width = t_f - t
    if width < 0:
        raise ValueError("need t <= t_f")
    if width == 0.0:
        return np.zeros_like(A)
    x, w = np.polynomial.legendre.leggauss(quad_pts)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    h = width / panels
    P = np.zeros_like(A)
    for p in range(panels):
        for xq, wq in zip(x, w):
            xi = (p + xq) * h
            E = mat_exp(-A, xi)
            P += h * wq * (E @ B @ B.T @ E.T)
    return 0.5 * (P + P.T)


class PinnedController:
    """Simulator adapter for the pinned feedforward law."""

    def __init__(self, cache: PropagatorCache, x0, xf, hist: NoiseHistory):
        self.cache = cache
        self.ff = FeedforwardState.pinned(cache, x0, xf, hist)
        self.xf = np.atleast_1d(np.asarray(xf, dtype=float))

    def __call__(self, i: int, t: float, x_avg: np.ndarray) -> np.ndarray:
        return pinned_control(self.ff, self.cache, t)


class BridgeController:
    """Simulator adapter for the posterior-averaged (distribution) bridge law."""

    def __init__(self, cache: PropagatorCache, pot: SchrodingerPotentials,
                 target: GridDensity, x0, hist: NoiseHistory, check: bool = False):
        self.cache = cache
        self.pot = pot
        self.target = target
        self.check = check
        self.ff = FeedforwardState.bridge(cache, x0, hist)
        self.form_gap: list[float] = []

    def __call__(self, i: int, t: float, x_avg: np.ndarray) -> np.ndarray:
        out = bridge_control(self.ff, self.cache, self.pot, self.target, t,
                             check=self.check)
        if self.check:
            u, gap = out
            self.form_gap.append(gap)
            return u
        return out


class MarkovFeedbackController:
    """Closed-loop adapter for the constant-family Markov strategy (oracle)."""

    def __init__(self, A, B, epsilon, pot: SchrodingerPotentials,
                 cache: PropagatorCache, target: GridDensity):
        self.A, self.B = A, B
        self.epsilon = epsilon
        self.pot = pot
        self.cache = cache
        self.target = target

    def __call__(self, i: int, t: float, x_avg: np.ndarray) -> np.ndarray:
        return markov_feedback_control(self.A, self.B, self.epsilon, self.pot,
                                       self.cache, t, x_avg, self.target)


class ZeroController:
    """Passive dynamics: u = 0."""

    def __init__(self, m: int):
        self.m = m

    def __call__(self, i: int, t: float, x_avg: np.ndarray) -> np.ndarray:
        return np.zeros(self.m)
