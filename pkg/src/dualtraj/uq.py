"""First-order uncertainty propagation and Gaussian-mixture priors.

The parameter distribution is pushed through the closed loop by
linearizing the augmented dynamics around the mean trajectory: the mean
follows the nominal ODE, the joint covariance of (state, parameters)
follows a Lyapunov-type ODE driven by finite-difference Jacobians.  Broad
priors are split into narrow Gaussian components so the linearization
stays accurate per component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UQError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMixture:
    """Weighted Gaussian components (weights, means, covariances)."""

    weights: np.ndarray   # (k,)
    means: np.ndarray     # (k, p)
    covs: np.ndarray      # (k, p, p)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        if not (w.shape[0] == mu.shape[0] == cov.shape[0]):
            raise UQError("component counts disagree")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise UQError("weights must be positive and sum to one")
        for Q in cov:
            if np.any(np.abs(Q - Q.T) > 1e-12):
                raise UQError("component covariance not symmetric")
            if np.any(np.linalg.eigvalsh(Q) < -1e-14):
                raise UQError("component covariance not PSD")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def n_components(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        d = self.means - mu
        return (
            np.einsum("k,kij->ij", self.weights, self.covs)
            + np.einsum("k,ki,kj->ij", self.weights, d, d)
        )


def build_gmm(theta_bar, Q, n_components=1, strategy="single") -> GaussianMixture:
    """Moment-matched mixture representation of N(theta_bar, Q).

    strategy "single": one component, exact.  strategy "sigma": 2p+1
    components placed at the mean and along scaled Cholesky columns of Q,
    each with covariance Q/k; mixture mean and covariance match exactly.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    Q = np.asarray(Q, dtype=float)
    p = theta_bar.size
    if strategy == "single" or n_components == 1:
        return GaussianMixture(np.ones(1), theta_bar[None], Q[None])
    if strategy != "sigma":
        raise UQError(f"unknown strategy {strategy!r}")
    k = 2 * p + 1
    if n_components != k:
        raise UQError(f"sigma strategy requires {k} components for p={p}")
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise UQError("prior covariance must be positive definite") from exc
    # uniform weights 1/k, offsets +-sqrt(p) L_i, per-component covariance
    # Q/k: second moments then recombine to Q exactly
    alpha = np.sqrt(p)
    means = [theta_bar]
    for i in range(p):
        means.append(theta_bar + alpha * L[:, i])
        means.append(theta_bar - alpha * L[:, i])
    weights = np.full(k, 1.0 / k)
    covs = np.repeat((Q / k)[None], k, axis=0)
    return GaussianMixture(weights, np.array(means), covs)


@dataclass
class MomentTrajectory:
    """Mean and joint covariance of the augmented state over time.

    Sigma is the full (n_xi + n_theta) square covariance with the constant
    parameter block in the lower right.
    """

    t: np.ndarray
    mu: np.ndarray        # (K+1, n_xi)
    Sigma: np.ndarray     # (K+1, n_aug, n_aug)
    n_xi: int
    n_theta: int
    tau_mean: np.ndarray = None    # (K+1, n_u) if the rhs exposes the input
    Sigma_uu: np.ndarray = None    # (K+1, n_u, n_u)
    diverged: bool = False
    t_divergence: float = None

    def sigma_xx(self, n_x=None):
        n_x = self.n_xi if n_x is None else n_x
        return self.Sigma[:, :n_x, :n_x]

    def sigma_thth(self):
        return self.Sigma[:, self.n_xi:, self.n_xi:]

    def export_csv(self, path) -> None:
        n_aug = self.n_xi + self.n_theta
        header = (
            ["t"]
            + [f"mu{i}" for i in range(self.n_xi)]
            + [f"S{i}_{j}" for i in range(n_aug) for j in range(i, n_aug)]
        )
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            iu = np.triu_indices(n_aug)
            for k in range(self.t.size):
                row = np.concatenate(
                    [[self.t[k]], self.mu[k], self.Sigma[k][iu]]
                )
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def propagate_moments(
    rhs,
    xi0,
    theta_bar,
    Q,
    tgrid,
    fd_step: float = 1e-6,
    divergence_limit: float = 1e6,
) -> MomentTrajectory:
    """Integrate mean and covariance of the augmented state along tgrid.

    rhs(t, Xi, Theta) must map batched states (B, n_xi) and parameters
    (B, n_theta) to derivatives (B, n_xi); it may instead return a tuple
    (dXi, tau) exposing the control input, in which case the input
    covariance is reconstructed from the same linearization and recorded.
    Jacobians are central finite differences with a relative step.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    Q = np.asarray(Q, dtype=float)
    return propagate_moments_batch(
        rhs, xi0, theta_bar[None], Q[None], tgrid,
        fd_step=fd_step, divergence_limit=divergence_limit,
    )[0]


def propagate_moments_batch(
    rhs,
    xi0,
    theta_bars,
    Qs,
    tgrid,
    fd_step: float = 1e-6,
    divergence_limit: float = 1e6,
) -> list:
    """propagate_moments for several parameter components in one pass.

    All components share the initial state and time grid; the
    finite-difference stencils of every component are evaluated in a
    single batched rhs call per integrator stage.  Returns one
    MomentTrajectory per component.
    """
    xi0 = np.asarray(xi0, dtype=float)
    theta_bars = np.atleast_2d(np.asarray(theta_bars, dtype=float))
    Qs = np.asarray(Qs, dtype=float)
    if Qs.ndim == 2:
        Qs = Qs[None]
    C, n_th = theta_bars.shape
    for Q in Qs:
        if np.any(np.abs(Q - Q.T) > 1e-12) or np.any(
            np.linalg.eigvalsh(Q) < -1e-14
        ):
            raise UQError("Q must be symmetric PSD")
    tgrid = np.asarray(tgrid, dtype=float)
    n_xi = xi0.size
    n_aug = n_xi + n_th
    K = tgrid.size - 1
    B = 1 + 2 * n_xi + 2 * n_th
    off = 1 + 2 * n_xi
    steps_th = fd_step * (1.0 + np.abs(theta_bars))   # (C, n_th)

    def eval_point(t, mu, S, want_tau=False):
        # mu (C, n_xi), S (C, n_aug, n_aug)
        steps_xi = fd_step * (1.0 + np.abs(mu))
        Xi = np.repeat(mu[:, None, :], B, axis=1)
        Th = np.repeat(theta_bars[:, None, :], B, axis=1)
        idx = np.arange(n_xi)
        Xi[:, 1 + 2 * idx, idx] += steps_xi
        Xi[:, 2 + 2 * idx, idx] -= steps_xi
        jdx = np.arange(n_th)
        Th[:, off + 2 * jdx, jdx] += steps_th
        Th[:, off + 2 * jdx + 1, jdx] -= steps_th
        out = rhs(t, Xi.reshape(C * B, n_xi), Th.reshape(C * B, n_th))
        tau = None
        if isinstance(out, tuple):
            out, tau = out
        out = out.reshape(C, B, n_xi)
        f0 = out[:, 0]
        dxi = out[:, 1:off:2] - out[:, 2:off:2]       # (C, n_xi, n_xi)
        A = np.swapaxes(dxi / (2 * steps_xi)[:, :, None], 1, 2)
        dth = out[:, off::2] - out[:, off + 1::2]     # (C, n_th, n_xi)
        Bm = np.swapaxes(dth / (2 * steps_th)[:, :, None], 1, 2)
        G = np.zeros((C, n_aug, n_aug))
        G[:, :n_xi, :n_xi] = A
        G[:, :n_xi, n_xi:] = Bm
        dS = G @ S + S @ np.swapaxes(G, 1, 2)
        if want_tau and tau is not None:
            tau = tau.reshape(C, B, -1)
            du_x = tau[:, 1:off:2] - tau[:, 2:off:2]   # (C, n_xi, n_u)
            Pi_x = np.swapaxes(du_x / (2 * steps_xi)[:, :, None], 1, 2)
            du_t = tau[:, off::2] - tau[:, off + 1::2]
            Pi_t = np.swapaxes(du_t / (2 * steps_th)[:, :, None], 1, 2)
            Pi = np.concatenate([Pi_x, Pi_t], axis=2)  # (C, n_u, n_aug)
            return f0, dS, tau[:, 0], Pi
        return f0, dS, None, None

    mu = np.repeat(xi0[None], C, axis=0)
    S = np.zeros((C, n_aug, n_aug))
    S[:, n_xi:, n_xi:] = Qs

    mu_hist = np.empty((K + 1, C, n_xi))
    S_hist = np.empty((K + 1, C, n_aug, n_aug))
    tau_hist = None
    Suu_hist = None
    alive = np.ones(C, dtype=bool)
    t_div = np.full(C, np.nan)
    n_rec = np.full(C, K + 1, dtype=int)

    for k in range(K + 1):
        dmu, dS, tau0, Pi = eval_point(tgrid[k], mu, S, want_tau=True)
        if tau0 is not None:
            if tau_hist is None:
                n_u = tau0.shape[1]
                tau_hist = np.empty((K + 1, C, n_u))
                Suu_hist = np.empty((K + 1, C, n_u, n_u))
            tau_hist[k] = tau0
            Suu_hist[k] = Pi @ S @ np.swapaxes(Pi, 1, 2)
        mu_hist[k] = mu
        S_hist[k] = S
        if k == K:
            break
        h = tgrid[k + 1] - tgrid[k]
        k1m, k1S = dmu, dS
        k2m, k2S, _, _ = eval_point(
            tgrid[k] + h / 2, mu + h / 2 * k1m, S + h / 2 * k1S
        )
        k3m, k3S, _, _ = eval_point(
            tgrid[k] + h / 2, mu + h / 2 * k2m, S + h / 2 * k2S
        )
        k4m, k4S, _, _ = eval_point(
            tgrid[k + 1], mu + h * k3m, S + h * k3S
        )
        mu_new = mu + h / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
        S_new = S + h / 6 * (k1S + 2 * k2S + 2 * k3S + k4S)
        # keep the covariance exactly symmetric
        S_new = 0.5 * (S_new + np.swapaxes(S_new, 1, 2))
        bad = alive & (
            ~np.all(np.isfinite(mu_new), axis=1)
            | ~np.all(np.isfinite(S_new.reshape(C, -1)), axis=1)
            | (np.max(np.abs(np.nan_to_num(mu_new)), axis=1) > divergence_limit)
        )
        if np.any(bad):
            t_div[bad] = tgrid[k + 1]
            n_rec[bad] = k + 1
            alive &= ~bad
            # freeze diverged components so they stop polluting the batch
            mu_new[~alive] = mu[~alive]
            S_new[~alive] = S[~alive]
            if not np.any(alive):
                break
        mu, S = mu_new, S_new

    results = []
    for c in range(C):
        nr = n_rec[c]
        results.append(MomentTrajectory(
            t=tgrid[:nr],
            mu=mu_hist[:nr, c],
            Sigma=S_hist[:nr, c],
            n_xi=n_xi,
            n_theta=n_th,
            tau_mean=None if tau_hist is None else tau_hist[:nr, c],
            Sigma_uu=None if Suu_hist is None else Suu_hist[:nr, c],
            diverged=not alive[c],
            t_divergence=None if alive[c] else float(t_div[c]),
        ))
    return results
