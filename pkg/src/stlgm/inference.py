"""Posterior inference for latent Gaussian models.

The pipeline is the classic Laplace strategy: for a candidate hyperparameter
vector θ, find the Gaussian approximation to the latent conditional by
Newton iterations with likelihood curvature, evaluate the approximate
marginal log-posterior of θ at its mode, optimize it, explore a small grid
around the optimum, and mix per-point Gaussian marginals with the grid
weights.  All linear identifiability constraints are enforced by
conditioning (kriging) at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import ndtr

from .components import LatentBlock
from .likelihoods import (
    ObservationFamily,
    grad_hess,
    log_pmf,
    neg_hessian_floor,
)
from .priors import HyperParamVector
from .sparse import (
    NotPositiveDefinite,
    cholesky_csc,
    cholesky_dense,
    default_jitter,
)


class NonConvergence(RuntimeError):
    """Newton iterations did not reach the tolerance."""


class MaxEvaluations(RuntimeError):
    """Hyperparameter optimizer ran out of evaluations."""


class SingularHessian(RuntimeError):
    """Numeric Hessian at the mode is not negative definite."""


@dataclass
class InferenceControls:
    """Knobs for the Newton/optimizer/grid machinery (spec defaults)."""

    newton_tol: float = 1e-6
    newton_obj_tol: float = 1e-9
    newton_max_iter: int = 100
    max_halvings: int = 30
    optimizer_fatol: float = 1e-6
    optimizer_xatol: float = 1e-3
    max_evaluations: int = 2000
    grid_z_max: float = 2.5
    grid_step: float = 1.0
    grid_threshold: float = 0.05
    hessian_step: float = 0.1
    num_samples: int = 2000
    # below this latent dimension the posterior precision is factorized
    # densely (BLAS3); the sparse path takes over for larger problems
    dense_threshold: int = 2500


@dataclass
class ModelSpec:
    """One fitted model: family, outcomes, latent blocks, hyper vector.

    Derived quantities (the stacked observation matrix, block slices, and
    stacked constraint rows) are computed once at construction.
    """

    variant: str
    family: ObservationFamily
    y: np.ndarray
    log_offsets: np.ndarray
    blocks: list
    hyper: HyperParamVector
    family_hyper: dict = field(default_factory=dict)
    obs_matrix: sp.csr_matrix = None
    block_slices: list = None
    constraint_rows: np.ndarray = None
    dim: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y)
        n = len(self.y)
        self.log_offsets = np.broadcast_to(
            np.asarray(self.log_offsets, dtype=np.float64), (n,)
        ).copy()
        sizes = [b.size for b in self.blocks]
        self.dim = int(np.sum(sizes))
        self.block_slices = []
        start = 0
        for b in self.blocks:
            self.block_slices.append(slice(start, start + b.size))
            start += b.size
        mats = [b.mapper for b in self.blocks]
        for b in self.blocks:
            if b.mapper.shape[0] != n:
                raise ValueError(
                    f"block {b.name!r} mapper has {b.mapper.shape[0]} rows, "
                    f"expected {n}"
                )
        self.obs_matrix = sp.hstack(mats, format="csr")
        rows = []
        for b, sl in zip(self.blocks, self.block_slices):
            if b.constraints.size:
                full = np.zeros((b.constraints.shape[0], self.dim))
                full[:, sl] = b.constraints
                rows.append(full)
        self.constraint_rows = np.vstack(rows) if rows else np.zeros((0, self.dim))

    def block_by_name(self, name: str):
        for b, sl in zip(self.blocks, self.block_slices):
            if b.name == name:
                return b, sl
        raise KeyError(name)

    def family_hyper_values(self, theta_nat: dict) -> dict:
        return {slot: theta_nat[name] for slot, name in self.family_hyper.items()}


def prior_precision(spec: ModelSpec, theta_nat: dict) -> sp.csc_matrix:
    """Block-diagonal latent prior precision at the given hyperparameters."""
    return sp.block_diag(
        [b.precision(theta_nat).csc for b in spec.blocks], format="csc"
    )


def prior_log_normalizer(spec: ModelSpec, theta_nat: dict) -> float:
    return float(sum(b.log_normalizer(theta_nat) for b in spec.blocks))


@dataclass
class GaussianApprox:
    """Gaussian approximation at the constrained conditional mode."""

    mode: np.ndarray
    factor: object  # CholeskyFactor of Q* = Q_prior + AᵀWA
    loglik: float
    prior_quad: float  # x*ᵀ Q_prior x*
    weights: np.ndarray  # floored likelihood curvature at the mode
    constraint_rows: np.ndarray  # A_c
    constraint_solves: np.ndarray  # V = Q*⁻¹ A_cᵀ
    constraint_gram: np.ndarray  # M = A_c V
    iterations: int

    def log_q_correction(self) -> float:
        """½ log|A_c Q*⁻¹ A_cᵀ| (0 when there are no constraints)."""
        if self.constraint_gram.size == 0:
            return 0.0
        sign, val = np.linalg.slogdet(self.constraint_gram)
        return 0.5 * float(val)

    def correct(self, x: np.ndarray) -> np.ndarray:
        """Kriging correction of a vector or column batch onto A_c x = 0."""
        if self.constraint_gram.size == 0:
            return x
        rhs = np.linalg.solve(self.constraint_gram, self.constraint_rows @ x)
        return x - self.constraint_solves @ rhs

    def marginal_variances(self) -> np.ndarray:
        """Diagonal of the constrained posterior covariance."""
        base = self.factor.marginal_variances()
        if self.constraint_gram.size == 0:
            return base
        v = self.constraint_solves
        adj = np.einsum(
            "ik,ik->i", v @ np.linalg.inv(self.constraint_gram), v
        )
        return base - adj


def _penalized_objective(spec, q_prior, x, eta, theta_fam):
    ll = float(np.sum(log_pmf(spec.family, spec.y, eta, theta_fam,
                              spec.log_offsets)))
    quad = float(x @ (q_prior @ x))
    return ll - 0.5 * quad, ll, quad


def _backend_cholesky(q_star: sp.csc_matrix, jitter: float,
                      controls: InferenceControls):
    if q_star.shape[0] <= controls.dense_threshold:
        return cholesky_dense(q_star, jitter=jitter)
    q_star.sort_indices()
    return cholesky_csc(q_star, jitter=jitter)


def _factor_posterior(q_star: sp.csc_matrix, controls: InferenceControls,
                      sticky: dict):
    """Factor Q* with the size-appropriate backend.

    The clean matrix is tried first; if it fails, or succeeds with pivots so
    small that constraint corrections would cancel catastrophically (the
    signature of intrinsic prior directions sitting at the curvature floor),
    the default jitter is applied.  ``sticky`` remembers the outcome so the
    failed attempt is not repeated on every Newton step of the same model.
    """
    jit = default_jitter(q_star)
    scale = float(np.max(np.abs(q_star.diagonal())))
    if not sticky.get("needs_jitter", False):
        try:
            factor = _backend_cholesky(q_star, 0.0, controls)
        except NotPositiveDefinite:
            sticky["needs_jitter"] = True
        else:
            dmin = float(np.min(factor.lower.diagonal())) \
                if sp.issparse(factor.lower) \
                else float(np.min(np.diag(factor.lower)))
            if dmin * dmin >= 1e-12 * scale:
                return factor
            sticky["needs_jitter"] = True
    q_reg = (q_star + sp.identity(q_star.shape[0], format="csc") * jit).tocsc()
    return _backend_cholesky(q_reg, jit, controls)


def gaussian_approx(spec: ModelSpec, theta_int,
                    controls: InferenceControls | None = None,
                    x0: np.ndarray | None = None) -> GaussianApprox:
    """Newton iterations to the constrained mode of π(x | y, θ).

    Each step solves the curvature-weighted system, applies the constraint
    correction with the current factor, and backtracks by step halving until
    the penalized objective does not decrease.
    """
    controls = controls or InferenceControls()
    theta_nat = spec.hyper.natural_from_internal(theta_int)
    theta_fam = spec.family_hyper_values(theta_nat)
    q_prior = prior_precision(spec, theta_nat)
    a_mat = spec.obs_matrix
    a_c = spec.constraint_rows
    sticky = spec.__dict__.setdefault("_factor_sticky", {})
    x = np.zeros(spec.dim) if x0 is None else np.array(x0, dtype=np.float64)
    eta = a_mat @ x
    obj, ll, quad = _penalized_objective(spec, q_prior, x, eta, theta_fam)
    factor = None
    converged = False
    it = 0
    step_norm = np.inf
    for it in range(1, controls.newton_max_iter + 1):
        g, h = grad_hess(spec.family, spec.y, eta, theta_fam, spec.log_offsets)
        w = neg_hessian_floor(-h)
        q_star = (q_prior + (a_mat.T @ sp.diags(w) @ a_mat)).tocsc()
        factor = _factor_posterior(q_star, controls, sticky)
        target = factor.solve(a_mat.T @ (w * eta + g))
        if a_c.shape[0]:
            v = factor.solve(a_c.T)
            gram = a_c @ v
            target = target - v @ np.linalg.solve(gram, a_c @ target)
        delta = target - x
        # backtracking: accept the longest step that does not decrease the
        # penalized objective
        alpha = 1.0
        accepted = False
        for _ in range(controls.max_halvings + 1):
            cand = x + alpha * delta
            eta_cand = a_mat @ cand
            obj_cand, ll_cand, quad_cand = _penalized_objective(
                spec, q_prior, cand, eta_cand, theta_fam
            )
            if np.isfinite(obj_cand) and obj_cand >= obj - 1e-12:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            step_norm = 0.0
            converged = True
            break
        step_norm = float(np.max(np.abs(alpha * delta)))
        obj_prev = obj
        x, eta, obj, ll, quad = cand, eta_cand, obj_cand, ll_cand, quad_cand
        if step_norm < controls.newton_tol or \
                abs(obj - obj_prev) < controls.newton_obj_tol * (1.0 + abs(obj_prev)):
            converged = True
            break
    if not converged:
        raise NonConvergence(
            f"no convergence in {controls.newton_max_iter} iterations "
            f"(last step norm {step_norm:.3e})"
        )
    if step_norm >= controls.newton_tol:
        # converged on the objective with a non-trivial final step:
        # re-linearize so the returned curvature matches x*
        g, h = grad_hess(spec.family, spec.y, eta, theta_fam, spec.log_offsets)
        w = neg_hessian_floor(-h)
        q_star = (q_prior + (a_mat.T @ sp.diags(w) @ a_mat)).tocsc()
        factor = _factor_posterior(q_star, controls, sticky)
    if a_c.shape[0]:
        v = factor.solve(a_c.T)
        gram = a_c @ v
    else:
        v = np.zeros((spec.dim, 0))
        gram = np.zeros((0, 0))
    return GaussianApprox(
        mode=x,
        factor=factor,
        loglik=ll,
        prior_quad=quad,
        weights=w,
        constraint_rows=a_c,
        constraint_solves=v,
        constraint_gram=gram,
        iterations=it,
    )


def log_posterior_theta(spec: ModelSpec, theta_int,
                        controls: InferenceControls | None = None,
                        x0: np.ndarray | None = None,
                        return_approx: bool = False):
    """Unnormalized Laplace log-posterior of θ (internal scale).

    log π̃(θ|y) = log π(y|x*) + log π(x*|θ) − log q̃(x*|θ) + log π(θ), with
    constrained prior and approximation densities; all θ-free constants are
    dropped.
    """
    controls = controls or InferenceControls()
    theta_int = np.asarray(theta_int, dtype=np.float64)
    approx = gaussian_approx(spec, theta_int, controls, x0=x0)
    theta_nat = spec.hyper.natural_from_internal(theta_int)
    value = (
        approx.loglik
        - 0.5 * approx.prior_quad
        + prior_log_normalizer(spec, theta_nat)
        - 0.5 * approx.factor.log_det()
        - approx.log_q_correction()
        + spec.hyper.log_prior_internal(theta_int)
    )
    if return_approx:
        return float(value), approx
    return float(value)


def optimize_theta(spec: ModelSpec, theta_init,
                   controls: InferenceControls | None = None) -> np.ndarray:
    """Nelder-Mead maximization of the Laplace log-posterior."""
    controls = controls or InferenceControls()
    theta_init = np.asarray(theta_init, dtype=np.float64)
    if theta_init.size == 0:
        return theta_init
    warm = {"x": None}

    def objective(z):
        try:
            val, approx = log_posterior_theta(
                spec, z, controls, x0=warm["x"], return_approx=True
            )
        except (NonConvergence, FloatingPointError, np.linalg.LinAlgError):
            return np.inf
        warm["x"] = approx.mode
        return -val

    res = minimize(
        objective,
        theta_init,
        method="Nelder-Mead",
        options=dict(
            fatol=controls.optimizer_fatol,
            xatol=controls.optimizer_xatol,
            maxfev=controls.max_evaluations,
            adaptive=len(theta_init) > 4,
        ),
    )
    if not res.success and "maximum number of function evaluations" \
            in (res.message or "").lower():
        raise MaxEvaluations(res.message)
    return np.asarray(res.x, dtype=np.float64)


@dataclass
class GridPoint:
    theta_int: np.ndarray
    log_post: float
    weight: float
    approx: GaussianApprox
    marginal_sd: np.ndarray


@dataclass
class ThetaGrid:
    points: list

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    def theta_matrix(self) -> np.ndarray:
        return np.vstack([p.theta_int for p in self.points])


def _numeric_hessian(fn, x0, f0, h):
    k = len(x0)
    hess = np.zeros((k, k))
    fp = np.zeros(k)
    fm = np.zeros(k)
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        fp[i] = fn(x0 + e)
        fm[i] = fn(x0 - e)
        hess[i, i] = (fp[i] - 2 * f0 + fm[i]) / h ** 2
    for i in range(k):
        for j in range(i + 1, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h
            ej[j] = h
            fpp = fn(x0 + ei + ej)
            fmm = fn(x0 - ei - ej)
            hess[i, j] = hess[j, i] = (
                fpp - fp[i] - fp[j] + 2 * f0 - fm[i] - fm[j] + fmm
            ) / (2 * h ** 2)
    return hess


def explore_theta_grid(spec: ModelSpec, theta_star,
                       controls: InferenceControls | None = None) -> ThetaGrid:
    """Centered grid along the principal axes of the posterior curvature.

    Steps of one posterior standard deviation out to |z| <= grid_z_max per
    axis; points whose weight falls below grid_threshold relative to the
    mode are dropped, and the surviving weights are normalized.  If the
    numeric Hessian is not negative definite the axes fall back to
    per-coordinate steps of 0.5 internal units.
    """
    controls = controls or InferenceControls()
    theta_star = np.asarray(theta_star, dtype=np.float64)
    k = theta_star.size
    center_val, center_approx = log_posterior_theta(
        spec, theta_star, controls, return_approx=True
    )
    center_sd = np.sqrt(center_approx.marginal_variances())
    points = [GridPoint(theta_star.copy(), center_val, 1.0, center_approx,
                        center_sd)]
    if k == 0:
        return ThetaGrid(points)

    warm = center_approx.mode

    def fn(z):
        return log_posterior_theta(spec, z, controls, x0=warm)

    hess = _numeric_hessian(fn, theta_star, center_val, controls.hessian_step)
    evals, evecs = np.linalg.eigh(-hess)
    if np.all(evals > 0):
        directions = evecs * (1.0 / np.sqrt(evals))  # columns scaled to 1 sd
    else:
        directions = 0.5 * np.eye(k)
    zs = np.arange(controls.grid_step, controls.grid_z_max + 1e-12,
                   controls.grid_step)
    for axis in range(k):
        for z in zs:
            for sign in (1.0, -1.0):
                theta = theta_star + sign * z * directions[:, axis]
                try:
                    val, approx = log_posterior_theta(
                        spec, theta, controls, x0=warm, return_approx=True
                    )
                except NonConvergence:
                    continue
                points.append(GridPoint(
                    theta, val, 1.0, approx,
                    np.sqrt(approx.marginal_variances()),
                ))
    best = max(p.log_post for p in points)
    kept = [p for p in points
            if p.log_post - best >= np.log(controls.grid_threshold)]
    raw = np.array([np.exp(p.log_post - best) for p in kept])
    raw /= raw.sum()
    for p, w in zip(kept, raw):
        p.weight = float(w)
    return ThetaGrid(kept)


def latent_marginals(spec: ModelSpec, grid: ThetaGrid):
    """Mixture mean and sd per latent coefficient across the grid."""
    w = grid.weights
    mus = np.vstack([p.approx.mode for p in grid.points])
    sds = np.vstack([p.marginal_sd for p in grid.points])
    mean = w @ mus
    second = w @ (sds ** 2 + mus ** 2)
    var = np.maximum(second - mean ** 2, 0.0)
    return mean, np.sqrt(var)


def mixture_quantiles(weights, mus, sds, probs):
    """Quantiles of 1-d Gaussian mixtures, vectorized over coefficients.

    ``mus``/``sds`` are (k, d) arrays of component means and sds; returns an
    array of shape (len(probs), d) by bisection on the mixture CDF.
    """
    weights = np.asarray(weights)
    mus = np.atleast_2d(mus)
    sds = np.atleast_2d(np.maximum(sds, 1e-300))
    lo = np.min(mus - 8.0 * sds, axis=0)
    hi = np.max(mus + 8.0 * sds, axis=0)
    out = np.empty((len(probs), mus.shape[1]))
    for pi, p in enumerate(probs):
        a, b = lo.copy(), hi.copy()
        for _ in range(80):
            mid = 0.5 * (a + b)
            cdf = np.einsum("k,kd->d", weights, ndtr((mid - mus) / sds))
            above = cdf >= p
            b = np.where(above, mid, b)
            a = np.where(above, a, mid)
        out[pi] = 0.5 * (a + b)
    return out


def posterior_sample(spec: ModelSpec, grid: ThetaGrid, num_samples: int,
                     seed: int):
    """Joint draws of (latent field, θ) from the grid mixture.

    Each draw uses its own counter-derived random stream (seed, draw index),
    so results are identical regardless of batching or thread count.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    k = len(grid.points)
    weights = grid.weights
    dim = spec.dim
    n_theta = len(spec.hyper)
    choices = np.empty(num_samples, dtype=np.int64)
    zs = np.empty((dim, num_samples))
    for s in range(num_samples):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(11, s))
        )
        choices[s] = rng.choice(k, p=weights)
        zs[:, s] = rng.standard_normal(dim)
    x_draws = np.empty((num_samples, dim))
    theta_draws = np.empty((num_samples, n_theta))
    for idx in range(k):
        sel = np.nonzero(choices == idx)[0]
        if sel.size == 0:
            continue
        point = grid.points[idx]
        eps = point.approx.factor.solve_lt(zs[:, sel])
        eps = point.approx.correct(eps)
        x_draws[sel] = (point.approx.mode[:, None] + eps).T
        theta_draws[sel] = point.theta_int
    return x_draws, theta_draws
