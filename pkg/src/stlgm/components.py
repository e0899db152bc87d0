"""Latent-effect building blocks: RW2 smooths, AR(1) year effects, the
spatiotemporal Kronecker block, dummy-coded fixed effects, and linear
identifiability constraints.

Each block exposes a precision builder that is a pure function of the
(natural-scale) hyperparameter dictionary, a sparse mapper from block
coefficients to observations, and the constraint rows that keep it
identifiable next to the global intercept.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MaternParams, fem_matrices, matern_precision, projector
from .sparse import SparseSymMatrix, cholesky, kronecker


class TooFewKnots(ValueError):
    """RW2 smooths need at least three knots."""


class ConstantInput(ValueError):
    """Cannot place knots on a zero-width value range."""


class InvalidPhi(ValueError):
    """AR(1) correlation must lie strictly inside (-1, 1)."""


class InvalidTau(ValueError):
    """Precision parameters must be strictly positive."""


class UnknownLevel(ValueError):
    """A categorical value is outside the declared vocabulary."""


class SingularConstraintSystem(ValueError):
    """Constraint rows are linearly dependent under the given precision."""


# Closed categorical vocabularies; the first entry of each is the reference
# level and contributes no dummy column.
EVENT_TYPES = (
    "ArmedClash",
    "NonStateOvertakesTerritory",
    "GovernmentRegainsTerritory",
    "Attack",
    "SexualViolence",
    "ExcessiveForceAgainstCivilians",
    "StrategicDevelopment",
    "Grenade",
    "ShellingArtilleryMissile",
    "AirDroneStrike",
    "RemoteExplosive",
    "ViolentDemonstration",
    "MobViolence",
)

ACTORS = (
    "StateForces",
    "RebelForces",
    "MilitiaGroups",
    "CommunalGroups",
    "Protesters",
    "Rioters",
    "Civilians",
    "ForeignGroups",
)

SEASONS = ("Spring", "Summer", "Autumn", "Winter")


@dataclass(frozen=True)
class CovariateEncoding:
    """Dummy coding of the three categorical covariates.

    Reference levels (armed clash, state forces, spring) map to all-zero
    rows; the remaining levels each get one indicator column.
    """

    event_types: tuple = EVENT_TYPES
    actors: tuple = ACTORS
    seasons: tuple = SEASONS

    def column_names(self):
        names = ["Intercept"]
        names += list(self.event_types[1:])
        names += list(self.actors[1:])
        names += list(self.seasons[1:])
        return names

    @property
    def num_columns(self) -> int:
        return 1 + (len(self.event_types) - 1) + (len(self.actors) - 1) \
            + (len(self.seasons) - 1)


def design_matrix(event_types: Sequence[str], actors: Sequence[str],
                  seasons: Sequence[str],
                  enc: CovariateEncoding | None = None) -> np.ndarray:
    """Dense design matrix: intercept plus one dummy per non-reference level."""
    enc = enc or CovariateEncoding()
    n = len(event_types)
    if len(actors) != n or len(seasons) != n:
        raise ValueError("covariate sequences must have equal length")
    z = np.zeros((n, enc.num_columns))
    z[:, 0] = 1.0
    offset = 1
    for values, levels, label in (
        (event_types, enc.event_types, "event_type"),
        (actors, enc.actors, "actor"),
        (seasons, enc.seasons, "season"),
    ):
        index = {lvl: k for k, lvl in enumerate(levels)}
        for row, val in enumerate(values):
            k = index.get(val)
            if k is None:
                raise UnknownLevel(f"unknown {label} {val!r} at row {row}")
            if k > 0:
                z[row, offset + k - 1] = 1.0
        offset += len(levels) - 1
    return z


def rw2_structure(n: int) -> SparseSymMatrix:
    """Second-difference penalty matrix R = DᵀD (rank n-2).

    The null space is spanned by the constant and linear sequences, so both
    R·1 = 0 and R·(1..n) = 0.
    """
    if n < 3:
        raise TooFewKnots(f"need at least 3 knots, got {n}")
    d = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n))
    return SparseSymMatrix.from_csc((d.T @ d).tocsc())


def discretize_distance(values, n_knots: int):
    """Equally spaced knots over [min, max] and a 0/1 assignment mapper.

    Each value goes to its nearest knot, ties broken toward the lower index.
    """
    values = np.asarray(values, dtype=np.float64)
    if n_knots < 3:
        raise TooFewKnots(f"need at least 3 knots, got {n_knots}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("distance values must be finite and nonnegative")
    vmin, vmax = float(values.min()), float(values.max())
    if vmax == vmin:
        raise ConstantInput("all values identical; cannot span knots")
    knots = np.linspace(vmin, vmax, n_knots)
    h = knots[1] - knots[0]
    idx = np.ceil((values - vmin) / h - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, n_knots - 1)
    n = len(values)
    mapper = sp.csr_matrix(
        (np.ones(n), (np.arange(n), idx)), shape=(n, n_knots)
    )
    return knots, mapper


def ar1_precision(T: int, phi: float, tau: float) -> SparseSymMatrix:
    """Tridiagonal AR(1) precision scaled by the innovation precision tau.

    Diagonal (1, 1+φ², ..., 1+φ², 1), off-diagonal -φ; the inverse is the
    stationary covariance φ^|i-j| / (τ(1-φ²)).
    """
    if not -1.0 < phi < 1.0:
        raise InvalidPhi(f"phi must be in (-1, 1), got {phi}")
    if tau <= 0:
        raise InvalidTau(f"tau must be positive, got {tau}")
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    diag = np.full(T, 1.0 + phi * phi)
    diag[0] = diag[-1] = 1.0
    q = sp.diags([diag, np.full(T - 1, -phi), np.full(T - 1, -phi)], [0, 1, -1])
    return SparseSymMatrix.from_csc(tau * q.tocsc())


def apply_constraints(factor, a_rows: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Condition x on A x = 0 by kriging: x - Q⁻¹Aᵀ(A Q⁻¹Aᵀ)⁻¹ A x.

    ``factor`` is the Cholesky factor of Q.  Works for a single vector or a
    column batch.  An empty constraint set returns x unchanged.
    """
    a_rows = np.asarray(a_rows, dtype=np.float64)
    if a_rows.size == 0:
        return x
    if a_rows.ndim == 1:
        a_rows = a_rows[None, :]
    v = factor.solve(a_rows.T)  # dim x k
    m = a_rows @ v  # k x k
    ax = a_rows @ x
    try:
        coef = np.linalg.solve(m, ax)
    except np.linalg.LinAlgError as err:
        raise SingularConstraintSystem(str(err)) from err
    return x - v @ coef


@dataclass
class LatentBlock:
    """One additive latent term of the linear predictor.

    ``precision`` maps the natural-scale hyperparameter dict to the block
    precision matrix; ``log_normalizer`` returns the hyperparameter-dependent
    part of the constrained prior's log normalizing constant (generalized
    log-determinant plus the sum-to-zero correction, halved).
    """

    name: str
    kind: str  # fixed | rw2 | ar1 | spde | spde_ar1
    size: int
    precision: Callable[[dict], SparseSymMatrix]
    mapper: sp.csr_matrix
    constraints: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    log_normalizer: Callable[[dict], float] = lambda theta: 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mapper.shape[1] != self.size:
            raise ValueError(
                f"mapper has {self.mapper.shape[1]} columns, block size {self.size}"
            )
        if self.constraints.size:
            rank = np.linalg.matrix_rank(self.constraints)
            if rank < self.constraints.shape[0]:
                raise SingularConstraintSystem(
                    f"dependent constraint rows in block {self.name!r}"
                )


def fixed_effects_block(design: np.ndarray, prec: float = 1e-3,
                        name: str = "fixed") -> LatentBlock:
    """Gaussian fixed effects with a vague independent prior."""
    design = np.asarray(design, dtype=np.float64)
    p = design.shape[1]
    q = SparseSymMatrix.from_diag(np.full(p, prec))
    return LatentBlock(
        name=name,
        kind="fixed",
        size=p,
        precision=lambda theta, _q=q: _q,
        mapper=sp.csr_matrix(design),
        constraints=np.zeros((0, p)),
        log_normalizer=lambda theta, _p=p, _prec=prec: 0.5 * _p * np.log(_prec),
    )


def rw2_block(name: str, values_km, n_knots: int,
              tau_name: str) -> LatentBlock:
    """RW2 smooth of a distance covariate on equally spaced knots.

    Intrinsic prior of rank n-2; identified against the intercept by a
    sum-to-zero constraint.  The normalizer uses the rank-deficiency
    convention: only (rank/2)·log τ varies with the hyperparameters.
    """
    knots, mapper = discretize_distance(values_km, n_knots)
    structure = rw2_structure(n_knots)
    rank = n_knots - 2

    def precision(theta, _s=structure):
        tau = float(theta[tau_name])
        if tau <= 0:
            raise InvalidTau(f"{tau_name} must be positive, got {tau}")
        return SparseSymMatrix.from_csc(tau * _s.csc)

    return LatentBlock(
        name=name,
        kind="rw2",
        size=n_knots,
        precision=precision,
        mapper=mapper,
        constraints=np.ones((1, n_knots)),
        log_normalizer=lambda theta: 0.5 * rank * np.log(float(theta[tau_name])),
        meta={"knots": knots, "tau_name": tau_name},
    )


def _constrained_normalizer(q: SparseSymMatrix, a_rows: np.ndarray) -> float:
    """½ log|Q| + ½ log|A Q⁻¹ Aᵀ| for a proper block under A x = 0."""
    fac = cholesky(q)
    v = fac.solve(a_rows.T)
    m = a_rows @ v
    sign, logdet_m = np.linalg.slogdet(np.atleast_2d(m))
    return 0.5 * fac.log_det() + 0.5 * logdet_m


def ar1_year_block(year_index, T: int, phi_name: str,
                   innovation_tau: float = 1.0,
                   name: str = "year") -> LatentBlock:
    """AR(1) year effect with a sum-to-zero constraint.

    The innovation precision is held fixed (the correlation is the
    hyperparameter); a sum-to-zero row separates the block from the
    intercept.
    """
    year_index = np.asarray(year_index, dtype=np.int64)
    n = len(year_index)
    mapper = sp.csr_matrix(
        (np.ones(n), (np.arange(n), year_index)), shape=(n, T)
    )
    ones_row = np.ones((1, T))

    def precision(theta):
        return ar1_precision(T, float(theta[phi_name]), innovation_tau)

    def log_normalizer(theta):
        return _constrained_normalizer(precision(theta), ones_row)

    return LatentBlock(
        name=name,
        kind="ar1",
        size=T,
        precision=precision,
        mapper=mapper,
        constraints=ones_row.copy(),
        log_normalizer=log_normalizer,
        meta={"phi_name": phi_name, "innovation_tau": innovation_tau},
    )


def spde_ar1_block(mesh: Mesh, points_km, year_index, T: int,
                   rho_name: str = "rho", sigma_name: str = "sigma",
                   phi_name: str = "phi_w",
                   name: str = "field") -> LatentBlock:
    """Spatiotemporal interaction: AR(1)-in-time Kronecker Matérn-in-space.

    Block coefficients are ordered year-major (year t occupies columns
    t·m .. t·m+m-1).  Each observation maps to the barycentric weights of
    its location inside its year slab.  One sum-to-zero constraint applies
    per year.  With T = 1 the block degenerates to the static spatial field
    (no correlation hyperparameter).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    m = mesh.num_vertices
    fem = fem_matrices(mesh)
    c_diag = fem[0].diagonal()
    g_csc = fem[1].csc
    gcg = (g_csc @ sp.diags(1.0 / c_diag) @ g_csc).tocsc()
    c_csc = sp.diags(c_diag).tocsc()
    a_s = projector(mesh, points_km)
    year_index = np.asarray(year_index, dtype=np.int64)
    n = a_s.shape[0]
    if len(year_index) != n:
        raise ValueError("year_index length must match point count")
    if year_index.min(initial=0) < 0 or year_index.max(initial=0) >= T:
        raise ValueError("year_index out of range")
    coo = a_s.tocoo()
    mapper = sp.csr_matrix(
        (coo.data, (coo.row, year_index[coo.row] * m + coo.col)),
        shape=(n, T * m),
    )
    constraints = np.zeros((T, T * m))
    for t in range(T):
        constraints[t, t * m:(t + 1) * m] = 1.0

    from functools import lru_cache

    from .mesh import matern_to_spde

    @lru_cache(maxsize=4)
    def _spatial(rho: float, sigma: float):
        kappa, tau = matern_to_spde(rho, sigma)
        q = (tau ** 2) * ((kappa ** 4) * c_csc + 2.0 * (kappa ** 2) * g_csc
                          + gcg)
        return SparseSymMatrix.from_csc(q.tocsc())

    @lru_cache(maxsize=4)
    def _spatial_logdet_and_sum(rho: float, sigma: float):
        """(log|Q_omega|, 1ᵀ Q_omega⁻¹ 1) for the normalizer."""
        fac = cholesky(_spatial(rho, sigma))
        return fac.log_det(), float(np.ones(m) @ fac.solve(np.ones(m)))

    def spatial_precision(theta):
        return _spatial(float(theta[rho_name]), float(theta[sigma_name]))

    if T == 1:
        def precision(theta):
            return spatial_precision(theta)

        def log_normalizer(theta):
            ld, c = _spatial_logdet_and_sum(
                float(theta[rho_name]), float(theta[sigma_name])
            )
            return 0.5 * (ld + np.log(c))

        kind = "spde"
    else:
        def precision(theta):
            q_ar = ar1_precision(T, float(theta[phi_name]), 1.0)
            return kronecker(q_ar, spatial_precision(theta))

        def log_normalizer(theta):
            # A = I_T ⊗ 1ᵀ gives A Q⁻¹ Aᵀ = (1ᵀ Q_ω⁻¹ 1) · Q_ar⁻¹
            ld_w, c = _spatial_logdet_and_sum(
                float(theta[rho_name]), float(theta[sigma_name])
            )
            fac_a = cholesky(ar1_precision(T, float(theta[phi_name]), 1.0))
            return 0.5 * (
                T * ld_w + (m - 1) * fac_a.log_det() + T * np.log(c)
            )

        kind = "spde_ar1"

    return LatentBlock(
        name=name,
        kind=kind,
        size=T * m,
        precision=precision,
        mapper=mapper,
        constraints=constraints,
        log_normalizer=log_normalizer,
        meta={"mesh": mesh, "T": T, "rho_name": rho_name,
              "sigma_name": sigma_name, "phi_name": phi_name},
    )
