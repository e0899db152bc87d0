"""Hyperprior log-densities and internal-scale transforms.

All densities are evaluated on the natural scale of the parameter; the
optimizer works on an unconstrained internal scale (log for positive
parameters, a log-ratio transform for correlations, logit for
probabilities), and :class:`HyperParamVector` adds the change-of-variable
Jacobians.

The penalized-complexity priors follow the standard construction: an
exponential penalty on the distance from a base model, pinned down by one
tail-probability statement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, gammaln

_SQRT2 = np.sqrt(2.0)


class InvalidCalibration(ValueError):
    """Tail-probability statement cannot be satisfied."""


def pc_prior_matern(rho, sigma, rho0: float, p_rho: float,
                    sigma0: float, p_sigma: float):
    """Joint PC prior log-density for the Matérn range and marginal sd.

    Calibrated so that P(range < rho0) = p_rho and P(sd > sigma0) = p_sigma
    (dimension fixed at 2).  The range has density lam1 * rho^-2 *
    exp(-lam1/rho) and the sd is exponential with rate lam2.
    """
    if rho0 <= 0 or sigma0 <= 0 or not 0 < p_rho < 1 or not 0 < p_sigma < 1:
        raise InvalidCalibration(
            f"bad calibration rho0={rho0} p_rho={p_rho} sigma0={sigma0} "
            f"p_sigma={p_sigma}"
        )
    lam1 = -np.log(p_rho) * rho0
    lam2 = -np.log(p_sigma) / sigma0
    rho = np.asarray(rho, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.where(
            (rho > 0) & (sigma > 0),
            np.log(lam1) - 2.0 * np.log(rho) - lam1 / rho
            + np.log(lam2) - lam2 * sigma,
            -np.inf,
        )
    return lp if lp.ndim else float(lp)


def pc_prior_precision(tau, U: float, alpha: float):
    """PC prior log-density for a precision, stated via P(1/sqrt(tau) > U) = alpha.

    p(tau) = (lam/2) tau^{-3/2} exp(-lam tau^{-1/2}) with lam = -ln(alpha)/U,
    i.e. the implied standard deviation is exponential with rate lam.
    """
    if U <= 0 or not 0 < alpha < 1:
        raise InvalidCalibration(f"bad calibration U={U} alpha={alpha}")
    lam = -np.log(alpha) / U
    tau = np.asarray(tau, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.where(
            tau > 0,
            np.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(np.abs(tau)),
            -np.inf,
        )
    return lp if lp.ndim else float(lp)


def _ar1_tail(lam: float, t: float) -> float:
    """P(d < t) for the truncated exponential distance on (0, sqrt(2))."""
    if lam == 0.0:
        return t / _SQRT2
    return np.expm1(-lam * t) / np.expm1(-lam * _SQRT2)


_AR1_RATE_CACHE: dict = {}


def _ar1_rate(U: float, alpha_tail: float) -> float:
    key = (U, alpha_tail)
    if key in _AR1_RATE_CACHE:
        return _AR1_RATE_CACHE[key]
    if not -1.0 <= U < 1.0 or not 0 < alpha_tail < 1:
        raise InvalidCalibration(f"bad calibration U={U} alpha={alpha_tail}")
    d_u = np.sqrt(1.0 - U)
    limit = d_u / _SQRT2  # tail probability in the flat (rate 0) limit
    if abs(alpha_tail - limit) < 1e-14:
        lam = 0.0
    else:
        f = lambda lam: _ar1_tail(lam, d_u) - alpha_tail
        try:
            lam = brentq(f, -200.0, 200.0, xtol=1e-13)
        except ValueError as err:
            raise InvalidCalibration(
                f"unreachable calibration P(phi > {U}) = {alpha_tail}"
            ) from err
    _AR1_RATE_CACHE[key] = lam
    return lam


def pc_prior_ar1(phi, U: float, alpha_tail: float):
    """PC prior log-density for a stationary AR(1) correlation.

    Base model phi = 1 with distance d(phi) = sqrt(1 - phi); the distance
    carries a truncated exponential density on (0, sqrt(2)) whose rate is
    solved from P(phi > U) = alpha_tail.
    """
    lam = _ar1_rate(U, alpha_tail)
    phi = np.asarray(phi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.sqrt(np.clip(1.0 - phi, 0.0, None))
        if lam == 0.0:
            log_norm = -np.log(_SQRT2)
        else:
            log_norm = np.log(abs(lam)) - np.log(abs(-np.expm1(-lam * _SQRT2)))
        lp = np.where(
            (phi > -1.0) & (phi < 1.0),
            log_norm - lam * d - np.log(2.0 * np.maximum(d, 1e-300)),
            -np.inf,
        )
    return lp if lp.ndim else float(lp)


def gaussian_prior_fixed(beta, mean: float = 0.0, precision: float = 0.001):
    """Independent Gaussian log-density summed over the coefficient vector."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    p = beta.size
    resid = beta - mean
    return float(
        0.5 * p * (np.log(precision) - np.log(2.0 * np.pi))
        - 0.5 * precision * np.sum(resid * resid)
    )


def gamma_prior(x, shape: float = 1.0, rate: float = 0.1):
    """Gamma log-density (used for the negative-binomial size parameter)."""
    if shape <= 0 or rate <= 0:
        raise InvalidCalibration(f"bad gamma calibration shape={shape} rate={rate}")
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.where(
            x > 0,
            shape * np.log(rate) - gammaln(shape)
            + (shape - 1.0) * np.log(np.abs(x)) - rate * x,
            -np.inf,
        )
    return lp if lp.ndim else float(lp)


def logit_gaussian_prior(psi, mean: float = -1.0, precision: float = 0.2):
    """Natural-scale log-density of a Gaussian placed on logit(psi)."""
    psi = np.asarray(psi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.log(psi) - np.log1p(-psi)
        lp = np.where(
            (psi > 0) & (psi < 1),
            0.5 * (np.log(precision) - np.log(2 * np.pi))
            - 0.5 * precision * (z - mean) ** 2
            - np.log(psi) - np.log1p(-psi),
            -np.inf,
        )
    return lp if lp.ndim else float(lp)


# -- internal-scale transforms ------------------------------------------------

def _to_natural(transform: str, z: float) -> float:
    if transform == "log":
        return float(np.exp(z))
    if transform == "cor":
        return float(np.tanh(0.5 * z))
    if transform == "logit":
        return float(expit(z))
    if transform == "identity":
        return float(z)
    raise ValueError(f"unknown transform {transform!r}")


def _to_internal(transform: str, v: float) -> float:
    if transform == "log":
        if v <= 0:
            raise ValueError(f"log transform needs positive value, got {v}")
        return float(np.log(v))
    if transform == "cor":
        if not -1.0 < v < 1.0:
            raise ValueError(f"correlation transform needs (-1,1), got {v}")
        return float(np.log1p(v) - np.log1p(-v))
    if transform == "logit":
        if not 0.0 < v < 1.0:
            raise ValueError(f"logit transform needs (0,1), got {v}")
        return float(np.log(v) - np.log1p(-v))
    if transform == "identity":
        return float(v)
    raise ValueError(f"unknown transform {transform!r}")


def _log_jacobian(transform: str, natural: float) -> float:
    """log |d natural / d internal| evaluated at the natural value."""
    if transform == "log":
        return float(np.log(natural))
    if transform == "cor":
        return float(np.log1p(-natural * natural) - np.log(2.0))
    if transform == "logit":
        return float(np.log(natural) + np.log1p(-natural))
    if transform == "identity":
        return 0.0
    raise ValueError(f"unknown transform {transform!r}")


@dataclass(frozen=True)
class HyperEntry:
    """One named hyperparameter: its transform and natural-scale log-prior."""

    name: str
    transform: str
    log_prior: Callable[[float], float]


class HyperParamVector:
    """Ordered hyperparameter vector with transform and prior bookkeeping."""

    def __init__(self, entries: Sequence[HyperEntry]):
        self.entries = tuple(entries)
        self.names = tuple(e.name for e in self.entries)
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate hyperparameter names")

    def __len__(self) -> int:
        return len(self.entries)

    def internal_from_natural(self, natural: dict) -> np.ndarray:
        return np.array(
            [_to_internal(e.transform, natural[e.name]) for e in self.entries]
        )

    def natural_from_internal(self, internal) -> dict:
        internal = np.asarray(internal, dtype=np.float64)
        if internal.shape != (len(self.entries),):
            raise ValueError(
                f"expected {len(self.entries)} internal values, got {internal.shape}"
            )
        return {
            e.name: _to_natural(e.transform, z)
            for e, z in zip(self.entries, internal)
        }

    def log_prior_internal(self, internal) -> float:
        """Sum of natural-scale log-priors plus transform Jacobians."""
        natural = self.natural_from_internal(internal)
        total = 0.0
        for e in self.entries:
            v = natural[e.name]
            total += float(e.log_prior(v)) + _log_jacobian(e.transform, v)
        return total

    def jacobians(self, internal) -> np.ndarray:
        natural = self.natural_from_internal(internal)
        return np.array(
            [np.exp(_log_jacobian(e.transform, natural[e.name]))
             for e in self.entries]
        )
