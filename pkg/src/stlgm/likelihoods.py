"""Observation families: zero-inflated and plain count models plus the
Bernoulli occurrence model.

Everything is vectorized over observations and expressed in terms of the
linear predictor eta, with the count mean mu = exp(eta + log_offset).  The
zero-inflated mixture puts mass psi on a structural zero and (1 - psi) on
the base count distribution:

    P(y = 0) = psi + (1 - psi) * p0(mu)
    P(y > 0) = (1 - psi) * p(y | mu)

A Gaussian family (identity link, known noise precision) is included for
the conjugate test problems where the Laplace approximation is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

COUNT_KINDS = ("zinb", "zip", "nb", "poisson")
KINDS = COUNT_KINDS + ("bernoulli_logit", "gaussian")

CURVATURE_FLOOR = 1e-10


class InvalidOutcome(ValueError):
    """Outcome vector violates the family's support."""


@dataclass(frozen=True)
class ObservationFamily:
    """Family tag plus which hyperparameter slots it consumes.

    ``size`` is the negative-binomial dispersion (variance mu + mu²/size),
    ``psi`` the structural-zero probability, ``noise_prec`` the Gaussian
    noise precision.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")

    @property
    def uses_size(self) -> bool:
        return self.kind in ("zinb", "nb")

    @property
    def uses_psi(self) -> bool:
        return self.kind in ("zinb", "zip")

    @property
    def is_count(self) -> bool:
        return self.kind in COUNT_KINDS


def _check_hyper(family: ObservationFamily, hyper: dict) -> tuple:
    size = psi = noise = None
    if family.uses_size:
        size = float(hyper["size"])
        if size <= 0:
            raise ValueError(f"size must be positive, got {size}")
    if family.uses_psi:
        psi = float(hyper["psi"])
        # boundary values are admitted so the psi=0 (no inflation) and
        # psi=1 (all structural zeros) limits behave as expected
        if not 0.0 <= psi <= 1.0:
            raise ValueError(f"psi must be in [0,1], got {psi}")
    if family.kind == "gaussian":
        noise = float(hyper["noise_prec"])
        if noise <= 0:
            raise ValueError(f"noise_prec must be positive, got {noise}")
    return size, psi, noise


def _check_outcomes(family: ObservationFamily, y: np.ndarray) -> np.ndarray:
    if family.kind == "gaussian":
        return np.asarray(y, dtype=np.float64)
    y = np.asarray(y)
    if not np.all(np.isfinite(y)) or np.any(y != np.floor(y)):
        raise InvalidOutcome("outcomes must be finite integers")
    y = y.astype(np.int64)
    if family.kind == "bernoulli_logit":
        if np.any((y != 0) & (y != 1)):
            raise InvalidOutcome("binary outcomes must lie in {0, 1}")
    elif np.any(y < 0):
        raise InvalidOutcome("count outcomes must be nonnegative")
    return y


def _count_terms(kind: str, y, log_mu, size):
    """Base count log-pmf, its eta-gradient, and eta-curvature.

    Also returns the same three quantities for the pmf at zero, which the
    mixture needs for every observation regardless of its outcome.
    """
    mu = np.exp(log_mu)
    y = np.asarray(y, dtype=np.float64)
    pos = y > 0
    # y * log(mu) with the 0 * (-inf) corner at y = 0, mu -> 0 forced to 0
    def _ypart(log_term):
        return np.where(pos, y * np.where(pos, log_term, 0.0), 0.0)

    if kind in ("poisson", "zip"):
        ll = _ypart(log_mu) - mu - gammaln(y + 1.0)
        grad = y - mu
        hess = -mu
        l0 = -mu
        g0 = -mu
        h0 = -mu
    else:  # nb / zinb
        s = size
        log_s_mu = np.logaddexp(np.log(s), log_mu)  # log(s + mu)
        ll = (gammaln(y + s) - gammaln(s) - gammaln(y + 1.0)
              + s * (np.log(s) - log_s_mu) + _ypart(log_mu - log_s_mu))
        frac = mu / (s + mu)
        grad = y - (y + s) * frac
        hess = -(y + s) * s * frac / (s + mu)
        l0 = s * (np.log(s) - log_s_mu)
        g0 = -s * frac
        h0 = -s * s * frac / (s + mu)
    return ll, grad, hess, l0, g0, h0


def log_pmf(family: ObservationFamily, y, eta, hyper: dict | None = None,
            log_offset=0.0):
    """Log probability (mass or density) at y given the linear predictor."""
    hyper = hyper or {}
    size, psi, noise = _check_hyper(family, hyper)
    y = _check_outcomes(family, y)
    eta = np.asarray(eta, dtype=np.float64)
    if family.kind == "bernoulli_logit":
        # y*eta - log(1 + exp(eta)), stable on both tails
        out = y * eta - np.logaddexp(0.0, eta)
        return out if out.ndim else float(out)
    if family.kind == "gaussian":
        mean = eta + log_offset
        out = 0.5 * (np.log(noise) - np.log(2 * np.pi)) \
            - 0.5 * noise * (y - mean) ** 2
        return out if out.ndim else float(out)
    log_mu = eta + log_offset
    ll, _, _, l0, _, _ = _count_terms(family.kind, y, log_mu, size)
    if family.uses_psi:
        with np.errstate(divide="ignore"):
            log_psi = np.log(psi)
            log_1m = np.log1p(-psi)
        zero = np.asarray(y == 0)
        out = np.where(zero,
                       np.logaddexp(log_psi, log_1m + l0),
                       log_1m + ll)
    else:
        out = ll
    return out if out.ndim else float(out)


def grad_hess(family: ObservationFamily, y, eta, hyper: dict | None = None,
              log_offset=0.0):
    """First and second derivatives of log_pmf with respect to eta."""
    hyper = hyper or {}
    size, psi, noise = _check_hyper(family, hyper)
    y = _check_outcomes(family, y)
    eta = np.asarray(eta, dtype=np.float64)
    if family.kind == "bernoulli_logit":
        p = expit(eta)
        g = y - p
        h = -p * (1.0 - p)
    elif family.kind == "gaussian":
        g = noise * (y - (eta + log_offset))
        h = np.full_like(np.asarray(g, dtype=np.float64), -noise)
    else:
        log_mu = eta + log_offset
        _, g_base, h_base, l0, g0, h0 = _count_terms(family.kind, y, log_mu, size)
        if family.uses_psi:
            with np.errstate(divide="ignore", invalid="ignore"):
                log_psi = np.log(psi)
                log_1m = np.log1p(-psi)
                # mixture weight of the count branch at y = 0
                w = np.exp(log_1m + l0 - np.logaddexp(log_psi, log_1m + l0))
            if psi == 1.0:
                w = np.zeros_like(np.asarray(l0, dtype=np.float64))
            g_zero = w * g0
            h_zero = w * h0 + w * (1.0 - w) * g0 * g0
            zero = np.asarray(y == 0)
            g = np.where(zero, g_zero, g_base)
            h = np.where(zero, h_zero, h_base)
        else:
            g, h = g_base, h_base
    if np.ndim(g):
        return g, h
    return float(g), float(h)


def neg_hessian_floor(h):
    """Clamp likelihood curvature away from zero for the Gaussian step."""
    return np.maximum(h, CURVATURE_FLOOR)


def loglik_total(family: ObservationFamily, y, eta, hyper=None,
                 log_offset=0.0) -> float:
    """Sum of log_pmf over observations (numpy pairwise summation order)."""
    return float(np.sum(log_pmf(family, y, eta, hyper, log_offset)))


def simulate_response(family: ObservationFamily, eta, log_offsets,
                      hyper: dict | None = None, seed=None) -> np.ndarray:
    """Draw outcomes from the family's generative process.

    Zero-inflated families first draw the structural-zero indicator, then a
    count from the base distribution; the negative binomial is drawn as a
    gamma-Poisson mixture so non-integer size values are exact.
    """
    hyper = hyper or {}
    size, psi, noise = _check_hyper(family, hyper)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    eta = np.asarray(eta, dtype=np.float64)
    offs = np.broadcast_to(np.asarray(log_offsets, dtype=np.float64), eta.shape)
    n = eta.shape[0]
    if family.kind == "bernoulli_logit":
        return (rng.random(n) < expit(eta + offs)).astype(np.int64)
    if family.kind == "gaussian":
        return eta + offs + rng.standard_normal(n) / np.sqrt(noise)
    mu = np.exp(eta + offs)
    if family.kind in ("poisson", "zip"):
        counts = rng.poisson(mu)
    else:
        lam = rng.gamma(shape=size, scale=mu / size)
        counts = rng.poisson(lam)
    if family.uses_psi:
        structural = rng.random(n) < psi
        counts = np.where(structural, 0, counts)
    return counts.astype(np.int64)
