"""Model-comparison criteria: DIC, WAIC, LCPO, and the Vuong test.

All three information criteria are sample-based: they consume joint
posterior draws of the latent field and hyperparameters and reduce the
per-observation log-density matrix.  Lower values mean better fit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from .inference import ModelSpec
from .likelihoods import log_pmf


class InsufficientSamples(ValueError):
    """Fewer posterior draws than the criterion requires."""


class DegenerateCPO(RuntimeError):
    """Some observation has zero predictive density under every draw."""


class ZeroVariance(ValueError):
    """Vuong statistic undefined: all pointwise differences equal."""


@dataclass
class CriteriaReport:
    variant: str
    dic: float
    waic: float
    lcpo: float
    pointwise: np.ndarray  # (S, n) log-density matrix retained for audit

    def row(self) -> dict:
        return {"variant": self.variant, "dic": self.dic,
                "waic": self.waic, "lcpo": self.lcpo}


def pointwise_loglik(spec: ModelSpec, x_draws: np.ndarray,
                     theta_draws: np.ndarray) -> np.ndarray:
    """(S, n) matrix of log p(y_i | x_s, θ_s).

    Draws are grouped by unique θ rows so the per-observation kernels run
    once per grid point rather than once per draw.
    """
    etas = (spec.obs_matrix @ x_draws.T)  # (n, S)
    out = np.empty((x_draws.shape[0], len(spec.y)))
    uniq, inverse = np.unique(theta_draws, axis=0, return_inverse=True)
    for k in range(len(uniq)):
        sel = np.nonzero(inverse == k)[0]
        theta_nat = spec.hyper.natural_from_internal(uniq[k])
        hyper = spec.family_hyper_values(theta_nat)
        for s in sel:
            out[s] = log_pmf(spec.family, spec.y, etas[:, s], hyper,
                             spec.log_offsets)
    return out


def _require_samples(x_draws, min_samples):
    if x_draws.shape[0] < min_samples:
        raise InsufficientSamples(
            f"need at least {min_samples} draws, got {x_draws.shape[0]}"
        )


def dic(spec: ModelSpec, x_draws: np.ndarray, theta_draws: np.ndarray,
        pointwise: np.ndarray | None = None,
        min_samples: int = 1000) -> float:
    """DIC = 2 * mean(D(x_s)) - D(x̄) with D = -2 log-likelihood.

    The posterior mean configuration averages the latent draws and the
    internal-scale hyperparameter draws.
    """
    _require_samples(x_draws, min_samples)
    if pointwise is None:
        pointwise = pointwise_loglik(spec, x_draws, theta_draws)
    dev_mean = float(np.mean(-2.0 * pointwise.sum(axis=1)))
    x_bar = x_draws.mean(axis=0)
    theta_bar = theta_draws.mean(axis=0)
    at_mean = pointwise_loglik(spec, x_bar[None, :], theta_bar[None, :])
    dev_at_mean = float(-2.0 * at_mean.sum())
    return 2.0 * dev_mean - dev_at_mean


def waic(spec: ModelSpec, x_draws: np.ndarray, theta_draws: np.ndarray,
         pointwise: np.ndarray | None = None,
         min_samples: int = 1000) -> float:
    """WAIC = -2 Σ_i [log mean_s p(y_i|x_s) - var_s log p(y_i|x_s)]."""
    _require_samples(x_draws, min_samples)
    if pointwise is None:
        pointwise = pointwise_loglik(spec, x_draws, theta_draws)
    s = pointwise.shape[0]
    lppd = logsumexp(pointwise, axis=0) - np.log(s)
    if s > 1:
        penalty = pointwise.var(axis=0, ddof=1)
    else:
        penalty = np.zeros(pointwise.shape[1])
    return float(-2.0 * np.sum(lppd - penalty))


def cpo_lcpo(spec: ModelSpec, x_draws: np.ndarray, theta_draws: np.ndarray,
             pointwise: np.ndarray | None = None,
             min_samples: int = 1000,
             truncate_quantile: float = 0.999):
    """Harmonic-mean CPO per observation and LCPO = -mean(log CPO).

    The inverse-density weights are capped at their upper
    ``truncate_quantile`` to control the harmonic-mean estimator's variance.
    """
    _require_samples(x_draws, min_samples)
    if pointwise is None:
        pointwise = pointwise_loglik(spec, x_draws, theta_draws)
    if np.any(np.all(np.isneginf(pointwise), axis=0)):
        raise DegenerateCPO("an observation has zero density under all draws")
    weights = np.exp(-pointwise)  # (S, n) inverse densities
    if pointwise.shape[0] > 1:
        caps = np.quantile(weights, truncate_quantile, axis=0)
        weights = np.minimum(weights, caps[None, :])
    cpo = 1.0 / weights.mean(axis=0)
    lcpo = float(-np.mean(np.log(cpo)))
    return cpo, lcpo


def compute_criteria(spec: ModelSpec, x_draws: np.ndarray,
                     theta_draws: np.ndarray,
                     min_samples: int = 1000) -> CriteriaReport:
    pw = pointwise_loglik(spec, x_draws, theta_draws)
    return CriteriaReport(
        variant=spec.variant,
        dic=dic(spec, x_draws, theta_draws, pw, min_samples),
        waic=waic(spec, x_draws, theta_draws, pw, min_samples),
        lcpo=cpo_lcpo(spec, x_draws, theta_draws, pw, min_samples)[1],
        pointwise=pw,
    )


def vuong_test(loglik_a, loglik_b):
    """Vuong z statistic and two-sided p-value; positive z favors model a."""
    la = np.asarray(loglik_a, dtype=np.float64)
    lb = np.asarray(loglik_b, dtype=np.float64)
    if la.shape != lb.shape or la.ndim != 1:
        raise ValueError("log-likelihood vectors must be 1-d and equal length")
    n = la.size
    if n < 30:
        raise ValueError(f"need n >= 30 pointwise terms, got {n}")
    m = la - lb
    sd = m.std(ddof=1)
    if sd == 0.0:
        raise ZeroVariance("all pointwise differences are identical")
    z = float(np.sqrt(n) * m.mean() / sd)
    p = float(2.0 * (1.0 - ndtr(abs(z))))
    return z, p


# -- criteria.csv ------------------------------------------------------------

def format_criteria_row(row: dict) -> dict:
    return {
        "variant": row["variant"],
        "dic": "%.2f" % row["dic"],
        "waic": "%.2f" % row["waic"],
        "lcpo": "%.3f" % row["lcpo"],
    }


def write_criteria_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "dic", "waic", "lcpo"])
        writer.writeheader()
        for row in rows:
            writer.writerow(format_criteria_row(row))


def read_criteria_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return [
            {"variant": r["variant"], "dic": float(r["dic"]),
             "waic": float(r["waic"]), "lcpo": float(r["lcpo"])}
            for r in csv.DictReader(fh)
        ]
