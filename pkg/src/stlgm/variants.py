"""Model variants: the three count models (CM1-CM3, zero-inflated negative
binomial) and three occurrence models (OM1-OM3, Bernoulli).

All six share the fixed effects and the two RW2 distance smooths; they
differ in the latent terms:

    *1: year AR(1) + static spatial field
    *2: spatiotemporal AR(1)-Kronecker-Matérn field
    *3: year AR(1) + spatiotemporal field

This module also simulates datasets from a known ground truth, drawing each
latent block from its (constrained) prior.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .components import (
    ACTORS,
    EVENT_TYPES,
    CovariateEncoding,
    apply_constraints,
    ar1_precision,
    ar1_year_block,
    design_matrix,
    discretize_distance,
    fixed_effects_block,
    rw2_block,
    rw2_structure,
    spde_ar1_block,
)
from .inference import ModelSpec
from .likelihoods import ObservationFamily, simulate_response
from .mesh import Mesh, build_structured_mesh
from .pipeline import (
    EventRecord,
    FeatureSet,
    derive_season,
    distance_to_nearest,
    lonlat_to_km,
    population_offset,
)
from .priors import (
    HyperEntry,
    HyperParamVector,
    gamma_prior,
    logit_gaussian_prior,
    pc_prior_ar1,
    pc_prior_matern,
    pc_prior_precision,
)
from .sparse import cholesky

COUNT_VARIANTS = ("CM1", "CM2", "CM3")
OCCURRENCE_VARIANTS = ("OM1", "OM2", "OM3")
VARIANTS = COUNT_VARIANTS + OCCURRENCE_VARIANTS


class UnknownVariant(ValueError):
    pass


def _structure(variant: str):
    if variant not in VARIANTS:
        raise UnknownVariant(f"unknown variant {variant!r}")
    idx = variant[-1]
    return {
        "count": variant.startswith("CM"),
        "year": idx in ("1", "3"),
        "static_field": idx == "1",
        "st_field": idx in ("2", "3"),
    }


@dataclass(frozen=True)
class PriorConfig:
    """All hyperprior calibrations and fixed constants, config-exposed."""

    matern_rho0: float = 200.0
    matern_p_rho: float = 0.9
    matern_sigma0: float = 3.0
    matern_p_sigma: float = 0.01
    ar1_u: float = 0.0
    ar1_alpha: float = 0.9
    rw2_u: float = 0.5
    rw2_alpha: float = 0.01
    fixed_effect_precision: float = 1e-3
    size_shape: float = 1.0
    size_rate: float = 0.1
    psi_mean: float = -1.0
    psi_precision: float = 0.2
    year_innovation_tau: float = 1.0

    def range_prior_median(self) -> float:
        """Median of the PC range prior, used as the default mesh extension."""
        lam = -np.log(self.matern_p_rho) * self.matern_rho0
        return float(lam / np.log(2.0))


def hyper_entries(variant: str, priors: PriorConfig) -> list:
    """Hyperparameter entries in the fixed serialization order:
    (rho, sigma, phi_w, phi_v, tau_border, tau_city, size, psi), with absent
    terms omitted per variant."""
    s = _structure(variant)
    p = priors
    # the joint PC prior for (rho, sigma) factorizes; split it across the
    # two entries so each carries its own marginal
    lam_rho = -np.log(p.matern_p_rho) * p.matern_rho0
    lam_sigma = -np.log(p.matern_p_sigma) / p.matern_sigma0
    entries = [
        HyperEntry(
            "rho", "log",
            lambda v, lam=lam_rho: float(np.log(lam) - 2.0 * np.log(v)
                                         - lam / v),
        ),
        HyperEntry(
            "sigma", "log",
            lambda v, lam=lam_sigma: float(np.log(lam) - lam * v),
        ),
    ]
    if s["st_field"]:
        entries.append(HyperEntry(
            "phi_w", "cor", lambda v: pc_prior_ar1(v, p.ar1_u, p.ar1_alpha)
        ))
    if s["year"]:
        entries.append(HyperEntry(
            "phi_v", "cor", lambda v: pc_prior_ar1(v, p.ar1_u, p.ar1_alpha)
        ))
    entries.append(HyperEntry(
        "tau_border", "log",
        lambda v: pc_prior_precision(v, p.rw2_u, p.rw2_alpha)
    ))
    entries.append(HyperEntry(
        "tau_city", "log",
        lambda v: pc_prior_precision(v, p.rw2_u, p.rw2_alpha)
    ))
    if s["count"]:
        entries.append(HyperEntry(
            "size", "log", lambda v: gamma_prior(v, p.size_shape, p.size_rate)
        ))
        entries.append(HyperEntry(
            "psi", "logit",
            lambda v: logit_gaussian_prior(v, p.psi_mean, p.psi_precision)
        ))
    return entries


def theta_start(variant: str, priors: PriorConfig) -> np.ndarray:
    """Deterministic optimizer start on the internal scale."""
    s = _structure(variant)
    natural = {
        "rho": 0.5 * priors.matern_rho0,
        "sigma": 1.0,
        "phi_w": 0.5,
        "phi_v": 0.3,
        "tau_border": 4.0,
        "tau_city": 4.0,
        "size": 1.0,
        "psi": 0.4,
    }
    hv = HyperParamVector(hyper_entries(variant, priors))
    return hv.internal_from_natural(natural)


@dataclass
class Dataset:
    """Model-ready bundle derived from events + features (+ population)."""

    y: np.ndarray
    event_types: list
    actors: list
    seasons: list
    points_km: np.ndarray
    center: tuple
    years: np.ndarray  # sorted distinct calendar years
    year_index: np.ndarray
    border_km: np.ndarray
    city_km: np.ndarray
    log_offsets: np.ndarray


def prepare_dataset(events, features: FeatureSet,
                    population=None) -> Dataset:
    lons = np.array([e.lon for e in events])
    lats = np.array([e.lat for e in events])
    points_km, center = lonlat_to_km(lons, lats)
    years = np.array(sorted({e.date.year for e in events}))
    year_pos = {int(y): i for i, y in enumerate(years)}
    year_index = np.array([year_pos[e.date.year] for e in events])
    border = np.array([
        distance_to_nearest(e.lon, e.lat, features, "border") for e in events
    ])
    city = np.array([
        distance_to_nearest(e.lon, e.lat, features, "city") for e in events
    ])
    if population is not None:
        offs = np.array([
            population_offset(e.lon, e.lat, e.date.year, population)
            for e in events
        ])
    else:
        offs = np.zeros(len(events))
    return Dataset(
        y=np.array([e.fatalities for e in events]),
        event_types=[e.event_type for e in events],
        actors=[e.actor for e in events],
        seasons=[derive_season(e.date) for e in events],
        points_km=points_km,
        center=center,
        years=years,
        year_index=year_index,
        border_km=border,
        city_km=city,
        log_offsets=offs,
    )


def default_mesh(data: Dataset, nx: int, ny: int,
                 extension: float) -> Mesh:
    pts = data.points_km
    bbox = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
    return build_structured_mesh(bbox, nx, ny, extension)


def build_spec(variant: str, data: Dataset, mesh: Mesh,
               priors: PriorConfig | None = None,
               n_knots: int = 50,
               enc: CovariateEncoding | None = None) -> ModelSpec:
    """Assemble the ModelSpec for one Table-2 variant."""
    priors = priors or PriorConfig()
    enc = enc or CovariateEncoding()
    s = _structure(variant)
    z = design_matrix(data.event_types, data.actors, data.seasons, enc)
    blocks = [fixed_effects_block(z, prec=priors.fixed_effect_precision)]
    blocks[0].meta["column_names"] = enc.column_names()
    blocks.append(rw2_block("border", data.border_km, n_knots, "tau_border"))
    blocks.append(rw2_block("city", data.city_km, n_knots, "tau_city"))
    T = len(data.years)
    if s["year"]:
        blk = ar1_year_block(data.year_index, T, "phi_v",
                             innovation_tau=priors.year_innovation_tau)
        blk.meta["years"] = data.years.tolist()
        blocks.append(blk)
    if s["static_field"]:
        blk = spde_ar1_block(mesh, data.points_km,
                             np.zeros(len(data.y), dtype=int), 1,
                             name="field")
        blk.meta["years"] = ["all"]
        blocks.append(blk)
    if s["st_field"]:
        blk = spde_ar1_block(mesh, data.points_km, data.year_index, T,
                             name="field")
        blk.meta["years"] = data.years.tolist()
        blocks.append(blk)
    if s["count"]:
        family = ObservationFamily("zinb")
        y = data.y
        offsets = data.log_offsets
        family_hyper = {"size": "size", "psi": "psi"}
    else:
        family = ObservationFamily("bernoulli_logit")
        y = (data.y > 0).astype(np.int64)
        offsets = np.zeros(len(data.y))
        family_hyper = {}
    return ModelSpec(
        variant=variant,
        family=family,
        y=y,
        log_offsets=offsets,
        blocks=blocks,
        hyper=HyperParamVector(hyper_entries(variant, priors)),
        family_hyper=family_hyper,
    )


# -- simulation from ground truth ---------------------------------------------

@dataclass
class GroundTruth:
    """True parameters for a simulated dataset.

    ``beta`` maps design-column names ("Intercept", level names) to
    coefficients; unnamed columns are zero.  ``theta`` holds natural-scale
    hyperparameters for the generating variant.
    """

    variant: str
    beta: dict
    theta: dict

    def beta_vector(self, enc: CovariateEncoding) -> np.ndarray:
        names = enc.column_names()
        unknown = set(self.beta) - set(names)
        if unknown:
            raise ValueError(f"unknown coefficient names {sorted(unknown)}")
        return np.array([self.beta.get(nm, 0.0) for nm in names])


def _sample_rw2(n_knots: int, tau: float, rng) -> np.ndarray:
    """Draw from the intrinsic RW2 prior with both null directions removed."""
    r = rw2_structure(n_knots).to_dense()
    evals, evecs = np.linalg.eigh(r)
    keep = evals > 1e-9
    z = rng.standard_normal(keep.sum())
    return evecs[:, keep] @ (z / np.sqrt(tau * evals[keep]))


def _sample_block(block, theta, rng) -> np.ndarray:
    q = block.precision(theta)
    fac = cholesky(q)
    x = fac.solve_lt(rng.standard_normal(block.size))
    return apply_constraints(fac, block.constraints, x)


def simulate_events(truth: GroundTruth, n: int, bbox_lonlat, years,
                    features: FeatureSet, seed: int,
                    population=None, mesh: Mesh | None = None,
                    mesh_shape=(10, 10), mesh_extension: float | None = None,
                    n_knots: int = 50,
                    priors: PriorConfig | None = None,
                    enc: CovariateEncoding | None = None):
    """Draw a full synthetic dataset from the generating model.

    Returns (events, info) where info carries the drawn latent fields and
    the mesh, so studies can score recovery against them.
    """
    priors = priors or PriorConfig()
    enc = enc or CovariateEncoding()
    s = _structure(truth.variant)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                       spawn_key=(1,)))
    lon_min, lat_min, lon_max, lat_max = bbox_lonlat
    years = sorted(int(y) for y in years)
    T = len(years)
    lons = rng.uniform(lon_min, lon_max, n)
    lats = rng.uniform(lat_min, lat_max, n)
    dates = []
    for i in range(n):
        year = years[int(rng.integers(0, T))]
        day = int(rng.integers(0, 365))
        dates.append(dt.date(year, 1, 1) + dt.timedelta(days=day))
    event_types = [EVENT_TYPES[int(k)]
                   for k in rng.integers(0, len(EVENT_TYPES), n)]
    actors = [ACTORS[int(k)] for k in rng.integers(0, len(ACTORS), n)]
    seasons = [derive_season(d) for d in dates]
    year_index = np.array([years.index(d.year) for d in dates])
    border = np.array([
        distance_to_nearest(lon, lat, features, "border")
        for lon, lat in zip(lons, lats)
    ])
    city = np.array([
        distance_to_nearest(lon, lat, features, "city")
        for lon, lat in zip(lons, lats)
    ])
    if population is not None:
        offs = np.array([
            population_offset(lon, lat, d.year, population)
            for lon, lat, d in zip(lons, lats, dates)
        ])
    else:
        offs = np.zeros(n)
    points_km, center = lonlat_to_km(lons, lats)
    if mesh is None:
        ext = mesh_extension if mesh_extension is not None \
            else priors.range_prior_median()
        bbox_km = (points_km[:, 0].min(), points_km[:, 1].min(),
                   points_km[:, 0].max(), points_km[:, 1].max())
        mesh = build_structured_mesh(bbox_km, mesh_shape[0], mesh_shape[1],
                                     ext)

    z = design_matrix(event_types, actors, seasons, enc)
    beta = truth.beta_vector(enc)
    eta = z @ beta
    info = {"mesh": mesh, "center": center, "beta": beta}

    knots_b, map_b = discretize_distance(border, n_knots)
    f_border = _sample_rw2(n_knots, truth.theta["tau_border"], rng)
    eta = eta + map_b @ f_border
    knots_c, map_c = discretize_distance(city, n_knots)
    f_city = _sample_rw2(n_knots, truth.theta["tau_city"], rng)
    eta = eta + map_c @ f_city
    info["f_border"] = f_border
    info["f_city"] = f_city

    if s["year"]:
        blk = ar1_year_block(year_index, T, "phi_v",
                             innovation_tau=priors.year_innovation_tau)
        v = _sample_block(blk, truth.theta, rng)
        eta = eta + v[year_index]
        info["year_effect"] = v
    if s["static_field"] or s["st_field"]:
        t_field = 1 if s["static_field"] else T
        blk = spde_ar1_block(mesh, points_km,
                             np.zeros(n, dtype=int) if t_field == 1
                             else year_index, t_field)
        w = _sample_block(blk, truth.theta, rng)
        eta = eta + blk.mapper @ w
        info["field"] = w

    if s["count"]:
        family = ObservationFamily("zinb")
        hyper = {"size": truth.theta["size"], "psi": truth.theta["psi"]}
        y = simulate_response(family, eta, offs, hyper, seed=rng)
    else:
        family = ObservationFamily("bernoulli_logit")
        y = simulate_response(family, eta, np.zeros(n), {}, seed=rng)

    events = [
        EventRecord(f"s{i:06d}", dates[i], float(lons[i]), float(lats[i]),
                    event_types[i], actors[i], int(y[i]))
        for i in range(n)
    ]
    return events, info
