"""Fit orchestration: optimize, explore, summarize, sample, serialize.

A fitted model is written to a directory as plot-ready CSVs:

    hyper.csv          name, mean, q025, q975 (natural scale)
    fixed.csv          level, mean, q025, q975
    smooth_<name>.csv  knot_km, mean, q025, q975
    field_<year>.csv   node, x, y, mean, sd (mesh-node field summaries)
    grid.csv           hyperparameter grid points (internal scale) + weights
    criteria.csv       variant, dic, waic, lcpo
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .criteria import CriteriaReport, compute_criteria, write_criteria_csv
from .inference import (
    InferenceControls,
    ModelSpec,
    ThetaGrid,
    explore_theta_grid,
    latent_marginals,
    mixture_quantiles,
    optimize_theta,
    posterior_sample,
)

FMT = "%.10g"


@dataclass
class PosteriorFit:
    """Grid, mixed latent marginals, and hyperparameter summaries."""

    variant: str
    theta_names: tuple
    grid_internal: np.ndarray  # (K, n_theta)
    grid_log_post: np.ndarray  # (K,)
    grid_weights: np.ndarray  # (K,)
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    latent_q025: np.ndarray
    latent_q975: np.ndarray
    hyper_rows: list
    criteria: CriteriaReport | None = None


@dataclass
class FitBundle:
    """Everything a downstream consumer may need from one fit."""

    spec: ModelSpec
    fit: PosteriorFit
    grid: ThetaGrid
    x_draws: np.ndarray
    theta_draws: np.ndarray


def weighted_quantile(values, weights, prob: float) -> float:
    """First value whose cumulative weight reaches ``prob`` (step function)."""
    order = np.argsort(values)
    v = np.asarray(values)[order]
    cw = np.cumsum(np.asarray(weights)[order])
    idx = int(np.searchsorted(cw, prob * cw[-1]))
    return float(v[min(idx, len(v) - 1)])


def hyper_summary(spec: ModelSpec, grid: ThetaGrid) -> list:
    """Natural-scale grid-mixture mean and 95% quantiles per hyperparameter."""
    rows = []
    w = grid.weights
    for k, entry in enumerate(spec.hyper.entries):
        nat = np.array([
            spec.hyper.natural_from_internal(p.theta_int)[entry.name]
            for p in grid.points
        ])
        rows.append({
            "name": entry.name,
            "mean": float(w @ nat),
            "q025": weighted_quantile(nat, w, 0.025),
            "q975": weighted_quantile(nat, w, 0.975),
        })
    return rows


def fit_model(spec: ModelSpec, theta_init,
              controls: InferenceControls | None = None,
              seed: int = 0,
              compute_criteria_report: bool = True) -> FitBundle:
    """Full inference pass for one variant."""
    controls = controls or InferenceControls()
    theta_star = optimize_theta(spec, theta_init, controls)
    grid = explore_theta_grid(spec, theta_star, controls)
    mean, sd = latent_marginals(spec, grid)
    mus = np.vstack([p.approx.mode for p in grid.points])
    sds = np.vstack([p.marginal_sd for p in grid.points])
    qs = mixture_quantiles(grid.weights, mus, sds, [0.025, 0.975])
    x_draws, theta_draws = posterior_sample(spec, grid, controls.num_samples,
                                            seed)
    fit = PosteriorFit(
        variant=spec.variant,
        theta_names=spec.hyper.names,
        grid_internal=grid.theta_matrix(),
        grid_log_post=np.array([p.log_post for p in grid.points]),
        grid_weights=grid.weights,
        latent_mean=mean,
        latent_sd=sd,
        latent_q025=qs[0],
        latent_q975=qs[1],
        hyper_rows=hyper_summary(spec, grid),
    )
    if compute_criteria_report:
        fit.criteria = compute_criteria(
            spec, x_draws, theta_draws,
            min_samples=min(controls.num_samples, 1000),
        )
    return FitBundle(spec=spec, fit=fit, grid=grid, x_draws=x_draws,
                     theta_draws=theta_draws)


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def save_fit(bundle: FitBundle, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    spec, fit = bundle.spec, bundle.fit
    _write_rows(
        os.path.join(outdir, "hyper.csv"),
        ["name", "mean", "q025", "q975"],
        [[r["name"], FMT % r["mean"], FMT % r["q025"], FMT % r["q975"]]
         for r in fit.hyper_rows],
    )
    grid_rows = []
    for k in range(len(fit.grid_weights)):
        grid_rows.append(
            [FMT % v for v in fit.grid_internal[k]]
            + [FMT % fit.grid_log_post[k], FMT % fit.grid_weights[k]]
        )
    _write_rows(
        os.path.join(outdir, "grid.csv"),
        list(fit.theta_names) + ["log_post", "weight"],
        grid_rows,
    )
    for block, sl in zip(spec.blocks, spec.block_slices):
        if block.kind == "fixed":
            names = block.meta.get(
                "column_names",
                [f"beta{i}" for i in range(block.size)],
            )
            _write_rows(
                os.path.join(outdir, "fixed.csv"),
                ["level", "mean", "q025", "q975"],
                [[nm, FMT % fit.latent_mean[sl][i],
                  FMT % fit.latent_q025[sl][i], FMT % fit.latent_q975[sl][i]]
                 for i, nm in enumerate(names)],
            )
        elif block.kind == "rw2":
            knots = block.meta["knots"]
            _write_rows(
                os.path.join(outdir, f"smooth_{block.name}.csv"),
                ["knot_km", "mean", "q025", "q975"],
                [[FMT % knots[i], FMT % fit.latent_mean[sl][i],
                  FMT % fit.latent_q025[sl][i], FMT % fit.latent_q975[sl][i]]
                 for i in range(block.size)],
            )
        elif block.kind in ("spde", "spde_ar1"):
            mesh = block.meta["mesh"]
            years = block.meta.get("years", ["all"])
            m = mesh.num_vertices
            for t, year in enumerate(years):
                mean_t = fit.latent_mean[sl][t * m:(t + 1) * m]
                sd_t = fit.latent_sd[sl][t * m:(t + 1) * m]
                _write_rows(
                    os.path.join(outdir, f"field_{year}.csv"),
                    ["node", "x", "y", "mean", "sd"],
                    [[i, FMT % mesh.vertices[i, 0], FMT % mesh.vertices[i, 1],
                      FMT % mean_t[i], FMT % sd_t[i]]
                     for i in range(m)],
                )
    if fit.criteria is not None:
        write_criteria_csv(os.path.join(outdir, "criteria.csv"),
                           [fit.criteria.row()])


def load_grid_csv(path):
    """Grid points (internal scale), log-posteriors, and weights."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[:-2]
        thetas, log_posts, weights = [], [], []
        for row in reader:
            thetas.append([float(v) for v in row[:-2]])
            log_posts.append(float(row[-2]))
            weights.append(float(row[-1]))
    return names, np.array(thetas), np.array(log_posts), np.array(weights)
