import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from spdefield.config import CampaignConfig
from spdefield.dispatcher import Router
from spdefield.errors import InsufficientSamplesError
from spdefield.handlers.sample import draw_field
from spdefield.output.writers import campaign_header, write_kl_basis, write_summary
from spdefield.services.assembly import assemble_p0_mass
from spdefield.services.kl import (
    CovarianceModel,
    assemble_covariance_matrix,
    centroid_covariance,
    empirical_covariance,
    kl_decompose,
    kl_sample,
    reconstruct_covariance,
    relative_frobenius_error,
)
from spdefield.services.mlmc import gather_in_pool
from spdefield.services.pipeline import build_field
from spdefield.services.rng import StreamKey, draw_standard_normal

router = Router("covariance")
log = logging.getLogger(__name__)

MIN_SAMPLES = 3


def covariance_model(config: CampaignConfig) -> CovarianceModel:
    params = config.matern_params()
    if config.field.model == "exponential":
        return CovarianceModel.exponential(params.kappa, params.sigma2, params.dim)
    return CovarianceModel(params)


@router.command("covariance-check")
async def cmd_covariance_check(config: CampaignConfig):
    n = config.covariance.samples
    if n < MIN_SAMPLES:
        raise InsufficientSamplesError(f"covariance check needs at least {MIN_SAMPLES} samples, got {n}")
    run = config.run
    limit = config.covariance.dense_limit
    model = covariance_model(config)

    setup = build_field(config)
    mesh = setup.physical.levels[run.level]
    reference = centroid_covariance(mesh, model, limit)
    C = assemble_covariance_matrix(mesh, model, limit)
    W = assemble_p0_mass(mesh)
    basis = kl_decompose(C, W, config.covariance.truncation)
    reconstruction_error = relative_frobenius_error(reconstruct_covariance(basis, W), C)

    keys = [StreamKey(run.seed, i, run.level) for i in range(n)]
    with ThreadPoolExecutor(max_workers=run.threads) as pool:
        spde = await gather_in_pool(lambda k: draw_field(setup, run.level, k).theta_phys, keys, pool)
    # KL coefficients come from the next counter block of the same stream
    kl = [kl_sample(basis, draw_standard_normal(k.next_draw(), basis.truncation)) for k in keys]

    spde_cov = empirical_covariance(np.stack(spde))
    kl_cov = empirical_covariance(np.stack(kl))
    report = {
        "cells": mesh.num_cells,
        "samples": n,
        "truncation": basis.truncation,
        "energy_ratio": basis.energy_ratio,
        "spde_vs_analytic": relative_frobenius_error(spde_cov, reference),
        "kl_vs_analytic": relative_frobenius_error(kl_cov, reference),
        "kl_reconstruction": reconstruction_error,
        "spde_mean_variance": float(np.mean(np.diag(spde_cov))),
        "sigma2": model.params.sigma2,
    }
    for key, value in report.items():
        print(f"{key} = {value}")

    out = Path(config.output.out_dir)
    header = campaign_header(config, seed=run.seed, level=run.level)
    write_summary(out / "covariance_report.txt", report, header)
    if config.output.kl_export:
        write_kl_basis(out / "kl_basis.csv", basis, header)
    log.info(
        "covariance check: SPDE error %.4f, KL error %.4f",
        report["spde_vs_analytic"], report["kl_vs_analytic"],
    )
