import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from spdefield.config import CampaignConfig
from spdefield.dispatcher import Router
from spdefield.errors import InsufficientSamplesError
from spdefield.output.writers import campaign_header, field_filename, write_field, write_summary, write_variance_map
from spdefield.services.mlmc import gather_in_pool
from spdefield.services.pipeline import FieldSetup, build_field
from spdefield.services.rng import StreamKey
from spdefield.services.sampler import FieldSample, PairSample

router = Router("sample")
log = logging.getLogger(__name__)


def draw_field(setup: FieldSetup, level: int, key: StreamKey) -> FieldSample:
    sampler = setup.sampler
    return sampler.sample(level, sampler.draw_noise(key).xi, key)


def draw_pair(setup: FieldSetup, level: int, key: StreamKey) -> PairSample:
    return setup.sampler.sample_pair(level, setup.sampler.draw_noise(key).xi, key)


@router.command("sample")
async def cmd_sample(config: CampaignConfig):
    setup = build_field(config)
    run = config.run
    out = Path(config.output.out_dir)
    fmt = config.output.format
    keys = [StreamKey(run.seed, i, run.level) for i in range(run.samples)]
    log.info("sampling %d field(s) at level %d%s", run.samples, run.level, " with coarse pairs" if run.pair else "")

    with ThreadPoolExecutor(max_workers=run.threads) as pool:
        if run.pair:
            results = await gather_in_pool(lambda k: draw_pair(setup, run.level, k), keys, pool)
        else:
            results = await gather_in_pool(lambda k: draw_field(setup, run.level, k), keys, pool)

    for key, result in zip(keys, results):
        pieces = [("fine", result.fine), ("coarse", result.coarse)] if run.pair else [("fine", result)]
        for kind, sample in pieces:
            header = campaign_header(
                config, seed=key.seed, sample=key.sample, level=sample.level, kind=kind,
                iterations=sample.report.iterations if sample.report else 0,
            )
            mesh = setup.physical.levels[sample.level]
            write_field(out / field_filename(key.sample, sample.level, kind, fmt), mesh, sample.theta_phys, header, fmt)


@router.command("variance-map")
async def cmd_variance_map(config: CampaignConfig):
    run = config.run
    if run.samples < 2:
        raise InsufficientSamplesError(f"variance map needs at least 2 samples, got {run.samples}")
    setup = build_field(config)
    keys = [StreamKey(run.seed, i, run.level) for i in range(run.samples)]
    with ThreadPoolExecutor(max_workers=run.threads) as pool:
        samples = await gather_in_pool(lambda k: draw_field(setup, run.level, k).theta_phys, keys, pool)

    variance = np.var(np.stack(samples), axis=0, ddof=1)
    mesh = setup.physical.levels[run.level]
    length = config.matern_params().correlation_length
    distance = mesh.distance_to_boundary()
    interior = distance > length
    boundary = np.zeros(mesh.num_cells, dtype=bool)
    boundary[mesh.boundary_cells()] = True

    out = Path(config.output.out_dir)
    header = campaign_header(config, seed=run.seed, samples=run.samples, level=run.level)
    write_variance_map(out / "variance_map.csv", mesh, variance, header)
    summary = {
        "embedded": bool(setup.padding),
        "samples": run.samples,
        "mean_variance": float(variance.mean()),
        "interior_cells": int(interior.sum()),
        "interior_mean_variance": float(variance[interior].mean()) if interior.any() else float("nan"),
        "boundary_mean_variance": float(variance[boundary].mean()),
    }
    write_summary(out / "variance_summary.txt", summary, header)
    log.info(
        "variance map: interior mean %.4f, boundary mean %.4f",
        summary["interior_mean_variance"], summary["boundary_mean_variance"],
    )
