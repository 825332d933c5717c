import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spdefield.config import CampaignConfig
from spdefield.db.models import init_db, save_campaign, save_qoi_samples
from spdefield.dispatcher import Router
from spdefield.output.writers import FLOAT_FORMAT, campaign_header, field_filename, write_field, write_rows, write_summary
from spdefield.services.darcy import build_coefficient, effective_permeability, mass_balance, solve_darcy
from spdefield.services.mlmc import gather_in_pool
from spdefield.services.pipeline import DarcyPipeline, build_pipeline
from spdefield.services.rng import StreamKey

router = Router("darcy")
log = logging.getLogger(__name__)


@dataclass
class Realization:
    sample: int
    k_eff: float
    mass_balance: float
    iterations: int
    pressure: np.ndarray


def solve_realization(pipeline: DarcyPipeline, level: int, key: StreamKey | None) -> Realization:
    mesh = pipeline.physical.levels[level]
    if key is None:
        theta = np.zeros(mesh.num_cells)
    else:
        theta = pipeline.sampler.sample(level, pipeline.sampler.draw_noise(key).xi, key).theta_phys
    m = None if pipeline.mean_log is None else pipeline.mean_log[level]
    solution = solve_darcy(mesh, build_coefficient(theta, m), pipeline.flow, pipeline.options)
    return Realization(
        sample=-1 if key is None else key.sample,
        k_eff=effective_permeability(solution, mesh),
        mass_balance=mass_balance(solution, mesh),
        iterations=solution.report.iterations,
        pressure=solution.p,
    )


@router.command("darcy")
async def cmd_darcy(config: CampaignConfig):
    setup = build_pipeline(config)
    if setup is None:
        log.warning("SPE10 data unavailable, darcy run skipped")
        return 0
    pipeline = setup.pipeline
    run = config.run
    mesh = pipeline.physical.levels[run.level]

    if pipeline.random_field and run.samples > 0:
        keys = [StreamKey(run.seed, i, run.level) for i in range(run.samples)]
    else:
        keys = [None]
    with ThreadPoolExecutor(max_workers=run.threads) as pool:
        realizations = await gather_in_pool(lambda k: solve_realization(pipeline, run.level, k), keys, pool)

    out = Path(config.output.out_dir)
    fmt = config.output.format
    header = campaign_header(config, seed=run.seed, level=run.level)
    for r in realizations:
        index = max(r.sample, 0)
        write_field(
            out / field_filename(index, run.level, "pressure", fmt), mesh, r.pressure,
            header + [f"sample = {r.sample}", f"k_eff = {FLOAT_FORMAT % r.k_eff}"], fmt,
        )

    k_eff = np.array([r.k_eff for r in realizations])
    summary = {
        "realizations": len(realizations),
        "k_eff_mean": float(k_eff.mean()),
        "k_eff_variance": float(k_eff.var(ddof=1)) if k_eff.size > 1 else 0.0,
        "max_mass_balance": max(r.mass_balance for r in realizations),
        "max_iterations": max(r.iterations for r in realizations),
    }
    write_summary(out / "darcy_summary.txt", summary, header)
    write_rows(
        out / "k_eff.csv",
        ("sample", "k_eff", "mass_balance", "iterations"),
        [(r.sample, r.k_eff, r.mass_balance, r.iterations) for r in realizations],
        header,
    )

    path = config.output.database_path
    if path is not None:
        await init_db(path)
        campaign_id = await save_campaign(path, config.command, run.seed, config.to_lines(), summary["k_eff_mean"])
        await save_qoi_samples(path, campaign_id, run.level, [(r.sample, r.k_eff, None) for r in realizations])
    log.info("darcy: %d realization(s), mean k_eff %.6g", len(realizations), summary["k_eff_mean"])
