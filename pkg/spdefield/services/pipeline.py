"""Field sampler and Darcy quantity of interest wired together from a campaign config."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from spdefield.services.darcy import FlowSetup, build_coefficient, effective_permeability, solve_darcy
from spdefield.services.linalg import SolverOptions
from spdefield.services.mesh import MeshHierarchy, embed_hierarchy, padding_in_cells, refine_hierarchy
from spdefield.services.mlmc import QoiSample
from spdefield.services.rng import StreamKey
from spdefield.services.sampler import HierarchicalSampler
from spdefield.services.spe10 import load_spe10_layer, mean_log_field

if TYPE_CHECKING:
    from spdefield.config import CampaignConfig

log = logging.getLogger(__name__)


@dataclass(eq=False)
class FieldSetup:
    sampler: HierarchicalSampler
    physical: MeshHierarchy
    padding: tuple[float, ...] = ()


class DarcyPipeline:
    """Q = k_eff of exp(m + theta) on the physical mesh of a level."""

    def __init__(
        self,
        sampler: HierarchicalSampler,
        physical: MeshHierarchy,
        mean_log: list[np.ndarray] | None = None,
        flow: FlowSetup = FlowSetup(),
        options: SolverOptions = SolverOptions(),
        random_field: bool = True,
    ):
        self.sampler = sampler
        self.physical = physical
        self.mean_log = mean_log
        self.flow = flow
        self.options = options
        self.random_field = random_field

    @property
    def num_levels(self) -> int:
        return self.physical.num_levels

    def dofs(self, level: int) -> int:
        mesh = self.physical.levels[level]
        return mesh.num_faces + mesh.num_cells

    def qoi(self, level: int, theta_phys: np.ndarray) -> float:
        mesh = self.physical.levels[level]
        m = None if self.mean_log is None else self.mean_log[level]
        solution = solve_darcy(mesh, build_coefficient(theta_phys, m), self.flow, self.options)
        return effective_permeability(solution, mesh)

    def evaluate(self, level: int, key: StreamKey, coupled: bool) -> QoiSample:
        start = time.perf_counter()
        if not self.random_field:
            q_fine = self.qoi(level, np.zeros(self.physical.levels[level].num_cells))
            q_coarse = None
            if coupled:
                q_coarse = self.qoi(level + 1, np.zeros(self.physical.levels[level + 1].num_cells))
        elif coupled:
            pair = self.sampler.sample_pair(level, self.sampler.draw_noise(key).xi, key)
            q_fine = self.qoi(level, pair.fine.theta_phys)
            q_coarse = self.qoi(level + 1, pair.coarse.theta_phys)
        else:
            sample = self.sampler.sample(level, self.sampler.draw_noise(key).xi, key)
            q_fine = self.qoi(level, sample.theta_phys)
            q_coarse = None
        return QoiSample(q_fine=q_fine, q_coarse=q_coarse, cost_sec=time.perf_counter() - start)


def whole_cell_padding(length: float, cell_sizes: tuple[float, ...]) -> tuple[float, ...]:
    """Padding per axis rounded up to whole cells of the coarsest mesh."""
    return tuple(padding_in_cells(length, h) * h for h in cell_sizes)


def build_field(config: CampaignConfig, embed: bool | None = None) -> FieldSetup:
    params = config.matern_params()
    coarsest = config.mesh.coarsest()
    levels = config.mesh.levels
    options = config.solver_options()
    depth = config.field.smoother_depth
    embed = config.embedding.enabled if embed is None else embed
    pad = config.padding() if embed else 0.0
    if pad > 0:
        padding = whole_cell_padding(pad, coarsest.cell_sizes)
        hierarchy = embed_hierarchy(coarsest, padding, levels)
        sampler = HierarchicalSampler(hierarchy.embedded, params, hierarchy.maps, options, depth)
        log.info(
            "embedded sampler: padding %s, finest mesh %s",
            padding, hierarchy.embedded.levels[0].cell_counts,
        )
        return FieldSetup(sampler=sampler, physical=hierarchy.physical, padding=padding)
    physical = refine_hierarchy(coarsest, levels)
    return FieldSetup(sampler=HierarchicalSampler(physical, params, None, options, depth), physical=physical)


def build_mean_log(config: CampaignConfig, physical: MeshHierarchy) -> list[np.ndarray] | None:
    """Per-level SPE10 log permeability, injected from the coarsest level; None without SPE10."""
    perm = load_spe10_layer(config.darcy.spe10_path, layer=config.darcy.spe10_layer)
    if perm is None:
        return None
    coarsest = physical.coarsest
    base = mean_log_field(perm, physical.levels[coarsest])
    return [physical.prolongate_cells(base, coarsest, level) for level in range(physical.num_levels)]


def spe10_requested(config: CampaignConfig) -> bool:
    return bool(config.darcy.spe10_path)


@dataclass(eq=False)
class PipelineSetup:
    pipeline: DarcyPipeline
    field: FieldSetup = field(repr=False)


def build_pipeline(config: CampaignConfig) -> PipelineSetup | None:
    """None when the config asks for SPE10 data that is not available."""
    setup = build_field(config)
    mean_log = None
    if spe10_requested(config):
        mean_log = build_mean_log(config, setup.physical)
        if mean_log is None:
            return None
    flow = FlowSetup(axis=config.darcy.flow_axis, p_in=config.darcy.p_in, p_out=config.darcy.p_out)
    pipeline = DarcyPipeline(
        setup.sampler, setup.physical, mean_log, flow,
        config.solver_options(), random_field=config.darcy.random_field,
    )
    return PipelineSetup(pipeline=pipeline, field=setup)
