import math

import numpy as np
import pytest
import scipy.sparse as sp

from spdefield.errors import InvalidArgumentError
from spdefield.services.assembly import assemble_level
from spdefield.services.linalg import cg_solve
from spdefield.services.mesh import build_cartesian_mesh, embed_hierarchy, refine_hierarchy
from spdefield.services.rng import StreamKey
from spdefield.services.sampler import (
    HierarchicalSampler,
    MaternParams,
    check_sampler_order,
    check_smoother_order,
    matern_scaling,
    restrict_noise,
    sample_single_level,
    white_noise_rhs,
    whitening_operator,
)
from tests.conftest import TIGHT

PARAMS = MaternParams(nu=1.0, kappa=4.0)


@pytest.fixture
def sampler(hierarchy_2d):
    return HierarchicalSampler(hierarchy_2d, PARAMS, options=TIGHT)


def test_params_from_correlation_length():
    p = MaternParams.from_correlation_length(nu=1.0, length=0.5)
    assert p.kappa == pytest.approx(math.sqrt(8.0) / 0.5)
    assert p.correlation_length == pytest.approx(0.5)
    assert p.alpha == pytest.approx(2.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"nu": 0.0, "kappa": 1.0},
        {"nu": 1.0, "kappa": 0.0},
        {"nu": 1.0, "kappa": math.inf},
        {"nu": 1.0, "kappa": 1.0, "sigma2": -1.0},
        {"nu": 1.0, "kappa": 1.0, "dim": 1},
    ],
)
def test_params_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        MaternParams(**kwargs)


def test_scaling_in_2d_with_nu_one():
    assert matern_scaling(MaternParams(nu=1.0, kappa=3.0)) == pytest.approx(math.sqrt(4 * math.pi) * 3.0)


def test_scaling_in_3d_with_nu_half():
    # Gamma(2) / Gamma(1/2) = 1 / sqrt(pi)
    expected = (4 * math.pi) ** 0.75 * math.sqrt(2.0) * math.pi**-0.25
    assert matern_scaling(MaternParams(nu=0.5, kappa=2.0, dim=3)) == pytest.approx(expected)


def test_sampler_order():
    check_sampler_order(MaternParams(nu=1.0, kappa=1.0))
    check_sampler_order(MaternParams(nu=0.5, kappa=1.0, dim=3))
    with pytest.raises(InvalidArgumentError):
        check_sampler_order(MaternParams(nu=0.5, kappa=1.0))
    check_sampler_order(MaternParams(nu=3.0, kappa=1.0), k=1)


def test_smoother_order():
    check_smoother_order(MaternParams(nu=2.5, kappa=1.0, dim=3), 1)
    check_smoother_order(MaternParams(nu=5.0, kappa=1.0), 2)
    with pytest.raises(InvalidArgumentError):
        check_smoother_order(MaternParams(nu=1.0, kappa=1.0), 0)
    with pytest.raises(InvalidArgumentError):
        check_smoother_order(MaternParams(nu=2.0, kappa=1.0), 1)


def test_white_noise_rhs_rejects_wrong_length(square):
    with pytest.raises(InvalidArgumentError):
        white_noise_rhs(square, np.zeros(3))


def test_single_cell_closed_form():
    mesh = build_cartesian_mesh(2, (0, 0), (0.5, 0.5), (1, 1))
    level = assemble_level(mesh, PARAMS.kappa)
    xi = np.array([1.3])
    out = sample_single_level(level, xi, PARAMS)
    expected = PARAMS.g * xi / (PARAMS.kappa**2 * math.sqrt(0.25))
    assert np.allclose(out.theta, expected)
    assert np.allclose(out.u, 0.0)
    assert out.report.iterations == 0


def test_sigma_scales_the_field(square, rng):
    xi = rng.standard_normal(square.num_cells)
    level = assemble_level(square, 2.0)
    unit = sample_single_level(level, xi, MaternParams(nu=1.0, kappa=2.0), options=TIGHT)
    scaled = sample_single_level(level, xi, MaternParams(nu=1.0, kappa=2.0, sigma2=4.0), options=TIGHT)
    assert np.allclose(scaled.theta, 2.0 * unit.theta)


def test_zero_noise_gives_zero_field(square):
    level = assemble_level(square, 2.0)
    out = sample_single_level(level, np.zeros(square.num_cells), MaternParams(nu=1.0, kappa=2.0))
    assert np.array_equal(out.theta, np.zeros(square.num_cells))


def test_kappa_mismatch_is_rejected(square):
    level = assemble_level(square, 2.0)
    with pytest.raises(InvalidArgumentError):
        sample_single_level(level, np.zeros(square.num_cells), MaternParams(nu=1.0, kappa=3.0))


def test_sampler_rejects_inconsistent_inputs(hierarchy_2d, hierarchy_3d):
    with pytest.raises(InvalidArgumentError):
        HierarchicalSampler(hierarchy_3d, PARAMS)
    with pytest.raises(InvalidArgumentError):
        HierarchicalSampler(hierarchy_2d, PARAMS, maps=[])


def test_draw_noise_is_keyed(sampler):
    key = StreamKey(5, 0, 1)
    a, b = sampler.draw_noise(key), sampler.draw_noise(key)
    assert a.level == 1
    assert a.xi.shape == (sampler.num_cells(1),)
    assert np.array_equal(a.xi, b.xi)
    with pytest.raises(InvalidArgumentError):
        sampler.draw_noise(StreamKey(5, 0, 7))


@pytest.mark.parametrize("fixture", ["hierarchy_2d", "hierarchy_3d"])
def test_whitening_preserves_white_noise(fixture, request):
    h = request.getfixturevalue(fixture)
    for level in range(h.num_levels - 1):
        R = whitening_operator(h, level)
        RRt = (R @ R.T).toarray()
        assert np.allclose(RRt, np.eye(RRt.shape[0]), atol=1e-12)


def test_restrict_noise_matches_operator(hierarchy_2d, rng):
    xi = rng.standard_normal(hierarchy_2d.levels[0].num_cells)
    R = whitening_operator(hierarchy_2d, 0)
    assert np.allclose(restrict_noise(xi, hierarchy_2d, 0), R @ xi)
    with pytest.raises(InvalidArgumentError):
        restrict_noise(xi[:-1], hierarchy_2d, 0)


def test_pair_coarse_equals_direct_coarse_sample(sampler, rng):
    xi = rng.standard_normal(sampler.num_cells(0))
    pair = sampler.sample_pair(0, xi)
    direct = sampler.sample_single_level(1, sampler.restrict_noise(xi, 0))
    assert np.array_equal(pair.coarse.theta, direct.theta)
    assert pair.fine.level == 0
    assert pair.coarse.level == 1
    correction = pair.fine.theta - sampler.hierarchy.p_theta[0] @ pair.coarse.theta
    assert np.allclose(pair.correction, correction)


def test_warm_start_does_not_change_the_fine_field(sampler, rng):
    xi = rng.standard_normal(sampler.num_cells(0))
    pair = sampler.sample_pair(0, xi)
    cold = sampler.sample_single_level(0, xi)
    assert np.allclose(pair.fine.theta, cold.theta, atol=1e-8)


def test_pair_needs_a_coarser_level(sampler, rng):
    with pytest.raises(InvalidArgumentError):
        sampler.sample_pair(2, rng.standard_normal(sampler.num_cells(2)))


def test_sample_hierarchy(sampler, rng):
    xi = rng.standard_normal(sampler.num_cells(0))
    samples = sampler.sample_hierarchy(xi)
    assert [s.level for s in samples] == [0, 1, 2]
    coarsest_noise = sampler.restrict_noise(sampler.restrict_noise(xi, 0), 1)
    assert np.array_equal(samples[2].theta, sampler.sample_single_level(2, coarsest_noise).theta)
    for s in samples:
        assert s.theta.shape == (sampler.num_cells(s.level),)


def test_embedded_sampler_restricts_to_the_physical_domain(rng):
    physical = build_cartesian_mesh(2, (0, 0), (1, 1), (2, 2))
    eh = embed_hierarchy(physical, 0.5, 2)
    sampler = HierarchicalSampler(eh.embedded, PARAMS, maps=eh.maps, options=TIGHT)
    xi = rng.standard_normal(sampler.num_cells(0))
    out = sampler.sample_single_level(0, xi)
    assert out.theta.shape == (eh.embedded.levels[0].num_cells,)
    assert out.theta_phys.shape == (eh.physical.levels[0].num_cells,)
    assert np.array_equal(out.theta_phys, out.theta[eh.maps[0].cell_index_map])


def test_smoother_sample(hierarchy_2d, rng):
    params = MaternParams(nu=3.0, kappa=4.0, sigma2=2.0)
    sampler = HierarchicalSampler(hierarchy_2d, params, options=TIGHT)
    xi = rng.standard_normal(sampler.num_cells(1))
    a = sampler.sample_smoother(1, xi, 1)
    b = sampler.sample_smoother(1, xi, 1)
    assert np.array_equal(a.theta, b.theta)
    assert np.all(np.isfinite(a.theta))
    with pytest.raises(InvalidArgumentError):
        sampler.sample_smoother(1, xi, 2)


def test_smoother_output_is_smoother_than_one_solve(hierarchy_2d, rng):
    rough = HierarchicalSampler(hierarchy_2d, MaternParams(nu=1.0, kappa=4.0), options=TIGHT)
    smooth = HierarchicalSampler(hierarchy_2d, MaternParams(nu=3.0, kappa=4.0), options=TIGHT)
    level = hierarchy_2d.levels[0]
    xi = rng.standard_normal(level.num_cells)

    def roughness(theta):
        grid = theta.reshape(level.cell_counts, order="F")
        return np.mean(np.diff(grid, axis=0) ** 2) / np.var(theta)

    assert roughness(smooth.sample_smoother(0, xi, 1).theta) < roughness(rough.sample_single_level(0, xi).theta)


@pytest.mark.slow
def test_marginal_variance_is_close_to_one():
    mesh = build_cartesian_mesh(2, (0, 0), (1, 1), (64, 64))
    params = MaternParams.from_correlation_length(nu=1.0, length=0.25)
    sampler = HierarchicalSampler(refine_hierarchy(mesh, 1), params)
    center = mesh.cell_ids([np.array([31, 32, 31, 32]), np.array([31, 31, 32, 32])])
    values = []
    for sample in range(400):
        noise = sampler.draw_noise(StreamKey(11, sample, 0))
        values.append(sampler.sample_single_level(0, noise.xi).theta[center])
    variance = np.var(np.array(values), axis=0, ddof=1)
    assert np.all(np.abs(variance - 1.0) < 0.3)


def test_whitening_is_sparse(hierarchy_2d):
    assert sp.issparse(whitening_operator(hierarchy_2d, 0))


def test_scaling_grows_with_kappa():
    base = matern_scaling(MaternParams(nu=1.0, kappa=1.5))
    assert matern_scaling(MaternParams(nu=1.0, kappa=3.0)) == pytest.approx(2.0 * base)


def test_white_noise_rhs_scales_by_cell_area():
    mesh = build_cartesian_mesh(2, (0, 0), (40, 20), (2, 2))
    xi = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.allclose(white_noise_rhs(mesh, xi), np.sqrt(200.0) * xi)


def test_white_noise_covariance_is_the_mass_matrix(rng):
    mesh = build_cartesian_mesh(2, (0, 0), (1, 2), (2, 1))
    draws = np.stack([white_noise_rhs(mesh, rng.standard_normal(2)) for _ in range(10_000)])
    assert np.allclose(np.cov(draws, rowvar=False), np.diag([1.0, 1.0]), atol=0.05)


def test_restricted_noise_is_half_the_sum_of_children(hierarchy_2d, rng):
    xi = rng.standard_normal(hierarchy_2d.levels[0].num_cells)
    coarse = restrict_noise(xi, hierarchy_2d, 0)
    assert np.allclose(coarse, 0.5 * (hierarchy_2d.p_theta[0].T @ xi))
    assert np.array_equal(restrict_noise(np.zeros_like(xi), hierarchy_2d, 0), np.zeros(coarse.size))


def test_large_kappa_approaches_scaled_noise(rng):
    mesh = build_cartesian_mesh(2, (0, 0), (1, 1), (4, 4))
    xi = rng.standard_normal(16)
    params = MaternParams(nu=1.0, kappa=1e4)
    out = sample_single_level(assemble_level(mesh, params.kappa), xi, params, options=TIGHT)
    limit = params.g * params.kappa**-2 * xi / np.sqrt(1 / 16)
    assert np.linalg.norm(out.theta - limit) / np.linalg.norm(out.theta) < 1e-3


def test_zero_noise_pair(sampler):
    pair = sampler.sample_pair(0, np.zeros(sampler.num_cells(0)))
    assert not pair.fine.theta.any()
    assert not pair.coarse.theta.any()
    assert not pair.correction.any()


def test_smoother_matches_explicit_composition(square, rng):
    params = MaternParams(nu=3.0, kappa=2.0)
    h = refine_hierarchy(square, 1)
    sampler = HierarchicalSampler(h, params, options=TIGHT)
    xi = rng.standard_normal(16)
    level = sampler.levels[0]
    first = sample_single_level(level, xi, params, options=TIGHT)
    k2 = params.kappa**-2
    rhs = -k2 * (level.B.T @ first.theta)
    rhs[level.essential_faces] = 0.0
    u, _ = cg_solve(level.A, rhs, rtol=1e-11, atol=1e-14)
    expected = k2 * (level.B @ u / level.W + first.theta)
    assert np.allclose(sampler.sample_smoother(0, xi, 1).theta, expected, atol=1e-8)
    assert not sampler.sample_smoother(0, np.zeros(16), 1).theta.any()


@pytest.mark.slow
def test_mean_correction_vanishes(sampler):
    corrections = np.stack(
        [sampler.sample_pair(0, sampler.draw_noise(StreamKey(21, i, 0)).xi).correction for i in range(2000)]
    )
    mean = corrections.mean(axis=0)
    sd = corrections.std(axis=0, ddof=1)
    assert np.all(np.abs(mean) <= 4 * sd / np.sqrt(2000))


SMOOTH = MaternParams(nu=3.0, kappa=4.0)


def test_depth_must_match_smoothness(hierarchy_2d):
    with pytest.raises(InvalidArgumentError):
        HierarchicalSampler(hierarchy_2d, PARAMS, depth=1)
    assert HierarchicalSampler(hierarchy_2d, SMOOTH, depth=1).depth == 1


def test_sample_follows_the_depth(hierarchy_2d, rng):
    xi = rng.standard_normal(hierarchy_2d.levels[1].num_cells)
    smooth = HierarchicalSampler(hierarchy_2d, SMOOTH, options=TIGHT, depth=1)
    assert np.array_equal(smooth.sample(1, xi).theta, smooth.sample_smoother(1, xi, 1).theta)
    plain = HierarchicalSampler(hierarchy_2d, PARAMS, options=TIGHT)
    assert np.array_equal(plain.sample(1, xi).theta, plain.sample_single_level(1, xi).theta)


def test_pair_uses_the_smoother_on_both_levels(hierarchy_2d, rng):
    sampler = HierarchicalSampler(hierarchy_2d, SMOOTH, options=TIGHT, depth=1)
    xi = rng.standard_normal(sampler.num_cells(0))
    pair = sampler.sample_pair(0, xi)
    fine = sampler.sample_smoother(0, xi, 1)
    coarse = sampler.sample_smoother(1, sampler.restrict_noise(xi, 0), 1)
    assert np.allclose(pair.fine.theta, fine.theta, atol=1e-9)
    assert np.allclose(pair.coarse.theta, coarse.theta, atol=1e-9)
    assert np.allclose(pair.correction, fine.theta - hierarchy_2d.p_theta[0] @ coarse.theta, atol=1e-9)


def test_smoother_pair_has_moderate_variance(hierarchy_2d):
    sampler = HierarchicalSampler(hierarchy_2d, SMOOTH, options=TIGHT, depth=1)
    fine = np.stack(
        [sampler.sample_pair(0, sampler.draw_noise(StreamKey(5, i, 0)).xi).fine.theta for i in range(40)]
    )
    assert 0.05 < fine.var(axis=0).mean() < 10.0


def test_sampler_restriction_uses_the_whitening_operator(sampler, hierarchy_2d, rng):
    xi = rng.standard_normal(sampler.num_cells(1))
    assert np.allclose(sampler.restrict_noise(xi, 1), restrict_noise(xi, hierarchy_2d, 1), atol=1e-14)
    with pytest.raises(InvalidArgumentError):
        sampler.restrict_noise(xi[:-1], 1)
