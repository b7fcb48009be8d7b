"""Tests for filter-normalized direction slices of the loss surface."""

import numpy as np
import pytest

from gnmlab.autodiff import ParamSet, Tensor, add, linear, mean_all, scale
from gnmlab.landscape import (
    filter_normalized_directions,
    flatness_score,
    landscape_grid,
    write_grid_csv,
)


def quadratic(params, batch):
    """0.5 * ||theta||^2; parameters in these tests are (1, k) rows."""
    pieces = [scale(mean_all(linear(params[name], params[name])), 0.5) for name in params.names()]
    out = pieces[0]
    for p in pieces[1:]:
        out = add(out, p)
    return out


def _params(vec):
    return ParamSet.from_arrays({"w": np.asarray([vec], dtype=np.float64)})


# ---------------------------------------------------------------------------
# directions


def test_directions_match_row_norms_of_the_parameters():
    params = ParamSet.from_arrays({
        "weight": np.random.default_rng(0).normal(size=(4, 6)),
        "bias": np.random.default_rng(1).normal(size=4),
    })
    dirs = filter_normalized_directions(params, np.random.default_rng(2))
    for d in (dirs.first, dirs.second):
        w = params["weight"].data
        for i in range(4):
            assert np.linalg.norm(d["weight"][i]) == pytest.approx(np.linalg.norm(w[i]), rel=1e-12)
        assert np.linalg.norm(d["bias"]) == pytest.approx(np.linalg.norm(params["bias"].data), rel=1e-12)
    assert dirs.zero_rows == ()


def test_directions_flag_zero_parameter_rows():
    arrays = {"weight": np.array([[1.0, 2.0], [0.0, 0.0]]), "bias": np.zeros(2)}
    dirs = filter_normalized_directions(ParamSet.from_arrays(arrays), np.random.default_rng(3))
    assert ("weight", 1) in dirs.zero_rows
    assert ("bias", None) in dirs.zero_rows
    np.testing.assert_array_equal(dirs.first["weight"][1], [0.0, 0.0])
    np.testing.assert_array_equal(dirs.second["bias"], [0.0, 0.0])


def test_directions_are_deterministic_given_the_generator_seed():
    params = ParamSet.from_arrays({"w": np.random.default_rng(4).normal(size=(3, 5))})
    a = filter_normalized_directions(params, np.random.default_rng(7))
    b = filter_normalized_directions(params, np.random.default_rng(7))
    np.testing.assert_array_equal(a.first["w"], b.first["w"])
    np.testing.assert_array_equal(a.second["w"], b.second["w"])
    assert not np.array_equal(a.first["w"], a.second["w"])


# ---------------------------------------------------------------------------
# grid values


def test_quadratic_grid_matches_the_closed_form():
    # For L = 0.5||theta||^2, L(theta + a d1 + b d2) expands to
    # L(theta) + 0.5||a d1 + b d2||^2 + <theta, a d1 + b d2>.
    theta = np.array([0.6, -0.2, 0.1])
    d1 = {"w": np.array([[1.0, 0.0, 0.0]])}
    d2 = {"w": np.array([[0.0, 1.0, 0.0]])}
    params = _params(theta)
    grid = landscape_grid(params, quadratic, None, (d1, d2), r=0.5, resolution=5)
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            moved = theta + a * d1["w"][0] + b * d2["w"][0]
            assert grid.losses[i, j] == pytest.approx(0.5 * moved @ moved, abs=1e-12)


def test_grid_center_equals_plain_loss_bitwise():
    params = _params([0.3, 0.4, 1.2])
    dirs = filter_normalized_directions(params, np.random.default_rng(8))
    grid = landscape_grid(params, quadratic, None, dirs, r=0.7, resolution=7)
    assert grid.center == quadratic(params, None).item()
    assert grid.center_index == (3, 3)
    assert grid.alphas[3] == 0.0 and grid.betas[3] == 0.0


def test_resolution_one_grid_is_the_single_central_point():
    params = _params([1.0, -1.0])
    grid = landscape_grid(params, quadratic, None,
                          ({"w": np.ones((1, 2))}, {"w": np.ones((1, 2))}), r=1.0, resolution=1)
    np.testing.assert_array_equal(grid.alphas, [0.0])
    assert grid.losses.shape == (1, 1)
    assert grid.losses[0, 0] == quadratic(params, None).item()


def test_axes_are_symmetric_about_zero():
    params = _params([0.5, 0.5])
    dirs = filter_normalized_directions(params, np.random.default_rng(9))
    grid = landscape_grid(params, quadratic, None, dirs, r=1.5, resolution=9)
    np.testing.assert_array_equal(grid.alphas, -grid.alphas[::-1])
    np.testing.assert_array_equal(grid.alphas, grid.betas)
    assert grid.alphas.min() == -1.5 and grid.alphas.max() == 1.5


def test_grid_leaves_parameters_bitwise_untouched():
    params = _params([0.1, 0.9, -0.4])
    before = params.to_bytes()
    dirs = filter_normalized_directions(params, np.random.default_rng(10))
    landscape_grid(params, quadratic, None, dirs, r=1.0, resolution=5)
    assert params.to_bytes() == before


def test_grid_is_deterministic():
    params = _params([0.2, -0.3])
    dirs = filter_normalized_directions(params, np.random.default_rng(11))
    a = landscape_grid(params, quadratic, None, dirs, r=1.0, resolution=5)
    b = landscape_grid(params, quadratic, None, dirs, r=1.0, resolution=5)
    np.testing.assert_array_equal(a.losses, b.losses)


def test_non_finite_points_become_inf_sentinels_and_are_flagged():
    def cliff(params, batch):
        if params["w"].data[0, 0] > 0.9:
            return Tensor(np.asarray(float("nan")))
        return quadratic(params, batch)

    params = _params([0.0, 0.0])
    d1 = {"w": np.array([[1.0, 0.0]])}
    d2 = {"w": np.array([[0.0, 1.0]])}
    grid = landscape_grid(params, cliff, None, (d1, d2), r=1.0, resolution=3)
    assert grid.non_finite == ((2, 0), (2, 1), (2, 2))
    assert np.isinf(grid.losses[2]).all()
    assert np.isfinite(grid.losses[:2]).all()


def test_grid_rejects_mismatched_direction_names_and_bad_sizes():
    params = _params([1.0, 2.0])
    with pytest.raises(ValueError, match="direction names"):
        landscape_grid(params, quadratic, None, ({"x": np.ones((1, 2))}, {"w": np.ones((1, 2))}))
    dirs = ({"w": np.ones((1, 2))}, {"w": np.ones((1, 2))})
    with pytest.raises(ValueError, match="range"):
        landscape_grid(params, quadratic, None, dirs, r=0.0)
    with pytest.raises(ValueError, match="resolution"):
        landscape_grid(params, quadratic, None, dirs, resolution=0)


def test_even_resolution_grid_has_no_center():
    params = _params([1.0, 2.0])
    dirs = ({"w": np.ones((1, 2))}, {"w": np.full((1, 2), -1.0)})
    grid = landscape_grid(params, quadratic, None, dirs, r=1.0, resolution=4)
    with pytest.raises(ValueError, match="center"):
        _ = grid.center_index


# ---------------------------------------------------------------------------
# flatness


def test_flatness_of_centered_quadratic_is_mean_of_half_squared_radii():
    # theta = 0 makes the cross term vanish: L(a, b) = 0.5 (a^2 + b^2) for
    # orthonormal directions, so flatness = mean - 0 has a closed form.
    params = _params([0.0, 0.0])
    d1 = {"w": np.array([[1.0, 0.0]])}
    d2 = {"w": np.array([[0.0, 1.0]])}
    grid = landscape_grid(params, quadratic, None, (d1, d2), r=1.0, resolution=5)
    axis = np.linspace(-1, 1, 5)
    expected = np.add.outer(axis**2, axis**2).mean() / 2.0
    assert flatness_score(grid) == pytest.approx(expected, abs=1e-12)


def test_flatness_of_a_constant_surface_is_zero():
    def flat_loss(params, batch):
        return scale(mean_all(params["w"]), 0.0)

    params = _params([3.0, -1.0])
    dirs = filter_normalized_directions(params, np.random.default_rng(12))
    grid = landscape_grid(params, flat_loss, None, dirs, r=1.0, resolution=5)
    assert flatness_score(grid) == 0.0


def test_flatness_rejects_grids_with_sentinels():
    grid_ok = landscape_grid(_params([0.0, 0.0]), quadratic, None,
                             ({"w": np.ones((1, 2))}, {"w": np.ones((1, 2))}), r=1.0, resolution=3)
    assert flatness_score(grid_ok) >= 0.0
    poisoned = type(grid_ok)(alphas=grid_ok.alphas, betas=grid_ok.betas, losses=grid_ok.losses,
                             range=grid_ok.range, resolution=grid_ok.resolution,
                             non_finite=((0, 0),))
    with pytest.raises(ValueError, match="sentinel"):
        flatness_score(poisoned)


# ---------------------------------------------------------------------------
# CSV


def test_csv_round_trips_values_exactly(tmp_path):
    params = _params([0.25, -0.75])
    dirs = filter_normalized_directions(params, np.random.default_rng(13))
    grid = landscape_grid(params, quadratic, None, dirs, r=1.0, resolution=3)
    path = tmp_path / "grid.csv"
    write_grid_csv(grid, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "alpha,beta,loss"
    assert len(lines) == 1 + 9
    # alpha-major ordering with repr floats: parse back bitwise
    rows = [tuple(float(v) for v in line.split(",")) for line in lines[1:]]
    k = 0
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            assert rows[k] == (a, b, grid.losses[i, j])
            k += 1
