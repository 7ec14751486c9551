import numpy as np
import pytest

from pdedisc.datasets import (
    DatasetError,
    GridDataset,
    apply_noise_profile,
    inject_noise,
    read_dataset,
    solve_canonical,
    subsample,
    write_dataset,
)


def kdv_soliton(x, t, kappa, x0):
    c = 4.0 * kappa ** 2
    return 2.0 * kappa ** 2 / np.cosh(kappa * (x - x0 - c * t)) ** 2


def mass(grid):
    dx = grid.x[1] - grid.x[0]
    return np.sum(np.abs(grid.u) ** 2, axis=0) * dx


# -- solvers -------------------------------------------------------------------


def test_kdv_single_soliton_translates():
    grid = solve_canonical("kdv", params={"solitons": [(0.5, 10.0)]},
                           nx=256, nt=51, t_span=(0.0, 10.0), oversample=1)
    want = kdv_soliton(grid.x, 10.0, 0.5, 10.0)
    err = np.linalg.norm(grid.u[:, -1] - want) / np.linalg.norm(want)
    assert err < 1e-3


def test_nls_mass_conserved():
    grid = solve_canonical("nls")
    m = mass(grid)
    assert np.max(np.abs(m - m[0])) / m[0] < 1e-6


def test_qho_mass_conserved():
    grid = solve_canonical("qho", nx=256, nt=41)
    m = mass(grid)
    assert np.max(np.abs(m - m[0])) / m[0] < 1e-6


def test_etdrk4_step_halving_ratio():
    base = dict(params={"solitons": [(0.5, 25.0)]}, nx=256, nt=6,
                t_span=(0.0, 1.0), oversample=1)
    ref = solve_canonical("kdv", nsub=64, **base).u[:, -1]
    errs = []
    for nsub in (4, 8):
        u = solve_canonical("kdv", nsub=nsub, **base).u[:, -1]
        errs.append(np.linalg.norm(u - ref))
    assert errs[0] / errs[1] >= 8.0


def test_burgers_shock_steepens():
    grid = solve_canonical("burgers")
    ux0 = np.max(np.abs(np.gradient(grid.u[:, 0], grid.x)))
    ux1 = np.max(np.abs(np.gradient(grid.u[:, -1], grid.x)))
    assert ux1 > 10.0 * ux0


def test_ks_initial_condition_and_finiteness():
    grid = solve_canonical("ks", nt=26, t_span=(0.0, 10.0))
    want0 = np.cos(grid.x / 16.0) * (1.0 + np.sin(grid.x / 16.0))
    assert np.allclose(grid.u[:, 0], want0, atol=1e-12)
    assert np.all(np.isfinite(grid.u))


def test_unknown_pde_rejected():
    with pytest.raises(DatasetError):
        solve_canonical("heat")


def test_blowup_reports_step():
    with pytest.raises(DatasetError, match="step"):
        solve_canonical("ks", nx=128, nt=6, t_span=(0.0, 50.0), nsub=1)


# -- subsampling -----------------------------------------------------------------


def small_grid():
    x = np.linspace(0, 1, 20)
    t = np.linspace(0, 1, 15)
    u = np.outer(np.sin(x), np.cos(t))
    return GridDataset(x=x, t=t, u=u, descriptor={"pde": "toy"})


def test_subsample_full_pool():
    grid = small_grid()
    s = subsample(grid, 300, 0, seed=0)
    assert s.x.size == 300
    pairs = set(zip(s.x.tolist(), s.t.tolist()))
    assert len(pairs) == 300


def test_subsample_deterministic():
    grid = small_grid()
    a = subsample(grid, 50, 20, seed=7)
    b = subsample(grid, 50, 20, seed=7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.ds_x, b.ds_x)


def test_subsample_disjoint():
    grid = small_grid()
    s = subsample(grid, 100, 100, seed=3)
    pairs = set(zip(s.ds_x.tolist(), s.ds_t.tolist()))
    assert len(pairs) == 200


def test_subsample_pool_exceeded():
    grid = small_grid()
    with pytest.raises(DatasetError):
        subsample(grid, 250, 100, seed=0)


def test_subsample_random_unsup_mode():
    grid = small_grid()
    s = subsample(grid, 50, 40, seed=1, unsup_mode="random")
    assert s.ds_x.size == 90
    extras = s.ds_x[50:]
    assert extras.min() >= 0.0 and extras.max() <= 1.0


def test_subsample_t_max_restriction():
    grid = small_grid()
    s = subsample(grid, 60, 10, seed=2, t_max=0.5)
    assert s.t.max() <= 0.5 and s.ds_t.max() <= 0.5


def test_subsample_values_match_grid():
    grid = small_grid()
    s = subsample(grid, 40, 0, seed=5)
    for xi, ti, ui in zip(s.x, s.t, s.u):
        i = np.argmin(np.abs(grid.x - xi))
        j = np.argmin(np.abs(grid.t - ti))
        assert ui == grid.u[i, j]


# -- noise -------------------------------------------------------------------------


def test_noise_zero_percent_unchanged():
    z = np.random.default_rng(0).normal(size=100)
    assert np.array_equal(inject_noise(z, 0.0, seed=1), z)


def test_noise_constant_signal_unchanged():
    z = np.full(50, 3.3)
    assert np.allclose(inject_noise(z, 50.0, seed=1), z)


def test_noise_std_scaling():
    rng = np.random.default_rng(2)
    z = rng.normal(scale=2.0, size=200_000)
    noisy = inject_noise(z, 50.0, seed=3)
    added = noisy - z
    assert abs(added.std() - 1.0 * z.std() / 2.0) / (z.std() / 2.0) < 0.05


def test_noise_preserves_mean():
    rng = np.random.default_rng(4)
    z = rng.normal(size=10_000)
    p = 10.0
    noisy = inject_noise(z, p, seed=5)
    bound = 3.0 * (p * z.std() / 100.0) / np.sqrt(z.size)
    assert abs(noisy.mean() - z.mean()) < bound


def test_noise_profile_splits_coordinates():
    grid = small_grid()
    s = subsample(grid, 100, 50, seed=0)
    noisy = apply_noise_profile(s, 5.0, "u-and-xt", seed=9)
    assert not np.array_equal(noisy.u, s.u)
    assert not np.array_equal(noisy.x, s.x)
    # supervised slice of D_s tracks the polluted coordinates
    assert np.array_equal(noisy.ds_x[:100], noisy.x)
    assert np.array_equal(noisy.ds_x[100:], s.ds_x[100:])
    # the coordinate pollution is 1/sqrt(2) of the u-style pollution
    assert noisy.noise == {"p": 5.0, "targets": "u-and-xt", "seed": 9}


def test_noise_profile_u_only_keeps_coordinates():
    grid = small_grid()
    s = subsample(grid, 80, 0, seed=0)
    noisy = apply_noise_profile(s, 2.0, "u-only", seed=3)
    assert np.array_equal(noisy.x, s.x) and np.array_equal(noisy.t, s.t)
    assert not np.array_equal(noisy.u, s.u)


# -- file I/O ---------------------------------------------------------------------


def test_dataset_roundtrip_bit_exact(tmp_path):
    grid = solve_canonical("burgers", nx=64, nt=10, oversample=2, nsub=4)
    path = str(tmp_path / "burgers.json")
    write_dataset(grid, path)
    back = read_dataset(path)
    assert back.u.tobytes() == grid.u.tobytes()
    assert np.array_equal(back.x, grid.x)
    assert np.array_equal(back.t, grid.t)
    assert back.descriptor == grid.descriptor


def test_complex_dataset_roundtrip(tmp_path):
    grid = solve_canonical("nls", nx=64, nt=11, nsub=4)
    path = str(tmp_path / "nls.json")
    write_dataset(grid, path)
    back = read_dataset(path)
    assert back.is_complex
    assert back.u.tobytes() == grid.u.tobytes()


def test_truncated_blob_errors(tmp_path):
    grid = solve_canonical("burgers", nx=32, nt=5, oversample=1, nsub=4)
    path = str(tmp_path / "b.json")
    write_dataset(grid, path)
    blob = tmp_path / "b.bin"
    blob.write_bytes(blob.read_bytes()[:-16])
    with pytest.raises(DatasetError, match="mismatch"):
        read_dataset(path)


def test_sampled_csv_export(tmp_path):
    grid = small_grid()
    s = subsample(grid, 30, 0, seed=0)
    path = str(tmp_path / "s.csv")
    s.to_csv(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (30, 3)
    assert np.allclose(data[:, 2], s.u)
