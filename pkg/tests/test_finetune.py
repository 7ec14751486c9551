import numpy as np
import pytest

from pdedisc.finetune import (
    FinetuneConfig,
    InitialPde,
    finetune,
    ls_refit,
    physics_loss,
)
from pdedisc.networks import Binding, SolverNetwork
from pdedisc.training import TrainConfig, pretrain_solver


class AnalyticSolver:
    """Stub with closed-form u = sin(x) exp(-t); exact derivative columns.

    The graph route emits constant nodes evaluated at the coordinates the
    graph was built with, which is exact as long as denoising is off.
    """

    n_outputs = 1

    def eval(self, x, t):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return np.sin(x) * np.exp(-t)

    def derivatives(self, x, t, max_order):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        e = np.exp(-t)
        cycle = [np.sin(x), np.cos(x), -np.sin(x), -np.cos(x)]
        out = {"u": cycle[0] * e, "u_t": -cycle[0] * e}
        for m in range(1, max_order + 1):
            out[f"u_{'x' * m}"] = cycle[m % 4] * e
        return out

    def bind(self, tape):
        return Binding()

    def load_from(self, tape, binding):
        pass

    def forward_graph(self, tape, binding, x_ref, t_ref):
        return tape.const(self.eval(tape.value(x_ref), tape.value(t_ref)))

    def derivative_graph(self, tape, binding, x_ref, t_ref, max_order):
        d = self.derivatives(tape.value(x_ref), tape.value(t_ref), max_order)
        return {k: tape.const(v) for k, v in d.items()}


class SampleStub:
    def __init__(self, x, t, u):
        self.x, self.t, self.u = x, t, u


def heat_pde(coef=1.0):
    return InitialPde(term_names=("u_xx",), term_factors=(("u_xx",),),
                      coefficients=np.array([coef]),
                      candidate_names=["u", "u_x", "u_xx"])


def manufactured_points(n=80, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-np.pi, np.pi, n)
    t = rng.uniform(0.0, 1.0, n)
    return x, t


# -- ls_refit ----------------------------------------------------------------------


def test_ls_refit_single_column():
    rng = np.random.default_rng(0)
    c = rng.normal(size=40)
    xi, fb = ls_refit(c.reshape(-1, 1), 3.0 * c)
    assert np.allclose(xi, [3.0]) and not fb


def test_ls_refit_orthogonal_columns():
    c1 = np.array([1.0, 0.0, 1.0, 0.0])
    c2 = np.array([0.0, 1.0, 0.0, -1.0])
    xi, fb = ls_refit(np.stack([c1, c2], axis=1), 2.0 * c1 + 5.0 * c2)
    assert np.allclose(xi, [2.0, 5.0]) and not fb


def test_ls_refit_matches_independent_factorization():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(100, 4))
    y = rng.normal(size=100)
    xi, fb = ls_refit(A, y)
    from scipy.linalg import lstsq
    want = lstsq(A, y)[0]
    assert np.allclose(xi, want, atol=1e-10) and not fb


def test_ls_refit_rank_deficiency_falls_back():
    A = np.ones((10, 2))
    xi, fb = ls_refit(A, np.ones(10))
    assert fb
    assert np.all(np.isfinite(xi))


def test_ls_refit_complex():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(30, 2)) + 1j * rng.normal(size=(30, 2))
    truth = np.array([0.5 - 1.0j, 2.0 + 0.25j])
    xi, _ = ls_refit(A, A @ truth)
    assert np.allclose(xi, truth, atol=1e-10)


# -- physics loss --------------------------------------------------------------------


def test_physics_loss_exact_manufactured_solution():
    x, t = manufactured_points()
    assert physics_loss(AnalyticSolver(), heat_pde(1.0), x, t) < 1e-6


def test_physics_loss_zero_xi_zero_ut():
    class StaticSolver(AnalyticSolver):
        def derivatives(self, x, t, max_order):
            d = super().derivatives(x, t, max_order)
            d["u_t"] = np.zeros_like(d["u"])
            return d

    x, t = manufactured_points(seed=1)
    pde = heat_pde(0.0)
    assert physics_loss(StaticSolver(), pde, x, t) == 0.0


def test_physics_loss_burgers_residual_structure():
    net = SolverNetwork(hidden_layers=2, hidden_units=6, seed=3)
    x, t = manufactured_points(30, seed=2)
    pde = InitialPde(term_names=("u_xx", "u*u_x"),
                     term_factors=(("u_xx",), ("u", "u_x")),
                     coefficients=np.array([0.1, -1.0]),
                     candidate_names=["u", "u_x", "u_xx"])
    d = net.derivatives(x, t, 2)
    resid = (d["u_t"] - 0.1 * d["u_xx"] + 1.0 * d["u"] * d["u_x"])[:, 0]
    assert np.isclose(physics_loss(net, pde, x, t), np.mean(resid ** 2))


def test_physics_loss_complex_terms():
    net = SolverNetwork(hidden_layers=1, hidden_units=4, n_outputs=2, seed=1)
    x, t = manufactured_points(20, seed=3)
    pde = InitialPde(term_names=("u_xx",), term_factors=(("u_xx",),),
                     coefficients=np.array([0.5j]),
                     candidate_names=["u", "u_x", "u_xx"])
    d = net.derivatives(x, t, 2)
    uxx = d["u_xx"][:, 0] + 1j * d["u_xx"][:, 1]
    ut = d["u_t"][:, 0] + 1j * d["u_t"][:, 1]
    want = np.mean(np.abs(ut - 0.5j * uxx) ** 2)
    assert np.isclose(physics_loss(net, pde, x, t), want)


# -- finetune ------------------------------------------------------------------------


def test_finetune_exact_solution_recovers_exact_xi():
    x, t = manufactured_points(120, seed=4)
    sample = SampleStub(x, t, np.sin(x) * np.exp(-t))
    cfg = FinetuneConfig(epochs_phase1=5, epochs_phase2=20, lr=1e-3,
                         denoise=False)
    res = finetune(AnalyticSolver(), heat_pde(1.0), sample, cfg)
    assert res.converged
    assert abs(res.xi_star[0] - 1.0) < 1e-4 * 1.0


def test_finetune_phase2_ls_idempotent_on_frozen_solver():
    x, t = manufactured_points(60, seed=5)
    sample = SampleStub(x, t, np.sin(x) * np.exp(-t))
    cfg = FinetuneConfig(epochs_phase1=0, epochs_phase2=10, denoise=False)
    res = finetune(AnalyticSolver(), heat_pde(0.7), sample, cfg)
    assert res.converged
    assert res.phase2_epochs == 2  # second refit reproduces the first exactly


def test_finetune_initial_physics_matches_standalone():
    net = SolverNetwork(hidden_layers=2, hidden_units=8, seed=6)
    x, t = manufactured_points(50, seed=6)
    u = np.sin(x) * np.exp(-t)
    sample = SampleStub(x, t, u)
    pde = heat_pde(0.8)
    cfg = FinetuneConfig(epochs_phase1=1, epochs_phase2=0, denoise=False)
    res = finetune(net2 := SolverNetwork(hidden_layers=2, hidden_units=8, seed=6),
                   pde, sample, cfg)
    phase, epoch, sup_v, phys_v, beta_v, xi = res.history[0]
    assert np.isclose(phys_v, physics_loss(net, pde, x, t), rtol=1e-10)


def test_finetune_denoised_outputs_change_data():
    rng = np.random.default_rng(7)
    x, t = manufactured_points(100, seed=7)
    u = np.sin(x) * np.exp(-t) + 0.02 * rng.normal(size=100)
    sample = SampleStub(x, t, u)
    net = SolverNetwork(hidden_layers=2, hidden_units=8, seed=7)
    cfg = FinetuneConfig(epochs_phase1=30, epochs_phase2=5, lr=5e-3,
                         denoise=True, beta_init=1e-2, seed=7)
    res = finetune(net, heat_pde(1.0), sample, cfg)
    assert not np.array_equal(res.u_star, u)
    assert res.x_star.shape == x.shape
    # originals untouched
    assert np.array_equal(sample.u, u)


def test_finetune_beta_clamp_respected():
    rng = np.random.default_rng(8)
    x, t = manufactured_points(80, seed=8)
    u = np.sin(x) * np.exp(-t) + 0.1 * rng.normal(size=80)
    sample = SampleStub(x, t, u)
    net = SolverNetwork(hidden_layers=1, hidden_units=6, seed=8)
    cfg = FinetuneConfig(epochs_phase1=40, epochs_phase2=0, lr=0.5,
                         denoise=True, beta_init=0.9,
                         beta_clamp=(-1.0, 1.0), seed=8)
    res = finetune(net, heat_pde(1.0), sample, cfg)
    assert -1.0 <= res.beta_prime_xt <= 1.0
    assert -1.0 <= res.beta_prime_u <= 1.0


def test_finetune_noiseless_beta_stays_small():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-np.pi, np.pi, 120)
        t = rng.uniform(0.0, 1.0, 120)
        u = np.sin(x) * np.exp(-t)
        net = SolverNetwork(hidden_layers=2, hidden_units=12, seed=seed)
        tcfg = TrainConfig(epochs_pretrain=500, lr_pretrain=1e-2)
        pretrain_solver(net, x, t, u, tcfg)
        cfg = FinetuneConfig(epochs_phase1=150, epochs_phase2=20, lr=2e-3,
                             denoise=True, beta_init=1e-3, seed=seed)
        res = finetune(net, heat_pde(1.0), SampleStub(x, t, u), cfg)
        final = max(abs(res.beta_prime_xt), abs(res.beta_prime_u))
        if final <= 10.0 * 1e-3:
            hits += 1
    assert hits >= 8


def test_finetune_aborts_on_poisoned_data():
    x, t = manufactured_points(40, seed=9)
    u = np.sin(x) * np.exp(-t)
    u[0] = np.nan
    net = SolverNetwork(hidden_layers=1, hidden_units=4, seed=9)
    cfg = FinetuneConfig(epochs_phase1=10, epochs_phase2=0, denoise=False)
    res = finetune(net, heat_pde(1.0), SampleStub(x, t, u), cfg)
    assert res.aborted
