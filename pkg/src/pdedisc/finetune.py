"""Physics-informed finetuning of the initially discovered coefficients.

Phase 1 minimizes the supervised loss plus the physics residual on the
continually denoised data, updating the solver, the coefficients, the
projection networks, and the correction intensities by gradient.  Phase 2
repeats the loop but re-solves the coefficients each epoch by least squares
on the current denoised library, until they stabilize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .denoise import DftDenoiser, ProjectionDenoiser
from .library import parse_candidate
from .optim import Adam, Sgd
from .training import candidate_graph


class FinetuneError(RuntimeError):
    pass


@dataclass
class InitialPde:
    """Effective terms of the discovered équation: names, factors, values."""

    term_names: tuple
    term_factors: tuple            # basis-factor multiset per term
    coefficients: np.ndarray       # compact, float64 or complex128
    candidate_names: list          # basis candidates the factors draw from

    @classmethod
    def from_model(cls, model, lib, candidate_names) -> "InitialPde":
        return cls(term_names=tuple(model.names),
                   term_factors=tuple(lib.factors[i] for i in model.support),
                   coefficients=np.asarray(model.xi_compact),
                   candidate_names=list(candidate_names))

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.coefficients)

    @property
    def max_order(self) -> int:
        orders = [parse_candidate(f).order
                  for fs in self.term_factors for f in fs]
        return max(orders, default=1)

    def terms(self) -> dict:
        return dict(zip(self.term_names, self.coefficients))


@dataclass
class FinetuneConfig:
    epochs_phase1: int = 1200
    epochs_phase2: int = 300
    lr: float = 2e-3
    lr_beta: float | None = None   # plain-gradient rate for beta'; defaults to lr
    xi_tol: float = 1e-8
    plateau_rel: float = 1e-6
    plateau_window: int = 50
    denoise: bool = True
    alpha: float = 0.1
    beta_init: float = 1e-3
    projection_mode: str = "tanh"        # "standardize" for the high-noise profile
    beta_clamp: tuple | None = None
    reinit_denoiser: bool = False
    seed: int = 0


@dataclass
class FinetuneResult:
    xi_star: np.ndarray
    term_names: tuple
    x_star: np.ndarray
    t_star: np.ndarray
    u_star: np.ndarray
    beta_prime_xt: float
    beta_prime_u: float
    converged: bool = False
    aborted: bool = False
    ls_fallbacks: int = 0
    phase2_epochs: int = 0
    history: list = field(default_factory=list)

    def terms(self) -> dict:
        return dict(zip(self.term_names, self.xi_star))


# ---------------------------------------------------------------------------
# least squares refit
# ---------------------------------------------------------------------------


def ls_refit(columns: np.ndarray, u_t: np.ndarray):
    """Ordinary least squares by normal equations; ridge fallback when near
    singular.  Returns (coefficients, used_fallback)."""
    A = np.asarray(columns)
    y = np.asarray(u_t).reshape(-1)
    G = A.conj().T @ A
    b = A.conj().T @ y
    try:
        if np.linalg.cond(G) > 1e13:
            raise np.linalg.LinAlgError("ill-conditioned")
        return np.linalg.solve(G, b), False
    except np.linalg.LinAlgError:
        lam = 1e-10
        return np.linalg.solve(G + lam * np.eye(G.shape[0]), b), True


# ---------------------------------------------------------------------------
# loss surfaces
# ---------------------------------------------------------------------------


def _complex_mul(tape, a, b):
    """(re, im|None) x (re, im|None) -> (re, im|None)."""
    ar, ai = a
    br, bi = b
    re = tape.mul(ar, br)
    if ai is not None and bi is not None:
        re = tape.sub(re, tape.mul(ai, bi))
    im = None
    if ai is not None or bi is not None:
        parts = []
        if bi is not None:
            parts.append(tape.mul(ar, bi))
        if ai is not None:
            parts.append(tape.mul(ai, br))
        im = parts[0] if len(parts) == 1 else tape.add(parts[0], parts[1])
    return re, im


def physics_residual_graph(tape: Tape, pde: InitialPde, cols, ut_nodes,
                           xi_refs):
    """Mean squared physics residual dF/dt - sum_e xi_e * term_e."""
    acc_re, acc_im = ut_nodes
    complex_mode = pde.is_complex or acc_im is not None
    for factors, xi in zip(pde.term_factors, xi_refs):
        term = cols[factors[0]]
        for f in factors[1:]:
            term = _complex_mul(tape, term, cols[f])
        tr, ti = term
        if complex_mode:
            xr, xi_im = xi
            c_re = tape.mul(xr, tr)
            if ti is not None:
                c_re = tape.sub(c_re, tape.mul(xi_im, ti))
            c_im = tape.mul(xi_im, tr)
            if ti is not None:
                c_im = tape.add(c_im, tape.mul(xr, ti))
            acc_re = tape.sub(acc_re, c_re)
            acc_im = tape.sub(acc_im, c_im) if acc_im is not None else tape.neg(c_im)
        else:
            acc_re = tape.sub(acc_re, tape.mul(xi[0], tr))
    loss = tape.mean(tape.square(acc_re))
    if complex_mode and acc_im is not None:
        loss = tape.add(loss, tape.mean(tape.square(acc_im)))
    return loss


def physics_loss(solver, pde: InitialPde, x, t) -> float:
    """Gradient-free evaluation of the physics residual at (x, t)."""
    d = solver.derivatives(x, t, max(pde.max_order, 1))
    x = np.asarray(x, dtype=np.float64).reshape(-1)

    def col(name):
        k = parse_candidate(name)
        if k.kind == "solution":
            v = d["u"]
        elif k.kind == "derivative":
            v = d[name]
        elif k.kind == "coordinate":
            return x
        elif k.kind == "magnitude":
            v = d["u"]
            v2 = (v[:, 0] + 1j * v[:, 1]) if v.shape[1] == 2 else v[:, 0]
            return np.abs(v2) ** 2
        elif k.kind == "composite":
            v = d["u"]
            base = (v[:, 0] + 1j * v[:, 1]) if v.shape[1] == 2 else v[:, 0]
            return 0.5 * x * x * base
        else:  # pragma: no cover
            raise FinetuneError(k.kind)
        return (v[:, 0] + 1j * v[:, 1]) if v.shape[1] == 2 else v[:, 0]

    ut = d["u_t"]
    ut = (ut[:, 0] + 1j * ut[:, 1]) if ut.shape[1] == 2 else ut[:, 0]
    resid = ut.astype(complex if pde.is_complex else float, copy=True)
    for factors, xi in zip(pde.term_factors, pde.coefficients):
        term = np.ones_like(x, dtype=complex) if pde.is_complex else np.ones_like(x)
        for f in factors:
            term = term * col(f)
        resid = resid - xi * term
    return float(np.mean(np.abs(resid) ** 2))


# ---------------------------------------------------------------------------
# the dPINN loop
# ---------------------------------------------------------------------------


def finetune(solver, pde: InitialPde, sample, cfg: FinetuneConfig,
             dft: DftDenoiser | None = None,
             denoiser: ProjectionDenoiser | None = None) -> FinetuneResult:
    """Algorithm: denoise, finetune by gradient, then LS-refit until stable.

    `sample` provides x, t, u (the possibly noisy supervised rows).  With
    `cfg.denoise` false the data passes through unchanged and only the
    solver and coefficients are finetuned.
    """
    x = np.asarray(sample.x, dtype=np.float64)
    t = np.asarray(sample.t, dtype=np.float64)
    u = np.asarray(sample.u)
    complex_field = np.iscomplexobj(u) or pde.is_complex
    n = x.size

    if cfg.denoise:
        if dft is None:
            dft = DftDenoiser.from_sample(x, t, u, cfg.alpha)
        if denoiser is None:
            denoiser = ProjectionDenoiser.build(
                x, t, u, beta_init=cfg.beta_init, mode=cfg.projection_mode,
                clamp=cfg.beta_clamp, seed=cfg.seed)

    tape = Tape()
    s_bind = solver.bind(tape)
    x_c = tape.const(x.reshape(-1, 1))
    t_c = tape.const(t.reshape(-1, 1))
    if complex_field:
        u_target = tape.const(np.column_stack([u.real, u.imag]))
    else:
        u_target = tape.const(u.reshape(-1, 1))

    beta_refs = []
    proj_binds = []
    if cfg.denoise:
        bxt = tape.param(denoiser.beta_prime_xt)
        bu = tape.param(denoiser.beta_prime_u)
        beta_refs = [bxt, bu]
        pxt_bind = denoiser.net_xt.bind(tape)
        pu_bind = denoiser.net_u.bind(tape)
        proj_binds = [pxt_bind, pu_bind]
        proj_xt = denoiser.net_xt.project_graph(tape, pxt_bind,
                                                tape.const(dft.s_xt()))
        x_d = tape.sub(x_c, tape.mul(tape.slice_cols(proj_xt, 0, 1),
                                     tape.scale(bxt, denoiser.std_x)))
        t_d = tape.sub(t_c, tape.mul(tape.slice_cols(proj_xt, 1, 2),
                                     tape.scale(bxt, denoiser.std_t)))
        proj_u = denoiser.net_u.project_graph(tape, pu_bind,
                                              tape.const(dft.s_u_channels()))
        u_d = tape.sub(u_target, tape.mul(proj_u, tape.scale(bu, denoiser.std_u)))
    else:
        x_d, t_d, u_d = x_c, t_c, u_target

    pred = solver.forward_graph(tape, s_bind, x_d, t_d)
    sup = tape.mean(tape.square(tape.sub(pred, u_d)))
    if complex_field:
        sup = tape.scale(sup, 2.0)

    cols, ut_nodes = candidate_graph(tape, solver, s_bind, x_d, t_d,
                                     pde.candidate_names, pde.max_order)
    xi_refs = []
    xi_slots = []
    for c in pde.coefficients:
        if complex_field:
            xr = tape.param(float(np.real(c)))
            xi_im = tape.param(float(np.imag(c)))
            xi_refs.append((xr, xi_im))
            xi_slots.extend([xr, xi_im])
        else:
            xr = tape.param(float(np.real(c)))
            xi_refs.append((xr,))
            xi_slots.append(xr)
    phys = physics_residual_graph(tape, pde, cols, ut_nodes, xi_refs)
    total = tape.add(sup, phys)

    term_value_nodes = []
    for factors in pde.term_factors:
        term = cols[factors[0]]
        for f in factors[1:]:
            term = _complex_mul(tape, term, cols[f])
        term_value_nodes.append(term)

    def read_xi():
        if complex_field:
            return np.array([complex(tape.value(a), tape.value(b))
                             for a, b in xi_refs])
        return np.array([float(tape.value(a)) for (a,) in xi_refs])

    def write_xi(values):
        for refs, v in zip(xi_refs, values):
            if complex_field:
                tape.set_value(refs[0], np.real(v))
                tape.set_value(refs[1], np.imag(v))
            else:
                tape.set_value(refs[0], np.real(v))

    def read_columns():
        out = []
        for tr, ti in term_value_nodes:
            col = tape.value(tr)[:, 0]
            if ti is not None:
                col = col + 1j * tape.value(ti)[:, 0]
            out.append(col)
        A = np.stack(out, axis=1)
        ut = tape.value(ut_nodes[0])[:, 0]
        if ut_nodes[1] is not None:
            ut = ut + 1j * tape.value(ut_nodes[1])[:, 0]
        return A, ut

    def denoised_data():
        xs = tape.value(x_d)[:, 0].copy()
        ts = tape.value(t_d)[:, 0].copy()
        ud = tape.value(u_d)
        us = (ud[:, 0] + 1j * ud[:, 1]).copy() if complex_field else ud[:, 0].copy()
        return xs, ts, us

    all_slots = (s_bind.params + xi_slots + beta_refs
                 + [s for b in proj_binds for s in b.params])
    result = FinetuneResult(xi_star=read_xi(), term_names=pde.term_names,
                            x_star=x, t_star=t, u_star=u,
                            beta_prime_xt=0.0, beta_prime_u=0.0)

    def clamp_beta():
        if cfg.denoise and cfg.beta_clamp is not None:
            lo, hi = cfg.beta_clamp
            for ref in beta_refs:
                tape.set_value(ref, np.clip(tape.value(ref), lo, hi))

    def beta_norm():
        if not cfg.denoise:
            return 0.0
        return float(np.hypot(float(tape.value(beta_refs[0])),
                              float(tape.value(beta_refs[1]))))

    def run_phase(phase, epochs, optimizers, use_ls):
        prev_xi = read_xi()
        snapshot = {s: tape.value(s).copy() for s in all_slots}
        for epoch in range(epochs):
            tape.forward()
            if use_ls:
                A, ut = read_columns()
                xi_new, fb = ls_refit(A, ut)
                result.ls_fallbacks += int(fb)
                write_xi(xi_new)
                tape.forward()
            sup_v = float(tape.value(sup))
            phys_v = float(tape.value(phys))
            if not (math.isfinite(sup_v) and math.isfinite(phys_v)):
                for s, v in snapshot.items():
                    tape.set_value(s, v)
                tape.forward()
                result.aborted = True
                return
            snapshot = {s: tape.value(s).copy() for s in all_slots}
            result.history.append((phase, epoch, sup_v, phys_v, beta_norm(),
                                   read_xi().copy()))
            if use_ls:
                xi_now = read_xi()
                result.phase2_epochs = epoch + 1
                if np.max(np.abs(xi_now - prev_xi)) < cfg.xi_tol:
                    result.converged = True
                    return
                prev_xi = xi_now
            grads = tape.backward(total)
            for opt in optimizers:
                opt.step(grads)
            clamp_beta()
            w = cfg.plateau_window
            if not use_ls and epoch >= w:
                old = result.history[-1 - w][2] + result.history[-1 - w][3]
                now = sup_v + phys_v
                if (old - now) / max(abs(old), 1e-30) < cfg.plateau_rel:
                    return

    adam_slots = [s for s in all_slots if s not in set(beta_refs)]
    lr_beta = cfg.lr if cfg.lr_beta is None else cfg.lr_beta
    opts1 = [Adam(tape, [(adam_slots, cfg.lr)])]
    if beta_refs:
        opts1.append(Sgd(tape, [(beta_refs, lr_beta)]))
    run_phase(1, cfg.epochs_phase1, opts1, use_ls=False)

    if not result.aborted:
        if cfg.denoise and cfg.reinit_denoiser:
            denoiser.reinitialize_networks(cfg.seed + 7)
            for b, net in zip(proj_binds, (denoiser.net_xt, denoiser.net_u)):
                for i in range(len(net.weights)):
                    tape.set_value(b.refs[f"W{i}"], net.weights[i])
                    tape.set_value(b.refs[f"b{i}"], net.biases[i])
            tape.set_value(beta_refs[0], cfg.beta_init)
            tape.set_value(beta_refs[1], cfg.beta_init)
        slots2 = [s for s in adam_slots if s not in set(xi_slots)]
        opts2 = [Adam(tape, [(slots2, cfg.lr)])]
        if beta_refs:
            opts2.append(Sgd(tape, [(beta_refs, lr_beta)]))
        run_phase(2, cfg.epochs_phase2, opts2, use_ls=True)

    solver.load_from(tape, s_bind)
    result.xi_star = read_xi()
    result.x_star, result.t_star, result.u_star = denoised_data()
    if cfg.denoise:
        denoiser.net_xt.load_from(tape, proj_binds[0])
        denoiser.net_u.load_from(tape, proj_binds[1])
        denoiser.beta_prime_xt = float(tape.value(beta_refs[0]))
        denoiser.beta_prime_u = float(tape.value(beta_refs[1]))
        result.beta_prime_xt = denoiser.beta_prime_xt
        result.beta_prime_u = denoiser.beta_prime_u
    return result
