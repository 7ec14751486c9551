"""Derivative preparation: solver pretraining, joint multitask training of
solver + preselector under the smoothed-L0 regularizer, and the resulting
candidate importances.

The joint phase records one static graph (supervised loss, jet-propagated
candidate library, gated preselector prediction, regularizer) and replays it
every epoch with updated parameters.  The gating threshold is set once from
the first importance evaluation and stays fixed afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .library import parse_candidate
from .networks import Preselector, SolverNetwork
from .optim import Adam


class TrainingError(RuntimeError):
    """Divergence or contract violation during training."""


@dataclass
class TrainConfig:
    lam1: float = 1e-2            # sparsity intensity
    lam2: float = 0.1             # order-gap weight
    kappa: float = 0.75           # threshold-initialization fraction
    epochs_pretrain: int = 3000
    epochs_joint: int = 400
    epochs_converge: int = 2000
    lr_pretrain: float = 2e-3
    lr_solver_joint: float = 1e-5
    lr_preselector: float = 1e-2
    multitask: str = "pcgrad"     # "pcgrad" or "weighted"
    weighted_ratio: float = 1.0   # sup : (unsup + reg) = 1 : ratio
    dropout: float = 0.0
    plateau_rel: float = 1e-6
    plateau_window: int = 50
    val_interval: int = 25
    patience: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise TrainingError("kappa must lie strictly in (0, 1)")
        if self.lam1 < 0 or self.lam2 < 0:
            raise TrainingError("lam1 and lam2 must be >= 0")


@dataclass
class ImportanceVector:
    """Feature importances I_j = A_j - threshold + 1/C with the passing set."""

    names: list[str]
    values: np.ndarray
    threshold: float

    @property
    def n_candidates(self) -> int:
        return len(self.names)

    @property
    def passing_names(self) -> set:
        cut = 1.0 / self.n_candidates
        return {n for n, v in zip(self.names, self.values) if v > cut}

    def as_rows(self):
        cut = 1.0 / self.n_candidates
        return [(n, float(v), bool(v > cut))
                for n, v in zip(self.names, self.values)]


# ---------------------------------------------------------------------------
# standalone operations
# ---------------------------------------------------------------------------


def sl0_norm(a_thr: np.ndarray, eta: float) -> float:
    """Smoothed-L0 count: C - sum_j exp(-a_j^2 / (2 (eta V)^2)).

    V is the unbiased variance over candidates; an all-equal vector has no
    sparsity signal and returns 0.
    """
    a = np.asarray(a_thr, dtype=np.float64)
    C = a.size
    if C < 2:
        raise TrainingError("sl0_norm needs at least 2 candidates")
    V = a.var(ddof=1)
    if V == 0.0:
        return 0.0
    return float(C - np.sum(np.exp(-(a ** 2) / (2.0 * (eta * V) ** 2))))


def regularizer(a_thr: np.ndarray, order_weights, lam1: float, lam2: float,
                eta: float) -> float:
    """lam1 * (smoothed-L0 + lam2 * sum_j w_j a_j)."""
    if lam1 == 0.0:
        return 0.0
    a = np.asarray(a_thr, dtype=np.float64)
    w = np.asarray(order_weights, dtype=np.float64)
    return lam1 * (sl0_norm(a, eta) + lam2 * float(np.sum(w * a)))


def init_threshold(a_first: np.ndarray, kappa: float) -> float:
    """kappa * min_j A_j, evaluated before the first joint update."""
    if not 0.0 < kappa < 1.0:
        raise TrainingError("kappa must lie strictly in (0, 1)")
    return float(kappa * np.min(a_first))


def pcgrad_combine(g_list: list[np.ndarray]) -> np.ndarray:
    """Deconflict task gradients by pairwise projection, then sum.

    For each index pair (i, j) with i < j whose gradients conflict
    (negative inner product), the earlier gradient is projected onto the
    normal plane of the later one; later gradients are left untouched.
    Zero-norm task gradients skip their projections.
    """
    if not g_list:
        raise TrainingError("pcgrad needs at least one task gradient")
    work = [g.astype(np.float64).copy() for g in g_list]
    for i in range(len(work)):
        for j in range(i + 1, len(g_list)):
            gj = g_list[j]
            nj = float(gj @ gj)
            if nj == 0.0:
                continue
            dot = float(work[i] @ gj)
            if dot < 0.0:
                work[i] -= (dot / nj) * gj
    return np.sum(work, axis=0)


def unsup_loss(solver: SolverNetwork, presel: Preselector, ds_x, ds_t,
               candidate_names) -> float:
    """Mean squared gap between dF/dt and the preselector prediction."""
    from .library import build_basis
    lib = build_basis(solver, ds_x, ds_t, candidate_names)
    orders = [parse_candidate(n).order for n in candidate_names]
    d = _bundle_ut(solver, ds_x, ds_t, max(orders) if orders else 1)
    pred = presel.forward(lib.columns)
    if np.iscomplexobj(lib.columns) or pred.shape[1] == 2:
        pred_c = pred[:, 0] + 1j * pred[:, 1]
        return float(np.mean(np.abs(d - pred_c) ** 2))
    return float(np.mean((d - pred[:, 0]) ** 2))


def _bundle_ut(solver, x, t, max_order):
    d = solver.derivatives(x, t, max_order)["u_t"]
    if d.shape[1] == 2:
        return d[:, 0] + 1j * d[:, 1]
    return d[:, 0]


# ---------------------------------------------------------------------------
# graph assembly
# ---------------------------------------------------------------------------


def candidate_graph(tape: Tape, solver: SolverNetwork, binding, x_ref, t_ref,
                    candidate_names, max_order: int | None = None):
    """Record candidate columns; returns ({name: (re, im|None)}, u_t nodes).

    Column nodes have shape (N, 1); the imaginary part is None for real
    networks.  Coordinate and composite candidates reuse `x_ref`, so the
    columns follow it if it is a denoised (trainable) quantity.
    """
    descriptors = [parse_candidate(n) for n in candidate_names]
    orders = [d.order for d in descriptors if d.kind == "derivative"]
    need = max(orders) if orders else 1
    max_order = max(need, max_order or 1)
    deriv = solver.derivative_graph(tape, binding, x_ref, t_ref, max_order)
    complex_net = solver.n_outputs == 2

    def split(node):
        if complex_net:
            return tape.slice_cols(node, 0, 1), tape.slice_cols(node, 1, 2)
        return node, None

    cols = {}
    for d in descriptors:
        if d.kind == "solution":
            cols[d.name] = split(deriv["u"])
        elif d.kind == "derivative":
            cols[d.name] = split(deriv[d.name])
        elif d.kind == "coordinate":
            cols[d.name] = (x_ref, None)
        elif d.kind == "magnitude":
            re, im = split(deriv["u"])
            mag = tape.add(tape.square(re), tape.square(im)) if im is not None \
                else tape.square(re)
            cols[d.name] = (mag, None)
        elif d.kind == "composite":  # 0.5 x^2 u
            re, im = split(deriv["u"])
            half_x2 = tape.scale(tape.square(x_ref), 0.5)
            cols[d.name] = (tape.mul(half_x2, re),
                            None if im is None else tape.mul(half_x2, im))
    ut_re, ut_im = split(deriv["u_t"])
    return cols, (ut_re, ut_im)


def preselector_loss_graph(tape: Tape, presel: Preselector, p_binding,
                           cols: dict, ut_nodes, candidate_names,
                           threshold_ref, dropout_masks=None):
    """Gate + body + mean-squared unsupervised gap; returns (A, A_thr, loss)."""
    re_cols = [cols[n][0] for n in candidate_names]
    im_cols = [cols[n][1] for n in candidate_names]
    complex_mode = any(c is not None for c in im_cols)
    phi_re = tape.concat(re_cols)
    pre = tape.add(tape.matmul(phi_re, p_binding.refs["gate_W"]),
                   p_binding.refs["gate_b"])
    if presel.sigma_kind == "logistic":
        act = tape.sigmoid(pre)
    else:
        act = tape.scale(tape.addc(tape.tanh(pre), 1.0), 0.5)
    A = tape.record("mean_axis", [act], (0, False))
    A_thr = tape.relu(tape.sub(A, threshold_ref))
    if complex_mode:
        zeros = None
        ims = []
        for c in im_cols:
            if c is None:
                if zeros is None:
                    n = tape.value(phi_re).shape[0]
                    zeros = tape.const(np.zeros((n, 1)))
                ims.append(zeros)
            else:
                ims.append(c)
        body_in = tape.concat([phi_re, tape.concat(ims)])
        pred = presel.forward_graph(tape, p_binding, body_in, A_thr,
                                    gate_tile=2, dropout_masks=dropout_masks)
        ut = tape.concat([ut_nodes[0], ut_nodes[1]])
    else:
        pred = presel.forward_graph(tape, p_binding, phi_re, A_thr,
                                    gate_tile=1, dropout_masks=dropout_masks)
        ut = ut_nodes[0]
    gap = tape.sub(ut, pred)
    loss = tape.scale(tape.mean(tape.square(gap)),
                      2.0 if complex_mode else 1.0)  # sum of Re/Im MSEs
    return A, A_thr, loss


def regularizer_graph(tape: Tape, A_thr, order_weights, lam1, lam2, eta_ref):
    """lam1 * (smoothed-L0 + lam2 * sum w_j A^T_j), with a guarded variance."""
    C = len(order_weights)
    mean = tape.mean(A_thr)
    centered = tape.sub(A_thr, mean)
    var = tape.scale(tape.sum(tape.square(centered)), 1.0 / (C - 1))
    denom = tape.maxc(tape.scale(tape.square(tape.mul(eta_ref, var)), 2.0), 1e-300)
    sl0 = tape.addc(tape.neg(tape.sum(tape.exp(tape.neg(
        tape.div(tape.square(A_thr), denom))))), float(C))
    w = tape.const(np.asarray(order_weights, dtype=np.float64))
    weighted = tape.scale(tape.sum(tape.mul(w, A_thr)), lam2)
    return tape.scale(tape.add(sl0, weighted), lam1)


def supervised_loss_graph(tape: Tape, solver, binding, x, t, u):
    """MSE against the observed field (sum of Re/Im MSEs when complex)."""
    xr = tape.const(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    tr = tape.const(np.asarray(t, dtype=np.float64).reshape(-1, 1))
    pred = solver.forward_graph(tape, binding, xr, tr)
    if solver.n_outputs == 2:
        target = np.column_stack([np.asarray(u).real, np.asarray(u).imag])
        return tape.scale(tape.mean(tape.square(tape.sub(pred, tape.const(target)))), 2.0)
    target = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    return tape.mean(tape.square(tape.sub(pred, tape.const(target))))


# ---------------------------------------------------------------------------
# training phases
# ---------------------------------------------------------------------------


def _supervised_phase(solver, x, t, u, epochs, lr, val=None, val_interval=25,
                      patience=8, log=None, label="pretrain"):
    if np.asarray(x).size == 0:
        raise TrainingError("empty dataset")
    tape = Tape()
    binding = solver.bind(tape)
    loss_ref = supervised_loss_graph(tape, solver, binding, x, t, u)
    opt = Adam(tape, [(binding.params, lr)])
    best_val = math.inf
    best_params = None
    strikes = 0
    for epoch in range(epochs):
        tape.forward()
        loss = float(tape.value(loss_ref))
        if not math.isfinite(loss):
            raise TrainingError(f"{label}: non-finite loss at epoch {epoch}")
        if log is not None:
            log.append((epoch, loss))
        opt.step(tape.backward(loss_ref))
        if val is not None and (epoch + 1) % val_interval == 0:
            solver.load_from(tape, binding)
            vx, vt, vu = val
            pred = solver.eval(vx, vt)
            if solver.n_outputs == 2:
                target = np.column_stack([vu.real, vu.imag])
            else:
                target = np.asarray(vu, dtype=np.float64).reshape(-1, 1)
            vmse = float(np.mean((pred - target) ** 2))
            if vmse < best_val:
                best_val = vmse
                best_params = {s: tape.value(s).copy() for s in binding.params}
                strikes = 0
            else:
                strikes += 1
                if strikes > patience:
                    break
    if best_params is not None:
        for s, v in best_params.items():
            tape.set_value(s, v)
    solver.load_from(tape, binding)
    return best_val


def pretrain_solver(solver: SolverNetwork, x, t, u, cfg: TrainConfig,
                    val=None, log=None) -> float:
    return _supervised_phase(solver, x, t, u, cfg.epochs_pretrain,
                             cfg.lr_pretrain, val, cfg.val_interval,
                             cfg.patience, log, "pretrain")


def converge_solver(solver: SolverNetwork, x, t, u, cfg: TrainConfig,
                    val=None, log=None) -> float:
    return _supervised_phase(solver, x, t, u, cfg.epochs_converge,
                             cfg.lr_pretrain, val, cfg.val_interval,
                             cfg.patience, log, "converge")


@dataclass
class JointResult:
    importance: ImportanceVector
    eta: float
    threshold: float
    history: list = field(default_factory=list)   # (epoch, sup, unsup, reg, combined)
    eta_clamps: int = 0
    stopped_at: int = 0


def joint_train(solver: SolverNetwork, presel: Preselector, data, ds,
                candidate_names, cfg: TrainConfig) -> JointResult:
    """Algorithm: pretrained solver + fresh preselector, trained jointly.

    `data` is (x, t, u) for the supervised loss; `ds` is (ds_x, ds_t) for the
    unsupervised candidate set.  The preselector's threshold is initialized
    from the first importance evaluation and kept fixed.
    """
    x, t, u = data
    ds_x, ds_t = ds
    tape = Tape()
    s_bind = solver.bind(tape)
    p_bind = presel.bind(tape)
    eta_ref = tape.param(1.0)
    thr_ref = tape.const(0.0)

    sup = supervised_loss_graph(tape, solver, s_bind, x, t, u)
    xr = tape.const(np.asarray(ds_x, dtype=np.float64).reshape(-1, 1))
    tr = tape.const(np.asarray(ds_t, dtype=np.float64).reshape(-1, 1))
    cols, ut = candidate_graph(tape, solver, s_bind, xr, tr, candidate_names)

    rng = np.random.default_rng(cfg.seed)
    masks = None
    if presel.dropout > 0.0:
        masks = [tape.const(np.ones((len(ds_x), h))) for h in presel.body_hidden]
    A, A_thr, unsup = preselector_loss_graph(tape, presel, p_bind, cols, ut,
                                             candidate_names, thr_ref, masks)
    weights = [parse_candidate(n).order_weight for n in candidate_names]
    reg = regularizer_graph(tape, A_thr, weights, cfg.lam1, cfg.lam2, eta_ref)
    other = tape.add(unsup, reg)
    combined = tape.add(sup, tape.scale(other, cfg.weighted_ratio))

    # threshold from the first importance evaluation, before any update
    threshold = init_threshold(tape.value(A), cfg.kappa)
    tape.set_value(thr_ref, threshold)
    presel.threshold = threshold

    opt = Adam(tape, [(s_bind.params, cfg.lr_solver_joint),
                      (p_bind.params + [eta_ref], cfg.lr_preselector)])
    all_slots = s_bind.params + p_bind.params + [eta_ref]
    result = JointResult(importance=None, eta=1.0, threshold=threshold)

    def resample_dropout():
        if masks is None:
            return
        for m, h in zip(masks, presel.body_hidden):
            keep = (rng.random((len(ds_x), h)) >= presel.dropout)
            tape.set_value(m, keep / (1.0 - presel.dropout))

    for epoch in range(cfg.epochs_joint):
        resample_dropout()
        tape.forward()
        vals = (float(tape.value(sup)), float(tape.value(unsup)),
                float(tape.value(reg)), float(tape.value(combined)))
        if not all(math.isfinite(v) for v in vals):
            raise TrainingError(f"joint training diverged at epoch {epoch}: "
                                f"sup={vals[0]:.3e} unsup={vals[1]:.3e} reg={vals[2]:.3e}")
        result.history.append((epoch,) + vals)
        if cfg.multitask == "pcgrad":
            g_sup = tape.backward(sup)
            g_oth = tape.backward(other)
            flat = pcgrad_combine([_flatten(g_sup, all_slots),
                                   _flatten(g_oth, all_slots)])
            grads = _unflatten(flat, g_sup, all_slots)
        else:
            grads = tape.backward(combined)
        opt.step(grads)
        if float(tape.value(eta_ref)) < 1e-4:
            tape.set_value(eta_ref, 1e-4)
            result.eta_clamps += 1
        result.stopped_at = epoch + 1
        w = cfg.plateau_window
        if epoch >= w:
            old = result.history[epoch - w][4]
            now = vals[3]
            if (old - now) / max(abs(old), 1e-30) < cfg.plateau_rel:
                break

    tape.forward()
    C = len(candidate_names)
    I = np.asarray(tape.value(A)) - threshold + 1.0 / C
    result.importance = ImportanceVector(list(candidate_names), I, threshold)
    result.eta = float(tape.value(eta_ref))
    solver.load_from(tape, s_bind)
    presel.load_from(tape, p_bind)
    return result


def feature_importance(presel: Preselector, phi: np.ndarray,
                       candidate_names) -> ImportanceVector:
    """I_j = A_j - threshold + 1/C over the supplied candidate matrix."""
    A = presel.importance(phi)
    C = len(candidate_names)
    return ImportanceVector(list(candidate_names),
                            A - presel.threshold + 1.0 / C, presel.threshold)


def _flatten(grads: dict, slots) -> np.ndarray:
    return np.concatenate([np.asarray(grads[s]).ravel() for s in slots])


def _unflatten(flat: np.ndarray, like: dict, slots) -> dict:
    out = {}
    ofs = 0
    for s in slots:
        shape = np.asarray(like[s]).shape
        n = int(np.prod(shape)) if shape else 1
        out[s] = flat[ofs:ofs + n].reshape(shape)
        ofs += n
    return out
