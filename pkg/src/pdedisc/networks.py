"""Network definitions: solver MLP, gated preselector, projection networks.

Every network keeps its parameters as plain float64 numpy arrays and offers
two evaluation routes: a fast vectorized numpy route (used when no gradients
are needed, e.g. building candidate libraries on large metadata sets) and a
tape route (`bind` + `*_graph`) that records the same computation on a
`Tape` so training can differentiate through it.  Jets propagate through
both routes, which keeps input-derivative extraction exact for the network.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .autodiff import (
    Jet,
    Tape,
    jet_constant,
    jet_tanh,
    jet_variable,
)


class NetworkError(ValueError):
    """Contract violation in a network operation."""


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Binding:
    """Tape parameter refs for one network, in declaration order."""

    refs: dict = field(default_factory=dict)
    params: list = field(default_factory=list)

    def declare(self, tape: Tape, name: str, value: np.ndarray) -> int:
        ref = tape.param(value)
        self.refs[name] = ref
        self.params.append(ref)
        return ref


# ---------------------------------------------------------------------------
# numpy jet propagation (mirrors the tape jets, used for gradient-free paths)
# ---------------------------------------------------------------------------


def _np_jet_affine(coeffs: list[np.ndarray], W: np.ndarray, b: np.ndarray):
    out = [c @ W for c in coeffs]
    out[0] = out[0] + b
    return out


def _np_jet_tanh(coeffs: list[np.ndarray]):
    K = len(coeffs) - 1
    g = [np.tanh(coeffs[0])]
    P = [1.0 - g[0] * g[0]]
    for m in range(1, K + 1):
        acc = sum(k * coeffs[k] * P[m - k] for k in range(1, m + 1))
        g.append(acc / m)
        if m < K:
            Pm = -sum(g[i] * g[m - i] for i in range(m + 1))
            P.append(Pm)
    return g


# ---------------------------------------------------------------------------
# solver network
# ---------------------------------------------------------------------------


class SolverNetwork:
    """Tanh MLP mapping (x, t) to u.

    `n_outputs` is 1 for real-valued fields and 2 for complex ones (real and
    imaginary channels).  `x_map`/`t_map` are optional (shift, scale) pairs
    applied to the inputs; derivative extraction stays in physical units by
    seeding the jets with the chain-rule factor.
    """

    def __init__(self, hidden_layers=4, hidden_units=32, n_outputs=1, seed=0,
                 x_map=(0.0, 1.0), t_map=(0.0, 1.0)):
        rng = np.random.default_rng(seed)
        sizes = [2] + [hidden_units] * hidden_layers + [n_outputs]
        self.weights = [xavier_uniform(rng, a, b) for a, b in zip(sizes, sizes[1:])]
        self.biases = [np.full((1, b), 0.01) for b in sizes[1:]]
        self.n_outputs = n_outputs
        self.seed = seed
        self.x_map = (float(x_map[0]), float(x_map[1]))
        self.t_map = (float(t_map[0]), float(t_map[1]))

    @classmethod
    def for_domain(cls, x_bounds, t_bounds, **kw):
        """Map each input to [-1, 1] over the given bounds."""
        x0, x1 = map(float, x_bounds)
        t0, t1 = map(float, t_bounds)
        return cls(x_map=((x0 + x1) / 2.0, (x1 - x0) / 2.0),
                   t_map=((t0 + t1) / 2.0, (t1 - t0) / 2.0), **kw)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    # -- numpy route ---------------------------------------------------------

    def _normalize(self, x, t):
        x = (np.asarray(x, dtype=np.float64).reshape(-1, 1) - self.x_map[0]) / self.x_map[1]
        t = (np.asarray(t, dtype=np.float64).reshape(-1, 1) - self.t_map[0]) / self.t_map[1]
        return x, t

    def eval(self, x, t) -> np.ndarray:
        """Forward pass; returns (N, n_outputs)."""
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise NetworkError("solver inputs must be finite")
        xn, tn = self._normalize(x, t)
        h = np.concatenate([xn, tn], axis=1)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
        return h @ self.weights[-1] + self.biases[-1]

    def derivatives(self, x, t, max_order: int) -> dict[str, np.ndarray]:
        """u, u_x .. d^max_order u/dx^max_order and u_t, each (N, n_outputs)."""
        if not 1 <= max_order <= 5:
            raise NetworkError(f"max_order must be in [1, 5], got {max_order}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise NetworkError("solver inputs must be finite")
        xn, tn = self._normalize(x, t)
        n = xn.shape[0]

        def run(seed_x, seed_t, degree):
            zeros = np.zeros((n, 2))
            coeffs = [np.concatenate([xn, tn], axis=1)]
            coeffs.append(np.concatenate(seed_x + seed_t, axis=1))
            coeffs.extend([zeros] * (degree - 1))
            for W, b in zip(self.weights[:-1], self.biases[:-1]):
                coeffs = _np_jet_tanh(_np_jet_affine(coeffs, W, b))
            return _np_jet_affine(coeffs, self.weights[-1], self.biases[-1])

        ones_x = [np.full((n, 1), 1.0 / self.x_map[1]), np.zeros((n, 1))]
        ones_t = [np.zeros((n, 1)), np.full((n, 1), 1.0 / self.t_map[1])]
        cx = run([ones_x[0]], [ones_x[1]], max_order)
        ct = run([ones_t[0]], [ones_t[1]], 1)
        out = {"u": cx[0]}
        fact = 1.0
        for m in range(1, max_order + 1):
            fact *= m
            out[f"u_{'x' * m}"] = cx[m] * fact
        out["u_t"] = ct[1]
        return out

    # -- tape route ------------------------------------------------------------

    def bind(self, tape: Tape) -> Binding:
        b = Binding()
        for i, (W, bias) in enumerate(zip(self.weights, self.biases)):
            b.declare(tape, f"W{i}", W)
            b.declare(tape, f"b{i}", bias)
        return b

    def load_from(self, tape: Tape, binding: Binding) -> None:
        """Copy trained tape values back into the network arrays."""
        for i in range(len(self.weights)):
            self.weights[i] = tape.value(binding.refs[f"W{i}"]).copy()
            self.biases[i] = tape.value(binding.refs[f"b{i}"]).copy()

    def _normalize_graph(self, tape, x_ref, t_ref):
        xn = tape.scale(tape.addc(x_ref, -self.x_map[0]), 1.0 / self.x_map[1])
        tn = tape.scale(tape.addc(t_ref, -self.t_map[0]), 1.0 / self.t_map[1])
        return xn, tn

    def forward_graph(self, tape: Tape, binding: Binding, x_ref, t_ref):
        """Record the forward pass; x_ref/t_ref are (N, 1) nodes."""
        xn, tn = self._normalize_graph(tape, x_ref, t_ref)
        h = tape.concat([xn, tn])
        L = len(self.weights)
        for i in range(L - 1):
            pre = tape.add(tape.matmul(h, binding.refs[f"W{i}"]), binding.refs[f"b{i}"])
            h = tape.tanh(pre)
        return tape.add(tape.matmul(h, binding.refs[f"W{L-1}"]), binding.refs[f"b{L-1}"])

    def derivative_graph(self, tape: Tape, binding: Binding, x_ref, t_ref,
                         max_order: int) -> dict[str, int]:
        """Record jet passes; returns nodes for u, u_x.., u_t, each (N, n_out)."""
        if not 1 <= max_order <= 5:
            raise NetworkError(f"max_order must be in [1, 5], got {max_order}")
        n = tape.value(x_ref).shape[0]
        xn, tn = self._normalize_graph(tape, x_ref, t_ref)
        zeros2 = tape.const(np.zeros((n, 2)))
        L = len(self.weights)

        def run(seed1, degree):
            coeffs = [tape.concat([xn, tn]), seed1] + [zeros2] * (degree - 1)
            jet = Jet(tape, coeffs)
            for i in range(L - 1):
                aff = [tape.matmul(c, binding.refs[f"W{i}"]) for c in jet.coeffs]
                aff[0] = tape.add(aff[0], binding.refs[f"b{i}"])
                jet = jet_tanh(Jet(tape, aff))
            out = [tape.matmul(c, binding.refs[f"W{L-1}"]) for c in jet.coeffs]
            out[0] = tape.add(out[0], binding.refs[f"b{L-1}"])
            return Jet(tape, out)

        seed_x = tape.const(np.concatenate(
            [np.full((n, 1), 1.0 / self.x_map[1]), np.zeros((n, 1))], axis=1))
        seed_t = tape.const(np.concatenate(
            [np.zeros((n, 1)), np.full((n, 1), 1.0 / self.t_map[1])], axis=1))
        jx = run(seed_x, max_order)
        jt = run(seed_t, 1)
        out = {"u": jx.coeffs[0]}
        for m in range(1, max_order + 1):
            out[f"u_{'x' * m}"] = jx.derivative(m)
        out["u_t"] = jt.derivative(1)
        return out


def solver_eval(net: SolverNetwork, x, t) -> np.ndarray:
    return net.eval(x, t)


def solver_derivatives(net: SolverNetwork, x, t, max_order: int) -> dict:
    return net.derivatives(x, t, max_order)


# ---------------------------------------------------------------------------
# preselector
# ---------------------------------------------------------------------------


def _sigma(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "logistic":
        return expit(z)
    if kind == "scaled_tanh":
        return 0.5 * (np.tanh(z) + 1.0)
    raise NetworkError(f"unknown gate activation {kind!r}")


class Preselector:
    """Candidate-gated network predicting u_t from a basis library.

    The gate is a C x C linear layer whose sigmoid activations, averaged over
    samples, give per-candidate importances A_j in [0, 1].  Candidates whose
    rectified importance max(A_j - threshold, 0) is zero are multiplied out
    of the body input.  For complex libraries only the real part of the gate
    pre-activation is used and the body sees stacked (Re, Im) channels.
    """

    def __init__(self, n_candidates: int, body_hidden=(50, 50, 50), n_outputs=1,
                 sigma_kind="logistic", dropout=0.0, seed=0):
        rng = np.random.default_rng(seed)
        C = n_candidates
        self.n_candidates = C
        self.n_outputs = n_outputs
        self.sigma_kind = sigma_kind
        self.dropout = float(dropout)
        self.threshold = 0.0
        self.seed = seed
        self.gate_W = xavier_uniform(rng, C, C)
        self.gate_b = np.full((1, C), 0.01)
        in_dim = C * (2 if n_outputs == 2 else 1)
        sizes = [in_dim] + list(body_hidden) + [n_outputs]
        self.body_W = [xavier_uniform(rng, a, b) for a, b in zip(sizes, sizes[1:])]
        self.body_b = [np.full((1, b), 0.01) for b in sizes[1:]]
        self.ln_gain = [np.ones((1, h)) for h in body_hidden]
        self.ln_offset = [np.zeros((1, h)) for h in body_hidden]

    @property
    def body_hidden(self):
        return [w.shape[1] for w in self.body_W[:-1]]

    # -- numpy route ---------------------------------------------------------

    def importance(self, phi: np.ndarray) -> np.ndarray:
        """A_j = mean_i sigma((Re(phi) W + b)_ij); each entry in [0, 1]."""
        phi = np.asarray(phi)
        if phi.size == 0:
            raise NetworkError("empty candidate library")
        pre = phi.real @ self.gate_W + self.gate_b
        return _sigma(self.sigma_kind, pre).mean(axis=0)

    def forward(self, phi: np.ndarray) -> np.ndarray:
        """Body applied to phi ⊙ max(A - threshold, 0); dropout inactive."""
        phi = np.asarray(phi)
        a_thr = thresholded_importance(self.importance(phi), self.threshold)
        gated = phi * a_thr
        if np.iscomplexobj(gated):
            h = np.concatenate([gated.real, gated.imag], axis=1)
        else:
            h = gated
        if h.shape[1] != self.body_W[0].shape[0]:
            raise NetworkError("library width does not match preselector body")
        for i, (W, b) in enumerate(zip(self.body_W[:-1], self.body_b[:-1])):
            h = h @ W + b
            mu = h.mean(axis=1, keepdims=True)
            var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
            h = (h - mu) / np.sqrt(var + 1e-5)
            h = np.tanh(h * self.ln_gain[i] + self.ln_offset[i])
        return h @ self.body_W[-1] + self.body_b[-1]

    # -- tape route ------------------------------------------------------------

    def bind(self, tape: Tape) -> Binding:
        b = Binding()
        b.declare(tape, "gate_W", self.gate_W)
        b.declare(tape, "gate_b", self.gate_b)
        for i in range(len(self.body_W)):
            b.declare(tape, f"W{i}", self.body_W[i])
            b.declare(tape, f"b{i}", self.body_b[i])
        for i in range(len(self.ln_gain)):
            b.declare(tape, f"g{i}", self.ln_gain[i])
            b.declare(tape, f"o{i}", self.ln_offset[i])
        return b

    def load_from(self, tape: Tape, binding: Binding) -> None:
        self.gate_W = tape.value(binding.refs["gate_W"]).copy()
        self.gate_b = tape.value(binding.refs["gate_b"]).copy()
        for i in range(len(self.body_W)):
            self.body_W[i] = tape.value(binding.refs[f"W{i}"]).copy()
            self.body_b[i] = tape.value(binding.refs[f"b{i}"]).copy()
        for i in range(len(self.ln_gain)):
            self.ln_gain[i] = tape.value(binding.refs[f"g{i}"]).copy()
            self.ln_offset[i] = tape.value(binding.refs[f"o{i}"]).copy()

    def importance_graph(self, tape: Tape, binding: Binding, phi_re_ref):
        """(A, A_thr) nodes of shape (C,); phi_re_ref is the real part (N, C)."""
        pre = tape.add(tape.matmul(phi_re_ref, binding.refs["gate_W"]),
                       binding.refs["gate_b"])
        if self.sigma_kind == "logistic":
            act = tape.sigmoid(pre)
        else:
            act = tape.scale(tape.addc(tape.tanh(pre), 1.0), 0.5)
        A = tape.record("mean_axis", [act], (0, False))
        A_thr = tape.relu(tape.addc(A, -self.threshold))
        return A, A_thr

    def forward_graph(self, tape: Tape, binding: Binding, phi_body_ref, A_thr,
                      gate_tile: int = 1, dropout_masks=None):
        """Body on phi_body ⊙ A^T; `gate_tile`=2 stacks (Re, Im) channels."""
        gate_vec = A_thr if gate_tile == 1 else tape.concat(
            [tape.reshape(A_thr, (1, self.n_candidates))] * gate_tile)
        h = tape.mul(phi_body_ref, gate_vec)
        L = len(self.body_W)
        for i in range(L - 1):
            h = tape.add(tape.matmul(h, binding.refs[f"W{i}"]), binding.refs[f"b{i}"])
            mu = tape.mean_axis(h, 1, True)
            cen = tape.sub(h, mu)
            var = tape.mean_axis(tape.square(cen), 1, True)
            h = tape.div(cen, tape.sqrt(tape.addc(var, 1e-5)))
            h = tape.tanh(tape.add(tape.mul(h, binding.refs[f"g{i}"]),
                                   binding.refs[f"o{i}"]))
            if dropout_masks is not None:
                h = tape.mul(h, dropout_masks[i])
        return tape.add(tape.matmul(h, binding.refs[f"W{L-1}"]),
                        binding.refs[f"b{L-1}"])


def gate_importance(p: Preselector, phi: np.ndarray) -> np.ndarray:
    return p.importance(phi)


def thresholded_importance(A: np.ndarray, threshold: float) -> np.ndarray:
    if not np.isfinite(threshold):
        raise NetworkError("threshold must be finite")
    return np.maximum(np.asarray(A) - threshold, 0.0)


def preselector_forward(p: Preselector, phi: np.ndarray) -> np.ndarray:
    return p.forward(phi)


# ---------------------------------------------------------------------------
# projection networks
# ---------------------------------------------------------------------------


class ProjectionNetwork:
    """Small tanh MLP shaping extracted noise before it is subtracted.

    In "tanh" mode the final layer output is tanh-activated, so every entry
    lies in (-1, 1).  In "standardize" mode (high-noise profile) the tanh
    output is column-standardized (unbiased std) and scaled by 0.01;
    zero-variance columns skip the standardization and are only scaled.
    """

    def __init__(self, n_io: int, hidden=(32, 32), mode="tanh", seed=0):
        rng = np.random.default_rng(seed)
        sizes = [n_io] + list(hidden) + [n_io]
        self.weights = [xavier_uniform(rng, a, b) for a, b in zip(sizes, sizes[1:])]
        self.biases = [np.full((1, b), 0.01) for b in sizes[1:]]
        self.mode = mode
        self.seed = seed

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def reinitialize(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.weights = [xavier_uniform(rng, W.shape[0], W.shape[1]) for W in self.weights]
        self.biases = [np.full_like(b, 0.01) for b in self.biases]

    def project(self, S: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        h = S
        for W, b in zip(self.weights, self.biases):
            h = np.tanh(h @ W + b)
        if self.mode == "tanh":
            return h
        if self.mode != "standardize":
            raise NetworkError(f"unknown projection mode {self.mode!r}")
        out = np.empty_like(h)
        for j in range(h.shape[1]):
            col = h[:, j]
            std = col.std(ddof=1) if col.size > 1 else 0.0
            if std > 0.0:
                out[:, j] = (col - col.mean()) / std * 0.01
            else:
                out[:, j] = col * 0.01  # zero-variance guard
        return out

    def bind(self, tape: Tape) -> Binding:
        b = Binding()
        for i, (W, bias) in enumerate(zip(self.weights, self.biases)):
            b.declare(tape, f"W{i}", W)
            b.declare(tape, f"b{i}", bias)
        return b

    def load_from(self, tape: Tape, binding: Binding) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = tape.value(binding.refs[f"W{i}"]).copy()
            self.biases[i] = tape.value(binding.refs[f"b{i}"]).copy()

    def project_graph(self, tape: Tape, binding: Binding, s_ref):
        h = s_ref
        for i in range(len(self.weights)):
            h = tape.tanh(tape.add(tape.matmul(h, binding.refs[f"W{i}"]),
                                   binding.refs[f"b{i}"]))
        if self.mode == "tanh":
            return h
        # standardize-then-scale; the zero-variance branch is handled with a
        # clamped denominator (constant columns come out as zero corrections)
        mu = tape.mean_axis(h, 0, True)
        cen = tape.sub(h, mu)
        n = tape.value(s_ref).shape[0]
        var = tape.scale(tape.mean_axis(tape.square(cen), 0, True), n / max(n - 1, 1))
        std = tape.sqrt(tape.maxc(var, 1e-30))
        return tape.scale(tape.div(cen, std), 0.01)


def project_noise(pn: ProjectionNetwork, S: np.ndarray) -> np.ndarray:
    return pn.project(S)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob, bit-exact
# ---------------------------------------------------------------------------


def _blob_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".bin"


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(net, path: str) -> None:
    """Write `<path>` (JSON manifest) and a sibling `.bin` parameter blob."""
    if isinstance(net, SolverNetwork):
        manifest = {"kind": "solver", "layer_sizes": net.layer_sizes,
                    "activation": "tanh", "n_outputs": net.n_outputs,
                    "seed": net.seed, "x_map": list(net.x_map),
                    "t_map": list(net.t_map)}
        arrays = [a for pair in zip(net.weights, net.biases) for a in pair]
    elif isinstance(net, Preselector):
        manifest = {"kind": "preselector", "n_candidates": net.n_candidates,
                    "body_hidden": net.body_hidden, "n_outputs": net.n_outputs,
                    "sigma_kind": net.sigma_kind, "dropout": net.dropout,
                    "threshold": net.threshold, "seed": net.seed}
        arrays = ([net.gate_W, net.gate_b]
                  + [a for pair in zip(net.body_W, net.body_b) for a in pair]
                  + [a for pair in zip(net.ln_gain, net.ln_offset) for a in pair])
    elif isinstance(net, ProjectionNetwork):
        manifest = {"kind": "projection", "layer_sizes": net.layer_sizes,
                    "mode": net.mode, "seed": net.seed}
        arrays = [a for pair in zip(net.weights, net.biases) for a in pair]
    else:
        raise NetworkError(f"cannot checkpoint {type(net).__name__}")
    manifest["shapes"] = [list(a.shape) for a in arrays]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    _atomic_write(path, json.dumps(manifest, indent=1).encode())
    _atomic_write(_blob_path(path), blob)


def load_checkpoint(path: str):
    with open(path) as f:
        manifest = json.load(f)
    raw = np.fromfile(_blob_path(path), dtype="<f8")
    arrays = []
    ofs = 0
    for shape in manifest["shapes"]:
        n = int(np.prod(shape))
        arrays.append(raw[ofs:ofs + n].reshape(shape).astype(np.float64))
        ofs += n
    if ofs != raw.size:
        raise NetworkError(f"parameter blob length mismatch at offset {ofs}")
    kind = manifest["kind"]
    if kind == "solver":
        sizes = manifest["layer_sizes"]
        net = SolverNetwork(hidden_layers=len(sizes) - 2, hidden_units=sizes[1],
                            n_outputs=manifest["n_outputs"], seed=manifest["seed"],
                            x_map=manifest["x_map"], t_map=manifest["t_map"])
        net.weights = arrays[0::2]
        net.biases = arrays[1::2]
        return net
    if kind == "preselector":
        net = Preselector(manifest["n_candidates"],
                          body_hidden=tuple(manifest["body_hidden"]),
                          n_outputs=manifest["n_outputs"],
                          sigma_kind=manifest["sigma_kind"],
                          dropout=manifest["dropout"], seed=manifest["seed"])
        net.threshold = manifest["threshold"]
        net.gate_W, net.gate_b = arrays[0], arrays[1]
        nb = len(net.body_W)
        net.body_W = arrays[2:2 + 2 * nb:2]
        net.body_b = arrays[3:3 + 2 * nb:2]
        rest = arrays[2 + 2 * nb:]
        net.ln_gain = rest[0::2]
        net.ln_offset = rest[1::2]
        return net
    if kind == "projection":
        sizes = manifest["layer_sizes"]
        net = ProjectionNetwork(sizes[0], hidden=tuple(sizes[1:-1]),
                                mode=manifest["mode"], seed=manifest["seed"])
        net.weights = arrays[0::2]
        net.biases = arrays[1::2]
        return net
    raise NetworkError(f"unknown checkpoint kind {kind!r}")
