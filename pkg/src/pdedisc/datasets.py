"""Canonical PDE datasets: generation, subsampling, noise, file round trips.

The stiff real-valued problems (Burgers, KdV, KS) integrate with ETDRK4 on a
periodic domain, evaluating the phi-functions by the standard complex contour
quadrature; the complex-valued problems (QHO, NLS) use Strang split-step
Fourier.  Fields can be integrated on an oversampled internal grid and stored
on the requested mesh so that pointwise values stay accurate for sharp
features.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class DatasetError(ValueError):
    """Generation or I/O failure."""


PDE_NAMES = ("burgers", "kdv", "ks", "qho", "nls")

# true governing equations, as {term name: coefficient} with u_t on the left
TRUE_COEFFICIENTS = {
    "burgers": {"u_xx": 0.01 / np.pi, "u*u_x": -1.0},
    "kdv": {"u_xxx": -1.0, "u*u_x": -6.0},
    "ks": {"u_xx": -1.0, "u_xxxx": -1.0, "u*u_x": -1.0},
    "qho": {"u_xx": 0.5j, "0.5x^2u": -1.0j},
    "nls": {"u_xx": 0.5j, "u*|u|^2": 1.0j},
}

# N_r as a multiple of N_f, in the order of PDE_NAMES
UNSUPERVISED_RATIO = {"burgers": 1.0, "kdv": 1.0, "ks": 0.5, "qho": 0.5, "nls": 1.0}


@dataclass
class GridDataset:
    x: np.ndarray                # (nx,)
    t: np.ndarray                # (nt,)
    u: np.ndarray                # (nx, nt), float64 or complex128
    descriptor: dict = field(default_factory=dict)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.u)

    def domain(self):
        return (float(self.x[0]), float(self.x[-1])), (float(self.t[0]), float(self.t[-1]))


@dataclass
class SampledDataset:
    """Supervised rows plus the disjoint unsupervised coordinate extension."""

    x: np.ndarray                # (N_f,)
    t: np.ndarray
    u: np.ndarray
    ds_x: np.ndarray             # (N_f + N_r,), supervised coords first
    ds_t: np.ndarray
    n_f: int = 0
    n_r: int = 0
    noise: dict | None = None

    def to_csv(self, path: str) -> None:
        if np.iscomplexobj(self.u):
            header = "x,t,u_re,u_im"
            data = np.column_stack([self.x, self.t, self.u.real, self.u.imag])
        else:
            header = "x,t,u"
            data = np.column_stack([self.x, self.t, self.u])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# spectral integrators
# ---------------------------------------------------------------------------


def _etdrk4_coeffs(L: np.ndarray, dt: float, m_contour: int = 32):
    """phi-function weights via contour quadrature (complex L supported)."""
    real_L = np.isrealobj(L)
    r = np.exp(1j * np.pi * (np.arange(1, m_contour + 1) - 0.5) / m_contour)
    LR = dt * L[:, None] + r[None, :]
    Q = dt * ((np.exp(LR / 2.0) - 1.0) / LR).mean(axis=1)
    f1 = dt * ((-4.0 - LR + np.exp(LR) * (4.0 - 3.0 * LR + LR ** 2)) / LR ** 3).mean(axis=1)
    f2 = dt * ((2.0 + LR + np.exp(LR) * (-2.0 + LR)) / LR ** 3).mean(axis=1)
    f3 = dt * ((-4.0 - 3.0 * LR - LR ** 2 + np.exp(LR) * (4.0 - LR)) / LR ** 3).mean(axis=1)
    if real_L:
        Q, f1, f2, f3 = Q.real, f1.real, f2.real, f3.real
    E = np.exp(dt * L)
    E2 = np.exp(dt * L / 2.0)
    return E, E2, Q, f1, f2, f3


def _etdrk4_integrate(u0, L, nonlinear, t_store, nsub, label):
    """Store the solution at `t_store`; `nsub` substeps between snapshots."""
    dt = (t_store[1] - t_store[0]) / nsub
    E, E2, Q, f1, f2, f3 = _etdrk4_coeffs(L, dt)
    v = np.fft.fft(u0)
    out = np.empty((u0.size, t_store.size), dtype=np.complex128)
    out[:, 0] = v
    step = 0
    for j in range(1, t_store.size):
        for _ in range(nsub):
            step += 1
            Nv = nonlinear(v)
            a = E2 * v + Q * Nv
            Na = nonlinear(a)
            b = E2 * v + Q * Na
            Nb = nonlinear(b)
            c = E2 * a + Q * (2.0 * Nb - Nv)
            Nc = nonlinear(c)
            v = E * v + f1 * Nv + 2.0 * f2 * (Na + Nb) + f3 * Nc
        if not np.all(np.isfinite(v)):
            raise DatasetError(f"{label}: field blew up at integration step {step} "
                               f"(t ~ {t_store[j]:.4g})")
        out[:, j] = v
    return np.real(np.fft.ifft(out, axis=0))


def _dealias_mask(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n, 1.0 / n)
    return np.abs(k) < n / 3.0


def _solve_real_pde(name, params, nx, nt, x_span, t_span, oversample, nsub):
    n = nx * oversample
    length = x_span[1] - x_span[0]
    x = x_span[0] + length * np.arange(n) / n
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)
    mask = _dealias_mask(n)
    t_store = np.linspace(t_span[0], t_span[1], nt)

    if name == "burgers":
        nu = params.get("nu", 0.01 / np.pi)
        u0 = -np.sin(np.pi * x)
        L = -nu * k ** 2

        def nonlinear(v):
            u = np.real(np.fft.ifft(v))
            return -0.5j * k * (np.fft.fft(u * u) * mask)

    elif name == "kdv":
        if "sine" in params:  # weakly nonlinear regime: near band-limited
            amp, periods = params["sine"]
            u0 = amp * np.sin(2.0 * np.pi * periods * (x - x_span[0]) / length)
        else:
            solitons = params.get("solitons", [(0.5, 10.0), (0.4, 25.0)])
            u0 = np.zeros(n)
            for kappa, x0 in solitons:
                u0 += 2.0 * kappa ** 2 / np.cosh(kappa * (x - x0)) ** 2
        L = 1j * k ** 3

        def nonlinear(v):
            u = np.real(np.fft.ifft(v))
            return -3.0j * k * (np.fft.fft(u * u) * mask)

    elif name == "ks":
        u0 = np.cos(x / 16.0) * (1.0 + np.sin(x / 16.0))
        L = k ** 2 - k ** 4

        def nonlinear(v):
            u = np.real(np.fft.ifft(v))
            return -0.5j * k * (np.fft.fft(u * u) * mask)

    else:  # pragma: no cover
        raise DatasetError(name)
    u = _etdrk4_integrate(u0, L, nonlinear, t_store, nsub, name)
    return x[::oversample], t_store, u[::oversample]


def _solve_schrodinger(name, params, nx, nt, x_span, t_span, oversample, nsub):
    n = nx * oversample
    length = x_span[1] - x_span[0]
    x = x_span[0] + length * np.arange(n) / n
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)
    t_store = np.linspace(t_span[0], t_span[1], nt)
    dt = (t_store[1] - t_store[0]) / nsub

    if name == "qho":
        x0 = params.get("x0", 2.0)
        u = (np.pi ** -0.25 * np.exp(-0.5 * (x - x0) ** 2)).astype(np.complex128)
        potential = 0.5 * x ** 2

        def v_half(u, dt):
            return np.exp(-0.5j * potential * dt) * u

    elif name == "nls":
        amp = params.get("amplitude", 2.0)
        u = (amp / np.cosh(x)).astype(np.complex128)

        def v_half(u, dt):
            return np.exp(0.5j * np.abs(u) ** 2 * dt) * u

    else:  # pragma: no cover
        raise DatasetError(name)

    kinetic = np.exp(-0.5j * k ** 2 * dt)
    out = np.empty((n, t_store.size), dtype=np.complex128)
    out[:, 0] = u
    step = 0
    for j in range(1, t_store.size):
        for _ in range(nsub):
            step += 1
            u = v_half(u, dt)
            u = np.fft.ifft(kinetic * np.fft.fft(u))
            u = v_half(u, dt)
        if not np.all(np.isfinite(u)):
            raise DatasetError(f"{name}: field blew up at integration step {step} "
                               f"(t ~ {t_store[j]:.4g})")
        out[:, j] = u
    return x[::oversample], t_store, out[::oversample]


_DEFAULT_GRIDS = {
    # name: (nx, nt, x_span, t_span, oversample, nsub)
    "burgers": (256, 100, (-1.0, 1.0), (0.0, 1.0), 8, 16),
    "kdv": (128, 501, (0.0, 50.0), (0.0, 50.0), 2, 24),
    "ks": (1024, 251, (0.0, 32.0 * np.pi), (0.0, 100.0), 1, 16),
    "qho": (512, 161, (-7.5, 7.5), (0.0, 4.0), 1, 8),
    "nls": (256, 201, (-5.0, 5.0), (0.0, np.pi / 2.0), 1, 8),
}


def solve_canonical(name: str, params: dict | None = None, nx=None, nt=None,
                    x_span=None, t_span=None, oversample=None, nsub=None) -> GridDataset:
    """Generate one of the five benchmark fields on a periodic domain."""
    if name not in PDE_NAMES:
        raise DatasetError(f"unknown PDE {name!r}; choose from {PDE_NAMES}")
    params = dict(params or {})
    d_nx, d_nt, d_xs, d_ts, d_over, d_nsub = _DEFAULT_GRIDS[name]
    nx = nx or d_nx
    nt = nt or d_nt
    x_span = x_span or d_xs
    t_span = t_span or d_ts
    oversample = oversample or d_over
    nsub = nsub or d_nsub
    solver = _solve_real_pde if name in ("burgers", "kdv", "ks") else _solve_schrodinger
    x, t, u = solver(name, params, nx, nt, x_span, t_span, oversample, nsub)
    descriptor = {"pde": name, "params": {k: v for k, v in params.items()},
                  "nx": nx, "nt": nt, "x_span": list(map(float, x_span)),
                  "t_span": list(map(float, t_span)), "oversample": oversample,
                  "nsub": nsub,
                  "true_coefficients": {k: [v.real, v.imag] if isinstance(v, complex)
                                        else [float(v), 0.0]
                                        for k, v in TRUE_COEFFICIENTS[name].items()}}
    return GridDataset(x=x, t=t, u=u, descriptor=descriptor)


# ---------------------------------------------------------------------------
# subsampling and noise
# ---------------------------------------------------------------------------


def subsample(grid: GridDataset, n_f: int, n_r: int, seed: int,
              unsup_mode: str = "grid", t_max=None) -> SampledDataset:
    """Uniform random draw without replacement; D and the extension disjoint.

    `unsup_mode="random"` draws the N_r rows as fresh coordinates inside the
    domain instead of from the grid.  `t_max` restricts the pool to early
    times (used for the chaotic problems).
    """
    X, T = np.meshgrid(grid.x, grid.t, indexing="ij")
    pool = np.arange(X.size)
    if t_max is not None:
        pool = pool[T.ravel()[pool] <= t_max]
    need = n_f + (n_r if unsup_mode == "grid" else 0)
    if need > pool.size:
        raise DatasetError(f"requested {need} rows from a pool of {pool.size}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=need, replace=False)
    sup = chosen[:n_f]
    xs = X.ravel()[sup]
    ts = T.ravel()[sup]
    us = grid.u.ravel()[sup]
    if unsup_mode == "grid":
        extra = chosen[n_f:]
        ex, et = X.ravel()[extra], T.ravel()[extra]
    elif unsup_mode == "random":
        (x0, x1), (t0, t1) = grid.domain()
        t1 = min(t1, t_max) if t_max is not None else t1
        ex = rng.uniform(x0, x1, n_r)
        et = rng.uniform(t0, t1, n_r)
    else:
        raise DatasetError(f"unknown unsup_mode {unsup_mode!r}")
    return SampledDataset(x=xs, t=ts, u=us,
                          ds_x=np.concatenate([xs, ex]),
                          ds_t=np.concatenate([ts, et]),
                          n_f=n_f, n_r=n_r)


def inject_noise(z: np.ndarray, p: float, seed: int) -> np.ndarray:
    """z + (p/100) * biased std(z) * Z with Z iid standard normal."""
    if p < 0:
        raise DatasetError("noise percentage must be >= 0")
    z = np.asarray(z)
    if p == 0:
        return z.copy()
    rng = np.random.default_rng(seed)
    if np.iscomplexobj(z):
        re = inject_noise(z.real, p, seed)
        im = inject_noise(z.imag, p, seed + 1)
        return re + 1j * im
    scale = p * z.std() / 100.0  # no Bessel correction
    return z + scale * rng.standard_normal(z.shape)


def apply_noise_profile(sample: SampledDataset, p: float, targets: str,
                        seed: int) -> SampledDataset:
    """Pollute u (and optionally x, t with the 1/sqrt(2) split) in place.

    The supervised slice of the unsupervised coordinate set is refreshed so
    D_s keeps sharing the (now noisy) measurement coordinates.
    """
    if targets not in ("u-only", "u-and-xt"):
        raise DatasetError(f"unknown noise targets {targets!r}")
    u = inject_noise(sample.u, p, seed)
    x, t = sample.x, sample.t
    if targets == "u-and-xt":
        x = sample.x + (inject_noise(sample.x, p, seed + 10) - sample.x) / np.sqrt(2.0)
        t = sample.t + (inject_noise(sample.t, p, seed + 20) - sample.t) / np.sqrt(2.0)
    ds_x = np.concatenate([x, sample.ds_x[sample.n_f:]])
    ds_t = np.concatenate([t, sample.ds_t[sample.n_f:]])
    return SampledDataset(x=x, t=t, u=u, ds_x=ds_x, ds_t=ds_t,
                          n_f=sample.n_f, n_r=sample.n_r,
                          noise={"p": p, "targets": targets, "seed": seed})


# ---------------------------------------------------------------------------
# file format: JSON header + sibling little-endian float64 column-major blob
# ---------------------------------------------------------------------------


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_dataset(grid: GridDataset, path: str) -> None:
    blob_name = os.path.splitext(os.path.basename(path))[0] + ".bin"
    header = {
        "descriptor": grid.descriptor,
        "x": grid.x.tolist(),
        "t": grid.t.tolist(),
        "shape": list(grid.u.shape),
        "complex": bool(grid.is_complex),
        "endianness": "little",
        "blob": blob_name,
    }
    parts = [np.asfortranarray(grid.u.real, dtype="<f8").tobytes(order="F")]
    if grid.is_complex:
        parts.append(np.asfortranarray(grid.u.imag, dtype="<f8").tobytes(order="F"))
    _atomic_write(path, json.dumps(header, indent=1).encode())
    _atomic_write(os.path.join(os.path.dirname(path) or ".", blob_name),
                  b"".join(parts))


def read_dataset(path: str) -> GridDataset:
    try:
        with open(path) as f:
            header = json.load(f)
        shape = tuple(header["shape"])
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"malformed dataset header {path}: {exc}") from exc
    blob_path = os.path.join(os.path.dirname(path) or ".", header["blob"])
    raw = np.fromfile(blob_path, dtype="<f8")
    n = int(np.prod(shape))
    want = 2 * n if header["complex"] else n
    if raw.size != want:
        raise DatasetError(f"dataset blob length mismatch: have {raw.size} floats "
                           f"at byte offset {raw.size * 8}, want {want}")
    re = raw[:n].reshape(shape, order="F")
    if header["complex"]:
        u = re + 1j * raw[n:].reshape(shape, order="F")
    else:
        u = re.copy()
    return GridDataset(x=np.array(header["x"]), t=np.array(header["t"]),
                       u=u, descriptor=header["descriptor"])
