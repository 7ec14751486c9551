"""Candidate libraries: basis columns, polynomial features, normalization.

A basis library holds one column per atomic candidate (the estimated field,
its spatial derivatives, coordinates, magnitude/composite terms), evaluated
at a set of metadata coordinates.  Polynomial libraries are built on top of
a basis library and remember, for every column, the multiset of basis
factors that produced it; the agreement check and the reports both rely on
that bookkeeping.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc


class LibraryError(ValueError):
    """Contract violation while building or transforming a library."""


_KIND_RANK = {"solution": 0, "derivative": 1, "coordinate": 2,
              "magnitude": 3, "composite": 4}


@dataclass(frozen=True)
class CandidateDescriptor:
    """One atomic candidate: canonical name, kind, and its order weight."""

    name: str
    kind: str
    order: int = 0          # derivative order; 0 for non-derivatives
    order_weight: int = 1   # w_j: derivative order, else 1

    def sort_key(self):
        return (_KIND_RANK[self.kind], self.order, self.name)


def parse_candidate(name: str) -> CandidateDescriptor:
    if name == "u":
        return CandidateDescriptor("u", "solution")
    m = re.fullmatch(r"u_(x+)", name)
    if m:
        order = len(m.group(1))
        return CandidateDescriptor(name, "derivative", order, order)
    if name == "x":
        return CandidateDescriptor("x", "coordinate")
    if name == "|u|^2":
        return CandidateDescriptor("|u|^2", "magnitude")
    if name == "0.5x^2u":
        return CandidateDescriptor("0.5x^2u", "composite")
    raise LibraryError(f"unknown candidate name {name!r}")


def product_name(factors) -> str:
    """Canonical display name for a monomial (factors sorted, powers grouped)."""
    ordered = sorted(factors, key=lambda d: d.sort_key())
    parts = []
    for d in ordered:
        if parts and parts[-1][0] is not None and parts[-1][0].name == d.name:
            parts[-1] = (d, parts[-1][1] + 1)
        else:
            parts.append((d, 1))
    return "*".join(d.name if p == 1 else f"{d.name}^{p}" for d, p in parts)


@dataclass
class CandidateLibrary:
    """Matrix of candidate columns plus naming/normalization bookkeeping."""

    columns: np.ndarray                 # (N, C), float64 or complex128
    names: list[str]
    factors: list[tuple[str, ...]]      # basis-factor multiset per column
    order_weights: list[int]
    provenance: str = "basis"           # "basis" or "poly(k)"
    normalization: str = "none"
    norms: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.columns.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.columns.shape[1]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.columns)

    def column(self, name: str) -> np.ndarray:
        return self.columns[:, self.names.index(name)]

    def restricted(self, rows) -> "CandidateLibrary":
        """Row subset; normalization metadata carries over unchanged."""
        return replace(self, columns=self.columns[rows])

    def to_csv(self, path: str) -> None:
        """Header of canonical names; complex entries as paired re/im columns."""
        if self.is_complex:
            header = ",".join(f"{n}_re,{n}_im" for n in self.names)
            data = np.empty((self.n_samples, 2 * self.n_candidates))
            data[:, 0::2] = self.columns.real
            data[:, 1::2] = self.columns.imag
        else:
            header = ",".join(self.names)
            data = self.columns
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def evaluate_candidates(bundle: dict, x: np.ndarray,
                        descriptors: list[CandidateDescriptor]) -> np.ndarray:
    """Assemble columns from a derivative bundle ({"u": ..., "u_x": ...})."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    cols = []
    for d in descriptors:
        if d.kind == "solution":
            cols.append(bundle["u"])
        elif d.kind == "derivative":
            cols.append(bundle[d.name])
        elif d.kind == "coordinate":
            cols.append(x)
        elif d.kind == "magnitude":
            u = bundle["u"]
            cols.append(np.abs(u) ** 2 if np.iscomplexobj(u) else u * u)
        elif d.kind == "composite":  # 0.5 x^2 u
            cols.append(0.5 * x * x * bundle["u"])
        else:  # pragma: no cover
            raise LibraryError(f"unknown kind {d.kind!r}")
    return np.stack([np.asarray(c).reshape(-1) for c in cols], axis=1)


def _bundle_from_solver(solver, x, t, max_order, chunk=8192):
    """Evaluate solver derivatives in chunks; complex nets give complex columns."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    parts: list[dict] = []
    for lo in range(0, x.size, chunk):
        d = solver.derivatives(x[lo:lo + chunk], t[lo:lo + chunk], max_order)
        parts.append(d)
    keys = parts[0].keys()
    out = {}
    for k in keys:
        col = np.concatenate([p[k] for p in parts], axis=0)
        if col.shape[1] == 2:  # (re, im) channels
            out[k] = col[:, 0] + 1j * col[:, 1]
        else:
            out[k] = col[:, 0]
    return out


def build_basis(solver, x, t, candidate_names) -> CandidateLibrary:
    """One column per named candidate, evaluated through the solver's jets."""
    descriptors = [parse_candidate(n) for n in candidate_names]
    orders = [d.order for d in descriptors if d.kind == "derivative"]
    max_order = max(orders) if orders else 1
    if max_order > 5:
        raise LibraryError(f"derivative order {max_order} beyond jet capability")
    bundle = _bundle_from_solver(solver, x, t, max_order)
    cols = evaluate_candidates(bundle, x, descriptors)
    return CandidateLibrary(
        columns=cols,
        names=[d.name for d in descriptors],
        factors=[(d.name,) for d in descriptors],
        order_weights=[d.order_weight for d in descriptors],
        provenance="basis",
    )


def poly_features(lib: CandidateLibrary, k: int, mode="interaction") -> CandidateLibrary:
    """Monomials of the basis columns up to total degree k, no bias column.

    "interaction" keeps distinct-factor monomials only; "all" also allows
    repeated factors (used for the complex-valued problems).
    """
    if k < 1:
        raise LibraryError("polynomial degree must be >= 1")
    if lib.provenance != "basis":
        raise LibraryError("poly_features expects a basis library")
    from itertools import combinations, combinations_with_replacement

    descriptors = [parse_candidate(n) for n in lib.names]
    chooser = combinations if mode == "interaction" else combinations_with_replacement
    cols, names, factors, weights = [], [], [], []
    for degree in range(1, k + 1):
        for combo in chooser(range(lib.n_candidates), degree):
            col = lib.columns[:, combo[0]].copy()
            for j in combo[1:]:
                col = col * lib.columns[:, j]
            ds = [descriptors[j] for j in combo]
            cols.append(col)
            names.append(product_name(ds))
            factors.append(tuple(sorted(lib.names[j] for j in combo)))
            weights.append(max(d.order_weight for d in ds))
    return CandidateLibrary(
        columns=np.stack(cols, axis=1),
        names=names,
        factors=factors,
        order_weights=weights,
        provenance=f"poly({k})",
    )


def condition_significand(lib: CandidateLibrary) -> float:
    """Significand of the 2-norm condition number, in [1, 10)."""
    if lib.n_candidates == 0 or lib.n_samples == 0:
        raise LibraryError("empty library")
    if np.linalg.matrix_rank(lib.columns) < lib.n_candidates:
        raise LibraryError("library is rank deficient (infinite condition number)")
    cond = np.linalg.cond(lib.columns)
    exponent = int(np.floor(np.log10(cond)))
    return float(cond / 10.0 ** exponent)


def normalize_columns(lib: CandidateLibrary, kind: str) -> CandidateLibrary:
    """Divide each column by its L1 or L2 norm; norms stored for un-scaling."""
    if kind == "none":
        return replace(lib, normalization="none",
                       norms=np.ones(lib.n_candidates))
    if kind == "L2":
        norms = np.linalg.norm(lib.columns, axis=0)
    elif kind == "L1":
        norms = np.abs(lib.columns).sum(axis=0)
    else:
        raise LibraryError(f"unknown normalization {kind!r}")
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise LibraryError(f"zero column for candidate {lib.names[zero[0]]!r}")
    return replace(lib, columns=lib.columns / norms, normalization=kind,
                   norms=norms.astype(np.float64))


# ---------------------------------------------------------------------------
# metadata coordinate sets
# ---------------------------------------------------------------------------


def metadata_grid(x, t) -> tuple[np.ndarray, np.ndarray]:
    """Uniform grid with spacings equal to the minimum pairwise coordinate gaps."""
    x = np.unique(np.asarray(x, dtype=np.float64).reshape(-1))
    t = np.unique(np.asarray(t, dtype=np.float64).reshape(-1))
    if x.size < 2 or t.size < 2:
        raise LibraryError("metadata grid needs >= 2 distinct x and t values")
    dx = np.diff(x).min()
    dt = np.diff(t).min()
    gx = np.arange(x[0], x[-1] + dx / 2.0, dx)
    gt = np.arange(t[0], t[-1] + dt / 2.0, dt)
    gx = gx[gx <= x[-1] + 1e-12]
    gt = gt[gt <= t[-1] + 1e-12]
    X, T = np.meshgrid(gx, gt, indexing="ij")
    return X.ravel(), T.ravel()


def latin_hypercube(n: int, x_bounds, t_bounds, seed: int) -> tuple[np.ndarray, np.ndarray]:
    sampler = qmc.LatinHypercube(d=2, seed=seed)
    pts = sampler.random(n)
    lo = np.array([x_bounds[0], t_bounds[0]], dtype=np.float64)
    hi = np.array([x_bounds[1], t_bounds[1]], dtype=np.float64)
    scaled = qmc.scale(pts, lo, hi)
    return scaled[:, 0], scaled[:, 1]


def validation_split(n: int, fraction: float, seed: int):
    """Uniform random split; returns (fit_indices, val_indices)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
