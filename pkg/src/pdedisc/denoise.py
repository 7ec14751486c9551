"""DFT/PSD noise extraction and the projection-based denoising state.

The extracted noise of a signal is what a power-thresholded DFT discards:
bins whose power spectral density exceeds the threshold are kept, the rest
are zeroed, and the noise is the difference between the signal and the
reconstruction.  Scattered samples are sorted by (t, x) before the 1-D
transform so the frequency axis is meaningful; the permutation is recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import ProjectionNetwork


def psd(signal: np.ndarray) -> np.ndarray:
    """Per-bin squared DFT magnitude divided by the signal length."""
    signal = np.asarray(signal)
    if signal.size < 1:
        raise ValueError("psd needs a non-empty signal")
    return np.abs(np.fft.fft(signal)) ** 2 / signal.size


def extract_noise(signal: np.ndarray, alpha: float) -> np.ndarray:
    """Signal minus its reconstruction from the high-power frequency bins.

    The threshold is mean(PSD) + alpha * (max z-score) * std(PSD), which
    simplifies to mean + alpha * (max - mean).  A zero-variance spectrum
    carries no separable noise and yields S = 0.
    """
    signal = np.asarray(signal)
    spec = np.fft.fft(signal)
    power = np.abs(spec) ** 2 / signal.size
    if power.std() == 0.0:
        return np.zeros_like(signal)
    zeta = power.mean() + alpha * (power.max() - power.mean())
    kept = np.where(power > zeta, spec, 0.0)
    recon = np.fft.ifft(kept)
    if not np.iscomplexobj(signal):
        recon = recon.real
    return signal - recon


@dataclass
class DftDenoiser:
    """Precomputed starting noises for (x, t) and u over one sample set."""

    alpha: float
    S_x: np.ndarray
    S_t: np.ndarray
    S_u: np.ndarray
    order: np.ndarray            # sort permutation used before the DFT
    zetas: dict = field(default_factory=dict)

    @classmethod
    def from_sample(cls, x, t, u, alpha: float = 0.1) -> "DftDenoiser":
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        u = np.asarray(u)
        order = np.lexsort((x, t))
        inverse = np.argsort(order)
        out = {}
        zetas = {}
        for name, sig in (("x", x), ("t", t), ("u", u)):
            s_sorted = extract_noise(sig[order], alpha)
            out[name] = s_sorted[inverse]
            power = psd(sig[order])
            zetas[name] = (float(power.mean() + alpha * (power.max() - power.mean()))
                           if power.std() > 0 else float("inf"))
        return cls(alpha=alpha, S_x=out["x"], S_t=out["t"], S_u=out["u"],
                   order=order, zetas=zetas)

    def s_xt(self) -> np.ndarray:
        """(N, 2) matrix of coordinate noises."""
        return np.column_stack([self.S_x, self.S_t])

    def s_u_channels(self) -> np.ndarray:
        """(N, 1) for real fields, (N, 2) re/im for complex ones."""
        if np.iscomplexobj(self.S_u):
            return np.column_stack([self.S_u.real, self.S_u.imag])
        return self.S_u.reshape(-1, 1)


@dataclass
class ProjectionDenoiser:
    """Projection networks plus the learnable correction intensities.

    Effective scales are beta = sqrt(V) * beta_prime with the unbiased
    variances of the ORIGINAL data, fixed at construction.
    """

    net_xt: ProjectionNetwork
    net_u: ProjectionNetwork
    beta_prime_xt: float
    beta_prime_u: float
    std_x: float
    std_t: float
    std_u: float
    clamp: tuple | None = None     # (lo, hi) bounds for beta_prime

    @classmethod
    def build(cls, x, t, u, beta_init: float = 1e-3, mode: str = "tanh",
              clamp=None, seed: int = 0) -> "ProjectionDenoiser":
        u = np.asarray(u)
        n_u = 2 if np.iscomplexobj(u) else 1
        return cls(
            net_xt=ProjectionNetwork(2, mode=mode, seed=seed),
            net_u=ProjectionNetwork(n_u, mode=mode, seed=seed + 1),
            beta_prime_xt=beta_init,
            beta_prime_u=beta_init,
            std_x=float(np.std(x, ddof=1)),
            std_t=float(np.std(t, ddof=1)),
            std_u=float(np.std(u, ddof=1)),
            clamp=tuple(clamp) if clamp is not None else None,
        )

    def reinitialize_networks(self, seed: int) -> None:
        self.net_xt.reinitialize(seed)
        self.net_u.reinitialize(seed + 1)


def denoise_apply(x, t, u, denoiser: ProjectionDenoiser,
                  dft: DftDenoiser) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x, t, u) minus the scaled projected noises; inputs are not mutated."""
    proj_xt = denoiser.net_xt.project(dft.s_xt())
    x_d = np.asarray(x) - denoiser.std_x * denoiser.beta_prime_xt * proj_xt[:, 0]
    t_d = np.asarray(t) - denoiser.std_t * denoiser.beta_prime_xt * proj_xt[:, 1]
    proj_u = denoiser.net_u.project(dft.s_u_channels())
    scale_u = denoiser.std_u * denoiser.beta_prime_u
    u = np.asarray(u)
    if np.iscomplexobj(u):
        u_d = u - scale_u * (proj_u[:, 0] + 1j * proj_u[:, 1])
    else:
        u_d = u - scale_u * proj_u[:, 0]
    return x_d, t_d, u_d
