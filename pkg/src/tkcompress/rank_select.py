"""Automatic rank selection via empirical variational Bayes.

The estimator follows the global analytic solution for fully observed
variational Bayesian matrix factorization (Nakajima et al., JMLR 2013):
the observed matrix is modeled as low-rank signal plus i.i.d. Gaussian
noise, the noise variance is picked by minimizing the empirical-VB free
energy over a bracketed 1-D search, and a component is kept exactly when
its singular value clears the shrinkage threshold at that variance.  The
threshold always exceeds the noise bulk edge ``sigma (sqrt(L) + sqrt(M))``,
so nothing inside the bulk is ever retained.

For convolution kernels only the input-channel mode (axis 2 of a
``D x D x S x T`` kernel) is estimated this way; the output-channel rank
follows from the channel ratio ``T / S`` unless the policy asks for an
independent estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import unfold

__all__ = ["RankReport", "RankPolicy", "evbmf_rank", "select_conv_ranks", "select_fc_rank"]

# Largest normalized singular value (relative to sqrt(alpha)) that pure
# noise can explain under the empirical-VB prior; Nakajima et al., eq. for
# the local minimum existence bound.
_TAUBAR_COEFF = 2.5129

# Tail singular values at or below this fraction of s1 count as numerical zero.
_ZERO_REL = 1e-6


@dataclass(frozen=True)
class RankReport:
    """Per-matrix rank evidence.

    ``retained_mask`` flags the leading components that survived shrinkage;
    it is always a prefix of the non-increasing spectrum, and
    ``estimated_rank`` equals its popcount.
    """

    layer_id: str
    estimated_rank: int
    singular_values: np.ndarray
    retained_mask: np.ndarray
    noise_sigma2: float

    def __post_init__(self):
        if self.estimated_rank != int(np.sum(self.retained_mask)):
            raise ValueError("estimated_rank disagrees with retained_mask")
        if self.noise_sigma2 < 0:
            raise ValueError("noise variance must be >= 0")


@dataclass(frozen=True)
class RankPolicy:
    """How estimated ranks turn into usable layer ranks.

    r4_rule: ``channel_ratio`` scales the input-mode rank by T/S;
    ``vbmf_independent`` estimates the output mode on its own.
    min_rank floors every rank; rank_cap_fraction caps the VBMF estimate at
    ``ceil(fraction * mode_size)``.
    """

    r4_rule: str = "channel_ratio"
    min_rank: int = 1
    rank_cap_fraction: float = 1.0

    def __post_init__(self):
        if self.r4_rule not in ("channel_ratio", "vbmf_independent"):
            raise ValueError(f"unknown r4_rule {self.r4_rule!r}")
        if self.min_rank < 1:
            raise ValueError("min_rank must be >= 1")
        if not 0.0 < self.rank_cap_fraction <= 1.0:
            raise ValueError("rank_cap_fraction must lie in (0, 1]")


def _free_energy(sigma2: float, s2: np.ndarray, L: int, M: int, alpha: float, xubar: float) -> float:
    """Empirical-VB free energy (up to constants) as a function of sigma^2."""
    x = s2 / (M * sigma2)
    big = x > xubar
    z1 = x[big]
    z2 = x[~big]
    term = float(np.sum(z2 - np.log(z2)))
    if z1.size:
        tau = 0.5 * (z1 - (1 + alpha) + np.sqrt((z1 - (1 + alpha)) ** 2 - 4 * alpha))
        term += float(np.sum(z1 - tau))
        term += float(np.sum(np.log((tau + 1.0) / z1)))
        term += alpha * float(np.sum(np.log(tau / alpha + 1.0)))
    return term


def _minimize_sigma2(s2, L, M, alpha, xubar, lo, hi):
    """Deterministic 1-D minimization: coarse log-spaced grid, then golden section."""
    grid = np.exp(np.linspace(math.log(lo), math.log(hi), 256))
    vals = [_free_energy(g, s2, L, M, alpha, xubar) for g in grid]
    i = int(np.argmin(vals))
    a = math.log(grid[max(i - 1, 0)])
    b = math.log(grid[min(i + 1, len(grid) - 1)])
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _free_energy(math.exp(c), s2, L, M, alpha, xubar)
    fd = _free_energy(math.exp(d), s2, L, M, alpha, xubar)
    for _ in range(200):
        if b - a < 1e-12:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _free_energy(math.exp(c), s2, L, M, alpha, xubar)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _free_energy(math.exp(d), s2, L, M, alpha, xubar)
    return math.exp(0.5 * (a + b))


def evbmf_rank(m: np.ndarray, layer_id: str = "") -> RankReport:
    """Estimate the rank of ``m`` as signal-plus-noise via empirical VBMF.

    Exactly low-rank inputs (numerically zero tail) short-circuit to a
    direct count of singular values above ``1e-6 * s1``; the same happens
    when the variance search bracket degenerates (e.g. all singular values
    equal), where no noise level is identifiable.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("evbmf_rank expects a matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("evbmf_rank input contains non-finite entries")
    if a.shape[0] > a.shape[1]:
        a = a.T
    L, M = a.shape  # L <= M

    s = np.linalg.svd(a, compute_uv=False)
    n = s.size  # == L

    def report(rank, sigma2):
        mask = np.arange(n) < rank
        return RankReport(
            layer_id=layer_id,
            estimated_rank=int(rank),
            singular_values=s,
            retained_mask=mask,
            noise_sigma2=float(sigma2),
        )

    if s[0] == 0.0:
        return report(0, 0.0)

    k_zero = int(np.sum(s > _ZERO_REL * s[0]))
    # Numerically zero tail: the noiseless branch.
    if k_zero < n and s[k_zero] <= 1e-9 * s[0]:
        tail2 = float(np.sum(s[k_zero:] ** 2))
        return report(k_zero, tail2 / (L * M))

    alpha = L / M
    taubar = _TAUBAR_COEFF * math.sqrt(alpha)
    xubar = (1.0 + taubar) * (1.0 + alpha / taubar)
    s2 = s**2

    upper = float(np.sum(s2)) / (L * M)
    # Components from ceil(L/(1+alpha)) - 1 on can only be noise; their level
    # floors the variance search.
    tail_start = min(max(int(math.ceil(L / (1.0 + alpha))) - 1, 0), n - 1)
    tail = s2[tail_start:]
    lower = max(float(tail[0]) / (M * xubar), float(np.mean(tail)) / M)

    if lower >= upper * (1.0 - 1e-12):
        # Degenerate bracket (flat spectrum): fall back to the noiseless count.
        return report(k_zero, upper)

    sigma2 = _minimize_sigma2(s2, L, M, alpha, xubar, lower, upper)
    threshold = math.sqrt(M * sigma2 * (1.0 + taubar) * (1.0 + alpha / taubar))
    rank = int(np.sum(s > threshold))
    return report(rank, sigma2)


def _clamp(x: int, lo: int, hi: int) -> int:
    return min(max(x, lo), hi)


def select_conv_ranks(
    kernel: np.ndarray,
    policy: RankPolicy = RankPolicy(),
    layer_id: str = "",
    return_reports: bool = False,
):
    """Pick (R3, R4) for a ``D x D x S x T`` kernel under ``policy``.

    R3 comes from VBMF on the input-channel unfolding, clamped to
    ``[min_rank, ceil(rank_cap_fraction * S)]``.  R4 is either
    ``round(R3 * T / S)`` clamped to ``[min_rank, T]`` (channel_ratio) or
    an independent VBMF estimate on the output-channel unfolding.
    """
    k = np.asarray(kernel)
    if k.ndim != 4:
        raise ValueError("expected a 4-way kernel")
    s_dim, t_dim = k.shape[2], k.shape[3]
    rep3 = evbmf_rank(unfold(k, 2), layer_id=f"{layer_id}/in" if layer_id else "in")
    r3 = _clamp(rep3.estimated_rank, policy.min_rank, math.ceil(policy.rank_cap_fraction * s_dim))
    reports = [rep3]
    if policy.r4_rule == "channel_ratio":
        # round half up, then keep within [min_rank, T]
        r4 = _clamp(int(math.floor(r3 * t_dim / s_dim + 0.5)), policy.min_rank, t_dim)
    else:
        rep4 = evbmf_rank(unfold(k, 3), layer_id=f"{layer_id}/out" if layer_id else "out")
        r4 = _clamp(
            rep4.estimated_rank, policy.min_rank, math.ceil(policy.rank_cap_fraction * t_dim)
        )
        reports.append(rep4)
    if return_reports:
        return (r3, r4), reports
    return r3, r4


def select_fc_rank(
    w: np.ndarray,
    policy: RankPolicy = RankPolicy(),
    layer_id: str = "",
    return_report: bool = False,
):
    """Pick R for an ``M x N`` weight: VBMF clamped to ``[min_rank, min(M, N)]``."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError("expected a matrix")
    rep = evbmf_rank(w, layer_id=layer_id)
    r = _clamp(rep.estimated_rank, policy.min_rank, min(w.shape))
    if return_report:
        return r, rep
    return r
