"""Cyclic frequency sets, ACP spectral-correlation estimates and stacked covariances.

A modulated stack holds, for every retained bin ``k`` and frame ``l``, the
vector ``[x(w_k), x(w_k - a_1), ..., x(w_k - a_{C-1})]`` of length ``M*C``.
Block ``c`` (rows ``c*M .. c*M + M - 1``) is the STFT of the signal modulated
by ``a_c = c * a_1`` in the time domain, so shifted frequencies are not
restricted to the ``2*pi/K`` bin grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .stft import AudioBuffer, StftTensor, WindowSpec, modulate, stft

ROLES = ("noisy", "noise", "target")


@dataclass(frozen=True)
class CyclicSet:
    """Shifts ``0, a1, 2*a1, ..., (C-1)*a1`` in rad/sample."""

    alpha1: float
    shifts: np.ndarray

    @property
    def C(self) -> int:
        return len(self.shifts)


def build_cyclic_set(alpha1: float, C_requested: int, nyquist: float = np.pi) -> CyclicSet:
    """Harmonic shift set, clamped so that every shift stays below ``nyquist``."""
    if not alpha1 > 0:
        raise ValueError(f"alpha1 must be positive, got {alpha1}")
    if C_requested < 1:
        raise ValueError(f"C must be >= 1, got {C_requested}")
    # largest C with (C - 1) * alpha1 < nyquist
    C_max = int(np.ceil(nyquist / alpha1))
    while C_max > 1 and (C_max - 1) * alpha1 >= nyquist:
        C_max -= 1
    C = min(C_requested, C_max)
    return CyclicSet(float(alpha1), alpha1 * np.arange(C))


def narrowband_set() -> CyclicSet:
    return CyclicSet(0.0, np.zeros(1))


@dataclass(frozen=True)
class ScdEstimate:
    """ACP estimate ``S(alpha_p, w_k)``; ``values`` has shape ``(len(alphas), bins)``."""

    values: np.ndarray
    alphas: np.ndarray
    frame_count: int
    K: int
    fs: float

    def to_csv(self, path: str | Path) -> None:
        freqs = np.arange(self.values.shape[1]) * self.fs / self.K
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["alpha_hz"]
            for f in freqs:
                header += [f"re@{f:.4f}", f"im@{f:.4f}"]
            writer.writerow(header)
            for alpha, row in zip(self.alphas, self.values):
                out = [repr(float(alpha * self.fs / (2 * np.pi)))]
                for v in row:
                    out += [repr(float(v.real)), repr(float(v.imag))]
                writer.writerow(out)


def acp_estimate(y: StftTensor, x_shifted: StftTensor, channels: tuple[int, int] = (0, 0)
                 ) -> np.ndarray:
    """Time-averaged cyclic periodogram ``(1/L) sum_l Y(w_k, l) X*(w_k - alpha, l)``.

    ``x_shifted`` is the STFT of the signal modulated by ``alpha``. Only bins
    present in both tensors are returned.
    """
    if y.frame_count != x_shifted.frame_count:
        raise ValueError(
            f"frame counts differ: {y.frame_count} vs {x_shifted.frame_count}")
    nb = min(y.bins.shape[1], x_shifted.bins.shape[1])
    Y = y.bins[channels[0], :nb]
    X = x_shifted.bins[channels[1], :nb]
    return np.mean(Y * X.conj(), axis=-1)


def scd(audio: AudioBuffer, alphas: Sequence[float], win: WindowSpec,
        channel: int = 0) -> ScdEstimate:
    """Auto cyclic spectrum of one channel at the given cyclic frequencies."""
    x = audio.channel(channel)
    Y = stft(x, win)
    rows = []
    for alpha in alphas:
        X = Y if alpha == 0 else stft(modulate(x, alpha), win)
        row = acp_estimate(Y, X)
        if alpha == 0:
            row = row.real.astype(complex)
        rows.append(row)
    return ScdEstimate(np.array(rows), np.asarray(alphas, float), Y.frame_count,
                       win.length, audio.fs)


@dataclass(frozen=True)
class ModulatedStftStack:
    """Stacked STFTs, ``data`` shaped ``(M*C, len(bins), L)``, shift-major."""

    data: np.ndarray
    bins: np.ndarray
    cyclic_set: CyclicSet
    M: int
    win: WindowSpec
    n_samples: int
    fs: float

    @property
    def frame_count(self) -> int:
        return self.data.shape[-1]

    def block(self, c: int) -> np.ndarray:
        return self.data[c * self.M:(c + 1) * self.M]

    def select(self, bins: np.ndarray) -> "ModulatedStftStack":
        """Sub-stack restricted to ``bins`` (a subset of ``self.bins``)."""
        pos = np.searchsorted(self.bins, bins)
        if np.any(pos >= len(self.bins)) or np.any(self.bins[np.minimum(pos, len(self.bins) - 1)] != bins):
            raise ValueError("requested bins are not part of this stack")
        return ModulatedStftStack(self.data[:, pos], np.asarray(bins), self.cyclic_set,
                                  self.M, self.win, self.n_samples, self.fs)

    def truncate(self, C: int) -> "ModulatedStftStack":
        """Stack of the first ``C`` shifts."""
        cs = CyclicSet(self.cyclic_set.alpha1, self.cyclic_set.shifts[:C])
        return ModulatedStftStack(self.data[:C * self.M], self.bins, cs, self.M,
                                  self.win, self.n_samples, self.fs)


def build_stack(audio: AudioBuffer, cyclic_set: CyclicSet, win: WindowSpec,
                bins: np.ndarray | None = None) -> ModulatedStftStack:
    """STFT of ``audio`` modulated by every shift, evaluated at ``bins``.

    ``bins`` defaults to the ``K/2 + 1`` non-negative frequency bins.
    """
    if bins is None:
        bins = np.arange(win.length // 2 + 1)
    bins = np.asarray(bins, dtype=int)
    blocks = []
    for c, alpha in enumerate(cyclic_set.shifts):
        if c == 0 and alpha == 0:
            spec = stft(audio, win).bins
        else:
            spec = stft(modulate(audio, float(alpha) % (2 * np.pi)), win).bins
        blocks.append(spec[:, bins])
    return ModulatedStftStack(np.concatenate(blocks, axis=0), bins, cyclic_set,
                              audio.n_channels, win, audio.n_samples, audio.fs)


@dataclass(frozen=True)
class SpectralSpatialCov:
    """Per-bin Hermitian matrices, ``matrices`` shaped ``(len(bins), D, D)``."""

    matrices: np.ndarray
    bins: np.ndarray
    role: str = "noisy"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    @property
    def dim(self) -> int:
        return self.matrices.shape[-1]


def _frame_slice(L: int, frames) -> np.ndarray:
    if frames is None:
        return np.arange(L)
    if isinstance(frames, slice):
        return np.arange(L)[frames]
    return np.asarray(frames, dtype=int)


def assemble_cov(stack: ModulatedStftStack, frames=None, role: str = "noisy"
                 ) -> SpectralSpatialCov:
    """Sample covariance ``(1/|frames|) sum_l x(l) x(l)^H`` per bin."""
    idx = _frame_slice(stack.frame_count, frames)
    if idx.size == 0:
        raise ValueError("empty frame range")
    X = stack.data[..., idx]
    S = np.einsum("ikl,jkl->kij", X, X.conj()) / idx.size
    # exact Hermitian symmetry; einsum rounding differs between triangles
    S = 0.5 * (S + np.conj(np.swapaxes(S, -1, -2)))
    return SpectralSpatialCov(S, stack.bins, role)


def cross_vector(stack: ModulatedStftStack, reference: np.ndarray, frames=None) -> np.ndarray:
    """ACP cross-statistics ``(1/L) sum_l x(l) s*(l)`` per bin, shape ``(bins, M*C)``.

    ``reference`` holds the reference STFT at the stack's bins, shape ``(bins, L)``.
    """
    idx = _frame_slice(stack.frame_count, frames)
    if idx.size == 0:
        raise ValueError("empty frame range")
    X = stack.data[..., idx]
    s = reference[..., idx]
    return np.einsum("ikl,kl->ki", X, s.conj()) / idx.size


def blkdiag(S: np.ndarray, M: int) -> np.ndarray:
    """Keep the ``M x M`` diagonal blocks of the trailing two axes, zero the rest."""
    D = S.shape[-1]
    if D % M or S.shape[-2] != D:
        raise ValueError(f"matrix dimension {S.shape[-2:]} is not a multiple of block size {M}")
    blocks = np.arange(D) // M
    return np.where(blocks[:, None] == blocks[None, :], S, 0)


def blkdiag_project(cov: SpectralSpatialCov, M: int) -> SpectralSpatialCov:
    """Block-diagonal projection that removes spectral correlation across shifts."""
    return SpectralSpatialCov(blkdiag(cov.matrices, M), cov.bins, cov.role)


def harmonic_bins(alpha1: float, K: int, eps_bin: float = 1.5) -> np.ndarray:
    """Non-negative bins whose centre lies within ``eps_bin`` bins of a harmonic of ``alpha1``."""
    w = 2 * np.pi * np.arange(1, K // 2 + 1) / K
    h = np.maximum(np.rint(w / alpha1), 1)
    return 1 + np.flatnonzero(np.abs(w - h * alpha1) < eps_bin * 2 * np.pi / K)


def harmonic_contrast(audio: AudioBuffer, alpha1: float, win: WindowSpec = WindowSpec(),
                      orders: int = 3, n_random: int = 3, seed=None, channel: int = 0,
                      eps_bin: float = 1.5) -> float:
    """How much the cyclic spectrum at harmonic shifts stands out.

    Ratio of the median ``|S(c*alpha1, w_k)|`` for ``c = 1..orders`` to the
    median at randomly drawn non-harmonic shifts, both taken over the bins
    near harmonics of ``alpha1``. Random shifts stay at least a quarter of
    ``alpha1`` away from every multiple and at least three bins from zero,
    where the window's own spectral leakage would correlate neighbours.
    """
    rng = np.random.default_rng(seed)
    K = win.length
    bins = harmonic_bins(alpha1, K, eps_bin)
    if bins.size == 0:
        raise ValueError("no bins near harmonics")
    x = audio.channel(channel)
    Y = stft(x, win)

    def magnitude(alpha):
        return np.abs(acp_estimate(Y, stft(modulate(x, alpha % (2 * np.pi)), win)))[bins]

    on = np.concatenate([magnitude(c * alpha1) for c in range(1, orders + 1)])
    lo, hi = max(3 * 2 * np.pi / K, 0.5 * alpha1), min((orders + 0.5) * alpha1, np.pi)
    randoms = []
    while len(randoms) < n_random:
        a = rng.uniform(lo, hi)
        if abs(a / alpha1 - round(a / alpha1)) >= 0.25:
            randoms.append(a)
    off = np.concatenate([magnitude(a) for a in randoms])
    return float(np.median(on) / np.median(off))
