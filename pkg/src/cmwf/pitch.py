"""Fundamental-frequency tracking for the recursive pipeline.

``estimate_f0_nls`` fits a harmonic sinusoid model by grid search. For each
candidate ``f0`` the energy explained by harmonics ``1..h`` is the Hann-weighted
least-squares projection onto the harmonic cos/sin columns, read off a dense
zero-padded spectrum of the frame (the large-frame form of the nonlinear
least-squares cost, where distinct harmonics are orthogonal).
Model order is chosen with a BIC-style penalty, and a frame is voiced when the selected model
explains at least ``voicing_threshold`` of the frame energy.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal

from .stft import AudioBuffer, WindowSpec, frame_count

EPS_GUARD = 1e-6
D0_DEFAULT = 0.005
D1_DEFAULT = 0.2


@dataclass(frozen=True)
class PitchGrid:
    f_lo: float = 60.0
    f_hi: float = 500.0
    step: float = 0.5

    def __post_init__(self):
        if not 0 < self.f_lo < self.f_hi:
            raise ValueError(f"degenerate f0 grid [{self.f_lo}, {self.f_hi}]")
        if not self.step > 0:
            raise ValueError(f"grid step must be positive, got {self.step}")

    @property
    def candidates(self) -> np.ndarray:
        n = int(math.floor((self.f_hi - self.f_lo) / self.step + 1e-9)) + 1
        return self.f_lo + self.step * np.arange(n)


@dataclass(frozen=True)
class NlsConfig:
    grid: PitchGrid = PitchGrid()
    max_order: int = 200
    coarse_fmax: float = 1500.0
    refine_step: float = 0.01
    spectrum_resolution: float = 0.125
    refine: bool = False
    penalty: float = 1.0
    voicing_threshold: float = 0.5
    residual_floor: float = 1e-3


@dataclass(frozen=True)
class SmoothingParams:
    D0: float = D0_DEFAULT
    D1: float = D1_DEFAULT
    eps_guard: float = EPS_GUARD
    bootstrap: bool = True

    def __post_init__(self):
        if not 0 < self.D0 < self.D1:
            raise ValueError(f"need 0 < D0 < D1, got D0={self.D0}, D1={self.D1}")


@lru_cache(maxsize=16)
def _hann(N: int) -> np.ndarray:
    w = scipy.signal.get_window("hann", N, fftbins=False)
    w.setflags(write=False)
    return w


class _HarmonicSpectrum:
    """Weighted LS energy of single sinusoids on a dense frequency grid.

    With a Hann weighting ``w`` the harmonic cos/sin columns are close to
    orthogonal, so a harmonic at ``f`` explains ``|X_w(f)|^2 / (sum(w) / 2)``.
    ``X_w`` is evaluated by a zero-padded FFT with bin spacing ``resolution``.
    """

    def __init__(self, x: np.ndarray, fs: float, resolution: float):
        N = len(x)
        w = _hann(N)
        self.fs = fs
        self.n_fft = scipy.fft.next_fast_len(max(N, int(math.ceil(fs / resolution))), real=True)
        X = np.fft.rfft(w * x, self.n_fft)
        self._raw = np.abs(X) ** 2
        self.power = self._raw / (0.5 * w.sum())
        self.total = float(w @ (x * x))

    def band_energy(self, fmax: float) -> float:
        """Share of ``total`` below ``fmax``, split by the windowed spectrum."""
        k = int(np.ceil(fmax * self.n_fft / self.fs))
        denom = self._raw.sum()
        return self.total * (self._raw[:k].sum() / denom if denom > 0 else 0.0)

    def energy(self, freqs: np.ndarray) -> np.ndarray:
        """Per-harmonic energy; frequencies at or above Nyquist contribute 0."""
        valid = (freqs > 0) & (freqs < self.fs / 2)
        idx = np.rint(np.where(valid, freqs, 0.0) * self.n_fft / self.fs).astype(int)
        return np.where(valid, self.power[np.minimum(idx, len(self.power) - 1)], 0.0)


def _bic(explained: np.ndarray, total: float, N: int, config: NlsConfig) -> np.ndarray:
    """Order-penalised cost of harmonic models ``1..h`` along the last axis."""
    rss = np.maximum(total - explained, config.residual_floor * total)
    order = np.arange(1, explained.shape[-1] + 1)
    return N * np.log(rss / total) + config.penalty * 2 * order * np.log(N)


def _fit(spec: _HarmonicSpectrum, f0s: np.ndarray, max_order: int, fmax: float, N: int,
         config: NlsConfig):
    """Best order and score for every candidate in ``f0s``.

    Harmonics at or above ``fmax`` are ignored and the fit is scored against
    the frame energy below ``fmax``.
    """
    h = np.arange(1, max_order + 1)
    freqs = f0s[:, None] * h[None, :]
    valid = freqs < min(fmax, spec.fs / 2)
    total = spec.total if fmax >= spec.fs / 2 else spec.band_energy(fmax)
    if total <= 0:
        return np.zeros(len(f0s)), np.zeros(len(f0s), int), np.zeros(len(f0s))
    explained = np.cumsum(np.where(valid, spec.energy(freqs), 0.0), axis=1)
    score = np.where(valid, _bic(explained, total, N, config), np.inf)
    j = np.argmin(score, axis=1)
    rows = np.arange(len(f0s))
    return score[rows, j], j + 1, explained[rows, j]


def estimate_f0_nls(frame, fs: float | None = None, config: NlsConfig = NlsConfig()
                    ) -> tuple[float, int, bool]:
    """Grid-search harmonic fit of one frame.

    A coarse search over the grid with harmonics below ``coarse_fmax`` picks
    a winner. The winner, its octave relatives and the runner-up are then
    refined on a ``refine_step`` sub-grid within one grid step, scoring every
    harmonic below Nyquist; order and voicing are decided on the best refined
    fit. The returned f0 is snapped back to the grid unless ``config.refine``.

    Returns ``(f0_hz, order, voiced)``; unvoiced frames give ``(0.0, 0, False)``.
    """
    if isinstance(frame, AudioBuffer):
        fs = frame.fs if fs is None else fs
        frame = frame.samples[0]
    if fs is None:
        raise ValueError("fs is required for a raw sample array")
    x = np.asarray(frame, dtype=float)
    grid = config.grid
    min_len = 2 * fs / grid.f_lo
    if len(x) < min_len:
        raise ValueError(f"frame of {len(x)} samples is shorter than 2*fs/f_lo = {min_len:.0f}")
    if not np.any(x) or not np.all(np.isfinite(x)):
        return 0.0, 0, False
    N = len(x)
    spec = _HarmonicSpectrum(x, fs, config.spectrum_resolution)

    cand = grid.candidates
    coarse_order = int(math.ceil(config.coarse_fmax / grid.f_lo))
    score, _, _ = _fit(spec, cand, coarse_order, config.coarse_fmax, N, config)
    # the empty model scores 0 after normalising by the frame energy
    if not score.min() < 0:
        return 0.0, 0, False
    ranked = np.argsort(score)
    winner = cand[ranked[0]]
    runner_up = next((cand[k] for k in ranked[1:] if abs(cand[k] - winner) > 2 * grid.step), None)
    # octave relatives of the coarse winner are re-scored on the full band
    seeds = [winner] + [f for f in (winner / 2, winner / 3, 2 * winner, 3 * winner, runner_up)
                        if f is not None and grid.f_lo - grid.step <= f <= grid.f_hi + grid.step]
    offsets = np.arange(-grid.step, grid.step + config.refine_step / 2, config.refine_step)
    fine = (np.asarray(seeds)[:, None] + offsets[None, :]).ravel()
    fine = fine[fine > 0]
    score, order, explained = _fit(spec, fine, config.max_order, np.inf, N, config)
    k = int(np.argmin(score))
    if not score[k] < 0:
        return 0.0, 0, False
    if min(explained[k] / spec.total, 1.0) < config.voicing_threshold:
        return 0.0, 0, False
    f_best = float(fine[k])
    if not config.refine:
        f_best = grid.f_lo + grid.step * round((f_best - grid.f_lo) / grid.step)
        f_best = float(min(max(f_best, grid.f_lo), cand[-1]))
    return f_best, int(order[k]), True


def delta_alpha(prev: float, curr: float, eps_guard: float = EPS_GUARD) -> float:
    """Relative frame-to-frame change ``|curr - prev| / (prev + eps)``."""
    return abs(curr - prev) / (prev + eps_guard)


@dataclass(frozen=True)
class PitchTrack:
    """Per-frame raw and smoothed fundamental, rad/sample (0 when unvoiced)."""

    raw: np.ndarray
    voiced: np.ndarray
    smoothed: np.ndarray
    delta: np.ndarray
    fs: float

    def __len__(self) -> int:
        return len(self.raw)

    def to_csv(self, path: str | Path) -> None:
        scale = self.fs / (2 * np.pi)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "raw_f0_hz", "voiced", "smoothed_f0_hz", "delta_alpha"])
            for ell in range(len(self.raw)):
                writer.writerow([ell, repr(float(self.raw[ell] * scale)), int(self.voiced[ell]),
                                 repr(float(self.smoothed[ell] * scale)),
                                 repr(float(self.delta[ell]))])


def smooth_f0(raw, params: SmoothingParams = SmoothingParams(), fs: float = 16000.0,
              voiced=None) -> PitchTrack:
    """Hold-or-update smoothing of a raw fundamental track.

    The smoothed value takes the raw estimate when ``D0 <= delta < D1`` and
    keeps its previous value otherwise, starting from 0. With
    ``params.bootstrap`` the first voiced frame seeds the smoothed value, since
    the jump from 0 would otherwise always be held.
    """
    raw = np.asarray(raw, dtype=float)
    if voiced is None:
        voiced = raw > 0
    voiced = np.asarray(voiced, dtype=bool)
    raw = np.where(voiced, raw, 0.0)
    smoothed = np.zeros_like(raw)
    delta = np.zeros_like(raw)
    prev_raw = 0.0
    current = 0.0
    for ell, a in enumerate(raw):
        d = delta_alpha(prev_raw, a, params.eps_guard)
        delta[ell] = d
        if params.bootstrap and current == 0.0 and a > 0:
            current = a
        elif params.D0 <= d < params.D1:
            current = a
        smoothed[ell] = current
        prev_raw = a
    return PitchTrack(raw, voiced, smoothed, delta, fs)


def track_f0(audio: AudioBuffer, win: WindowSpec = WindowSpec(), frame_length: int = 2048,
             config: NlsConfig = NlsConfig(), channel: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-STFT-frame fundamental in rad/sample plus voiced flags.

    Each estimate uses ``frame_length`` samples centred on the STFT frame,
    zero padded at the signal edges.
    """
    x = audio.samples[channel]
    fs = audio.fs
    K, R = win.length, win.hop
    L = frame_count(len(x), K, R)
    half = frame_length // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(frame_length + (L - 1) * R + K)])
    raw = np.zeros(L)
    voiced = np.zeros(L, dtype=bool)
    for ell in range(L):
        centre = ell * R + K // 2
        seg = padded[centre:centre + frame_length]
        f0, _, v = estimate_f0_nls(seg, fs, config)
        raw[ell] = 2 * np.pi * f0 / fs
        voiced[ell] = v
    return raw, voiced


def pitch_track(audio: AudioBuffer, win: WindowSpec = WindowSpec(), frame_length: int = 2048,
                nls: NlsConfig = NlsConfig(), params: SmoothingParams = SmoothingParams(),
                channel: int = 0) -> PitchTrack:
    raw, voiced = track_f0(audio, win, frame_length, nls, channel)
    return smooth_f0(raw, params, audio.fs, voiced)
