"""Windowed analysis/synthesis transforms, modulation and framing arithmetic.

Shapes follow ``(channels, bins, frames)`` for STFT tensors and
``(channels, samples)`` for time-domain buffers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.signal
import soundfile

DEFAULT_FS = 16000

_WAV_SUBTYPES = {16: "PCM_16", 24: "PCM_24", 32: "FLOAT"}


@dataclass(frozen=True)
class AudioBuffer:
    """Real multichannel samples, shape ``(M, N)``, at rate ``fs``."""

    samples: np.ndarray
    fs: float = DEFAULT_FS

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"samples must be (channels, length) with both >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, m: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[m:m + 1], self.fs)


@dataclass(frozen=True)
class ComplexAudioBuffer:
    """Complex multichannel samples produced by :func:`modulate`."""

    samples: np.ndarray
    fs: float = DEFAULT_FS
    modulation_freq: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=complex)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise ValueError(f"samples must be (channels, length), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    """Square-root Hann window of length ``length`` with hop ``hop``.

    The same window is used for analysis and synthesis, so the squared
    window (a periodic Hann) has to overlap-add to a constant.
    """

    length: int = 512
    hop: int = 128
    kind: str = "sqrt-hann"

    def __post_init__(self):
        K, R = self.length, self.hop
        if self.kind != "sqrt-hann":
            raise ValueError(f"unsupported window kind {self.kind!r}")
        if K < 1 or K & (K - 1):
            raise ValueError(f"window length must be a power of two, got {K}")
        if not 1 <= R <= K:
            raise ValueError(f"hop must satisfy 1 <= R <= K, got R={R}, K={K}")

    @property
    def window(self) -> np.ndarray:
        return _sqrt_hann(self.length)

    @property
    def is_cola(self) -> bool:
        # a periodic Hann window needs at least 50% overlap and R | K
        return _is_cola(self.length, self.hop)


@lru_cache(maxsize=None)
def _sqrt_hann(K: int) -> np.ndarray:
    w = np.sqrt(scipy.signal.get_window("hann", K, fftbins=True))
    w.setflags(write=False)
    return w


@lru_cache(maxsize=None)
def _is_cola(K: int, R: int) -> bool:
    if K == 1:
        return True
    return bool(scipy.signal.check_COLA("hann", K, K - R))


@dataclass(frozen=True)
class StftTensor:
    """STFT coefficients, shape ``(M, bins, L)``.

    Real inputs keep the ``K/2 + 1`` non-negative bins; complex inputs keep
    all ``K`` bins since their spectrum is not Hermitian symmetric.
    """

    bins: np.ndarray
    win: WindowSpec
    n_samples: int
    fs: float = DEFAULT_FS
    onesided: bool = True

    @property
    def frame_count(self) -> int:
        return self.bins.shape[-1]

    @property
    def bin_freqs(self) -> np.ndarray:
        """Bin centre frequencies in rad/sample."""
        return 2 * np.pi * np.arange(self.bins.shape[1]) / self.win.length

    @property
    def n_channels(self) -> int:
        return self.bins.shape[0]


def frame_count(N: int, K: int, R: int) -> int:
    """Number of frames ``ceil(1 + (N - K) / R)``; the tail frame is zero padded."""
    if N < K:
        raise ValueError(f"signal of {N} samples is shorter than one window ({K})")
    # integer ceiling keeps the formula exact for large N
    return 1 + -(-(N - K) // R)


def _frames(x: np.ndarray, win: WindowSpec) -> np.ndarray:
    """Windowed frames of ``x`` (M, N) as (M, L, K)."""
    K, R = win.length, win.hop
    M, N = x.shape
    L = frame_count(N, K, R)
    padded_len = (L - 1) * R + K
    if padded_len > N:
        x = np.concatenate([x, np.zeros((M, padded_len - N), dtype=x.dtype)], axis=1)
    idx = np.arange(K)[None, :] + R * np.arange(L)[:, None]
    return x[:, idx] * win.window


def stft(audio: AudioBuffer | ComplexAudioBuffer, win: WindowSpec) -> StftTensor:
    """Windowed DFT of every frame of every channel."""
    x = audio.samples
    if x.shape[1] < win.length:
        raise ValueError(
            f"signal of {x.shape[1]} samples is shorter than one window ({win.length})")
    frames = _frames(x, win)
    if np.iscomplexobj(x):
        spec = np.fft.fft(frames, axis=-1)
        onesided = False
    else:
        spec = np.fft.rfft(frames, axis=-1)
        onesided = True
    return StftTensor(np.swapaxes(spec, 1, 2), win, x.shape[1], audio.fs, onesided)


def istft(spec: StftTensor, win: WindowSpec | None = None) -> AudioBuffer:
    """Weighted overlap-add synthesis back to a real signal.

    One-sided tensors are inverted with ``irfft``, which enforces Hermitian
    symmetry (imaginary parts of the DC and Nyquist bins are dropped).
    Two-sided tensors must describe a real signal; the real part is kept.
    """
    win = win or spec.win
    if not win.is_cola:
        raise ValueError(f"(K={win.length}, R={win.hop}) does not satisfy COLA for sqrt-hann")
    K, R = win.length, win.hop
    frames_f = np.swapaxes(spec.bins, 1, 2)
    if spec.onesided:
        frames_t = np.fft.irfft(frames_f, n=K, axis=-1)
    else:
        frames_t = np.fft.ifft(frames_f, n=K, axis=-1).real
    M, L, _ = frames_t.shape
    out_len = (L - 1) * R + K
    w = win.window
    out = np.zeros((M, out_len))
    norm = np.zeros(out_len)
    for ell in range(L):
        sl = slice(ell * R, ell * R + K)
        out[:, sl] += frames_t[:, ell] * w
        norm[sl] += w * w
    # edge samples with zero window support stay zero
    nz = norm > 1e-12 * norm.max()
    out[:, nz] /= norm[nz]
    return AudioBuffer(out[:, :spec.n_samples], spec.fs)


def interior(N: int, win: WindowSpec) -> slice:
    """Samples covered by the full ``K/R`` overlapping frames."""
    K, R = win.length, win.hop
    L = frame_count(N, K, R)
    return slice(K - R, min(N, L * R))


def modulate(audio: AudioBuffer, alpha: float) -> ComplexAudioBuffer:
    """Multiply every channel by ``exp(j alpha n)`` with ``n`` the absolute sample index."""
    if not 0 <= alpha < 2 * np.pi:
        raise ValueError(f"alpha must lie in [0, 2pi), got {alpha}")
    n = np.arange(audio.n_samples)
    return ComplexAudioBuffer(audio.samples * np.exp(1j * alpha * n), audio.fs, alpha)


def hz_to_rad(f: float, fs: float) -> float:
    return 2 * math.pi * f / fs


def rad_to_hz(alpha: float, fs: float) -> float:
    return alpha * fs / (2 * math.pi)


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a WAV file of any channel count as float samples in [-1, 1]."""
    data, fs = soundfile.read(str(path), dtype="float64", always_2d=True)
    return AudioBuffer(data.T, float(fs))


def write_wav(path: str | Path, audio: AudioBuffer, bits: int = 32) -> None:
    """Write ``audio``; ``bits`` selects 16/24-bit PCM or 32-bit float."""
    if bits not in _WAV_SUBTYPES:
        raise ValueError(f"bits must be one of {sorted(_WAV_SUBTYPES)}, got {bits}")
    fs = audio.fs
    if float(fs) != int(fs):
        raise ValueError(f"WAV needs an integer sampling rate, got {fs}")
    soundfile.write(str(path), audio.samples.T, int(fs), subtype=_WAV_SUBTYPES[bits])
