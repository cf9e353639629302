"""Narrowband and cyclic multichannel Wiener filters.

Weights minimise ``E|S(w_k) - w^H x|^2 + lam ||w||^2`` where ``x`` is either
the ``M`` microphone spectra at ``w_k`` (MWF) or the ``M*C`` stacked spectra
at ``w_k - a_c`` (cMWF). Variants differ in where the target statistics
come from:

* blind: GEVD estimate from the noisy and noise-only covariances,
* ``+``: ACP estimate on the clean reverberant target,
* ``++``: ACP cross-statistics between the noisy stack and the clean
  reference-microphone target.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cyclic import (CyclicSet, ModulatedStftStack, assemble_cov, blkdiag, build_cyclic_set,
                     build_stack, cross_vector, narrowband_set)
from .linalg import (LAMBDA_MAX, LAMBDA_MIN, diag_loading_lambda, hermitian, loaded_solve,
                     lowrank_target)
from .pitch import EPS_GUARD, NlsConfig, SmoothingParams, pitch_track
from .stft import AudioBuffer, StftTensor, WindowSpec, istft, stft

logger = logging.getLogger(__name__)

VARIANTS = ("MWF", "MWF+", "MWF++", "cMWF", "cMWF+", "cMWF++", "identity")
_KINDS = {"": "blind", "+": "oracle+", "++": "oracle++"}


def parse_variant(name: str) -> tuple[bool, str]:
    """``"cMWF+"`` -> ``(True, "oracle+")``; identity gives ``(False, "identity")``."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    if name == "identity":
        return False, "identity"
    cyclic = name.startswith("c")
    return cyclic, _KINDS[name[4:] if cyclic else name[3:]]


def narrowband_counterpart(name: str) -> str:
    return name[1:] if name.startswith("c") else name


@dataclass(frozen=True)
class BinRouting:
    """Per-bin choice between cyclic and narrowband processing.

    ``nearest`` is the index ``c`` of the closest shift for cyclic bins
    (ties go to the lower ``c``) and ``-1`` for narrowband bins.
    """

    cyclic: np.ndarray
    nearest: np.ndarray
    eps_bin: float
    delta_omega: float

    @property
    def cyclic_bins(self) -> np.ndarray:
        return np.flatnonzero(self.cyclic)

    @property
    def narrowband_bins(self) -> np.ndarray:
        return np.flatnonzero(~self.cyclic)


def route_bins(K: int, fs: float, cyclic_set: CyclicSet, eps_bin: float = 1.5,
               harmonics: bool = False) -> BinRouting:
    """Bin ``k`` is cyclic iff ``|w_k - a_c| < eps_bin * 2pi/K`` for some shift ``a_c``.

    With ``harmonics`` the test runs against every multiple of ``alpha1``
    below Nyquist instead of only the ``C`` shifts in the set; ``nearest``
    then holds the harmonic number. ``fs`` only fixes the unit bookkeeping:
    both sides are compared in rad/sample, the same test as in Hz with ``fs/K``.
    """
    n_bins = K // 2 + 1
    delta = 2 * np.pi / K
    omega = delta * np.arange(n_bins)
    if cyclic_set.alpha1 <= 0 or eps_bin <= 0:
        return BinRouting(np.zeros(n_bins, bool), np.full(n_bins, -1), eps_bin, delta)
    if harmonics:
        centres = cyclic_set.alpha1 * np.arange(int(np.floor(np.pi / cyclic_set.alpha1)) + 1)
    else:
        centres = np.asarray(cyclic_set.shifts)
    dist = np.abs(omega[:, None] - centres[None, :])
    nearest = np.argmin(dist, axis=1)  # argmin keeps the lower index on ties
    cyclic = dist[np.arange(n_bins), nearest] < eps_bin * delta
    return BinRouting(cyclic, np.where(cyclic, nearest, -1), eps_bin, delta)


def no_routing(K: int, eps_bin: float = 1.5) -> BinRouting:
    """Every bin narrowband."""
    n_bins = K // 2 + 1
    return BinRouting(np.zeros(n_bins, bool), np.full(n_bins, -1), eps_bin, 2 * np.pi / K)


@dataclass
class BeamformerWeights:
    """Weights per routed bin: ``cyclic`` is ``(n_cyc, M*C)``, ``narrowband`` is ``(n_nb, M)``."""

    cyclic: np.ndarray
    narrowband: np.ndarray
    routing: BinRouting
    variant: str
    M: int
    loading: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fallback_bins: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __post_init__(self):
        if not (np.all(np.isfinite(self.cyclic)) and np.all(np.isfinite(self.narrowband))):
            raise FloatingPointError("beamformer weights contain non-finite values")


def _e0_column(S: np.ndarray, ref: int) -> np.ndarray:
    return S[..., :, ref]


def mwf_weights(R_x: np.ndarray, R_d: np.ndarray, lam, ref: int = 0) -> np.ndarray:
    """``(R_x + lam I)^{-1} R_d e_ref`` for a stack of bins."""
    return loaded_solve(R_x, lam, _e0_column(R_d, ref))


def _solve_lowrank(S_x, S_v, rank, bounds, ref):
    S_d = lowrank_target(S_x, S_v, rank)
    lam = diag_loading_lambda(S_d, *bounds)
    return loaded_solve(S_x, lam, _e0_column(S_d, ref)), lam


def mwf_weights_blind(R_x, R_v, lambda_bounds=(LAMBDA_MIN, LAMBDA_MAX), ref: int = 0):
    """Rank-1 GEVD target estimate plugged into the loaded MWF. Returns ``(w, lam)``."""
    return _solve_lowrank(R_x, R_v, 1, lambda_bounds, ref)


def cmwf_weights_blind(S_x: np.ndarray, S_v: np.ndarray, cyclic_set: CyclicSet,
                       lambda_bounds=(LAMBDA_MIN, LAMBDA_MAX), M: int | None = None,
                       ref: int = 0):
    """Blind cMWF from a rank-``C`` GEVD target estimate.

    ``S_v`` must already be block-diagonal. Bins where the decomposition
    fails fall back to the blind MWF on the unshifted ``M x M`` block,
    zero-padded to ``M*C``. Returns ``(w, lam, fallback_bins)``.
    """
    C = cyclic_set.C
    D = S_x.shape[-1]
    M = M if M is not None else D // C
    if M * C != D:
        raise ValueError(f"stack dimension {D} does not match M={M}, C={C}")
    try:
        w, lam = _solve_lowrank(S_x, S_v, C, lambda_bounds, ref)
        return w, lam, np.zeros(0, int)
    except np.linalg.LinAlgError:
        pass
    w = np.zeros(S_x.shape[:-1], complex)
    lam = np.zeros(S_x.shape[0])
    failed = []
    for k in range(S_x.shape[0]):
        try:
            w[k], lam[k] = _solve_lowrank(S_x[k], S_v[k], C, lambda_bounds, ref)
        except np.linalg.LinAlgError:
            failed.append(k)
            w[k, :M], lam[k] = mwf_weights_blind(S_x[k, :M, :M], S_v[k, :M, :M], lambda_bounds, ref)
    logger.warning("GEVD failed at %d bin(s); narrowband MWF used there", len(failed))
    return w, lam, np.asarray(failed, int)


def cmwf_weights_oracle_plus(S_d: np.ndarray, S_v: np.ndarray,
                             lambda_bounds=(LAMBDA_MIN, LAMBDA_MAX), ref: int = 0):
    """``(S_d + S_v + lam I)^{-1} S_d e_ref`` with loading from ``trace(S_d)``."""
    lam = diag_loading_lambda(S_d, *lambda_bounds)
    return loaded_solve(S_d + S_v, lam, _e0_column(S_d, ref)), lam


def cmwf_weights_oracle_pp(S_x: np.ndarray, s_xs: np.ndarray, lam) -> np.ndarray:
    """``(S_x + lam I)^{-1} s_xs``; ``lam`` comes from the target ACP trace."""
    return loaded_solve(S_x, lam, s_xs)


def apply_weights(weights: BeamformerWeights, stack: ModulatedStftStack,
                  narrowband: np.ndarray | None = None) -> StftTensor:
    """Single-channel output ``w^H x`` per routed bin.

    ``stack`` must hold the cyclic bins of ``weights.routing`` (in order);
    ``narrowband`` is the ``(M, K/2+1, L)`` plain STFT used for the other
    bins, defaulting to block 0 of ``stack`` when that covers every bin.
    DC and Nyquist are forced real so the synthesised signal is real.
    """
    routing = weights.routing
    n_bins = len(routing.cyclic)
    cyc, nb = routing.cyclic_bins, routing.narrowband_bins
    if narrowband is None:
        if len(stack.bins) != n_bins:
            raise ValueError("narrowband spectra required when the stack covers only some bins")
        narrowband = stack.block(0)
    M, L = weights.M, stack.frame_count
    if narrowband.shape[0] != M or narrowband.shape[1] != n_bins or narrowband.shape[2] != L:
        raise ValueError(f"narrowband spectra shaped {narrowband.shape}, expected ({M}, {n_bins}, {L})")
    out = np.zeros((n_bins, L), complex)
    if len(nb):
        if weights.narrowband.shape != (len(nb), M):
            raise ValueError(f"narrowband weights shaped {weights.narrowband.shape}, "
                             f"expected {(len(nb), M)}")
        out[nb] = np.einsum("km,mkl->kl", weights.narrowband.conj(), narrowband[:, nb])
    if len(cyc):
        pos = np.searchsorted(stack.bins, cyc)
        if np.any(pos >= len(stack.bins)) or np.any(stack.bins[np.minimum(pos, len(stack.bins) - 1)] != cyc):
            raise ValueError("stack does not contain every cyclic bin")
        D = stack.data.shape[0]
        if weights.cyclic.shape != (len(cyc), D):
            raise ValueError(f"cyclic weights shaped {weights.cyclic.shape}, expected {(len(cyc), D)}")
        out[cyc] = np.einsum("kd,dkl->kl", weights.cyclic.conj(), stack.data[:, pos])
    out[0] = out[0].real
    if stack.win.length % 2 == 0:
        out[-1] = out[-1].real
    return StftTensor(out[None], stack.win, stack.n_samples, stack.fs, True)


ROUTING_MODES = ("harmonics", "shifts")


@dataclass(frozen=True)
class EnhanceConfig:
    """Pipeline settings.

    ``routing`` picks which frequencies make a bin cyclic: every harmonic
    of the fundamental (``"harmonics"``) or only the ``C`` shifts of the
    set (``"shifts"``).
    """

    K: int = 512
    R: int = 128
    C: int = 5
    eps_bin: float = 1.5
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX
    beta: float = 0.05
    D0: float = 0.005
    D1: float = 0.2
    eps_guard: float = EPS_GUARD
    burn_in: int = 10
    reset_on_update: bool = False
    ref_mic: int = 0
    routing: str = "harmonics"

    def __post_init__(self):
        if self.C < 1:
            raise ValueError(f"C must be >= 1, got {self.C}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min exceeds lambda_max")
        if self.routing not in ROUTING_MODES:
            raise ValueError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")
        if not WindowSpec(self.K, self.R).is_cola:
            raise ValueError(f"(K={self.K}, R={self.R}) does not satisfy COLA for sqrt-hann")

    @property
    def win(self) -> WindowSpec:
        return WindowSpec(self.K, self.R)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lambda_min, self.lambda_max

    @property
    def smoothing(self) -> SmoothingParams:
        return SmoothingParams(self.D0, self.D1, self.eps_guard)

    def route(self, fs: float, cyclic_set: CyclicSet) -> BinRouting:
        return route_bins(self.K, fs, cyclic_set, self.eps_bin, self.routing == "harmonics")


@dataclass
class EnhanceResult:
    audio: AudioBuffer
    weights: BeamformerWeights | None
    diagnostics: dict


def _cov(X: np.ndarray) -> np.ndarray:
    """``(1/L) sum_l x x^H`` per bin for ``X`` shaped ``(M, bins, L)``."""
    return hermitian(np.einsum("ikl,jkl->kij", X, X.conj()) / X.shape[-1])


def _identity_weights(n: int, D: int, ref: int) -> np.ndarray:
    w = np.zeros((n, D), complex)
    w[:, ref] = 1.0
    return w


def _solve_variant(kind: str, S_x, S_v, S_d, s_xs, rank: int, bounds, ref: int):
    """Weights and loading for one statistics source; ``rank`` is the GEVD rank."""
    if kind == "identity":
        return _identity_weights(S_x.shape[0], S_x.shape[-1], ref), np.zeros(S_x.shape[0])
    if kind == "blind":
        return _solve_lowrank(S_x, S_v, rank, bounds, ref)
    if kind == "oracle+":
        return cmwf_weights_oracle_plus(S_d, S_v, bounds, ref)
    lam = diag_loading_lambda(S_d, *bounds)
    return cmwf_weights_oracle_pp(S_x, s_xs, lam), lam


class BatchEnhancer:
    """Whole-signal statistics for one scene, shared across variants.

    ``f0_hz`` is the known or estimated fundamental; ``None`` or ``0``
    means unvoiced, so every variant reduces to its narrowband form. Oracle
    variants need the clean reverberant ``target`` with all channels.
    """

    def __init__(self, noisy: AudioBuffer, noise_only: AudioBuffer, f0_hz: float | None,
                 config: EnhanceConfig = EnhanceConfig(), target: AudioBuffer | None = None):
        if noisy.n_channels != noise_only.n_channels:
            raise ValueError("noisy and noise-only inputs have different channel counts")
        if noise_only.fs != noisy.fs:
            raise ValueError("noisy and noise-only inputs have different sampling rates")
        if target is not None and target.samples.shape != noisy.samples.shape:
            raise ValueError("target and noisy shapes differ")
        if not 0 <= config.ref_mic < noisy.n_channels:
            raise ValueError(f"reference mic {config.ref_mic} out of range for "
                             f"{noisy.n_channels} channels")
        self.noisy, self.noise_only, self.target = noisy, noise_only, target
        self.config = config
        self.M = noisy.n_channels
        self.voiced = f0_hz is not None and f0_hz > 0
        self.f0_hz = float(f0_hz) if self.voiced else 0.0
        win = config.win
        self.X = stft(noisy, win).bins
        self.V = stft(noise_only, win).bins
        self.D = stft(target, win).bins if target is not None else None
        if self.voiced:
            self.cyclic_set = build_cyclic_set(2 * np.pi * self.f0_hz / noisy.fs, config.C)
            self.routing = config.route(noisy.fs, self.cyclic_set)
        else:
            self.cyclic_set = narrowband_set()
            self.routing = no_routing(config.K, config.eps_bin)
        self._cache: dict = {}

    def _narrow_stats(self):
        if "narrow" not in self._cache:
            R_d = _cov(self.D) if self.D is not None else None
            r_xs = (np.einsum("mkl,kl->km", self.X, self.D[self.config.ref_mic].conj())
                    / self.X.shape[-1]) if self.D is not None else None
            self._cache["narrow"] = (_cov(self.X), _cov(self.V), R_d, r_xs)
        return self._cache["narrow"]

    def _cyclic_stats(self, need_target: bool):
        bins, cset, win = self.routing.cyclic_bins, self.cyclic_set, self.config.win
        if "cyclic" not in self._cache:
            sx = build_stack(self.noisy, cset, win, bins)
            sv = build_stack(self.noise_only, cset, win, bins)
            S_x = assemble_cov(sx, role="noisy").matrices
            S_v = blkdiag(assemble_cov(sv, role="noise").matrices, self.M)
            self._cache["cyclic"] = [sx, S_x, S_v, None, None]
        entry = self._cache["cyclic"]
        if need_target and entry[3] is None:
            sd = build_stack(self.target, cset, win, bins)
            entry[3] = assemble_cov(sd, role="target").matrices
            entry[4] = cross_vector(entry[0], self.D[self.config.ref_mic][bins])
        return entry

    def weights(self, variant: str) -> BeamformerWeights:
        cyclic, kind = parse_variant(variant)
        if kind.startswith("oracle") and self.target is None:
            raise ValueError(f"variant {variant} needs the clean target")
        cfg, M, ref = self.config, self.M, self.config.ref_mic
        routing = self.routing if cyclic else no_routing(cfg.K, cfg.eps_bin)
        nb, cyc = routing.narrowband_bins, routing.cyclic_bins
        R_x, R_v, R_d, r_xs = self._narrow_stats()
        sel = lambda A: None if A is None else A[nb]
        w_nb, lam_nb = _solve_variant(kind, R_x[nb], R_v[nb], sel(R_d), sel(r_xs), 1,
                                      cfg.bounds, ref)
        D_stack = M * self.cyclic_set.C
        w_cyc = np.zeros((len(cyc), D_stack), complex)
        lam_cyc = np.zeros(len(cyc))
        failed = np.zeros(0, int)
        if len(cyc):
            _, S_x, S_v, S_d, s_xs = self._cyclic_stats(kind.startswith("oracle"))
            if kind == "blind":
                w_cyc, lam_cyc, failed = cmwf_weights_blind(S_x, S_v, self.cyclic_set,
                                                            cfg.bounds, M, ref)
            else:
                w_cyc, lam_cyc = _solve_variant(kind, S_x, S_v, S_d, s_xs, self.cyclic_set.C,
                                                cfg.bounds, ref)
        loading = np.zeros(cfg.K // 2 + 1)
        loading[nb] = lam_nb
        loading[cyc] = lam_cyc
        return BeamformerWeights(w_cyc, w_nb, routing, variant, M, loading, cyc[failed])

    def run(self, variant: str = "cMWF") -> EnhanceResult:
        weights = self.weights(variant)
        cyclic, _ = parse_variant(variant)
        if len(weights.routing.cyclic_bins):
            stack = self._cyclic_stats(False)[0]
        else:
            stack = ModulatedStftStack(np.zeros((self.M, 0, self.X.shape[-1]), complex),
                                       np.zeros(0, int), narrowband_set(), self.M,
                                       self.config.win, self.noisy.n_samples, self.noisy.fs)
        audio = istft(apply_weights(weights, stack, self.X))
        notes = []
        if cyclic and not self.voiced:
            notes.append("unvoiced input: narrowband MWF on every bin")
        if len(weights.fallback_bins):
            notes.append(f"GEVD fallback to MWF at bins {weights.fallback_bins.tolist()}")
        diagnostics = {
            "variant": variant,
            "f0_hz": self.f0_hz,
            "C": self.cyclic_set.C if cyclic else 1,
            "cyclic_bins": int(len(weights.routing.cyclic_bins)),
            "fallback_bins": weights.fallback_bins.tolist(),
            "lambda_min_used": float(weights.loading.min()),
            "lambda_max_used": float(weights.loading.max()),
            "notes": notes,
        }
        return EnhanceResult(audio, weights, diagnostics)


def batch_enhance(noisy: AudioBuffer, noise_only: AudioBuffer, f0_hz: float | None,
                  config: EnhanceConfig = EnhanceConfig(), variant: str = "cMWF",
                  target: AudioBuffer | None = None) -> EnhanceResult:
    """Enhance ``noisy`` with statistics averaged over the whole signal."""
    return BatchEnhancer(noisy, noise_only, f0_hz, config, target).run(variant)


# ---------------------------------------------------------------- recursive mode

FRAME_FIELDS = ("frame", "alpha_bar_hz", "delta_alpha", "voiced", "mode", "cyclic_bins",
                "lambda_min", "lambda_median", "lambda_max")


@dataclass
class RecursiveState:
    """Running stacked statistics for the current cyclic set."""

    cyclic_set: CyclicSet
    beta: float
    S_x: np.ndarray
    S_d: np.ndarray | None = None
    s_xs: np.ndarray | None = None
    frames: int = 0

    def update(self, x: np.ndarray, d: np.ndarray | None = None, s: np.ndarray | None = None):
        """Exponential update with one stacked frame ``x`` shaped ``(bins, D)``."""
        b = self.beta
        self.S_x = (1 - b) * self.S_x + b * (x[:, :, None] * x[:, None, :].conj())
        if d is not None:
            self.S_d = (1 - b) * self.S_d + b * (d[:, :, None] * d[:, None, :].conj())
            self.s_xs = (1 - b) * self.s_xs + b * (x * s[:, None].conj())
        self.frames += 1

    @property
    def scale(self) -> float:
        """Undo the zero start of the running average."""
        return 1.0 / (1.0 - (1.0 - self.beta) ** self.frames)


def _frame_matrix(x: np.ndarray, win: WindowSpec) -> np.ndarray:
    """Windowed frames ``(M, L, K)`` with the same zero padding as :func:`stft`."""
    K, R = win.length, win.hop
    M, N = x.shape
    L = 1 + -(-(N - K) // R)
    pad = (L - 1) * R + K - N
    if pad > 0:
        x = np.concatenate([x, np.zeros((M, pad))], axis=1)
    idx = np.arange(K)[None, :] + R * np.arange(L)[:, None]
    return x[:, idx] * win.window


def _stacked_frames(frames: np.ndarray, frame_idx: np.ndarray, shifts: np.ndarray,
                    win: WindowSpec) -> np.ndarray:
    """Stacked spectra ``(len(frame_idx), K/2+1, M*C)`` at the given frames.

    Block ``c`` equals frame ``l`` of ``stft(modulate(x, a_c))``; unshifted
    blocks use the real transform so they match :func:`stft` exactly.
    """
    K, R = win.length, win.hop
    n_bins = K // 2 + 1
    sub = frames[:, frame_idx]
    blocks = []
    for alpha in shifts:
        if alpha == 0:
            spec = np.fft.rfft(sub, axis=-1)
        else:
            n = frame_idx[:, None] * R + np.arange(K)[None, :]
            spec = np.fft.fft(sub * np.exp(1j * (float(alpha) % (2 * np.pi)) * n), axis=-1)[..., :n_bins]
        blocks.append(spec)
    # (C*M, L', bins) -> (L', bins, C*M)
    return np.transpose(np.concatenate(blocks, axis=0), (1, 2, 0))


@dataclass
class RecursiveResult:
    audio: AudioBuffer
    frames: list
    track: object

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=FRAME_FIELDS)
            writer.writeheader()
            writer.writerows(self.frames)

    @property
    def modes(self) -> np.ndarray:
        return np.array([row["mode"] for row in self.frames])


def recursive_enhance(noisy: AudioBuffer, noise_only: AudioBuffer,
                      config: EnhanceConfig = EnhanceConfig(), variant: str = "cMWF",
                      track=None, target: AudioBuffer | None = None,
                      track_source: AudioBuffer | None = None,
                      nls: NlsConfig = NlsConfig()) -> RecursiveResult:
    """Frame-by-frame enhancement with exponentially averaged statistics.

    ``track`` is a :class:`~cmwf.pitch.PitchTrack` with one entry per STFT
    frame; when omitted it is estimated from ``track_source`` (default: the
    reference channel of ``noisy``). The smoothed fundamental selects the
    cyclic set, which is rebuilt only when it changes. Frames with
    ``delta >= D1``, unvoiced frames and frames before any voiced estimate
    use the narrowband variant, taken from the unshifted block of the same
    running statistics. The first ``burn_in`` frames after a (re)start pass
    the reference microphone through unchanged.
    """
    cyclic, kind = parse_variant(variant)
    if kind.startswith("oracle") and target is None:
        raise ValueError(f"variant {variant} needs the clean target")
    if noisy.n_channels != noise_only.n_channels:
        raise ValueError("noisy and noise-only inputs have different channel counts")
    cfg, win = config, config.win
    M, ref, fs = noisy.n_channels, config.ref_mic, noisy.fs
    if not 0 <= ref < M:
        raise ValueError(f"reference mic {ref} out of range for {M} channels")
    frames_x = _frame_matrix(noisy.samples, win)
    frames_d = _frame_matrix(target.samples, win) if target is not None else None
    L = frames_x.shape[1]
    n_bins = cfg.K // 2 + 1
    if track is None:
        source = track_source if track_source is not None else noisy.channel(ref)
        track = pitch_track(source, win, nls=nls, params=cfg.smoothing)
    if len(track) != L:
        raise ValueError(f"pitch track has {len(track)} frames, signal has {L}")
    C_cfg = cfg.C if cyclic else 1
    V = stft(noise_only, win)

    noise_cache: dict = {}

    def noise_cov(cset: CyclicSet) -> np.ndarray:
        key = (cset.alpha1, cset.C)
        if key not in noise_cache:
            if cset.alpha1 > 0:
                sv = build_stack(noise_only, cset, win)
                noise_cache[key] = blkdiag(assemble_cov(sv, role="noise").matrices, M)
            else:
                R_v = _cov(V.bins)
                noise_cache[key] = np.kron(np.eye(cset.C), np.ones((M, M))) * np.tile(R_v, (1, cset.C, cset.C))
        return noise_cache[key]

    out = np.zeros((n_bins, L), complex)
    rows = []
    state: RecursiveState | None = None
    current = None
    seg_x = seg_d = None
    seg_start = 0
    routing = no_routing(cfg.K, cfg.eps_bin)
    S_v = None
    for ell in range(L):
        a_bar = float(track.smoothed[ell]) if cyclic else 0.0
        if a_bar != current:
            cset = build_cyclic_set(a_bar, C_cfg) if a_bar > 0 else CyclicSet(0.0, np.zeros(C_cfg))
            D_stack = M * cset.C
            if state is None or state.S_x.shape[-1] != D_stack or cfg.reset_on_update:
                zeros = np.zeros((n_bins, D_stack, D_stack), complex)
                state = RecursiveState(cset, cfg.beta, zeros,
                                       zeros.copy() if frames_d is not None else None,
                                       np.zeros((n_bins, D_stack), complex) if frames_d is not None else None)
            state.cyclic_set = cset
            current = a_bar
            # stacked spectra until the next change of the smoothed fundamental
            seg_end = ell + 1
            while seg_end < L and cyclic and float(track.smoothed[seg_end]) == a_bar:
                seg_end += 1
            if not cyclic:
                seg_end = L
            idx = np.arange(ell, seg_end)
            seg_x = _stacked_frames(frames_x, idx, cset.shifts, win)
            seg_d = _stacked_frames(frames_d, idx, cset.shifts, win) if frames_d is not None else None
            seg_start = ell
            routing = cfg.route(fs, cset) if cyclic and a_bar > 0 else no_routing(cfg.K, cfg.eps_bin)
            S_v = noise_cov(cset)
        x = seg_x[ell - seg_start]
        d = seg_d[ell - seg_start] if seg_d is not None else None
        state.update(x, d, d[:, ref] if d is not None else None)

        voiced = bool(track.voiced[ell])
        delta = float(track.delta[ell])
        if state.frames <= cfg.burn_in:
            mode = "burn-in"
        elif cyclic and a_bar > 0 and voiced and delta < cfg.D1:
            mode = "cyclic"
        else:
            mode = "mwf"
        if mode == "burn-in":
            out[:, ell] = x[:, ref]
            lam = np.zeros(1)
            n_cyc = 0
        else:
            sc = state.scale
            S_x = state.S_x * sc
            S_d = state.S_d * sc if state.S_d is not None else None
            s_xs = state.s_xs * sc if state.s_xs is not None else None
            cyc = routing.cyclic_bins if mode == "cyclic" else np.zeros(0, int)
            nb = np.setdiff1d(np.arange(n_bins), cyc)
            lam = np.zeros(n_bins)
            y = np.zeros(n_bins, complex)
            blk = lambda A, bins: None if A is None else A[bins][:, :M, :M]
            w_nb, lam[nb] = _solve_variant(kind, blk(S_x, nb), blk(S_v, nb), blk(S_d, nb),
                                           None if s_xs is None else s_xs[nb, :M], 1,
                                           cfg.bounds, ref)
            y[nb] = np.einsum("km,km->k", w_nb.conj(), x[nb, :M])
            if len(cyc):
                if kind == "blind":
                    w_c, lam[cyc], _ = cmwf_weights_blind(S_x[cyc], S_v[cyc], state.cyclic_set,
                                                          cfg.bounds, M, ref)
                else:
                    w_c, lam[cyc] = _solve_variant(kind, S_x[cyc], S_v[cyc],
                                                   None if S_d is None else S_d[cyc],
                                                   None if s_xs is None else s_xs[cyc],
                                                   state.cyclic_set.C, cfg.bounds, ref)
                y[cyc] = np.einsum("kd,kd->k", w_c.conj(), x[cyc])
            out[:, ell] = y
            n_cyc = len(cyc)
        rows.append({
            "frame": ell,
            "alpha_bar_hz": float(a_bar * fs / (2 * np.pi)),
            "delta_alpha": float(delta),
            "voiced": int(voiced),
            "mode": mode,
            "cyclic_bins": n_cyc,
            "lambda_min": float(lam.min()),
            "lambda_median": float(np.median(lam)),
            "lambda_max": float(lam.max()),
        })
    out[0] = out[0].real
    out[-1] = out[-1].real
    audio = istft(StftTensor(out[None], win, noisy.n_samples, fs, True))
    return RecursiveResult(audio, rows, track)
