"""Synthetic harmonic targets, room impulse responses and noisy array scenes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.signal

from .stft import DEFAULT_FS, AudioBuffer, read_wav, write_wav

SPEED_OF_SOUND = 343.0
MIC_SPACING = 0.08
DEFAULT_RT60 = 0.61


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class HarmonicSourceParams:
    """Distributions of the random harmonic source.

    ``envelope_var`` is the variance of the white Gaussian samples that are
    lowpass filtered into the amplitude envelope.
    """

    f0_range: tuple[float, float] = (60.0, 250.0)
    amp_range: tuple[float, float] = (1.0, 10.0)
    envelope_mean: float = 0.5
    envelope_var: float = 10.0
    envelope_cutoff: float = 5.0
    envelope_order: int = 4
    duration: float = 5.0
    f0: float | None = None


@dataclass(frozen=True)
class HarmonicTruth:
    f0: float
    omega0: float
    H: int
    amplitudes: np.ndarray
    phases: np.ndarray
    envelope: np.ndarray = field(repr=False)


def harmonic_count(f0: float, fs: float) -> int:
    """Largest ``H`` with ``f0 * H < fs / 2``."""
    H = int(math.ceil(fs / 2 / f0)) - 1
    if H < 1:
        raise ValueError(f"f0 = {f0} Hz leaves no harmonic below Nyquist")
    return H


def _butter_sos(order: int, fc: float, fs: float) -> np.ndarray:
    if not 0 < fc < fs / 2:
        raise ValueError(f"cutoff {fc} Hz must lie in (0, {fs / 2})")
    return scipy.signal.butter(order, fc, btype="low", output="sos", fs=fs)


def butterworth_lowpass(x: AudioBuffer, order: int = 4, fc: float = 5.0) -> AudioBuffer:
    """Causal Butterworth lowpass realised as cascaded biquads."""
    sos = _butter_sos(order, fc, x.fs)
    return AudioBuffer(scipy.signal.sosfilt(sos, x.samples, axis=-1), x.fs)


def gen_harmonic_target(params: HarmonicSourceParams = HarmonicSourceParams(),
                        fs: float = DEFAULT_FS, N: int | None = None, seed=None
                        ) -> tuple[AudioBuffer, HarmonicTruth]:
    """``B(n) * sum_h D_h cos(w0 n h + phi_h)`` with every harmonic below Nyquist."""
    rng = _rng(seed)
    if N is None:
        N = int(round(params.duration * fs))
    f0 = params.f0 if params.f0 is not None else rng.uniform(*params.f0_range)
    H = harmonic_count(f0, fs)
    D = rng.uniform(*params.amp_range, size=H)
    phi = rng.uniform(-np.pi, np.pi, size=H)
    noise = rng.normal(params.envelope_mean, math.sqrt(params.envelope_var), size=N)
    sos = _butter_sos(params.envelope_order, params.envelope_cutoff, fs)
    # start the filter in steady state at the mean level, avoiding a ramp-up
    zi = scipy.signal.sosfilt_zi(sos) * params.envelope_mean
    B, _ = scipy.signal.sosfilt(sos, noise, zi=zi)
    omega0 = 2 * np.pi * f0 / fs
    n = np.arange(N)
    y = np.zeros(N)
    for h in range(1, H + 1):
        y += D[h - 1] * np.cos(omega0 * h * n + phi[h - 1])
    y *= B
    return AudioBuffer(y, fs), HarmonicTruth(float(f0), omega0, H, D, phi, B)


def gen_note_sequence(params: HarmonicSourceParams = HarmonicSourceParams(),
                      fs: float = DEFAULT_FS, n_notes: int = 2, note_seconds: float = 1.0,
                      min_jump: float = 0.3, seed=None
                      ) -> tuple[AudioBuffer, list[HarmonicTruth]]:
    """Concatenated harmonic notes with piecewise-constant fundamentals.

    Consecutive fundamentals differ by at least ``min_jump`` relative to
    the earlier note; each note has its own amplitudes, phases and envelope.
    """
    if n_notes < 1:
        raise ValueError("need at least one note")
    rng = _rng(seed)
    N = int(round(note_seconds * fs))
    pieces, truths = [], []
    prev = None
    for _ in range(n_notes):
        f0 = rng.uniform(*params.f0_range)
        while prev is not None and abs(f0 - prev) / prev < min_jump:
            f0 = rng.uniform(*params.f0_range)
        y, truth = gen_harmonic_target(replace(params, f0=f0), fs, N, rng)
        pieces.append(y.samples[0])
        truths.append(truth)
        prev = f0
    return AudioBuffer(np.concatenate(pieces), fs), truths


@dataclass(frozen=True)
class RirSpec:
    """Room impulse response description.

    Synthetic RIRs place a unit direct path at the geometric delay of each
    microphone of a uniform linear array, followed by an exponentially
    decaying white-noise tail ``drr_db`` below the direct path.
    """

    kind: str = "synthetic"
    rt60: float = DEFAULT_RT60
    angle_deg: float = 90.0
    distance: float = 1.5
    mic_spacing: float = MIC_SPACING
    speed_of_sound: float = SPEED_OF_SOUND
    drr_db: float = 10.0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown RIR kind {self.kind!r}")
        if self.rt60 < 0:
            raise ValueError(f"rt60 must be non-negative, got {self.rt60}")
        if self.kind == "file" and not self.path:
            raise ValueError("file RIRs need a path")


def mic_positions(M: int, spacing: float = MIC_SPACING) -> np.ndarray:
    """x-coordinates of a uniform linear array centred on the origin."""
    return (np.arange(M) - (M - 1) / 2) * spacing


def direct_delays(spec: RirSpec, M: int, fs: float) -> np.ndarray:
    """Propagation delay to each microphone in samples."""
    theta = np.deg2rad(spec.angle_deg)
    src = spec.distance * np.array([np.cos(theta), np.sin(theta)])
    mics = np.stack([mic_positions(M, spec.mic_spacing), np.zeros(M)], axis=1)
    return np.linalg.norm(src[None, :] - mics, axis=1) / spec.speed_of_sound * fs


def fractional_delay(delay: float, length: int, half_width: int = 32) -> np.ndarray:
    """Hann-windowed sinc impulse at ``delay`` samples; integer delays are exact."""
    h = np.zeros(length)
    k = int(round(delay))
    if abs(delay - k) < 1e-9:
        h[k] = 1.0
        return h
    n = np.arange(max(0, int(np.floor(delay)) - half_width + 1),
                  min(length, int(np.floor(delay)) + half_width + 1))
    t = n - delay
    h[n] = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / half_width))
    return h


def gen_rir(spec: RirSpec, M: int, fs: float = DEFAULT_FS, seed=None) -> np.ndarray:
    """Impulse responses shaped ``(M, length)``."""
    if spec.kind == "file":
        path = Path(spec.path)
        if not path.is_file():
            raise FileNotFoundError(f"RIR file not found: {path}")
        rir = read_wav(path)
        if rir.fs != fs:
            raise ValueError(f"RIR sampled at {rir.fs} Hz, scene runs at {fs} Hz")
        if rir.n_channels < M:
            raise ValueError(f"RIR file has {rir.n_channels} channels, need {M}")
        return np.array(rir.samples[:M])
    rng = _rng(seed)
    delays = direct_delays(spec, M, fs)
    half_width = 32
    tail_len = int(math.ceil(spec.rt60 * fs))
    length = int(math.ceil(delays.max())) + half_width + tail_len + 1
    rirs = np.zeros((M, length))
    for m, delay in enumerate(delays):
        rirs[m] = fractional_delay(delay, length, half_width)
        if tail_len == 0:
            continue
        start = int(math.floor(delay)) + 1
        t = np.arange(length - start) / fs
        tail = rng.standard_normal(length - start) * np.exp(-3 * np.log(10) * t / spec.rt60)
        tail *= math.sqrt(10 ** (-spec.drr_db / 10) * np.sum(rirs[m] ** 2) / np.sum(tail ** 2))
        rirs[m, start:] += tail
    return rirs


@dataclass(frozen=True)
class SceneConfig:
    M: int = 2
    isnr_db: float = -10.0
    sensor_snr_db: float = 30.0
    fs: float = DEFAULT_FS
    rt60: float = DEFAULT_RT60
    noise_only_seconds: float = 2.0
    ref_mic: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"need at least one microphone, got M={self.M}")


@dataclass(frozen=True)
class Scene:
    """``noisy = target + noise`` (all ``M`` channels) plus a noise-only take."""

    noisy: AudioBuffer
    target: AudioBuffer
    noise: AudioBuffer
    noise_only: AudioBuffer
    dry: AudioBuffer | None = None
    truth: HarmonicTruth | None = None
    meta: dict = field(default_factory=dict)

    def export(self, out_dir: str | Path, bits: int = 32) -> Path:
        """Write noisy/target/noise/noise_only WAVs and a ``scene.txt`` sidecar."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("noisy", "target", "noise", "noise_only"):
            write_wav(out / f"{name}.wav", getattr(self, name), bits)
        with open(out / "scene.txt", "w") as fh:
            for k, v in sorted(self.meta.items()):
                fh.write(f"{k} = {v}\n")
        return out


def _convolve(x: np.ndarray, rirs: np.ndarray) -> np.ndarray:
    return scipy.signal.fftconvolve(x[None, :], rirs, axes=-1)[:, :x.shape[-1]]


def mix_scene(target: AudioBuffer, config: SceneConfig, rirs_target: np.ndarray,
              rirs_interferer: np.ndarray, seed=None) -> Scene:
    """Reverberant target plus a white-noise interferer and sensor noise.

    The interferer is scaled to ``isnr_db`` at the reference microphone and
    each channel's sensor noise to ``sensor_snr_db`` against that channel's
    reverberant target.
    """
    rng = _rng(seed)
    M, fs, ref = config.M, target.fs, config.ref_mic
    if rirs_target.shape[0] != M or rirs_interferer.shape[0] != M:
        raise ValueError("RIR channel counts must equal config.M")
    s = target.samples[0]
    N = len(s)
    d = _convolve(s, rirs_target)
    d_energy = np.sum(d ** 2, axis=1)
    if d_energy[ref] <= 0:
        raise ValueError("target has zero energy at the reference microphone")
    interf = _convolve(rng.standard_normal(N), rirs_interferer)
    gain = math.sqrt(d_energy[ref] / np.sum(interf[ref] ** 2) * 10 ** (-config.isnr_db / 10))
    sensor = rng.standard_normal((M, N))
    sensor_gain = np.sqrt(d_energy / np.sum(sensor ** 2, axis=1) * 10 ** (-config.sensor_snr_db / 10))
    v = gain * interf + sensor_gain[:, None] * sensor
    x = d + v

    # separate noise realisation, same spatial path and noise levels
    n_only = int(round(config.noise_only_seconds * fs))
    sigma = np.sqrt(d_energy / N * 10 ** (-config.sensor_snr_db / 10))
    noise_only = (gain * _convolve(rng.standard_normal(n_only), rirs_interferer)
                  + sigma[:, None] * rng.standard_normal((M, n_only)))
    meta = {"M": M, "fs": fs, "isnr_db": config.isnr_db, "sensor_snr_db": config.sensor_snr_db}
    return Scene(AudioBuffer(x, fs), AudioBuffer(d, fs), AudioBuffer(v, fs),
                 AudioBuffer(noise_only, fs), target, None, meta)


def simulate_scene(config: SceneConfig = SceneConfig(),
                   source: HarmonicSourceParams = HarmonicSourceParams(),
                   seed=None, peak: float = 0.5, notes: int = 1,
                   note_seconds: float = 1.0) -> Scene:
    """Full random scene: harmonic source, random target/interferer directions.

    The dry source is normalised to ``peak`` absolute amplitude. With
    ``notes > 1`` the source is a sequence of ``note_seconds`` long notes and
    ``truth`` holds a list, one entry per note.
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_src, s_rir_t, s_rir_i, s_mix, s_geo = seq.spawn(5)
    if notes == 1:
        dry, truth = gen_harmonic_target(source, config.fs, seed=s_src)
    else:
        dry, truth = gen_note_sequence(source, config.fs, notes, note_seconds, seed=s_src)
    dry = AudioBuffer(dry.samples * (peak / np.max(np.abs(dry.samples))), config.fs)
    geo = np.random.default_rng(s_geo)
    angle_t = geo.uniform(30.0, 150.0)
    # keep the interferer at least 20 degrees away from the target
    angle_i = angle_t
    while abs(angle_i - angle_t) < 20.0:
        angle_i = geo.uniform(30.0, 150.0)
    spec_t = RirSpec(rt60=config.rt60, angle_deg=angle_t, distance=geo.uniform(1.0, 2.0))
    spec_i = RirSpec(rt60=config.rt60, angle_deg=angle_i, distance=geo.uniform(1.0, 2.0))
    rt = gen_rir(spec_t, config.M, config.fs, s_rir_t)
    ri = gen_rir(spec_i, config.M, config.fs, s_rir_i)
    scene = mix_scene(dry, config, rt, ri, s_mix)
    f0s = [t.f0 for t in truth] if isinstance(truth, list) else [truth.f0]
    meta = dict(scene.meta, f0_hz=" ".join(f"{f:.6f}" for f in f0s), target_angle_deg=angle_t,
                interferer_angle_deg=angle_i, rt60=config.rt60,
                seed=seq.entropy if seed is not None else "none")
    return Scene(scene.noisy, scene.target, scene.noise, scene.noise_only, dry, truth, meta)


def scene_config_dict(config: SceneConfig) -> dict:
    return asdict(config)
