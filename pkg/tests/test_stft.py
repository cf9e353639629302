import numpy as np
import pytest
import scipy.signal

from cmwf.stft import (AudioBuffer, ComplexAudioBuffer, StftTensor, WindowSpec, frame_count,
                       interior, istft, modulate, read_wav, stft, write_wav)

WIN = WindowSpec()


@pytest.mark.parametrize("N,K,R", [(512, 512, 128), (513, 512, 128), (16000, 512, 128)])
def test_frame_count_matches_ceiling_formula(frozen, N, K, R):
    assert frame_count(N, K, R) == frozen["frame_count"][f"{N},{K},{R}"]


def test_frame_count_rejects_short_signal():
    with pytest.raises(ValueError):
        frame_count(511, 512, 128)


def test_stft_matches_naive_windowed_dft(frozen):
    ref = frozen["stft"]
    x = np.random.default_rng(ref["signal_seed"]).standard_normal((2, ref["N"]))
    S = stft(AudioBuffer(x), WindowSpec(ref["K"], ref["R"]))
    assert S.frame_count == ref["L"]
    expected = np.array(ref["re"]) + 1j * np.array(ref["im"])
    got = S.bins[:, ref["bins"], :]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_stft_of_one_second_has_122_frames():
    assert stft(AudioBuffer(np.zeros(16000)), WIN).frame_count == 122


def test_zero_input_gives_zero_tensor():
    assert not np.any(stft(AudioBuffer(np.zeros((2, 2000))), WIN).bins)


def test_cosine_on_bin_64_peaks_at_bin_64():
    n = np.arange(4096)
    S = stft(AudioBuffer(np.cos(2 * np.pi * 64 / 512 * n)), WIN)
    assert np.all(np.argmax(np.abs(S.bins[0]), axis=0) == 64)


def test_short_signal_rejected():
    with pytest.raises(ValueError, match="shorter than one window"):
        stft(AudioBuffer(np.ones(100)), WIN)


def test_complex_input_keeps_all_bins():
    S = stft(modulate(AudioBuffer(np.ones(1024)), 0.3), WIN)
    assert S.bins.shape[1] == 512 and not S.onesided


def test_bin_freqs():
    S = stft(AudioBuffer(np.ones(1024)), WIN)
    np.testing.assert_allclose(S.bin_freqs, 2 * np.pi * np.arange(257) / 512)


def test_round_trip_interior_error(rng):
    x = rng.standard_normal((3, 20011))
    y = istft(stft(AudioBuffer(x), WIN)).samples
    sl = interior(x.shape[1], WIN)
    assert np.max(np.abs(y[:, sl] - x[:, sl])) < 1e-10


def test_zero_spectrum_gives_silence():
    spec = StftTensor(np.zeros((1, 257, 21), complex), WIN, 3000)
    out = istft(spec)
    assert out.n_samples == 3000 and not np.any(out.samples)


def test_istft_is_linear(rng):
    a, b = 1.7, -0.4
    S1 = stft(AudioBuffer(rng.standard_normal(5000)), WIN)
    S2 = stft(AudioBuffer(rng.standard_normal(5000)), WIN)
    mix = StftTensor(a * S1.bins + b * S2.bins, WIN, 5000)
    np.testing.assert_allclose(istft(mix).samples,
                               a * istft(S1).samples + b * istft(S2).samples, atol=1e-12)


def test_non_cola_pair_rejected():
    win = WindowSpec(512, 384)
    S = stft(AudioBuffer(np.ones(2048)), win)
    with pytest.raises(ValueError, match="COLA"):
        istft(S)


@pytest.mark.parametrize("K,R", [(500, 128), (512, 0), (512, 1024)])
def test_invalid_window_spec(K, R):
    with pytest.raises(ValueError):
        WindowSpec(K, R)


def test_squared_window_overlap_adds_to_constant():
    w2 = WIN.window ** 2
    total = np.zeros(512 * 8)
    for start in range(0, len(total) - 512 + 1, 128):
        total[start:start + 512] += w2
    mid = total[512:-512]
    assert np.ptp(mid) < 1e-12 * mid.mean()


def test_parseval_per_frame(rng):
    x = rng.standard_normal(4096)
    S = stft(AudioBuffer(x), WIN).bins[0]
    X = np.concatenate([S, np.conj(S[-2:0:-1])], axis=0)
    for ell in (0, 5, 20):
        frame = x[ell * 128:ell * 128 + 512] * WIN.window
        assert np.sum(np.abs(X[:, ell]) ** 2) / 512 == pytest.approx(frame @ frame, rel=1e-10)


def test_modulate_zero_is_identity(rng):
    x = rng.standard_normal((2, 300))
    y = modulate(AudioBuffer(x), 0.0).samples
    assert np.array_equal(y.real, x) and not np.any(y.imag)


def test_modulate_shifts_dft_circularly(rng):
    N, m = 1024, 37
    x = rng.standard_normal(N)
    y = modulate(AudioBuffer(x), 2 * np.pi * m / N).samples[0]
    np.testing.assert_allclose(np.fft.fft(y), np.roll(np.fft.fft(x), m), atol=1e-10)


def test_modulated_cosine_gets_dc_component():
    n = np.arange(2048)
    w0 = 2 * np.pi * 0.05
    y = modulate(AudioBuffer(np.cos(w0 * n)), w0).samples[0]
    # e^{j w0 n} cos(w0 n) = 1/2 + e^{j 2 w0 n}/2
    Y = np.fft.fft(y) / len(n)
    assert abs(Y[0]) == pytest.approx(0.5, abs=1e-3)
    assert abs(Y[0]) > 10 * np.median(np.abs(Y))


def test_modulate_preserves_magnitude(rng):
    x = rng.standard_normal((2, 1000))
    y = modulate(AudioBuffer(x), 1.234).samples
    np.testing.assert_allclose(np.abs(y), np.abs(x), rtol=1e-15)


@pytest.mark.parametrize("alpha", [-0.1, 2 * np.pi])
def test_modulate_rejects_out_of_range(alpha):
    with pytest.raises(ValueError):
        modulate(AudioBuffer(np.ones(10)), alpha)


def test_modulated_stft_equals_bin_shift_for_grid_aligned_alpha(rng):
    x = rng.standard_normal(6000)
    m = 7
    plain = stft(AudioBuffer(x.astype(complex).real), WIN)
    full = np.fft.fft(np.swapaxes(np.fft.irfft(np.swapaxes(plain.bins, 1, 2), 512, axis=-1), 1, 2), axis=1)
    shifted = stft(modulate(AudioBuffer(x), 2 * np.pi * m / 512), WIN).bins[0]
    # frame l starts at sample l*R, so the shift carries the phase e^{j alpha l R}
    phase = np.exp(1j * 2 * np.pi * m / 512 * 128 * np.arange(plain.frame_count))
    np.testing.assert_allclose(shifted, np.roll(full[0], m, axis=0) * phase, atol=1e-8)


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        AudioBuffer(np.ones(3), fs=0)
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        ComplexAudioBuffer(np.array([np.inf + 0j]))
    buf = AudioBuffer(np.ones(5))
    assert buf.n_channels == 1 and not buf.samples.flags.writeable


@pytest.mark.parametrize("bits,tol", [(16, 1 / 2 ** 14), (24, 1 / 2 ** 22), (32, 1e-7)])
def test_wav_round_trip(tmp_path, rng, bits, tol):
    x = 0.5 * rng.uniform(-1, 1, (3, 800))
    path = tmp_path / "x.wav"
    write_wav(path, AudioBuffer(x), bits)
    y = read_wav(path)
    assert y.fs == 16000 and y.samples.shape == x.shape
    assert np.max(np.abs(y.samples - x)) < tol


def test_write_wav_rejects_unknown_depth(tmp_path):
    with pytest.raises(ValueError):
        write_wav(tmp_path / "x.wav", AudioBuffer(np.zeros(10)), 8)


def test_scipy_stft_agrees_on_interior_frames(rng):
    # scipy centres frames with padding; shifting by K/2 aligns its frames with ours
    x = rng.standard_normal(4096)
    ours = stft(AudioBuffer(x), WIN).bins[0]
    _, _, Z = scipy.signal.stft(x, window=WIN.window, nperseg=512, noverlap=384,
                                boundary=None, padded=False, scaling="spectrum")
    Z = Z * WIN.window.sum()
    np.testing.assert_allclose(Z, ours[:, :Z.shape[1]], atol=1e-9)
