import numpy as np
import pytest

from cmwf.beamformer import (VARIANTS, BatchEnhancer, BeamformerWeights, EnhanceConfig,
                             RecursiveState, apply_weights, batch_enhance, cmwf_weights_blind,
                             cmwf_weights_oracle_plus, cmwf_weights_oracle_pp, mwf_weights,
                             mwf_weights_blind, narrowband_counterpart, no_routing, parse_variant,
                             recursive_enhance, route_bins)
from cmwf.cyclic import (CyclicSet, assemble_cov, blkdiag, build_cyclic_set, build_stack,
                         cross_vector, narrowband_set)
from cmwf.harness import si_sdr
from cmwf.linalg import lowrank_target
from cmwf.pitch import pitch_track
from cmwf.scene import (HarmonicSourceParams, RirSpec, SceneConfig, gen_harmonic_target, gen_rir,
                        mix_scene, simulate_scene)
from cmwf.stft import AudioBuffer, WindowSpec, hz_to_rad, interior, stft

FS = 16000
WIN = WindowSpec()


def random_psd(rng, D, shift=0.0):
    G = rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))
    return G @ G.conj().T + shift * np.eye(D)


def test_variant_names():
    assert parse_variant("cMWF++") == (True, "oracle++")
    assert parse_variant("MWF+") == (False, "oracle+")
    assert parse_variant("MWF") == (False, "blind")
    assert parse_variant("identity") == (False, "identity")
    assert narrowband_counterpart("cMWF+") == "MWF+"
    with pytest.raises(ValueError):
        parse_variant("MVDR")


def test_unvoiced_routing_is_all_narrowband():
    r = route_bins(512, FS, CyclicSet(0.0, np.zeros(3)), 1.5)
    assert not r.cyclic.any() and len(r.narrowband_bins) == 257


def test_routing_at_125_hz_three_shifts():
    r = route_bins(512, FS, build_cyclic_set(hz_to_rad(125, FS), 3), 1.5)
    assert r.cyclic_bins.tolist() == [0, 1, 3, 4, 5, 7, 8, 9]
    centres = np.arange(257) * FS / 512
    near = np.min(np.abs(centres[:, None] - np.array([0, 125, 250])[None]), axis=1) < 46.875
    assert np.array_equal(r.cyclic, near)


def test_zero_epsilon_routes_nothing():
    r = route_bins(512, FS, build_cyclic_set(0.1, 3), 0.0)
    assert not r.cyclic.any()


def test_routing_tie_goes_to_lower_shift():
    # bin 2 sits exactly between shifts at bins 1 and 3
    cs = CyclicSet(2 * np.pi / 512, 2 * np.pi / 512 * np.array([0.0, 1.0, 3.0]))
    r = route_bins(512, FS, cs, 1.5)
    assert r.nearest[2] == 1


@pytest.mark.parametrize("harmonics", [False, True])
def test_routing_partitions_bins(harmonics):
    r = route_bins(512, FS, build_cyclic_set(hz_to_rad(97.3, FS), 5), 1.5, harmonics)
    both = np.concatenate([r.cyclic_bins, r.narrowband_bins])
    assert sorted(both.tolist()) == list(range(257))


def test_harmonic_routing_covers_every_harmonic():
    f0 = 140.0
    r = route_bins(512, FS, build_cyclic_set(hz_to_rad(f0, FS), 5), 1.5, harmonics=True)
    for h in range(1, int(8000 / f0) + 1):
        assert r.cyclic[int(round(h * f0 * 512 / FS))]


def test_mwf_identity_examples():
    e0 = np.zeros((2, 2))
    e0[0, 0] = 1
    np.testing.assert_allclose(mwf_weights(np.eye(2), e0, 0.0), [1, 0])
    assert not np.any(mwf_weights(np.eye(2), np.zeros((2, 2)), 1e-4))


def test_mwf_rank_one_closed_form(frozen):
    ref = frozen["mwf_rank1"]
    a = np.array(ref["a_re"]) + 1j * np.array(ref["a_im"])
    R_d = ref["sigma2"] * np.outer(a, a.conj())
    R_x = R_d + ref["delta"] * np.eye(2)
    w = mwf_weights(R_x, R_d, ref["lambda"])
    np.testing.assert_allclose(w, np.array(ref["w_re"]) + 1j * np.array(ref["w_im"]), rtol=1e-12)


def test_rank_one_noiseless_reconstruction(rng):
    a = np.array([1.0, 0.4 + 0.7j, -0.2 + 0.1j])
    s = rng.standard_normal(4000) + 1j * rng.standard_normal(4000)
    sigma2, delta = 2.0, 1e-9
    x = np.outer(a, s) + np.sqrt(delta / 2) * (rng.standard_normal((3, 4000))
                                               + 1j * rng.standard_normal((3, 4000)))
    R_d = sigma2 * np.outer(a, a.conj())
    w = mwf_weights(R_d + delta * np.eye(3), R_d, 0.0)
    y = w.conj() @ x
    target = a[0] * s
    for part in (np.real, np.imag):
        assert si_sdr(part(y), part(target)) > 60


def test_mwf_minimises_loaded_mse(rng):
    # exact statistics of a 4-dimensional stacked instance
    S_d = random_psd(rng, 4)
    S_v = random_psd(rng, 4, shift=0.1)
    S_x = S_d + S_v
    lam = 1e-3
    w = mwf_weights(S_x, S_d, lam)

    def cost(v):
        return (S_d[0, 0] - 2 * np.real(v.conj() @ S_d[:, 0]) + np.real(v.conj() @ S_x @ v)
                + lam * np.real(v.conj() @ v)).real

    best = cost(w)
    for _ in range(1000):
        d = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        d *= 0.01 * np.linalg.norm(w) / np.linalg.norm(d)
        assert cost(w + d) > best


@pytest.fixture(scope="module")
def scene_stats():
    scene = simulate_scene(SceneConfig(), HarmonicSourceParams(duration=2.0), seed=5)
    cs = build_cyclic_set(hz_to_rad(scene.truth.f0, FS), 4)
    bins = np.arange(20, 60)
    sx = build_stack(scene.noisy, cs, WIN, bins)
    sv = build_stack(scene.noise_only, cs, WIN, bins)
    sd = build_stack(scene.target, cs, WIN, bins)
    S_x = assemble_cov(sx).matrices
    S_v = blkdiag(assemble_cov(sv, role="noise").matrices, 2)
    S_d = assemble_cov(sd, role="target").matrices
    s_xs = cross_vector(sx, stft(scene.target, WIN).bins[0][bins])
    return scene, cs, S_x, S_v, S_d, s_xs


def test_blind_cmwf_with_one_shift_equals_blind_mwf(scene_stats):
    _, _, S_x, S_v, _, _ = scene_stats
    w_c, lam_c, failed = cmwf_weights_blind(S_x[:, :2, :2], S_v[:, :2, :2], narrowband_set())
    w_n, lam_n = mwf_weights_blind(S_x[:, :2, :2], S_v[:, :2, :2])
    np.testing.assert_allclose(w_c, w_n, rtol=0, atol=1e-9)
    assert failed.size == 0


def test_blind_cmwf_without_target_is_near_zero(scene_stats):
    _, cs, _, S_v, _, _ = scene_stats
    w, _, _ = cmwf_weights_blind(S_v, S_v, cs)
    assert np.max(np.linalg.norm(w, axis=-1)) < 1e-6


def test_blind_cmwf_normal_equations(scene_stats):
    _, cs, S_x, S_v, _, _ = scene_stats
    w, lam, _ = cmwf_weights_blind(S_x, S_v, cs)
    S_d = lowrank_target(S_x, S_v, cs.C)
    resid = (S_x + lam[:, None, None] * np.eye(S_x.shape[-1])) @ w[..., None] - S_d[:, :, :1]
    assert np.all(np.linalg.norm(resid[..., 0], axis=-1) <= 1e-8 * np.linalg.norm(S_d[:, :, 0], axis=-1))


def test_blind_cmwf_dimension_check(scene_stats):
    _, _, S_x, S_v, _, _ = scene_stats
    with pytest.raises(ValueError):
        cmwf_weights_blind(S_x, S_v, build_cyclic_set(0.1, 3))


def test_blind_cmwf_falls_back_per_bin(scene_stats, caplog):
    _, cs, S_x, S_v, _, _ = scene_stats
    S_x = S_x.copy()
    S_x[3] = np.nan
    with caplog.at_level("WARNING"):
        w, _, failed = cmwf_weights_blind(S_x[:6], S_v[:6], cs)
    assert 3 in failed.tolist()
    assert np.all(w[3, 2:] == 0)
    assert "narrowband" in caplog.text


def test_oracle_plus_pass_through(rng):
    S_d = random_psd(rng, 4, shift=1.0)
    w, _ = cmwf_weights_oracle_plus(S_d, np.zeros((4, 4)), (1e-15, 1e-15))
    np.testing.assert_allclose(w, np.eye(4)[0], atol=1e-10)


def test_oracle_plus_without_target(rng):
    w, lam = cmwf_weights_oracle_plus(np.zeros((4, 4)), random_psd(rng, 4, shift=0.1))
    assert not np.any(w) and lam == 1e-9


def test_oracle_pp_decays_for_uncorrelated_target(rng):
    norms = []
    for L in (500, 8000):
        x = rng.standard_normal((4, L)) + 1j * rng.standard_normal((4, L))
        s = rng.standard_normal(L) + 1j * rng.standard_normal(L)
        S_x = x @ x.conj().T / L
        s_xs = x @ s.conj() / L
        norms.append(np.linalg.norm(cmwf_weights_oracle_pp(S_x, s_xs, 1e-4)))
    assert norms[1] < 0.5 * norms[0]


@pytest.mark.parametrize("variant", ["MWF", "MWF+", "MWF++"])
def test_single_shift_weights_equal_narrowband(short_scene, variant):
    enh = BatchEnhancer(short_scene.noisy, short_scene.noise_only, short_scene.truth.f0,
                        EnhanceConfig(C=1), short_scene.target)
    wc = enh.weights("c" + variant)
    wn = enh.weights(variant)
    full = np.zeros((257, 2), complex)
    full[wc.routing.cyclic_bins] = wc.cyclic
    full[wc.routing.narrowband_bins] = wc.narrowband
    assert len(wc.routing.cyclic_bins) > 0
    np.testing.assert_allclose(full, wn.narrowband, rtol=0, atol=1e-9)


def test_apply_identity_and_zero_weights(rng):
    x = AudioBuffer(rng.standard_normal((2, 3000)))
    stack = build_stack(x, narrowband_set(), WIN)
    routing = no_routing(512)
    w = np.zeros((257, 2), complex)
    w[:, 0] = 1
    out = apply_weights(BeamformerWeights(np.zeros((0, 2)), w, routing, "identity", 2), stack)
    ref = stft(x, WIN).bins[0]
    np.testing.assert_allclose(out.bins[0, 1:-1], ref[1:-1])
    zero = apply_weights(BeamformerWeights(np.zeros((0, 2)), 0 * w, routing, "MWF", 2), stack)
    assert not np.any(zero.bins)


def test_apply_weights_shape_checks(rng):
    x = AudioBuffer(rng.standard_normal((2, 3000)))
    stack = build_stack(x, narrowband_set(), WIN)
    with pytest.raises(ValueError):
        apply_weights(BeamformerWeights(np.zeros((0, 2)), np.zeros((257, 3)), no_routing(512),
                                        "MWF", 2), stack)
    cs = build_cyclic_set(0.1, 2)
    routing = route_bins(512, FS, cs)
    partial = build_stack(x, cs, WIN, routing.cyclic_bins)
    bad = BeamformerWeights(np.zeros((len(routing.cyclic_bins), 4)),
                            np.zeros((len(routing.narrowband_bins), 2)), routing, "cMWF", 2)
    with pytest.raises(ValueError, match="narrowband spectra required"):
        apply_weights(bad, partial)


def test_weights_must_be_finite():
    with pytest.raises(FloatingPointError):
        BeamformerWeights(np.zeros((0, 2)), np.array([[np.nan, 0]]), no_routing(512), "MWF", 2)


def test_output_is_real_with_hermitian_ends(short_scene):
    res = batch_enhance(short_scene.noisy, short_scene.noise_only, short_scene.truth.f0)
    assert res.audio.samples.dtype == np.float64
    X = np.fft.rfft(res.audio.samples[0])
    full = np.concatenate([X, np.conj(X[-2:0:-1])])
    back = np.fft.ifft(full)
    assert np.max(np.abs(back.imag)) < 1e-10 * np.max(np.abs(back.real))


@pytest.mark.parametrize("variant", ["MWF", "MWF+", "MWF++"])
def test_single_shift_pipeline_matches_narrowband(short_scene, variant):
    cfg = EnhanceConfig(C=1)
    enh = BatchEnhancer(short_scene.noisy, short_scene.noise_only, short_scene.truth.f0, cfg,
                        short_scene.target)
    a = enh.run("c" + variant).audio.samples
    b = enh.run(variant).audio.samples
    assert np.max(np.abs(a - b)) < 1e-8


def test_noiseless_oracle_plus_is_near_perfect():
    target, truth = gen_harmonic_target(HarmonicSourceParams(duration=2.0), FS, seed=8)
    target = AudioBuffer(0.5 * target.samples / np.abs(target.samples).max())
    rt = gen_rir(RirSpec(angle_deg=70), 2, FS, seed=1)
    scene = mix_scene(target, SceneConfig(isnr_db=300, sensor_snr_db=300), rt, rt, seed=2)
    res = batch_enhance(scene.target, AudioBuffer(np.zeros((2, 2 * FS))), truth.f0,
                        EnhanceConfig(), "cMWF+", scene.target)
    sl = interior(scene.target.n_samples, WIN)
    assert si_sdr(res.audio.samples[0, sl], scene.target.samples[0, sl]) > 40


def test_default_scene_cyclic_beats_narrowband():
    scene = simulate_scene(SceneConfig(), HarmonicSourceParams(), seed=1)
    enh = BatchEnhancer(scene.noisy, scene.noise_only, scene.truth.f0)
    ref = scene.target.samples[0]
    sl = interior(len(ref), WIN)
    s_in = si_sdr(scene.noisy.samples[0, sl], ref[sl])
    gain = {v: si_sdr(enh.run(v).audio.samples[0, sl], ref[sl]) - s_in for v in ("MWF", "cMWF")}
    assert gain["cMWF"] > gain["MWF"]


def test_unvoiced_input_gives_narrowband_output_with_note(short_scene):
    enh = BatchEnhancer(short_scene.noisy, short_scene.noise_only, None)
    res = enh.run("cMWF")
    assert np.array_equal(res.audio.samples, enh.run("MWF").audio.samples)
    assert any("unvoiced" in n for n in res.diagnostics["notes"])
    assert res.diagnostics["cyclic_bins"] == 0


def test_identity_variant_passes_reference_through(short_scene):
    res = batch_enhance(short_scene.noisy, short_scene.noise_only, short_scene.truth.f0,
                        variant="identity")
    sl = interior(short_scene.noisy.n_samples, WIN)
    np.testing.assert_allclose(res.audio.samples[0, sl], short_scene.noisy.samples[0, sl],
                               atol=1e-10)


def test_oracle_variant_needs_target(short_scene):
    with pytest.raises(ValueError, match="clean target"):
        batch_enhance(short_scene.noisy, short_scene.noise_only, 100.0, variant="cMWF+")


def test_batch_input_validation(short_scene):
    with pytest.raises(ValueError):
        batch_enhance(short_scene.noisy, short_scene.noise_only.channel(0), 100.0)
    with pytest.raises(ValueError):
        batch_enhance(short_scene.noisy, short_scene.noise_only, 100.0, EnhanceConfig(ref_mic=2))


@pytest.mark.parametrize("kwargs", [dict(C=0), dict(beta=0), dict(beta=1.5), dict(routing="all"),
                                    dict(lambda_min=1, lambda_max=0.1), dict(R=384)])
def test_enhance_config_validation(kwargs):
    with pytest.raises(ValueError):
        EnhanceConfig(**kwargs)


def test_every_variant_runs(short_scene):
    enh = BatchEnhancer(short_scene.noisy, short_scene.noise_only, short_scene.truth.f0,
                        EnhanceConfig(C=3), short_scene.target)
    for v in VARIANTS:
        out = enh.run(v).audio
        assert out.samples.shape == (1, short_scene.noisy.n_samples)


# ---------------------------------------------------------------- recursive mode

def test_running_statistics_stay_hermitian_psd(rng):
    D = 6
    state = RecursiveState(narrowband_set(), 0.05, np.zeros((3, D, D), complex))
    for _ in range(200):
        x = rng.standard_normal((3, D)) + 1j * rng.standard_normal((3, D))
        state.update(x)
        S = state.S_x
        assert np.array_equal(S, np.conj(np.swapaxes(S, -1, -2))) or \
            np.max(np.abs(S - np.conj(np.swapaxes(S, -1, -2)))) < 1e-12 * np.abs(S).max()
        tr = np.trace(S, axis1=-2, axis2=-1).real
        assert np.all(np.linalg.eigvalsh(S).min(axis=-1) >= -1e-10 * tr)
    assert state.scale == pytest.approx(1 / (1 - 0.95 ** 200))


@pytest.fixture(scope="module")
def two_note_scene():
    scene = simulate_scene(SceneConfig(), HarmonicSourceParams(duration=2.0), seed=2, notes=2,
                           note_seconds=1.0)
    track = pitch_track(scene.target.channel(0))
    return scene, track


def test_jump_frames_fall_back_to_mwf(two_note_scene):
    scene, track = two_note_scene
    res = recursive_enhance(scene.noisy, scene.noise_only, EnhanceConfig(), "cMWF", track)
    jumps = np.flatnonzero(track.delta >= 0.2)
    jumps = jumps[jumps >= 10]
    assert jumps.size > 0
    assert np.all(res.modes[jumps] == "mwf")
    assert np.all(res.modes[:10] == "burn-in")
    assert "cyclic" in set(res.modes)


def test_recursive_diagnostics_csv(tmp_path, two_note_scene):
    scene, track = two_note_scene
    res = recursive_enhance(scene.noisy, scene.noise_only, EnhanceConfig(), "cMWF", track)
    path = tmp_path / "frames.csv"
    res.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:5] == ["frame", "alpha_bar_hz", "delta_alpha", "voiced", "mode"]
    assert len(lines) == len(track) + 1


def test_unvoiced_stretch_matches_recursive_mwf():
    target, _ = gen_harmonic_target(HarmonicSourceParams(duration=2.0), FS, seed=3)
    samples = target.samples[0].copy()
    samples[FS:] = 0
    target = AudioBuffer(samples)
    rt = gen_rir(RirSpec(angle_deg=60, rt60=0.0), 2, FS)
    ri = gen_rir(RirSpec(angle_deg=120, rt60=0.0), 2, FS)
    scene = mix_scene(target, SceneConfig(), rt, ri, seed=4)
    track = pitch_track(scene.target.channel(0))
    cyc = recursive_enhance(scene.noisy, scene.noise_only, EnhanceConfig(), "cMWF", track)
    mwf = recursive_enhance(scene.noisy, scene.noise_only, EnhanceConfig(), "MWF", track)
    first = int(np.flatnonzero(~track.voiced & (np.arange(len(track)) > 20))[0])
    assert np.all(cyc.modes[first:] == "mwf")
    start = (first + 4) * 128
    a = cyc.audio.samples[0, start:-512]
    b = mwf.audio.samples[0, start:-512]
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(b))


def test_recursive_tracks_batch_on_constant_pitch():
    scene = simulate_scene(SceneConfig(), HarmonicSourceParams(duration=5.0), seed=3)
    ref = scene.target.samples[0]
    track = pitch_track(scene.target.channel(0))
    rec = recursive_enhance(scene.noisy, scene.noise_only, EnhanceConfig(), "cMWF", track)
    bat = batch_enhance(scene.noisy, scene.noise_only, scene.truth.f0)
    sl = slice(FS // 2, len(ref) - 512)
    s_rec = si_sdr(rec.audio.samples[0, sl], ref[sl])
    s_bat = si_sdr(bat.audio.samples[0, sl], ref[sl])
    assert s_rec >= s_bat - 3.0, f"recursive {s_rec:.2f} dB vs batch {s_bat:.2f} dB"


def test_recursive_input_validation(short_scene):
    with pytest.raises(ValueError):
        recursive_enhance(short_scene.noisy, short_scene.noise_only, variant="cMWF+")
    track = pitch_track(short_scene.target.channel(0))
    with pytest.raises(ValueError, match="frames"):
        recursive_enhance(AudioBuffer(short_scene.noisy.samples[:, :FS]), short_scene.noise_only,
                          track=track)
