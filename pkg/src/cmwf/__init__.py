"""Cyclic multichannel Wiener filtering for harmonic sources."""
from .beamformer import (VARIANTS, BatchEnhancer, BeamformerWeights, BinRouting, EnhanceConfig,
                         apply_weights, batch_enhance, cmwf_weights_blind,
                         cmwf_weights_oracle_plus, cmwf_weights_oracle_pp, mwf_weights,
                         recursive_enhance, route_bins)
from .cyclic import (CyclicSet, ModulatedStftStack, ScdEstimate, SpectralSpatialCov,
                     acp_estimate, assemble_cov, blkdiag, blkdiag_project, build_cyclic_set,
                     build_stack, cross_vector, harmonic_contrast, scd)
from .harness import ExperimentConfig, ResultRecord, emit_plots, run_sweep, si_sdr
from .linalg import GevdResult, diag_loading_lambda, gevd, loaded_solve, lowrank_target
from .pitch import (PitchGrid, PitchTrack, SmoothingParams, delta_alpha, estimate_f0_nls,
                    pitch_track, smooth_f0)
from .scene import (HarmonicSourceParams, RirSpec, Scene, SceneConfig, butterworth_lowpass,
                    gen_harmonic_target, gen_rir, mix_scene, simulate_scene)
from .stft import (AudioBuffer, ComplexAudioBuffer, StftTensor, WindowSpec, interior, istft,
                   modulate, read_wav, stft, write_wav)

__version__ = "0.1.0"

__all__ = [
    "acp_estimate", "apply_weights", "assemble_cov", "AudioBuffer", "batch_enhance",
    "BatchEnhancer", "BeamformerWeights", "BinRouting", "blkdiag", "blkdiag_project",
    "build_cyclic_set", "build_stack", "butterworth_lowpass", "cmwf_weights_blind",
    "cmwf_weights_oracle_plus", "cmwf_weights_oracle_pp", "ComplexAudioBuffer", "cross_vector",
    "CyclicSet", "delta_alpha", "diag_loading_lambda", "emit_plots", "EnhanceConfig",
    "estimate_f0_nls", "ExperimentConfig", "gen_harmonic_target", "gen_rir", "gevd",
    "GevdResult", "harmonic_contrast", "HarmonicSourceParams", "interior", "istft",
    "loaded_solve", "lowrank_target", "mix_scene", "modulate", "ModulatedStftStack",
    "mwf_weights", "pitch_track", "PitchGrid", "PitchTrack", "read_wav", "recursive_enhance",
    "ResultRecord", "RirSpec", "route_bins", "run_sweep", "scd", "ScdEstimate", "Scene",
    "SceneConfig", "si_sdr", "simulate_scene", "smooth_f0", "SmoothingParams",
    "SpectralSpatialCov", "stft", "StftTensor", "VARIANTS", "WindowSpec", "write_wav",
]
