// Additive noise mixing at exact target SNRs, plus synthetic noise
// generators so the test pipeline never depends on external corpora.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsa/wav.hpp"

namespace tsa {

enum class NoiseKind { GeneralNoise, Music, Babble, SyntheticWhite, SyntheticBabble };

std::string noise_kind_name(NoiseKind kind);
NoiseKind noise_kind_from_name(const std::string& name);

struct NoiseSource {
  NoiseKind kind = NoiseKind::SyntheticWhite;
  std::vector<Waveform> clips;

  static NoiseSource from_clips(NoiseKind kind, std::vector<Waveform> clips);
  // Clips are generated lazily per mix for the synthetic kinds; file-backed
  // kinds need at least one clip.
  static NoiseSource synthetic(NoiseKind kind);
};

struct MixSpec {
  // Fixed target for evaluation; empty draws uniformly from the 0..20 dB
  // grid (training augmentation).
  std::optional<double> snr_db;
  std::uint64_t seed = 0;
};

inline constexpr double kSnrGridDb[] = {0.0, 5.0, 10.0, 15.0, 20.0};

// speech + g * noise with g chosen so that the mean-power ratio hits the
// target SNR exactly. The noise segment is picked by the seeded RNG (clip,
// offset, looped when short). If the sum would clip, the whole mix is scaled
// down to peak 0.999, which leaves the SNR untouched.
Waveform mix(const Waveform& speech, const NoiseSource& noise, const MixSpec& spec);

// SNR actually achieved between two aligned component signals, in dB.
double measure_snr_db(const Waveform& speech, const Waveform& scaled_noise);

Waveform synth_white(double duration_s, std::uint64_t seed);

// Sum of n_talkers amplitude-modulated formant-filtered noise streams.
Waveform synth_babble(double duration_s, int n_talkers, std::uint64_t seed);

// Noise manifest: file paths one per line under [noise] / [music] /
// [speech] section headers; '#' comments allowed.
struct NoiseManifest {
  std::vector<std::string> noise;
  std::vector<std::string> music;
  std::vector<std::string> speech;
};

NoiseManifest parse_noise_manifest(const std::string& path);
NoiseSource load_noise_source(const NoiseManifest& manifest, NoiseKind kind);

}  // namespace tsa
