// Acoustic front end: 40-dim log-mel filterbanks and 257-dim log magnitude
// spectrograms from 16 kHz mono audio, 25 ms Hamming window, 10 ms hop,
// 512-point FFT. Normalization is per utterance (mean for log-mel,
// mean-variance for spectrograms); see README for the convention notes.

#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tsa/tensor.hpp"
#include "tsa/wav.hpp"

namespace tsa {

inline constexpr std::size_t kSampleRate = 16000;
inline constexpr std::size_t kFrameLen = 400;   // 25 ms
inline constexpr std::size_t kFrameHop = 160;   // 10 ms
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kNumBins = kFftSize / 2 + 1;  // 257, DC included
inline constexpr std::size_t kNumMelFilters = 40;
inline constexpr double kMelLowHz = 20.0;
inline constexpr double kMelHighHz = 7600.0;

enum class FeatureKind { LogMel40, Spec257 };

std::size_t feature_dim(FeatureKind kind);
std::string feature_kind_name(FeatureKind kind);
FeatureKind feature_kind_from_name(const std::string& name);

struct FeatureMatrix {
  std::size_t frames = 0;  // T
  std::size_t dim = 0;     // L
  FeatureKind kind = FeatureKind::LogMel40;
  std::vector<double> values;  // row-major T x L

  double at(std::size_t t, std::size_t l) const { return values[t * dim + l]; }
  Tensor tensor() const { return Tensor({frames, dim}, values); }
};

// Number of full frames for a given sample count; throws for signals
// shorter than one window.
std::size_t num_frames(std::size_t num_samples);

// Hamming-windowed 400-sample frames, hop 160, tail dropped.
std::vector<std::vector<double>> frame_signal(const Waveform& w);

// In-place radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& buf);

// 257-bin power spectrum of one windowed frame (zero-padded to 512).
std::vector<double> power_spectrum(std::span<const double> frame);

// 40 x 257 triangular filterbank, filters equally spaced on the mel scale
// between kMelLowHz and kMelHighHz.
const std::vector<std::vector<double>>& mel_filterbank();
std::vector<double> mel_filter_centers_hz();

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// `normalize` exists so invariants of the raw frame pipeline (e.g. hop-shift
// alignment) can be tested; the recognition pipeline always normalizes.
FeatureMatrix log_mel(const Waveform& w, bool normalize = true);
FeatureMatrix spectrogram(const Waveform& w, bool normalize = true);
FeatureMatrix extract_features(const Waveform& w, FeatureKind kind);

// Feature cache: "TSAF1" magic, kind byte, u32 T, u32 L, then row-major
// little-endian 32-bit floats.
void write_feature_cache(const std::string& path, const FeatureMatrix& m);
FeatureMatrix read_feature_cache(const std::string& path);

}  // namespace tsa
