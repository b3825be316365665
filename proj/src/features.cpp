#include "tsa/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace tsa {

namespace {

constexpr double kLogMelFloor = 1e-10;
constexpr double kSpecLogOffset = 1e-6;

std::vector<double> hamming_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                  static_cast<double>(n - 1));
  }
  return w;
}

void check_rate(const Waveform& w) {
  if (w.sample_rate != static_cast<int>(kSampleRate)) {
    throw std::invalid_argument("expected " + std::to_string(kSampleRate) + " Hz audio, got " +
                                std::to_string(w.sample_rate) + " Hz");
  }
}

// Subtract the per-column mean; optionally divide by the per-column std.
void normalize_columns(FeatureMatrix& m, bool variance) {
  for (std::size_t l = 0; l < m.dim; ++l) {
    double mean = 0.0;
    for (std::size_t t = 0; t < m.frames; ++t) mean += m.values[t * m.dim + l];
    mean /= static_cast<double>(m.frames);
    double scale = 1.0;
    if (variance) {
      double var = 0.0;
      for (std::size_t t = 0; t < m.frames; ++t) {
        const double d = m.values[t * m.dim + l] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m.frames);
      scale = 1.0 / std::sqrt(var + 1e-10);
    }
    for (std::size_t t = 0; t < m.frames; ++t) {
      m.values[t * m.dim + l] = (m.values[t * m.dim + l] - mean) * scale;
    }
  }
}

}  // namespace

std::size_t feature_dim(FeatureKind kind) {
  return kind == FeatureKind::LogMel40 ? kNumMelFilters : kNumBins;
}

std::string feature_kind_name(FeatureKind kind) {
  return kind == FeatureKind::LogMel40 ? "logmel40" : "spec257";
}

FeatureKind feature_kind_from_name(const std::string& name) {
  if (name == "logmel40" || name == "logmel") return FeatureKind::LogMel40;
  if (name == "spec257" || name == "spec") return FeatureKind::Spec257;
  throw std::invalid_argument("unknown feature kind: " + name);
}

std::size_t num_frames(std::size_t num_samples) {
  if (num_samples < kFrameLen) {
    throw std::invalid_argument("utterance shorter than one frame: " +
                                std::to_string(num_samples) + " samples < " +
                                std::to_string(kFrameLen));
  }
  return 1 + (num_samples - kFrameLen) / kFrameHop;
}

std::vector<std::vector<double>> frame_signal(const Waveform& w) {
  const std::size_t t = num_frames(w.samples.size());
  static const std::vector<double> window = hamming_window(kFrameLen);
  std::vector<std::vector<double>> frames(t);
  for (std::size_t i = 0; i < t; ++i) {
    frames[i].resize(kFrameLen);
    const double* src = &w.samples[i * kFrameHop];
    for (std::size_t n = 0; n < kFrameLen; ++n) frames[i][n] = src[n] * window[n];
  }
  return frames;
}

void fft(std::vector<std::complex<double>>& buf) {
  const std::size_t n = buf.size();
  if (n == 0 || (n & (n - 1)) != 0) {
    throw std::invalid_argument("fft size must be a power of two, got " + std::to_string(n));
  }
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = buf[i + j];
        const std::complex<double> v = buf[i + j + len / 2] * w;
        buf[i + j] = u + v;
        buf[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

std::vector<double> power_spectrum(std::span<const double> frame) {
  std::vector<std::complex<double>> buf(kFftSize, {0.0, 0.0});
  for (std::size_t i = 0; i < frame.size() && i < kFftSize; ++i) buf[i] = frame[i];
  fft(buf);
  std::vector<double> power(kNumBins);
  for (std::size_t k = 0; k < kNumBins; ++k) power[k] = std::norm(buf[k]);
  return power;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

std::vector<double> mel_points() {
  const double lo = hz_to_mel(kMelLowHz);
  const double hi = hz_to_mel(kMelHighHz);
  std::vector<double> pts(kNumMelFilters + 2);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    pts[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kNumMelFilters + 1);
  }
  return pts;
}

std::vector<std::vector<double>> build_filterbank() {
  const auto pts = mel_points();
  std::vector<std::vector<double>> bank(kNumMelFilters, std::vector<double>(kNumBins, 0.0));
  for (std::size_t f = 0; f < kNumMelFilters; ++f) {
    const double left = pts[f], center = pts[f + 1], right = pts[f + 2];
    for (std::size_t k = 0; k < kNumBins; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * kSampleRate / kFftSize);
      if (mel > left && mel < right) {
        bank[f][k] = mel <= center ? (mel - left) / (center - left)
                                   : (right - mel) / (right - center);
      }
    }
  }
  return bank;
}

}  // namespace

const std::vector<std::vector<double>>& mel_filterbank() {
  static const std::vector<std::vector<double>> bank = build_filterbank();
  return bank;
}

std::vector<double> mel_filter_centers_hz() {
  const auto pts = mel_points();
  std::vector<double> centers(kNumMelFilters);
  for (std::size_t f = 0; f < kNumMelFilters; ++f) centers[f] = mel_to_hz(pts[f + 1]);
  return centers;
}

FeatureMatrix log_mel(const Waveform& w, bool normalize) {
  check_rate(w);
  const auto frames = frame_signal(w);
  const auto& bank = mel_filterbank();
  FeatureMatrix m;
  m.kind = FeatureKind::LogMel40;
  m.frames = frames.size();
  m.dim = kNumMelFilters;
  m.values.resize(m.frames * m.dim);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto power = power_spectrum(frames[t]);
    for (std::size_t f = 0; f < kNumMelFilters; ++f) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kNumBins; ++k) acc += bank[f][k] * power[k];
      m.values[t * m.dim + f] = std::log(std::max(acc, kLogMelFloor));
    }
  }
  if (normalize) normalize_columns(m, /*variance=*/false);
  return m;
}

FeatureMatrix spectrogram(const Waveform& w, bool normalize) {
  check_rate(w);
  const auto frames = frame_signal(w);
  FeatureMatrix m;
  m.kind = FeatureKind::Spec257;
  m.frames = frames.size();
  m.dim = kNumBins;
  m.values.resize(m.frames * m.dim);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto power = power_spectrum(frames[t]);
    for (std::size_t k = 0; k < kNumBins; ++k) {
      m.values[t * m.dim + k] = std::log(std::sqrt(power[k]) + kSpecLogOffset);
    }
  }
  if (normalize) normalize_columns(m, /*variance=*/true);
  return m;
}

FeatureMatrix extract_features(const Waveform& w, FeatureKind kind) {
  return kind == FeatureKind::LogMel40 ? log_mel(w) : spectrogram(w);
}

namespace {

constexpr char kCacheMagic[5] = {'T', 'S', 'A', 'F', '1'};

void write_u32le(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_feature_cache(const std::string& path, const FeatureMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot create feature cache: " + path);
  out.write(kCacheMagic, 5);
  const char kind = m.kind == FeatureKind::LogMel40 ? 0 : 1;
  out.write(&kind, 1);
  write_u32le(out, static_cast<std::uint32_t>(m.frames));
  write_u32le(out, static_cast<std::uint32_t>(m.dim));
  for (double v : m.values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32le(out, bits);
  }
  if (!out) throw std::runtime_error("failed writing feature cache: " + path);
}

FeatureMatrix read_feature_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open feature cache: " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kCacheMagic, 5) != 0) {
    throw std::runtime_error(path + ": not a feature cache file");
  }
  char kind;
  in.read(&kind, 1);
  FeatureMatrix m;
  m.kind = kind == 0 ? FeatureKind::LogMel40 : FeatureKind::Spec257;
  m.frames = read_u32le(in);
  m.dim = read_u32le(in);
  if (m.dim != feature_dim(m.kind)) {
    throw std::runtime_error(path + ": feature dim does not match kind");
  }
  m.values.resize(m.frames * m.dim);
  for (double& v : m.values) {
    const std::uint32_t bits = read_u32le(in);
    float f;
    std::memcpy(&f, &bits, 4);
    v = static_cast<double>(f);
  }
  if (!in) throw std::runtime_error(path + ": truncated feature cache");
  return m;
}

}  // namespace tsa
