#include "tsa/noise.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "tsa/features.hpp"

namespace tsa {

namespace {

double mean_power(const std::vector<double>& x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

// Two-pole resonator, Klatt-style formant filter.
struct Resonator {
  double a1, a2, y1 = 0.0, y2 = 0.0;
  Resonator(double freq_hz, double bw_hz, double fs) {
    const double r = std::exp(-std::numbers::pi * bw_hz / fs);
    a1 = 2.0 * r * std::cos(2.0 * std::numbers::pi * freq_hz / fs);
    a2 = -r * r;
  }
  double step(double x) {
    const double y = x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

void normalize_peak(std::vector<double>& x, double peak) {
  double mx = 0.0;
  for (double v : x) mx = std::max(mx, std::abs(v));
  if (mx > 0.0) {
    const double g = peak / mx;
    for (double& v : x) v *= g;
  }
}

}  // namespace

std::string noise_kind_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::GeneralNoise: return "noise";
    case NoiseKind::Music: return "music";
    case NoiseKind::Babble: return "babble";
    case NoiseKind::SyntheticWhite: return "synth-white";
    case NoiseKind::SyntheticBabble: return "synth-babble";
  }
  return "?";
}

NoiseKind noise_kind_from_name(const std::string& name) {
  if (name == "noise") return NoiseKind::GeneralNoise;
  if (name == "music") return NoiseKind::Music;
  if (name == "babble" || name == "speech") return NoiseKind::Babble;
  if (name == "synth-white" || name == "white") return NoiseKind::SyntheticWhite;
  if (name == "synth-babble") return NoiseKind::SyntheticBabble;
  throw std::invalid_argument("unknown noise kind: " + name);
}

NoiseSource NoiseSource::from_clips(NoiseKind kind, std::vector<Waveform> clips) {
  if (clips.empty()) {
    throw std::invalid_argument("noise source " + noise_kind_name(kind) + " has no clips");
  }
  return NoiseSource{kind, std::move(clips)};
}

NoiseSource NoiseSource::synthetic(NoiseKind kind) {
  if (kind != NoiseKind::SyntheticWhite && kind != NoiseKind::SyntheticBabble) {
    throw std::invalid_argument("synthetic() is only for the synthetic noise kinds");
  }
  return NoiseSource{kind, {}};
}

Waveform mix(const Waveform& speech, const NoiseSource& noise, const MixSpec& spec) {
  if (speech.samples.empty()) throw std::invalid_argument("mix: empty speech signal");
  const double p_speech = mean_power(speech.samples);
  if (p_speech == 0.0) {
    throw std::invalid_argument("cannot define SNR for silent signal");
  }

  std::mt19937_64 rng(spec.seed);
  double snr_db;
  if (spec.snr_db.has_value()) {
    snr_db = *spec.snr_db;
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, std::size(kSnrGridDb) - 1);
    snr_db = kSnrGridDb[pick(rng)];
  }

  const std::size_t n = speech.samples.size();
  std::vector<double> segment(n);
  if (noise.clips.empty()) {
    // synthetic kinds: fresh clip derived from the mix seed
    const std::uint64_t clip_seed = rng();
    const double dur = static_cast<double>(n) / speech.sample_rate;
    Waveform clip = noise.kind == NoiseKind::SyntheticBabble
                        ? synth_babble(dur + 0.05, 6, clip_seed)
                        : synth_white(dur + 0.05, clip_seed);
    std::copy_n(clip.samples.begin(), n, segment.begin());
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, noise.clips.size() - 1);
    const Waveform& clip = noise.clips[pick(rng)];
    const std::size_t len = clip.samples.size();
    std::uniform_int_distribution<std::size_t> off_dist(0, len - 1);
    std::size_t off = off_dist(rng);
    if (len >= n) {
      // keep the segment contiguous when it fits without wrapping
      if (off + n > len) off = off_dist(rng) % (len - n + 1);
      std::copy_n(clip.samples.begin() + static_cast<std::ptrdiff_t>(off), n, segment.begin());
    } else {
      for (std::size_t i = 0; i < n; ++i) segment[i] = clip.samples[(off + i) % len];
    }
  }

  const double p_noise = mean_power(segment);
  if (p_noise == 0.0) throw std::invalid_argument("mix: noise segment is silent");
  const double gain = std::sqrt(p_speech / (p_noise * std::pow(10.0, snr_db / 10.0)));

  Waveform out;
  out.sample_rate = speech.sample_rate;
  out.samples.resize(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.samples[i] = speech.samples[i] + gain * segment[i];
    peak = std::max(peak, std::abs(out.samples[i]));
  }
  if (peak > 0.999) {
    const double g = 0.999 / peak;
    for (double& v : out.samples) v *= g;
  }
  return out;
}

double measure_snr_db(const Waveform& speech, const Waveform& scaled_noise) {
  const double ps = mean_power(speech.samples);
  const double pn = mean_power(scaled_noise.samples);
  return 10.0 * std::log10(ps / pn);
}

Waveform synth_white(double duration_s, std::uint64_t seed) {
  Waveform w;
  w.sample_rate = static_cast<int>(kSampleRate);
  const std::size_t n = static_cast<std::size_t>(duration_s * kSampleRate);
  w.samples.resize(n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (double& v : w.samples) v = gauss(rng);
  normalize_peak(w.samples, 0.95);
  return w;
}

Waveform synth_babble(double duration_s, int n_talkers, std::uint64_t seed) {
  if (n_talkers < 2) throw std::invalid_argument("synth_babble needs at least 2 talkers");
  const double fs = static_cast<double>(kSampleRate);
  const std::size_t n = static_cast<std::size_t>(duration_s * kSampleRate);
  std::vector<double> acc(n, 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int talker = 0; talker < n_talkers; ++talker) {
    // wide, narrow-band draws: each clip masks a different part of the
    // spectrum, which is what makes per-utterance band weighting matter
    std::uniform_real_distribution<double> f1(250.0, 1200.0);
    std::uniform_real_distribution<double> f2(1200.0, 3600.0);
    std::uniform_real_distribution<double> bw(60.0, 120.0);
    std::uniform_real_distribution<double> rate(2.0, 6.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    Resonator r1(f1(rng), bw(rng), fs);
    Resonator r2(f2(rng), bw(rng), fs);
    const double mod_rate = rate(rng);
    const double mod_phase = phase(rng);
    std::vector<double> voice(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = gauss(rng);
      const double s = r1.step(x) + 0.7 * r2.step(x);
      // syllabic envelope: raised cosine at 2-6 Hz
      const double env =
          0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * mod_rate * i / fs + mod_phase));
      voice[i] = s * env * env;
    }
    for (std::size_t i = 0; i < n; ++i) acc[i] += voice[i];
  }
  normalize_peak(acc, 0.95);
  Waveform w;
  w.sample_rate = static_cast<int>(kSampleRate);
  w.samples = std::move(acc);
  return w;
}

NoiseManifest parse_noise_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open noise manifest: " + path);
  NoiseManifest m;
  std::vector<std::string>* section = nullptr;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t;
    // trim
    const auto b = line.find_first_not_of(" \t\r\n");
    if (b != std::string::npos) {
      const auto e = line.find_last_not_of(" \t\r\n");
      t = line.substr(b, e - b + 1);
    }
    if (t.empty()) continue;
    if (t == "[noise]") {
      section = &m.noise;
    } else if (t == "[music]") {
      section = &m.music;
    } else if (t == "[speech]") {
      section = &m.speech;
    } else if (t[0] == '[') {
      throw std::runtime_error(path + ": unknown section " + t);
    } else {
      if (!section) throw std::runtime_error(path + ": file entry before any section: " + t);
      section->push_back(t);
    }
  }
  return m;
}

NoiseSource load_noise_source(const NoiseManifest& manifest, NoiseKind kind) {
  const std::vector<std::string>* paths = nullptr;
  switch (kind) {
    case NoiseKind::GeneralNoise: paths = &manifest.noise; break;
    case NoiseKind::Music: paths = &manifest.music; break;
    case NoiseKind::Babble: paths = &manifest.speech; break;
    case NoiseKind::SyntheticWhite:
    case NoiseKind::SyntheticBabble:
      return NoiseSource::synthetic(kind);
  }
  std::vector<Waveform> clips;
  clips.reserve(paths->size());
  for (const auto& p : *paths) clips.push_back(read_wav(p));
  return NoiseSource::from_clips(kind, std::move(clips));
}

}  // namespace tsa
