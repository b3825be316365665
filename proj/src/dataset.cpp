#include "tsa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "tsa/threading.hpp"
#include "tsa/wav.hpp"

namespace tsa {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return mix64(mix64(mix64(a) ^ b) ^ c);
}

struct Formant {
  double freq, bw, gain;
};

struct SpeakerProfile {
  double f0;
  Formant formants[3];
};

SpeakerProfile speaker_profile(std::uint64_t corpus_seed, std::size_t speaker) {
  std::mt19937_64 rng(derive_seed(corpus_seed, speaker + 1));
  SpeakerProfile p;
  p.f0 = std::uniform_real_distribution<double>(90.0, 280.0)(rng);
  // overlapping ranges across speakers: separable in the clean condition
  // but genuinely confusable once bands get masked by noise
  p.formants[0] = {std::uniform_real_distribution<double>(400.0, 800.0)(rng),
                   std::uniform_real_distribution<double>(60.0, 120.0)(rng), 1.0};
  p.formants[1] = {std::uniform_real_distribution<double>(1200.0, 2200.0)(rng),
                   std::uniform_real_distribution<double>(80.0, 160.0)(rng),
                   std::uniform_real_distribution<double>(0.4, 0.9)(rng)};
  p.formants[2] = {std::uniform_real_distribution<double>(2500.0, 3200.0)(rng),
                   std::uniform_real_distribution<double>(100.0, 200.0)(rng),
                   std::uniform_real_distribution<double>(0.2, 0.6)(rng)};
  return p;
}

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

std::string speaker_id(std::size_t s) {
  std::ostringstream os;
  os << "spk";
  if (s < 10) os << "0";
  os << s;
  return os.str();
}

std::string sanitize_for_cache(const std::string& path) {
  std::string out = path;
  for (char& c : out) {
    if (c == '/' || c == '\\' || c == ':') c = '_';
  }
  return out;
}

}  // namespace

std::string feature_cache_path(const std::string& cache_dir, const std::string& wav_path,
                               FeatureKind kind) {
  return cache_dir + "/" + sanitize_for_cache(wav_path) + "." + feature_kind_name(kind) + ".taf";
}

std::vector<TrialPair> make_trial_pairs(const Manifest& manifest, Split split,
                                        std::size_t n_pairs, std::uint64_t seed) {
  std::map<std::string, std::vector<std::string>> by_speaker;
  for (const auto& e : manifest.entries) {
    if (e.split == split) by_speaker[e.speaker].push_back(e.path);
  }
  std::vector<std::string> speakers;
  for (const auto& [spk, utts] : by_speaker) {
    if (utts.size() >= 2) speakers.push_back(spk);
  }
  if (speakers.size() < 2) {
    throw std::invalid_argument("trial generation needs >= 2 speakers with >= 2 utterances");
  }
  std::mt19937_64 rng(derive_seed(seed, 0x7472ULL));
  std::vector<TrialPair> pairs;
  pairs.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    TrialPair p;
    p.same_speaker = i % 2 == 0;
    if (p.same_speaker) {
      const auto& utts =
          by_speaker[speakers[std::uniform_int_distribution<std::size_t>(0, speakers.size() - 1)(rng)]];
      std::uniform_int_distribution<std::size_t> pick(0, utts.size() - 1);
      std::size_t a = pick(rng), b = pick(rng);
      while (b == a) b = pick(rng);
      p.path_a = utts[a];
      p.path_b = utts[b];
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, speakers.size() - 1);
      std::size_t sa = pick(rng), sb = pick(rng);
      while (sb == sa) sb = pick(rng);
      const auto& ua = by_speaker[speakers[sa]];
      const auto& ub = by_speaker[speakers[sb]];
      p.path_a = ua[std::uniform_int_distribution<std::size_t>(0, ua.size() - 1)(rng)];
      p.path_b = ub[std::uniform_int_distribution<std::size_t>(0, ub.size() - 1)(rng)];
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string p, spk, split;
    if (!(ss >> p >> spk >> split)) {
      if (p.empty()) continue;
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected `<path> <speaker_id> <split>`");
    }
    ManifestEntry e;
    e.path = p;
    e.speaker = spk;
    if (split == "train") {
      e.split = Split::Train;
    } else if (split == "test") {
      e.split = Split::Test;
    } else {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": split must be train or test, got " + split);
    }
    m.entries.push_back(std::move(e));
  }
  m.rebuild_speaker_table();
  return m;
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot create manifest: " + path);
  for (const auto& e : entries) {
    out << e.path << " " << e.speaker << " " << (e.split == Split::Train ? "train" : "test")
        << "\n";
  }
  if (!out) throw std::runtime_error("failed writing manifest: " + path);
}

void Manifest::rebuild_speaker_table() {
  speakers.clear();
  for (const auto& e : entries) speakers.push_back(e.speaker);
  std::sort(speakers.begin(), speakers.end());
  speakers.erase(std::unique(speakers.begin(), speakers.end()), speakers.end());
}

std::size_t Manifest::speaker_index(const std::string& id) const {
  const auto it = std::lower_bound(speakers.begin(), speakers.end(), id);
  if (it == speakers.end() || *it != id) {
    throw std::invalid_argument("unknown speaker id: " + id);
  }
  return static_cast<std::size_t>(it - speakers.begin());
}

std::vector<ManifestEntry> Manifest::split_entries(Split split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

void Manifest::validate_identification() const {
  std::vector<std::string> train_spk, paths;
  for (const auto& e : entries) {
    if (e.split == Split::Train) train_spk.push_back(e.speaker);
    paths.push_back(e.path);
  }
  std::sort(train_spk.begin(), train_spk.end());
  for (const auto& e : entries) {
    if (e.split == Split::Test &&
        !std::binary_search(train_spk.begin(), train_spk.end(), e.speaker)) {
      throw std::invalid_argument("identification manifest: test speaker " + e.speaker +
                                  " does not appear in the train split");
    }
  }
  std::sort(paths.begin(), paths.end());
  const auto dup = std::adjacent_find(paths.begin(), paths.end());
  if (dup != paths.end()) {
    throw std::invalid_argument("manifest lists the same utterance twice: " + *dup);
  }
}

Waveform synth_utterance(std::uint64_t corpus_seed, std::size_t speaker, std::size_t utt,
                         double duration_s) {
  const SpeakerProfile prof = speaker_profile(corpus_seed, speaker);
  std::mt19937_64 rng(derive_seed(corpus_seed, speaker + 1, utt + 1));
  const double fs = static_cast<double>(kSampleRate);
  const std::size_t n = static_cast<std::size_t>(duration_s * kSampleRate);

  const double f0 =
      prof.f0 * (1.0 + std::uniform_real_distribution<double>(-0.03, 0.03)(rng));
  const double vib_phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);

  // phrase-like envelope: syllable bursts with raised-cosine edges
  std::vector<double> env(n, 0.0);
  std::size_t pos = 0;
  while (pos < n) {
    const double burst_s = std::uniform_real_distribution<double>(0.08, 0.25)(rng);
    const double gap_s = std::uniform_real_distribution<double>(0.02, 0.10)(rng);
    const double amp = std::uniform_real_distribution<double>(0.5, 1.0)(rng);
    const std::size_t burst = static_cast<std::size_t>(burst_s * fs);
    for (std::size_t i = 0; i < burst && pos + i < n; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(burst);
      env[pos + i] = amp * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * frac));
    }
    pos += burst + static_cast<std::size_t>(gap_s * fs);
  }

  Resonator r1(prof.formants[0].freq, prof.formants[0].bw, fs);
  Resonator r2(prof.formants[1].freq, prof.formants[1].bw, fs);
  Resonator r3(prof.formants[2].freq, prof.formants[2].bw, fs);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Waveform w;
  w.sample_rate = static_cast<int>(kSampleRate);
  w.samples.resize(n);
  double phase = 0.0;
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    const double f_inst = f0 * (1.0 + 0.01 * std::sin(2.0 * std::numbers::pi * 5.0 * t + vib_phase));
    phase += f_inst / fs;
    if (phase >= 1.0) phase -= 1.0;
    const double source = 2.0 * phase - 1.0;  // sawtooth, harmonically rich
    const double excitation = source + 0.02 * gauss(rng);
    const double voiced = prof.formants[0].gain * r1.step(excitation) +
                          prof.formants[1].gain * r2.step(excitation) +
                          prof.formants[2].gain * r3.step(excitation);
    w.samples[i] = voiced * env[i];
    peak = std::max(peak, std::abs(w.samples[i]));
  }
  if (peak > 0.0) {
    const double g = 0.9 / peak;
    for (double& v : w.samples) v *= g;
  }
  // low-level floor after normalization: digital silence between bursts
  // would otherwise hit the log-energy clamp and survive 16-bit
  // quantization as exact zeros
  for (double& v : w.samples) v += 3e-4 * gauss(rng);
  return w;
}

Manifest generate_synthetic_corpus(const SyntheticSpeakerSpec& spec, const std::string& out_dir) {
  if (spec.n_speakers < 2) throw std::invalid_argument("synthetic corpus needs >= 2 speakers");
  if (spec.utts_per_speaker < 1) throw std::invalid_argument("need >= 1 utterance per speaker");
  std::filesystem::create_directories(out_dir);

  Manifest m;
  const std::size_t n_test = static_cast<std::size_t>(
      std::floor(spec.test_fraction * static_cast<double>(spec.utts_per_speaker)));
  for (std::size_t s = 0; s < spec.n_speakers; ++s) {
    for (std::size_t u = 0; u < spec.utts_per_speaker; ++u) {
      std::ostringstream name;
      name << speaker_id(s) << "_utt";
      if (u < 100) name << (u < 10 ? "00" : "0");
      name << u << ".wav";
      ManifestEntry e;
      e.path = out_dir + "/" + name.str();
      e.speaker = speaker_id(s);
      e.split = u >= spec.utts_per_speaker - n_test ? Split::Test : Split::Train;
      m.entries.push_back(std::move(e));
    }
  }
  parallel_for(m.entries.size(), [&](std::size_t i) {
    const std::size_t s = i / spec.utts_per_speaker;
    const std::size_t u = i % spec.utts_per_speaker;
    write_wav(m.entries[i].path, synth_utterance(spec.seed, s, u, spec.duration_s));
  });
  m.rebuild_speaker_table();
  m.save(out_dir + "/manifest.txt");
  return m;
}

Batcher::Batcher(const Manifest& manifest, FeatureKind kind, std::size_t batch_size,
                 std::size_t crop_frames, std::uint64_t seed, const std::string& cache_dir)
    : batch_size_(batch_size), crop_frames_(crop_frames), seed_(seed) {
  if (batch_size_ < 1) throw std::invalid_argument("batch size must be >= 1");
  if (crop_frames_ < 15) {
    throw std::invalid_argument("crop_frames must cover the TDNN receptive field (>= 15)");
  }
  const auto train = manifest.split_entries(Split::Train);
  if (train.empty()) throw std::invalid_argument("manifest has no train utterances");
  n_speakers_ = manifest.speakers.size();

  std::vector<FeatureMatrix> feats(train.size());
  if (!cache_dir.empty()) std::filesystem::create_directories(cache_dir);
  parallel_for(train.size(), [&](std::size_t i) {
    if (!cache_dir.empty()) {
      const std::string cache_path = feature_cache_path(cache_dir, train[i].path, kind);
      if (std::filesystem::exists(cache_path)) {
        feats[i] = read_feature_cache(cache_path);
        return;
      }
      feats[i] = extract_features(read_wav(train[i].path), kind);
      write_feature_cache(cache_path, feats[i]);
      return;
    }
    feats[i] = extract_features(read_wav(train[i].path), kind);
  });

  for (std::size_t i = 0; i < train.size(); ++i) {
    if (feats[i].frames < crop_frames_) {
      std::cerr << "warning: skipping " << train[i].path << " (" << feats[i].frames
                << " frames < crop " << crop_frames_ << ")\n";
      continue;
    }
    features_.push_back(std::move(feats[i]));
    labels_.push_back(manifest.speaker_index(train[i].speaker));
  }
  if (features_.empty()) {
    throw std::invalid_argument("no train utterance is long enough for the crop length");
  }
}

std::vector<Batch> Batcher::epoch(std::size_t epoch_index) const {
  std::mt19937_64 rng(derive_seed(seed_, epoch_index));
  std::vector<std::size_t> order(features_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  Batch cur;
  for (std::size_t idx : order) {
    const FeatureMatrix& f = features_[idx];
    const std::size_t max_off = f.frames - crop_frames_;
    const std::size_t off =
        max_off == 0 ? 0 : std::uniform_int_distribution<std::size_t>(0, max_off)(rng);
    std::vector<double> crop(f.values.begin() + static_cast<std::ptrdiff_t>(off * f.dim),
                             f.values.begin() + static_cast<std::ptrdiff_t>((off + crop_frames_) * f.dim));
    cur.crops.emplace_back(Shape{crop_frames_, f.dim}, std::move(crop));
    cur.labels.push_back(labels_[idx]);
    if (cur.crops.size() == batch_size_) {
      batches.push_back(std::move(cur));
      cur = Batch{};
    }
  }
  if (!cur.crops.empty()) batches.push_back(std::move(cur));
  return batches;
}

}  // namespace tsa
