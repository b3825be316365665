// Manifest-driven dataset handling and a deterministic synthetic speaker
// corpus for desk-scale experiments: each pseudo-speaker is a fixed
// fundamental plus a fixed three-formant profile, each utterance a random
// phrase-like envelope with small pitch jitter.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tsa/features.hpp"
#include "tsa/objectives.hpp"
#include "tsa/tensor.hpp"

namespace tsa {

enum class Split { Train, Test };

struct ManifestEntry {
  std::string path;
  std::string speaker;
  Split split = Split::Train;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> speakers;  // sorted unique ids

  static Manifest load(const std::string& path);
  void save(const std::string& path) const;

  void rebuild_speaker_table();
  std::size_t speaker_index(const std::string& id) const;
  std::vector<ManifestEntry> split_entries(Split split) const;

  // Identification-mode checks: every test speaker appears in train, and no
  // path is shared across splits.
  void validate_identification() const;
};

struct SyntheticSpeakerSpec {
  std::size_t n_speakers = 8;
  std::size_t utts_per_speaker = 50;
  double duration_s = 2.0;
  std::uint64_t seed = 7;
  double test_fraction = 0.2;
};

// Writes WAVs under out_dir and returns the manifest (also saved as
// out_dir/manifest.txt). Byte-deterministic under the spec seed.
Manifest generate_synthetic_corpus(const SyntheticSpeakerSpec& spec, const std::string& out_dir);

Waveform synth_utterance(std::uint64_t corpus_seed, std::size_t speaker, std::size_t utt,
                         double duration_s);

// Cache file path for one utterance's features under cache_dir.
std::string feature_cache_path(const std::string& cache_dir, const std::string& wav_path,
                               FeatureKind kind);

// Balanced same/different verification pairs drawn from one split.
std::vector<TrialPair> make_trial_pairs(const Manifest& manifest, Split split,
                                        std::size_t n_pairs, std::uint64_t seed);

struct Batch {
  std::vector<Tensor> crops;        // each crop_frames x L
  std::vector<std::size_t> labels;  // speaker indices
};

// Loads features for the train split up front (optionally from / into a
// cache directory), then yields shuffled fixed-length random crops per
// epoch. Utterances shorter than the crop are skipped with a warning.
class Batcher {
 public:
  Batcher(const Manifest& manifest, FeatureKind kind, std::size_t batch_size,
          std::size_t crop_frames, std::uint64_t seed, const std::string& cache_dir = "");

  std::vector<Batch> epoch(std::size_t epoch_index) const;

  std::size_t usable_utterances() const { return features_.size(); }
  std::size_t num_speakers() const { return n_speakers_; }

 private:
  std::vector<FeatureMatrix> features_;
  std::vector<std::size_t> labels_;
  std::size_t batch_size_;
  std::size_t crop_frames_;
  std::uint64_t seed_;
  std::size_t n_speakers_;
};

}  // namespace tsa
