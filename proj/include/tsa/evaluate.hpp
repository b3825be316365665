// Identification (top-1) and verification (EER over a trial list)
// evaluation, with optional noise corruption of the test audio.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsa/backbone.hpp"
#include "tsa/dataset.hpp"
#include "tsa/noise.hpp"
#include "tsa/objectives.hpp"

namespace tsa {

struct EvalOptions {
  const NoiseSource* noise = nullptr;  // nullptr evaluates clean
  std::optional<double> snr_db;
  std::uint64_t seed = 0;
  // 0 scores the whole utterance. A nonzero value center-crops to that many
  // frames, matching the training crop length; the time gate's softmax makes
  // embeddings length-sensitive, so matched lengths score better.
  std::size_t crop_frames = 0;
};

// Top-1 accuracy of the classifier head over the manifest's test split.
double evaluate_identification(SpeakerModel& model, const Manifest& manifest,
                               const EvalOptions& opts);

// Cosine-scored EER over verification trials.
double evaluate_verification(SpeakerModel& model, const std::vector<TrialPair>& trials,
                             const EvalOptions& opts);

// Shared preprocessing: read, optionally corrupt, extract features and (for
// the fixed-length CNN path) center-crop. utterance_index seeds the mix so
// corruption is deterministic per utterance.
FeatureMatrix eval_features(const SpeakerModel& model, const std::string& wav_path,
                            const EvalOptions& opts, std::size_t utterance_index);

}  // namespace tsa
