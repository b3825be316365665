#include "tsa/evaluate.hpp"

#include <map>
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

FeatureMatrix center_crop(const FeatureMatrix& f, std::size_t frames) {
  if (f.frames < frames) {
    throw std::invalid_argument("utterance has " + std::to_string(f.frames) +
                                " frames, need " + std::to_string(frames));
  }
  const std::size_t off = (f.frames - frames) / 2;
  FeatureMatrix out;
  out.kind = f.kind;
  out.frames = frames;
  out.dim = f.dim;
  out.values.assign(f.values.begin() + static_cast<std::ptrdiff_t>(off * f.dim),
                    f.values.begin() + static_cast<std::ptrdiff_t>((off + frames) * f.dim));
  return out;
}

}  // namespace

FeatureMatrix eval_features(const SpeakerModel& model, const std::string& wav_path,
                            const EvalOptions& opts, std::size_t utterance_index) {
  Waveform w = read_wav(wav_path);
  if (opts.noise != nullptr) {
    MixSpec spec;
    spec.snr_db = opts.snr_db;
    spec.seed = mix64(mix64(opts.seed) ^ (utterance_index + 1));
    w = mix(w, *opts.noise, spec);
  }
  FeatureMatrix f = extract_features(w, model.config().features);
  if (model.config().backbone == BackboneKind::ResNetLite) {
    f = center_crop(f, model.config().cnn_input_frames);
  } else if (opts.crop_frames > 0) {
    f = center_crop(f, std::min(opts.crop_frames, f.frames));
  }
  return f;
}

double evaluate_identification(SpeakerModel& model, const Manifest& manifest,
                               const EvalOptions& opts) {
  const auto test = manifest.split_entries(Split::Test);
  if (test.empty()) throw std::invalid_argument("manifest has no test utterances");

  std::vector<std::size_t> predicted(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    const FeatureMatrix f = eval_features(model, test[i].path, opts, i);
    const Tensor logits = model.logits(f, /*training=*/false);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < logits.numel(); ++j) {
      if (logits(j) > logits(arg)) arg = j;
    }
    predicted[i] = arg;
  });

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (predicted[i] == manifest.speaker_index(test[i].speaker)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

double evaluate_verification(SpeakerModel& model, const std::vector<TrialPair>& trials,
                             const EvalOptions& opts) {
  if (trials.empty()) throw std::invalid_argument("empty trial list");

  // Embed each distinct utterance once.
  std::vector<std::string> paths;
  std::map<std::string, std::size_t> index;
  for (const auto& t : trials) {
    for (const std::string& p : {t.path_a, t.path_b}) {
      if (index.emplace(p, paths.size()).second) paths.push_back(p);
    }
  }
  std::vector<Tensor> embeddings(paths.size());
  parallel_for(paths.size(), [&](std::size_t i) {
    const FeatureMatrix f = eval_features(model, paths[i], opts, i);
    embeddings[i] = model.embed(f, /*training=*/false);
  });

  std::vector<Trial> scored(trials.size());
  for (std::size_t i = 0; i < trials.size(); ++i) {
    scored[i].score =
        cosine_score(embeddings[index.at(trials[i].path_a)], embeddings[index.at(trials[i].path_b)]);
    scored[i].same_speaker = trials[i].same_speaker;
  }
  return eer(scored);
}

}  // namespace tsa
