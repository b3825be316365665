// Training losses and evaluation metrics: softmax cross-entropy, additive
// margin softmax over cosine similarities, top-1 accuracy, cosine scoring
// and equal error rate.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tsa/tensor.hpp"

namespace tsa {

struct AmSoftmaxConfig {
  double margin = 0.3;  // m
  double scale = 35.0;  // s

  void validate() const;
};

// Mean over the batch of -log softmax(logits)[label]; log-sum-exp stable.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// L2-normalizes embeddings (B x D) and class weight rows (C x D), subtracts
// the margin from the target cosine, scales by s, and takes cross-entropy.
// Zero-norm rows are epsilon-guarded (1e-12).
Tensor am_softmax(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                  const Tensor& class_weights, const AmSoftmaxConfig& cfg);

// Fraction of rows whose argmax equals the label; ties take the lowest
// index.
double top1(const Tensor& logits, const std::vector<std::size_t>& labels);

double cosine_score(const Tensor& a, const Tensor& b);

struct Trial {
  double score = 0.0;
  bool same_speaker = false;
};

// Threshold sweep over every distinct score with linear interpolation at
// the FAR/FRR crossing. Requires both labels to be present.
double eer(const std::vector<Trial>& trials);

// Verification trial list: `<label 0|1> <path_a> <path_b>` per line.
struct TrialPair {
  bool same_speaker = false;
  std::string path_a;
  std::string path_b;
};

std::vector<TrialPair> read_trial_list(const std::string& path);
void write_trial_list(const std::string& path, const std::vector<TrialPair>& pairs);

}  // namespace tsa
