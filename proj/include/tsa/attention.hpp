// Two-stage attention: a per-feature-dimension sigmoid gate driven by max-
// and statistics-pooled descriptors (frequency attention), a per-frame
// softmax weight from a small scoring network (time attention), and their
// cascade / parallel compositions. A second variant gates 3-D CNN feature
// maps along both axes with the descriptor-pooling machinery on each.

#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>

#include "tsa/tensor.hpp"

namespace tsa {

enum class Scenario { None, TimeOnly, FreqOnly, FT, TF, Parallel };

std::string scenario_name(Scenario s);
Scenario scenario_from_name(const std::string& name);

struct AttentionConfig {
  Scenario scenario = Scenario::None;
  std::optional<double> gamma;    // Parallel only
  std::size_t bottleneck = 100;   // K

  // Throws std::invalid_argument on gamma/scenario mismatch or gamma
  // outside [0, 1].
  void validate() const;
  bool uses_freq() const;
  bool uses_time() const;
};

// Bottleneck gate parameters: width -> K -> width. Used by the frequency
// attention and, transposed, by the CNN time attention.
struct GateParams {
  Tensor w0;  // width x K
  Tensor b0;  // 1 x K
  Tensor w1;  // K x width

  std::size_t width() const { return w0.dim(0); }
  std::size_t bottleneck() const { return w0.dim(1); }

  static GateParams glorot(std::size_t width, std::size_t k, std::mt19937_64& rng);
  static GateParams zeros(std::size_t width, std::size_t k);
};

using FreqAttentionParams = GateParams;

struct TimeAttentionParams {
  Tensor w0;  // F x F
  Tensor b0;  // 1 x F
  Tensor w1;  // F x 1

  std::size_t width() const { return w0.dim(0); }

  static TimeAttentionParams glorot(std::size_t f, std::mt19937_64& rng);
  static TimeAttentionParams zeros(std::size_t f);
};

// Effective bottleneck: K never exceeds the attended width.
std::size_t clamp_bottleneck(std::size_t k, std::size_t width);

// sigmoid(gate(h_stat) + gate(h_max)) where h_max is the max over time,
// h_stat the sum of per-dimension mean and std over time, and gate(h) =
// relu(h W0 + b0) W1. Output 1 x F, every entry in (0, 1).
Tensor freq_attention_weights(const Tensor& h, const FreqAttentionParams& p);

// H'[t,f] = w[f] * H[t,f].
Tensor apply_freq_attention(const Tensor& h, const Tensor& w);

// Per-frame scores s_t = relu(h_t W0 + b0) W1, softmax over frames.
// Output T x 1, summing to 1.
Tensor time_attention_weights(const Tensor& h, const TimeAttentionParams& p);

// Applies the configured composition to a T x F map. FT gates frequency
// first and computes time weights on the refined map; TF mirrors that;
// Parallel combines both weight maps as gamma*w_freq + (1-gamma)*w_time
// computed from the same input.
Tensor compose_attention(const Tensor& h, const AttentionConfig& cfg,
                         const FreqAttentionParams* fp, const TimeAttentionParams* tp);

// CNN variant on a {T,F,C} block output: the map is flattened to
// T x (F*C); frequency weights use the gate over width F*C, time weights
// use the same gate machinery along the time axis (pool across F*C,
// sigmoid rather than softmax), then the composition above applies and the
// result is reshaped back.
Tensor cnn_two_stage(const Tensor& hk, const AttentionConfig& cfg, const GateParams* fp,
                     const GateParams* tp);

// The CNN time-attention gate transposed onto the time axis: 1 x T weights.
Tensor cnn_time_attention_weights(const Tensor& h2d, const GateParams& tp);

}  // namespace tsa
