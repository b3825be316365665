#include "tsa/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace tsa {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Tensor glorot_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return Tensor::uniform({rows, cols}, -a, a, rng).set_requires_grad();
}

// relu(h W0 + b0) W1 for a 1 x width descriptor.
Tensor gate(const Tensor& h, const GateParams& p) {
  return matmul(relu(matmul(h, p.w0) + p.b0), p.w1);
}

}  // namespace

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::None: return "none";
    case Scenario::TimeOnly: return "time";
    case Scenario::FreqOnly: return "freq";
    case Scenario::FT: return "ft";
    case Scenario::TF: return "tf";
    case Scenario::Parallel: return "parallel";
  }
  return "?";
}

Scenario scenario_from_name(const std::string& name) {
  if (name == "none") return Scenario::None;
  if (name == "time") return Scenario::TimeOnly;
  if (name == "freq") return Scenario::FreqOnly;
  if (name == "ft") return Scenario::FT;
  if (name == "tf") return Scenario::TF;
  if (name == "parallel" || name == "para") return Scenario::Parallel;
  fail("unknown attention scenario: " + name);
}

void AttentionConfig::validate() const {
  if (scenario == Scenario::Parallel) {
    if (!gamma.has_value()) fail("parallel attention requires gamma");
    if (*gamma < 0.0 || *gamma > 1.0) {
      fail("gamma must lie in [0,1], got " + std::to_string(*gamma));
    }
  } else if (gamma.has_value()) {
    fail("gamma is only valid for the parallel scenario");
  }
  if (bottleneck == 0) fail("attention bottleneck must be >= 1");
}

bool AttentionConfig::uses_freq() const {
  return scenario == Scenario::FreqOnly || scenario == Scenario::FT ||
         scenario == Scenario::TF || scenario == Scenario::Parallel;
}

bool AttentionConfig::uses_time() const {
  return scenario == Scenario::TimeOnly || scenario == Scenario::FT ||
         scenario == Scenario::TF || scenario == Scenario::Parallel;
}

std::size_t clamp_bottleneck(std::size_t k, std::size_t width) {
  return k < width ? k : width;
}

GateParams GateParams::glorot(std::size_t width, std::size_t k, std::mt19937_64& rng) {
  GateParams p;
  p.w0 = glorot_matrix(width, k, rng);
  p.b0 = Tensor::zeros({1, k}).set_requires_grad();
  p.w1 = glorot_matrix(k, width, rng);
  return p;
}

GateParams GateParams::zeros(std::size_t width, std::size_t k) {
  GateParams p;
  p.w0 = Tensor::zeros({width, k}).set_requires_grad();
  p.b0 = Tensor::zeros({1, k}).set_requires_grad();
  p.w1 = Tensor::zeros({k, width}).set_requires_grad();
  return p;
}

TimeAttentionParams TimeAttentionParams::glorot(std::size_t f, std::mt19937_64& rng) {
  TimeAttentionParams p;
  p.w0 = glorot_matrix(f, f, rng);
  p.b0 = Tensor::zeros({1, f}).set_requires_grad();
  p.w1 = glorot_matrix(f, 1, rng);
  return p;
}

TimeAttentionParams TimeAttentionParams::zeros(std::size_t f) {
  TimeAttentionParams p;
  p.w0 = Tensor::zeros({f, f}).set_requires_grad();
  p.b0 = Tensor::zeros({1, f}).set_requires_grad();
  p.w1 = Tensor::zeros({f, 1}).set_requires_grad();
  return p;
}

Tensor freq_attention_weights(const Tensor& h, const FreqAttentionParams& p) {
  if (h.rank() != 2) fail("freq_attention_weights expects T x F, got " + shape_str(h.shape()));
  if (h.dim(1) != p.width()) {
    fail("frequency attention width mismatch: map " + shape_str(h.shape()) + " vs params " +
         shape_str(p.w0.shape()));
  }
  const Tensor h_max = reduce_axis(h, 0, Reduce::max, /*keepdim=*/true);
  const Tensor h_avg = reduce_axis(h, 0, Reduce::mean, /*keepdim=*/true);
  const Tensor h_std = reduce_axis(h, 0, Reduce::stdev, /*keepdim=*/true);
  const Tensor h_stat = h_avg + h_std;
  return sigmoid(gate(h_stat, p) + gate(h_max, p));
}

Tensor apply_freq_attention(const Tensor& h, const Tensor& w) {
  if (h.rank() != 2 || w.rank() != 2 || w.dim(0) != 1 || w.dim(1) != h.dim(1)) {
    fail("apply_freq_attention: weight " + shape_str(w.shape()) + " does not match map " +
         shape_str(h.shape()));
  }
  return h * w;
}

Tensor time_attention_weights(const Tensor& h, const TimeAttentionParams& p) {
  if (h.rank() != 2) fail("time_attention_weights expects T x F, got " + shape_str(h.shape()));
  if (h.dim(1) != p.width()) {
    fail("time attention width mismatch: map " + shape_str(h.shape()) + " vs params " +
         shape_str(p.w0.shape()));
  }
  const Tensor scores = matmul(relu(matmul(h, p.w0) + p.b0), p.w1);  // T x 1
  return softmax_axis(scores, 0);
}

Tensor compose_attention(const Tensor& h, const AttentionConfig& cfg,
                         const FreqAttentionParams* fp, const TimeAttentionParams* tp) {
  cfg.validate();
  if (cfg.uses_freq() && fp == nullptr) fail("scenario needs frequency attention parameters");
  if (cfg.uses_time() && tp == nullptr) fail("scenario needs time attention parameters");

  switch (cfg.scenario) {
    case Scenario::None:
      return h;
    case Scenario::FreqOnly:
      return apply_freq_attention(h, freq_attention_weights(h, *fp));
    case Scenario::TimeOnly:
      return h * time_attention_weights(h, *tp);
    case Scenario::FT: {
      const Tensor refined = apply_freq_attention(h, freq_attention_weights(h, *fp));
      return refined * time_attention_weights(refined, *tp);
    }
    case Scenario::TF: {
      const Tensor refined = h * time_attention_weights(h, *tp);
      return apply_freq_attention(refined, freq_attention_weights(refined, *fp));
    }
    case Scenario::Parallel: {
      const double g = *cfg.gamma;
      const Tensor wf = freq_attention_weights(h, *fp);   // 1 x F
      const Tensor wt = time_attention_weights(h, *tp);   // T x 1
      return (g * wf + (1.0 - g) * wt) * h;
    }
  }
  fail("unreachable attention scenario");
}

Tensor cnn_time_attention_weights(const Tensor& h2d, const GateParams& tp) {
  if (h2d.rank() != 2) fail("cnn_time_attention_weights expects a 2-D map");
  if (h2d.dim(0) != tp.width()) {
    fail("cnn time attention width mismatch: map " + shape_str(h2d.shape()) + " vs params " +
         shape_str(tp.w0.shape()));
  }
  // Mirror of the frequency gate: descriptors pooled across the combined
  // feature axis, so work on the transposed map.
  return freq_attention_weights(transpose(h2d), tp);  // 1 x T
}

Tensor cnn_two_stage(const Tensor& hk, const AttentionConfig& cfg, const GateParams* fp,
                     const GateParams* tp) {
  cfg.validate();
  if (hk.rank() != 3) fail("cnn_two_stage expects {T,F,C}, got " + shape_str(hk.shape()));
  if (cfg.uses_freq() && fp == nullptr) fail("scenario needs frequency attention parameters");
  if (cfg.uses_time() && tp == nullptr) fail("scenario needs time attention parameters");

  const std::size_t t = hk.dim(0), f = hk.dim(1), c = hk.dim(2);
  const Tensor flat = reshape(hk, {t, f * c});

  auto freq_w = [&](const Tensor& m) { return freq_attention_weights(m, *fp); };   // 1 x FC
  auto time_w = [&](const Tensor& m) {
    return transpose(cnn_time_attention_weights(m, *tp));  // T x 1
  };

  Tensor out = flat;
  switch (cfg.scenario) {
    case Scenario::None:
      break;
    case Scenario::FreqOnly:
      out = flat * freq_w(flat);
      break;
    case Scenario::TimeOnly:
      out = flat * time_w(flat);
      break;
    case Scenario::FT: {
      const Tensor refined = flat * freq_w(flat);
      out = refined * time_w(refined);
      break;
    }
    case Scenario::TF: {
      const Tensor refined = flat * time_w(flat);
      out = refined * freq_w(refined);
      break;
    }
    case Scenario::Parallel: {
      const double g = *cfg.gamma;
      out = (g * freq_w(flat) + (1.0 - g) * time_w(flat)) * flat;
      break;
    }
  }
  return reshape(out, {t, f, c});
}

}  // namespace tsa
