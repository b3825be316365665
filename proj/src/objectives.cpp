#include "tsa/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tsa {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_labels(std::size_t batch, std::size_t classes, const std::vector<std::size_t>& labels) {
  if (labels.size() != batch) {
    fail("label count " + std::to_string(labels.size()) + " does not match batch " +
         std::to_string(batch));
  }
  for (std::size_t y : labels) {
    if (y >= classes) {
      fail("label " + std::to_string(y) + " out of range [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

void AmSoftmaxConfig::validate() const {
  if (scale <= 0.0) fail("am-softmax scale must be positive");
  if (margin < 0.0 || margin >= 1.0) fail("am-softmax margin must lie in [0, 1)");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) fail("cross_entropy expects B x C logits, got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  check_labels(b, c, labels);

  const auto& lv = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = lv[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(lv[i * c + j] - mx);
    total += mx + std::log(sum) - lv[i * c + labels[i]];
  }
  const double loss = total / static_cast<double>(b);

  Tensor result = Tensor::scalar(loss);
  Tape* tape = Tape::current();
  if (tape && (logits.requires_grad() || logits.impl()->tracked)) {
    result.impl()->tracked = true;
    result.impl()->producer = tape;
    tape->record(result.impl_ptr(), [li = logits.impl_ptr(), oi = result.impl_ptr(), labels, b, c]() {
      li->ensure_grad();
      const double g = oi->grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        double mx = li->data[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, li->data[i * c + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(li->data[i * c + j] - mx);
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(li->data[i * c + j] - mx) / sum;
          li->grad[i * c + j] += g * (p - (j == labels[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return result;
}

Tensor am_softmax(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                  const Tensor& class_weights, const AmSoftmaxConfig& cfg) {
  cfg.validate();
  if (embeddings.rank() != 2 || class_weights.rank() != 2) {
    fail("am_softmax expects 2-D embeddings and class weights");
  }
  if (embeddings.dim(1) != class_weights.dim(1)) {
    fail("am_softmax dim mismatch: embeddings " + shape_str(embeddings.shape()) +
         " vs class weights " + shape_str(class_weights.shape()));
  }
  const std::size_t b = embeddings.dim(0), c = class_weights.dim(0);
  check_labels(b, c, labels);

  // Row-L2 normalization with the epsilon inside the root keeps zero-norm
  // rows finite.
  auto normalize_rows = [](const Tensor& x) {
    const Tensor sq = reduce_axis(x * x, 1, Reduce::sum, /*keepdim=*/true);
    return x / sqrt_elem(sq + 1e-12);
  };
  const Tensor en = normalize_rows(embeddings);
  const Tensor wn = normalize_rows(class_weights);
  const Tensor cos = matmul(en, transpose(wn));  // B x C

  Tensor margin_mask = Tensor::zeros({b, c});
  for (std::size_t i = 0; i < b; ++i) {
    margin_mask.mutable_values()[i * c + labels[i]] = cfg.margin;
  }
  const Tensor adjusted = (cos - margin_mask) * cfg.scale;
  return cross_entropy(adjusted, labels);
}

double top1(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) fail("top1 expects B x C logits");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  check_labels(b, c, labels);
  const auto& lv = logits.values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (lv[i * c + j] > lv[i * c + arg]) arg = j;  // ties keep the lowest index
    }
    if (arg == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

double cosine_score(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    fail("cosine_score dim mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a(i) * b(i);
    na += a(i) * a(i);
    nb += b(i) * b(i);
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

double eer(const std::vector<Trial>& trials) {
  std::vector<double> same, diff;
  for (const Trial& t : trials) (t.same_speaker ? same : diff).push_back(t.score);
  if (same.empty() || diff.empty()) {
    fail("EER undefined: need both same-speaker and different-speaker trials");
  }
  std::sort(same.begin(), same.end());
  std::sort(diff.begin(), diff.end());

  std::vector<double> thresholds;
  thresholds.reserve(same.size() + diff.size());
  thresholds.insert(thresholds.end(), same.begin(), same.end());
  thresholds.insert(thresholds.end(), diff.begin(), diff.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double n_same = static_cast<double>(same.size());
  const double n_diff = static_cast<double>(diff.size());
  auto far_at = [&](double t) {
    // fraction of different-speaker trials accepted (score >= t)
    const auto it = std::lower_bound(diff.begin(), diff.end(), t);
    return static_cast<double>(diff.end() - it) / n_diff;
  };
  auto frr_at = [&](double t) {
    // fraction of same-speaker trials rejected (score < t)
    const auto it = std::lower_bound(same.begin(), same.end(), t);
    return static_cast<double>(it - same.begin()) / n_same;
  };

  // Sweep candidates in increasing order; FAR falls from 1, FRR rises from
  // 0, so the sign of FAR-FRR flips exactly once. A virtual point past the
  // max score (FAR 0, FRR 1) closes the sweep.
  double prev_far = 1.0, prev_frr = 0.0;
  for (std::size_t k = 0; k <= thresholds.size(); ++k) {
    double far, frr;
    if (k < thresholds.size()) {
      far = far_at(thresholds[k]);
      frr = frr_at(thresholds[k]);
    } else {
      far = 0.0;
      frr = 1.0;
    }
    const double d = far - frr;
    if (d <= 0.0) {
      if (d == 0.0) return (far + frr) / 2.0;
      const double d_prev = prev_far - prev_frr;
      const double lambda = d_prev / (d_prev - d);  // in (0, 1]
      const double far_x = prev_far + lambda * (far - prev_far);
      const double frr_x = prev_frr + lambda * (frr - prev_frr);
      return (far_x + frr_x) / 2.0;
    }
    prev_far = far;
    prev_frr = frr;
  }
  return 0.5;  // unreachable: the virtual end point has d = -1
}

std::vector<TrialPair> read_trial_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trial list: " + path);
  std::vector<TrialPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string label, a, b;
    if (!(ss >> label >> a >> b)) {
      if (label.empty()) continue;  // blank line
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected `<label> <path_a> <path_b>`");
    }
    if (label != "0" && label != "1") {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": label must be 0 or 1, got " + label);
    }
    pairs.push_back(TrialPair{label == "1", a, b});
  }
  return pairs;
}

void write_trial_list(const std::string& path, const std::vector<TrialPair>& pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot create trial list: " + path);
  for (const auto& p : pairs) {
    out << (p.same_speaker ? 1 : 0) << " " << p.path_a << " " << p.path_b << "\n";
  }
}

}  // namespace tsa
