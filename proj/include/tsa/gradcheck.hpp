// Central finite-difference verification of every differentiable op. The
// numeric side only ever evaluates forward passes, so it stays independent
// of the pull-back implementations it checks.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsa/tensor.hpp"

namespace tsa {

// Max element-wise relative error between analytic and central-difference
// gradients over all leaves. Relative error uses max(|analytic|, |numeric|,
// 1e-3) as denominator. Elements failing at the base step are re-checked at
// h/10 and h/100: truncation error collapses there while a genuinely wrong
// pull-back does not, which filters the rare draw that lands an activation
// kink inside the stencil.
double check_gradients(const std::function<Tensor()>& forward, const std::vector<Tensor>& leaves,
                       double h = 1e-5, double tolerance = 1e-4);

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  std::size_t seeds = 0;
};

// Runs every registered op case `seeds_per_op` times with distinct seeds.
std::vector<GradCheckReport> run_gradient_suite(std::size_t seeds_per_op, std::uint64_t base_seed);

}  // namespace tsa
