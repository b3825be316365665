#include "tsa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tsa {

namespace {

thread_local Tape* g_current_tape = nullptr;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

bool is_tracked(const Tensor& t) {
  return t.impl()->requires_grad || t.impl()->tracked;
}

// Debug-mode invariant: forward ops on finite inputs produce finite data.
void check_finite(const detail::TensorImpl& impl, const char* op) {
#ifndef NDEBUG
  for (double v : impl.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
  }
#else
  (void)impl;
  (void)op;
#endif
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Strides for reading `src` as if broadcast to `out`: 0 on stretched axes,
// with missing leading axes treated as size 1.
std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& out) {
  auto src_strides = row_major_strides(src);
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t off = out.size() - src.size();
  for (std::size_t i = 0; i < src.size(); ++i) {
    st[off + i] = (src[i] == 1 && out[off + i] != 1) ? 0 : src_strides[i];
  }
  return st;
}

// Adds `grad_out` (shaped `out_shape`) into t->grad, summing over axes where
// t was stretched or padded during broadcasting.
void accumulate_broadcast_grad(const std::vector<double>& grad_out, const Shape& out_shape,
                               detail::TensorImpl* t) {
  t->ensure_grad();
  const auto st = broadcast_strides(t->shape, out_shape);
  const std::size_t n = shape_numel(out_shape);
  std::vector<std::size_t> idx(out_shape.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) src += idx[d] * st[d];
    t->grad[src] += grad_out[flat];
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op) {
  Tensor out(std::move(shape), std::move(data));
  check_finite(*out.impl(), op);
  return out;
}

// Records the pull-back on the active tape when any input is tracked.
template <typename Fn>
void maybe_record(const Tensor& out, std::initializer_list<const Tensor*> inputs, Fn&& pull) {
  Tape* tape = Tape::current();
  if (!tape) return;
  bool any = false;
  for (const Tensor* t : inputs) any = any || is_tracked(*t);
  if (!any) return;
  out.impl()->tracked = true;
  out.impl()->producer = tape;
  tape->record(out.impl_ptr(), std::forward<Fn>(pull));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape.empty()) fail("tensor shape must have rank >= 1");
  for (std::size_t d : shape) {
    if (d == 0) fail("tensor shape has a zero axis: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    fail("tensor data length " + std::to_string(values.size()) + " does not match shape " +
         shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor::Tensor(Shape shape, double fill)
    : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) fail("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

double Tensor::operator()(std::size_t i) const { return impl_->data.at(i); }

double Tensor::operator()(std::size_t i, std::size_t j) const {
  if (rank() != 2) fail("2-index access on tensor " + shape_str(shape()));
  return impl_->data[i * impl_->shape[1] + j];
}

double Tensor::operator()(std::size_t i, std::size_t j, std::size_t k) const {
  if (rank() != 3) fail("3-index access on tensor " + shape_str(shape()));
  return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
}

double Tensor::item() const {
  if (!is_scalar()) fail("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) fail("tensor has no gradient");
  return impl_->grad;
}

double Tensor::grad_at(std::size_t flat) const { return grad()[flat]; }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

// --- tape -------------------------------------------------------------------

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> pull) {
  nodes_.push_back(Node{std::move(output), std::move(pull)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    fail("backward expects a scalar loss, got " + shape_str(loss.shape()));
  }
  if (loss.impl()->producer != this) {
    fail("backward: loss was not produced through tracked ops on this tape");
  }
  // Intermediate (node-output) gradients are per-pass scratch; leaf
  // gradients persist so repeated backward calls accumulate.
  for (Node& n : nodes_) {
    n.output->ensure_grad();
    std::fill(n.output->grad.begin(), n.output->grad.end(), 0.0);
  }
  loss.impl()->grad[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i].pull();
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (!tape) fail("backward called with no active tape");
  tape->backward(loss);
}

// --- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// --- ops ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    fail("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    fail("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tensor result = make_result({m, n}, std::move(out), "matmul");
  maybe_record(result, {&a, &b}, [ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr(), m,
                                  k, n]() {
    const auto& g = oi->grad;
    if (ai->requires_grad || ai->tracked) {
      ai->ensure_grad();
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) ai->grad[i * k + p] += gij * bi->data[p * n + j];
        }
    }
    if (bi->requires_grad || bi->tracked) {
      bi->ensure_grad();
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = ai->data[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) bi->grad[p * n + j] += aip * g[i * n + j];
        }
    }
  });
  return result;
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(n);
  std::vector<std::size_t> idx(out_shape.size(), 0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    switch (op) {
      case Elementwise::add: out[flat] = av[ia] + bv[ib]; break;
      case Elementwise::sub: out[flat] = av[ia] - bv[ib]; break;
      case Elementwise::mul: out[flat] = av[ia] * bv[ib]; break;
      case Elementwise::div: out[flat] = av[ia] / bv[ib]; break;
    }
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor result = make_result(out_shape, std::move(out), "elementwise");
  maybe_record(result, {&a, &b},
               [ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr(), op, out_shape]() {
    const auto& g = oi->grad;
    const std::size_t n = g.size();
    const auto sa = broadcast_strides(ai->shape, out_shape);
    const auto sb = broadcast_strides(bi->shape, out_shape);
    std::vector<double> ga, gb;
    const bool need_a = ai->requires_grad || ai->tracked;
    const bool need_b = bi->requires_grad || bi->tracked;
    if (need_a) ga.assign(n, 0.0);
    if (need_b) gb.assign(n, 0.0);
    std::vector<std::size_t> idx(out_shape.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t ia = 0, ib = 0;
      for (std::size_t d = 0; d < out_shape.size(); ++d) {
        ia += idx[d] * sa[d];
        ib += idx[d] * sb[d];
      }
      switch (op) {
        case Elementwise::add:
          if (need_a) ga[flat] = g[flat];
          if (need_b) gb[flat] = g[flat];
          break;
        case Elementwise::sub:
          if (need_a) ga[flat] = g[flat];
          if (need_b) gb[flat] = -g[flat];
          break;
        case Elementwise::mul:
          if (need_a) ga[flat] = g[flat] * bi->data[ib];
          if (need_b) gb[flat] = g[flat] * ai->data[ia];
          break;
        case Elementwise::div:
          if (need_a) ga[flat] = g[flat] / bi->data[ib];
          if (need_b) gb[flat] = -g[flat] * ai->data[ia] / (bi->data[ib] * bi->data[ib]);
          break;
      }
      for (std::size_t d = out_shape.size(); d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
    if (need_a) accumulate_broadcast_grad(ga, out_shape, ai.get());
    if (need_b) accumulate_broadcast_grad(gb, out_shape, bi.get());
  });
  return result;
}

Tensor activation(const Tensor& x, Activation kind) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = kind == Activation::relu ? std::max(0.0, xv[i]) : 1.0 / (1.0 + std::exp(-xv[i]));
  }
  Tensor result = make_result(x.shape(), std::move(out), "activation");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr(), kind]() {
    xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      const double local = kind == Activation::relu ? (xi->data[i] > 0.0 ? 1.0 : 0.0)
                                                    : oi->data[i] * (1.0 - oi->data[i]);
      xi->grad[i] += oi->grad[i] * local;
    }
  });
  return result;
}

Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }

Tensor sqrt_elem(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xv[i] < 0.0) fail("sqrt_elem: negative input");
    out[i] = std::sqrt(xv[i]);
  }
  Tensor result = make_result(x.shape(), std::move(out), "sqrt_elem");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr()]() {
    xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      xi->grad[i] += oi->grad[i] * 0.5 / oi->data[i];
    }
  });
  return result;
}

namespace {

// Iterates all slices along `axis`: outer runs over the leading axes,
// inner over the trailing ones; slice element j sits at base + j*inner.
struct AxisIter {
  std::size_t outer = 1, inner = 1, len = 0;
  AxisIter(const Shape& s, std::size_t axis) {
    len = s[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  }
};

}  // namespace

Tensor softmax_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    fail("softmax axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const AxisIter it(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t i = 0; i < it.inner; ++i) {
      const std::size_t base = o * it.len * it.inner + i;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < it.len; ++j) mx = std::max(mx, xv[base + j * it.inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < it.len; ++j) {
        const double e = std::exp(xv[base + j * it.inner] - mx);
        out[base + j * it.inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < it.len; ++j) out[base + j * it.inner] /= sum;
    }
  }
  Tensor result = make_result(x.shape(), std::move(out), "softmax");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr(), it]() {
    xi->ensure_grad();
    for (std::size_t o = 0; o < it.outer; ++o) {
      for (std::size_t i = 0; i < it.inner; ++i) {
        const std::size_t base = o * it.len * it.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < it.len; ++j) {
          const std::size_t p = base + j * it.inner;
          dot += oi->grad[p] * oi->data[p];
        }
        for (std::size_t j = 0; j < it.len; ++j) {
          const std::size_t p = base + j * it.inner;
          xi->grad[p] += oi->data[p] * (oi->grad[p] - dot);
        }
      }
    }
  });
  return result;
}

Tensor reduce_axis(const Tensor& x, std::size_t axis, Reduce kind, bool keepdim) {
  if (axis >= x.rank()) {
    fail("reduce axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const AxisIter it(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const auto& xv = x.values();
  std::vector<double> out(it.outer * it.inner);
  std::vector<std::size_t> argmax;  // per output slot, for max routing
  if (kind == Reduce::max) argmax.resize(out.size());

  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t i = 0; i < it.inner; ++i) {
      const std::size_t base = o * it.len * it.inner + i;
      const std::size_t slot = o * it.inner + i;
      switch (kind) {
        case Reduce::sum:
        case Reduce::mean: {
          double s = 0.0;
          for (std::size_t j = 0; j < it.len; ++j) s += xv[base + j * it.inner];
          out[slot] = kind == Reduce::sum ? s : s / static_cast<double>(it.len);
          break;
        }
        case Reduce::max: {
          double best = xv[base];
          std::size_t arg = 0;
          for (std::size_t j = 1; j < it.len; ++j) {
            const double v = xv[base + j * it.inner];
            if (v > best) {  // strict: ties route to the first argmax
              best = v;
              arg = j;
            }
          }
          out[slot] = best;
          argmax[slot] = arg;
          break;
        }
        case Reduce::stdev: {
          double mean = 0.0;
          for (std::size_t j = 0; j < it.len; ++j) mean += xv[base + j * it.inner];
          mean /= static_cast<double>(it.len);
          double var = 0.0;
          for (std::size_t j = 0; j < it.len; ++j) {
            const double d = xv[base + j * it.inner] - mean;
            var += d * d;
          }
          var /= static_cast<double>(it.len);  // population variance
          out[slot] = std::sqrt(var + 1e-10);
          break;
        }
      }
    }
  }
  Tensor result = make_result(out_shape, std::move(out), "reduce");
  maybe_record(result, {&x},
               [xi = x.impl_ptr(), oi = result.impl_ptr(), it, kind, argmax = std::move(argmax)]() {
    xi->ensure_grad();
    for (std::size_t o = 0; o < it.outer; ++o) {
      for (std::size_t i = 0; i < it.inner; ++i) {
        const std::size_t base = o * it.len * it.inner + i;
        const std::size_t slot = o * it.inner + i;
        const double g = oi->grad[slot];
        switch (kind) {
          case Reduce::sum:
            for (std::size_t j = 0; j < it.len; ++j) xi->grad[base + j * it.inner] += g;
            break;
          case Reduce::mean:
            for (std::size_t j = 0; j < it.len; ++j) {
              xi->grad[base + j * it.inner] += g / static_cast<double>(it.len);
            }
            break;
          case Reduce::max:
            xi->grad[base + argmax[slot] * it.inner] += g;
            break;
          case Reduce::stdev: {
            double mean = 0.0;
            for (std::size_t j = 0; j < it.len; ++j) mean += xi->data[base + j * it.inner];
            mean /= static_cast<double>(it.len);
            const double denom = static_cast<double>(it.len) * oi->data[slot];
            for (std::size_t j = 0; j < it.len; ++j) {
              xi->grad[base + j * it.inner] += g * (xi->data[base + j * it.inner] - mean) / denom;
            }
            break;
          }
        }
      }
    }
  });
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  Tensor result = make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()),
                              "reshape");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr()]() {
    xi->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
  });
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) fail("transpose expects a 2-D tensor, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  Tensor result = make_result({n, m}, std::move(out), "transpose");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr(), m, n]() {
    xi->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) xi->grad[i * n + j] += oi->grad[j * m + i];
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) fail("concat of zero tensors");
  const std::size_t rank = xs[0].rank();
  if (axis >= rank) fail("concat axis out of range");
  Shape out_shape = xs[0].shape();
  std::size_t axis_total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != rank) fail("concat rank mismatch");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != axis && t.dim(d) != out_shape[d]) {
        fail("concat shape mismatch: " + shape_str(out_shape) + " vs " + shape_str(t.shape()));
      }
    }
    axis_total += t.dim(axis);
  }
  out_shape[axis] = axis_total;

  const AxisIter oit(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t axis_off = 0;
  for (const Tensor& t : xs) {
    const AxisIter tit(t.shape(), axis);
    const auto& tv = t.values();
    for (std::size_t o = 0; o < tit.outer; ++o) {
      for (std::size_t j = 0; j < tit.len; ++j) {
        for (std::size_t i = 0; i < tit.inner; ++i) {
          out[(o * oit.len + axis_off + j) * oit.inner + i] = tv[(o * tit.len + j) * tit.inner + i];
        }
      }
    }
    axis_off += t.dim(axis);
  }
  Tensor result = make_result(out_shape, std::move(out), "concat");

  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  impls.reserve(xs.size());
  for (const Tensor& t : xs) impls.push_back(t.impl_ptr());
  Tape* tape = Tape::current();
  bool any = false;
  for (const Tensor& t : xs) any = any || is_tracked(t);
  if (tape && any) {
    result.impl()->tracked = true;
    result.impl()->producer = tape;
    tape->record(result.impl_ptr(), [impls = std::move(impls), oi = result.impl_ptr(), axis, oit]() {
      std::size_t axis_off = 0;
      for (auto& ti : impls) {
        const AxisIter tit(ti->shape, axis);
        if (ti->requires_grad || ti->tracked) {
          ti->ensure_grad();
          for (std::size_t o = 0; o < tit.outer; ++o) {
            for (std::size_t j = 0; j < tit.len; ++j) {
              for (std::size_t i = 0; i < tit.inner; ++i) {
                ti->grad[(o * tit.len + j) * tit.inner + i] +=
                    oi->grad[(o * oit.len + axis_off + j) * oit.inner + i];
              }
            }
          }
        }
        axis_off += ti->shape[axis];
      }
    });
  }
  return result;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor result = make_result({1}, {s}, "sum_all");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr()]() {
    xi->ensure_grad();
    for (double& g : xi->grad) g += oi->grad[0];
  });
  return result;
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  Tensor result = make_result({1}, {s / n}, "mean_all");
  maybe_record(result, {&x}, [xi = x.impl_ptr(), oi = result.impl_ptr(), n]() {
    xi->ensure_grad();
    for (double& g : xi->grad) g += oi->grad[0] / n;
  });
  return result;
}

Tensor gather_context(const Tensor& x, const std::vector<int>& offsets) {
  if (x.rank() != 2) fail("gather_context expects a 2-D tensor, got " + shape_str(x.shape()));
  if (offsets.empty()) fail("gather_context: empty offset list");
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    if (offsets[i] <= offsets[i - 1]) fail("gather_context: offsets must be sorted and unique");
  }
  const int lo = offsets.front(), hi = offsets.back();
  const std::size_t t_in = x.dim(0), f = x.dim(1);
  const std::size_t span = static_cast<std::size_t>(hi - lo);
  if (t_in <= span) {
    fail("utterance too short for receptive field: T=" + std::to_string(t_in) +
         ", context span " + std::to_string(span + 1));
  }
  const std::size_t t_out = t_in - span;
  const std::size_t width = offsets.size() * f;
  std::vector<double> out(t_out * width);
  const auto& xv = x.values();
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t c = 0; c < offsets.size(); ++c) {
      const std::size_t src = (t + static_cast<std::size_t>(offsets[c] - lo)) * f;
      std::copy_n(&xv[src], f, &out[t * width + c * f]);
    }
  }
  Tensor result = make_result({t_out, width}, std::move(out), "gather_context");
  maybe_record(result, {&x},
               [xi = x.impl_ptr(), oi = result.impl_ptr(), offsets, lo, f, t_out, width]() {
    xi->ensure_grad();
    for (std::size_t t = 0; t < t_out; ++t) {
      for (std::size_t c = 0; c < offsets.size(); ++c) {
        const std::size_t src = (t + static_cast<std::size_t>(offsets[c] - lo)) * f;
        for (std::size_t j = 0; j < f; ++j) {
          xi->grad[src + j] += oi->grad[t * width + c * f + j];
        }
      }
    }
  });
  return result;
}

std::size_t conv_out_dim(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
  if (n + 2 * pad < k) fail("conv: input smaller than kernel");
  return (n + 2 * pad - k) / stride + 1;
}

Tensor im2col(const Tensor& x, std::size_t kt, std::size_t kf, std::size_t stride,
              std::size_t pad) {
  if (x.rank() != 3) fail("im2col expects a {T,F,C} tensor, got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), f = x.dim(1), c = x.dim(2);
  const std::size_t to = conv_out_dim(t, kt, stride, pad);
  const std::size_t fo = conv_out_dim(f, kf, stride, pad);
  const std::size_t width = kt * kf * c;
  std::vector<double> out(to * fo * width, 0.0);
  const auto& xv = x.values();
  for (std::size_t ot = 0; ot < to; ++ot) {
    for (std::size_t of = 0; of < fo; ++of) {
      double* row = &out[(ot * fo + of) * width];
      for (std::size_t dt = 0; dt < kt; ++dt) {
        const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(ot * stride + dt) -
                                  static_cast<std::ptrdiff_t>(pad);
        if (it < 0 || it >= static_cast<std::ptrdiff_t>(t)) continue;
        for (std::size_t df = 0; df < kf; ++df) {
          const std::ptrdiff_t jf = static_cast<std::ptrdiff_t>(of * stride + df) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (jf < 0 || jf >= static_cast<std::ptrdiff_t>(f)) continue;
          std::copy_n(&xv[(static_cast<std::size_t>(it) * f + static_cast<std::size_t>(jf)) * c],
                      c, &row[(dt * kf + df) * c]);
        }
      }
    }
  }
  Tensor result = make_result({to * fo, width}, std::move(out), "im2col");
  maybe_record(result, {&x},
               [xi = x.impl_ptr(), oi = result.impl_ptr(), t, f, c, to, fo, kt, kf, stride, pad,
                width]() {
    xi->ensure_grad();
    for (std::size_t ot = 0; ot < to; ++ot) {
      for (std::size_t of = 0; of < fo; ++of) {
        const double* row = &oi->grad[(ot * fo + of) * width];
        for (std::size_t dt = 0; dt < kt; ++dt) {
          const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(ot * stride + dt) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (it < 0 || it >= static_cast<std::ptrdiff_t>(t)) continue;
          for (std::size_t df = 0; df < kf; ++df) {
            const std::ptrdiff_t jf = static_cast<std::ptrdiff_t>(of * stride + df) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (jf < 0 || jf >= static_cast<std::ptrdiff_t>(f)) continue;
            for (std::size_t ch = 0; ch < c; ++ch) {
              xi->grad[(static_cast<std::size_t>(it) * f + static_cast<std::size_t>(jf)) * c + ch] +=
                  row[(dt * kf + df) * c + ch];
            }
          }
        }
      }
    }
  });
  return result;
}

Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::add); }
Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::sub); }
Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::mul); }
Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::div); }

Tensor operator*(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  Tensor result = make_result(a.shape(), std::move(out), "scale");
  maybe_record(result, {&a}, [ai = a.impl_ptr(), oi = result.impl_ptr(), c]() {
    ai->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
  });
  return result;
}

Tensor operator*(double c, const Tensor& a) { return a * c; }

Tensor operator+(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  Tensor result = make_result(a.shape(), std::move(out), "shift");
  maybe_record(result, {&a}, [ai = a.impl_ptr(), oi = result.impl_ptr()]() {
    ai->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
  return result;
}

}  // namespace tsa
