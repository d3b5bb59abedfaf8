// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node holding data and an optional gradient
// buffer. Ops compute eagerly; when a Tape is active and an input requires
// gradients, the op appends a backward rule to the tape. Tape::backward seeds
// the loss gradient with 1 and replays the rules in exact reverse order,
// accumulating (+=) into every reachable node, leaves and intermediates alike.
// Gradients accumulate across backward calls until explicitly zeroed.
#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mgvit/common.hpp"

namespace mgvit {

namespace detail {

struct Node {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::unique_ptr<std::vector<double>> grad;  // lazily allocated, same length as data
  bool requires_grad = false;
  std::uint64_t tape_serial = 0;  // tape that recorded the producing op, 0 for leaves

  std::vector<double>& ensure_grad() {
    if (!grad) grad = std::make_unique<std::vector<double>>(data.size(), 0.0);
    return *grad;
  }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(detail::shape_numel(t.node_->shape), value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (detail::shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       detail::shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor row(std::vector<double> data, bool requires_grad = false) {
    const std::size_t n = data.size();
    return from_data({1, n}, std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::size_t rows() const {
    require_2d("rows()");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_2d("cols()");
    return node_->shape[1];
  }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  double& operator()(std::size_t i) { return node_->data[i]; }
  double operator()(std::size_t i) const { return node_->data[i]; }
  double& operator()(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  double item() const {
    if (size() != 1) throw UsageError("item() on tensor of size " + std::to_string(size()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && node_->grad != nullptr; }
  const std::vector<double>& grad() const {
    if (!node_->grad) throw UsageError("gradient not populated");
    return *node_->grad;
  }
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }

  void zero_grad() {
    if (node_ && node_->grad) std::fill(node_->grad->begin(), node_->grad->end(), 0.0);
  }

  // Identity of the underlying node; two handles to the same storage compare equal.
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  void require_2d(const char* what) const {
    if (ndim() != 2) throw ShapeError(std::string(what) + " on non-2-D tensor " + detail::shape_str(shape()));
  }
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Tape. Constructing one makes it the active tape for the current thread;
// destruction restores the previous one. Single-threaded per training step.
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape() : prev_(active_), serial_(next_serial().fetch_add(1) + 1) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const Tensor& out, std::function<void()> backward) {
    out.node()->tape_serial = serial_;
    records_.push_back(std::move(backward));
  }

  std::size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded rules newest-first.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) throw UsageError("backward requires a scalar loss");
    if (loss.node()->tape_serial != serial_ && !loss.requires_grad()) {
      throw UsageError("loss is not recorded on this tape");
    }
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  static std::atomic<std::uint64_t>& next_serial() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
  }
  friend class NoGrad;
  inline static thread_local Tape* active_ = nullptr;
  Tape* prev_;
  std::uint64_t serial_;
  std::vector<std::function<void()>> records_;
};

// Suspends gradient recording on the current thread for its lifetime.
class NoGrad {
 public:
  NoGrad() : prev_(Tape::active_) { Tape::active_ = nullptr; }
  ~NoGrad() { Tape::active_ = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenRowMajor>;
using MapConstMat = Eigen::Map<const EigenRowMajor>;

inline MapConstMat map2d(const Tensor& t) {
  return MapConstMat(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

inline MapMat map_buffer(std::vector<double>& buf, std::size_t r, std::size_t c) {
  return MapMat(buf.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Marks `out` as grad-requiring and registers the rule when appropriate.
inline void commit(const Tensor& out, bool inputs_require_grad, std::function<void()> backward,
                   const char* op_name) {
  if constexpr (kDebugFiniteChecks) check_finite(out.data(), op_name);
  Tape* tape = Tape::active();
  if (tape != nullptr && inputs_require_grad) {
    const_cast<Tensor&>(out).set_requires_grad(true);
    tape->record(out, std::move(backward));
  }
}

inline bool any_grad(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops.
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) + b(i);
  auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
  detail::commit(out, detail::any_grad({&a, &b}), [an, bn, on] {
    const auto& g = *on->grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  }, "add");
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) - b(i);
  auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
  detail::commit(out, detail::any_grad({&a, &b}), [an, bn, on] {
    const auto& g = *on->grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) * b(i);
  auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
  detail::commit(out, detail::any_grad({&a, &b}), [an, bn, on] {
    const auto& g = *on->grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
    }
  }, "mul");
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) * s;
  auto an = a.node_ptr(), on = out.node_ptr();
  detail::commit(out, a.requires_grad(), [an, on, s] {
    const auto& g = *on->grad;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  }, "scale");
  return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor abs_elem(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out(i) = std::fabs(a(i));
  auto an = a.node_ptr(), on = out.node_ptr();
  detail::commit(out, a.requires_grad(), [an, on] {
    const auto& g = *on->grad;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->data[i];
      ga[i] += g[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
    }
  }, "abs");
  return out;
}

// Adds a length-C row vector to every row of a RxC matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t vc = v.ndim() == 1 ? v.shape()[0] : v.cols();
  if (vc != c || (v.ndim() == 2 && v.rows() != 1) || v.ndim() > 2) {
    throw ShapeError("add_rowvec: " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(v.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(i, j) = a(i, j) + v(j);
  }
  auto an = a.node_ptr(), vn = v.node_ptr(), on = out.node_ptr();
  detail::commit(out, detail::any_grad({&a, &v}), [an, vn, on, r, c] {
    const auto& g = *on->grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (vn->requires_grad) {
      auto& gv = vn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
      }
    }
  }, "add_rowvec");
  return out;
}

// Scales row i of a RxC matrix by weights[i]. Weights are plain data (masks),
// not differentiable.
inline Tensor rowwise_scale(const Tensor& a, std::vector<double> weights) {
  const std::size_t r = a.rows(), c = a.cols();
  if (weights.size() != r) {
    throw ShapeError("rowwise_scale: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(r) + " rows");
  }
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(i, j) = a(i, j) * weights[i];
  }
  auto an = a.node_ptr(), on = out.node_ptr();
  auto w = std::make_shared<std::vector<double>>(std::move(weights));
  detail::commit(out, a.requires_grad(), [an, on, w, r, c] {
    const auto& g = *on->grad;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * (*w)[i];
    }
  }, "rowwise_scale");
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  detail::map_buffer(out.data(), m, n).noalias() = detail::map2d(a) * detail::map2d(b);
  auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
  detail::commit(out, detail::any_grad({&a, &b}), [an, bn, on, m, k, n] {
    detail::MapConstMat g(on->grad->data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    detail::MapConstMat av(an->data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    detail::MapConstMat bv(bn->data.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    if (an->requires_grad) {
      detail::map_buffer(an->ensure_grad(), m, k).noalias() += g * bv.transpose();
    }
    if (bn->requires_grad) {
      detail::map_buffer(bn->ensure_grad(), k, n).noalias() += av.transpose() * g;
    }
  }, "matmul");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  }
  auto an = a.node_ptr(), on = out.node_ptr();
  detail::commit(out, a.requires_grad(), [an, on, r, c] {
    const auto& g = *on->grad;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    }
  }, "transpose");
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  const std::size_t r = a.rows(), c = a.cols();
  if (r0 > r1 || r1 > r) throw ShapeError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + std::to_string(r) + " rows");
  Tensor out = Tensor::zeros({r1 - r0, c});
  std::copy(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * c),
            a.data().begin() + static_cast<std::ptrdiff_t>(r1 * c), out.data().begin());
  auto an = a.node_ptr(), on = out.node_ptr();
  detail::commit(out, a.requires_grad(), [an, on, r0, c] {
    const auto& g = *on->grad;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[r0 * c + i] += g[i];
  }, "slice_rows");
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  const std::size_t r = a.rows(), c = a.cols();
  if (c0 > c1 || c1 > c) throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + std::to_string(c) + " cols");
  const std::size_t w = c1 - c0;
  Tensor out = Tensor::zeros({r, w});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < w; ++j) out(i, j) = a(i, c0 + j);
  }
  auto an = a.node_ptr(), on = out.node_ptr();
  detail::commit(out, a.requires_grad(), [an, on, r, c, c0, w] {
    const auto& g = *on->grad;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w; ++j) ga[i * c + c0 + j] += g[i * w + j];
    }
  }, "slice_cols");
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  std::size_t at = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.size();
    needs = needs || p.requires_grad();
  }
  std::vector<std::shared_ptr<detail::Node>> ins;
  ins.reserve(parts.size());
  for (const Tensor& p : parts) ins.push_back(p.node_ptr());
  auto on = out.node_ptr();
  detail::commit(out, needs, [ins, on] {
    const auto& g = *on->grad;
    std::size_t at = 0;
    for (const auto& in : ins) {
      if (in->requires_grad) {
        auto& gi = in->ensure_grad();
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[at + i];
      }
      at += in->data.size();
    }
  }, "concat_rows");
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::zeros({r, total});
  std::size_t at = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w; ++j) out(i, at + j) = p(i, j);
    }
    at += w;
    needs = needs || p.requires_grad();
  }
  std::vector<std::shared_ptr<detail::Node>> ins;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    ins.push_back(p.node_ptr());
    widths.push_back(p.cols());
  }
  auto on = out.node_ptr();
  detail::commit(out, needs, [ins, widths, on, r, total] {
    const auto& g = *on->grad;
    std::size_t at = 0;
    for (std::size_t p = 0; p < ins.size(); ++p) {
      const std::size_t w = widths[p];
      if (ins[p]->requires_grad) {
        auto& gi = ins[p]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < w; ++j) gi[i * w + j] += g[i * total + at + j];
        }
      }
      at += w;
    }
  }, "concat_cols");
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions.
// ---------------------------------------------------------------------------

// Max-subtracted softmax along `axis` of an arbitrary-rank tensor.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " for shape " +
                     detail::shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  const std::size_t n = shape[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];

  Tensor out = Tensor::zeros(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x(base);
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x(base + i * inner));
      double denom = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(x(base + i * inner) - mx);
        out(base + i * inner) = e;
        denom += e;
      }
      for (std::size_t i = 0; i < n; ++i) out(base + i * inner) /= denom;
    }
  }
  auto xn = x.node_ptr(), on = out.node_ptr();
  detail::commit(out, x.requires_grad(), [xn, on, n, inner, outer] {
    const auto& g = *on->grad;
    const auto& s = on->data;
    auto& gx = xn->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * s[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = base + i * inner;
          gx[idx] += s[idx] * (g[idx] - dot);
        }
      }
    }
  }, "softmax");
  return out;
}

// LayerNorm over the last dimension with biased (1/N) variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-6) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: feature dim " + std::to_string(d) + " vs gain " +
                     std::to_string(gain.size()) + " / bias " + std::to_string(bias.size()));
  }
  const std::size_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(rows), xhat(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(base + j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(base + j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x(base + j) - mean) * is;
      xhat[base + j] = h;
      out(base + j) = h * gain(j) + bias(j);
    }
  }
  auto xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), on = out.node_ptr();
  auto aux_is = std::make_shared<std::vector<double>>(std::move(inv_std));
  auto aux_xh = std::make_shared<std::vector<double>>(std::move(xhat));
  detail::commit(out, detail::any_grad({&x, &gain, &bias}), [xn, gn, bn, on, aux_is, aux_xh, rows, d] {
    const auto& g = *on->grad;
    const auto& xh = *aux_xh;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * d;
      if (gn->requires_grad) {
        auto& gg = gn->ensure_grad();
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[base + j] * xh[base + j];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[base + j];
      }
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        double mean_dh = 0.0, mean_dh_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[base + j] * gn->data[j];
          mean_dh += dh;
          mean_dh_xh += dh * xh[base + j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_xh /= static_cast<double>(d);
        const double is = (*aux_is)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[base + j] * gn->data[j];
          gx[base + j] += is * (dh - mean_dh - xh[base + j] * mean_dh_xh);
        }
      }
    }
  }, "layer_norm");
  return out;
}

// Exact-erf GELU.
inline Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x(i);
    out(i) = 0.5 * v * (1.0 + std::erf(v / M_SQRT2));
  }
  auto xn = x.node_ptr(), on = out.node_ptr();
  detail::commit(out, x.requires_grad(), [xn, on] {
    const auto& g = *on->grad;
    auto& gx = xn->ensure_grad();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / M_SQRT2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  }, "gelu");
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x(i);
    out(i) = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto xn = x.node_ptr(), on = out.node_ptr();
  detail::commit(out, x.requires_grad(), [xn, on] {
    const auto& g = *on->grad;
    const auto& s = on->data;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
  }, "sigmoid");
  return out;
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += x(i);
  Tensor out = Tensor::scalar(total);
  auto xn = x.node_ptr(), on = out.node_ptr();
  detail::commit(out, x.requires_grad(), [xn, on] {
    const double g = (*on->grad)[0];
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  }, "sum");
  return out;
}

inline Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += x(i);
  Tensor out = Tensor::scalar(total * inv);
  auto xn = x.node_ptr(), on = out.node_ptr();
  detail::commit(out, x.requires_grad(), [xn, on, inv] {
    const double g = (*on->grad)[0] * inv;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  }, "mean");
  return out;
}

// Mean over the batch of label-smoothed negative log-likelihood. The smoothing
// mass is distributed uniformly over all C classes (true class included).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                            double smoothing = 0.0) {
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(b));
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw InputError("smoothing must be in [0,1)");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw InputError("label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    }
  }
  // loss_b = logsumexp(z_b) - sum_c q_c z_{b,c},  q_c = eps/C + (1-eps)[c==y]
  std::vector<double> lse(b), probs(b * c);
  double total = 0.0;
  const double uni = smoothing / static_cast<double>(c);
  for (std::size_t i = 0; i < b; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(logits(i, j) - mx);
    lse[i] = mx + std::log(denom);
    double weighted = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(logits(i, j) - lse[i]);
      weighted += uni * logits(i, j);
    }
    weighted += (1.0 - smoothing) * logits(i, static_cast<std::size_t>(labels[i]));
    total += lse[i] - weighted;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  auto zn = logits.node_ptr(), on = out.node_ptr();
  auto aux_p = std::make_shared<std::vector<double>>(std::move(probs));
  auto aux_y = std::make_shared<std::vector<int>>(labels);
  detail::commit(out, logits.requires_grad(), [zn, on, aux_p, aux_y, b, c, smoothing, uni] {
    const double g = (*on->grad)[0] / static_cast<double>(b);
    auto& gz = zn->ensure_grad();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double q = uni;
        if (j == static_cast<std::size_t>((*aux_y)[i])) q += 1.0 - smoothing;
        gz[i * c + j] += g * ((*aux_p)[i * c + j] - q);
      }
    }
  }, "cross_entropy");
  return out;
}

}  // namespace mgvit
