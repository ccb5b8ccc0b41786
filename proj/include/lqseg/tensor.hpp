#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lqseg/errors.hpp"
#include "lqseg/rng.hpp"

namespace lqseg {

// Dense n-dimensional array of 64-bit reals, row-major. Copies of a Tensor
// share storage; ops never mutate their inputs, so shared storage behaves as
// a value except for parameter updates and gradient accumulation, which are
// the owner's responsibility between forward passes.
struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data once touched, else empty
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  const double* data() const { return impl_->data.data(); }
  double* data() { return impl_->data.data(); }
  const std::vector<double>& values() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v);
  bool has_grad() const { return !impl_->grad.empty(); }
  const double* grad() const { return impl_->grad.data(); }
  std::vector<double>& grad_vec() { return impl_->grad; }
  void zero_grad();

  // Scalar read; contract: numel() == 1.
  double item() const;

  // Detached deep copy (no grad, no graph).
  Tensor detach_copy() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_tensor(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad);
};

Tensor make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad);

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Per-thread tape of recorded operations. Ops append nodes in execution
// order, so the node list is topologically sorted by construction. backward()
// walks it once in reverse and then frees it.
class Graph {
 public:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;
  };

  static Graph& current();  // thread-local instance

  bool recording() const { return enabled_; }
  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear();

  // Runs reverse-mode accumulation from `loss` over this tape, then clears it.
  void backward_from(const std::shared_ptr<TensorImpl>& loss);

 private:
  friend class NoGradGuard;
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

// RAII guard that disables recording on the current thread's graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- Recorded ops ----------------------------------------------------------
// Elementwise binary ops require identical shapes; broadcasting is limited to
// the explicit row/channel-vector variants and scalar forms below.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// a[m x n] + v[n], broadcast over rows (bias add).
Tensor add_rowvec(const Tensor& a, const Tensor& v);
// x[C x H x W] + v[C], broadcast over the spatial extent.
Tensor add_chanvec(const Tensor& x, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Gather rows of a 2-d tensor; gradient scatters back additively.
Tensor take_rows(const Tensor& a, const std::vector<int>& rows);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Row sums of a 2-d tensor: [m x n] -> [m].
Tensor row_sums(const Tensor& a);
// a[m x n] / d[m] per row.
Tensor div_rowwise(const Tensor& a, const Tensor& d);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// log(max(x, floor)); gradient is 0 where the clamp binds.
Tensor log_clamped(const Tensor& a, double floor = 1e-12);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor reciprocal(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);

// Row-wise layer norm on [m x n] with learned gain/offset of shape [n].
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& offset,
                       double eps = 1e-5);

// x[C_in x H x W] * w[C_out x C_in x k x k]; k odd.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Bilinear resample of [C x H x W] to [C x out_h x out_w], align_corners=false.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

// Seeds grad(loss)=1 and accumulates gradients over the current thread's
// graph; the graph is freed afterwards. Contract: loss is scalar and was
// produced by a recorded op.
void backward(const Tensor& loss);

// Max over elements of |analytic - central difference| /
// max(1e-8, |analytic| + |numeric|) for f at x, central step h. `f` must be
// deterministic and produce its scalar through recorded ops. Evaluates every
// element of x.
using ScalarFn = std::function<Tensor(const Tensor&)>;
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);
// Same check restricted to `max_coords` deterministically sampled elements.
double finite_diff_check_sampled(const ScalarFn& f, const Tensor& x, double h,
                                 int max_coords, std::uint64_t seed);

// ---- Unrecorded helpers ----------------------------------------------------

double stable_sigmoid(double x);
// Deterministic initializers (never recorded).
Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng);
Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng);

}  // namespace lqseg
