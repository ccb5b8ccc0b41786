#include "lqseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace lqseg {

namespace {

// Cache-blocked kernels; panels sized to keep the streamed operand in L2.

// C[m x n] += A[m x k] * B[k x n], all row-major, no aliasing.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  constexpr int kb = 64, jb = 512;
  for (int p0 = 0; p0 < k; p0 += kb) {
    const int p1 = std::min(k, p0 + kb);
    for (int j0 = 0; j0 < n; j0 += jb) {
      const int j1 = std::min(n, j0 + jb);
      for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = p0; p < p1; ++p) {
          const double ap = arow[p];
          const double* brow = b + static_cast<std::size_t>(p) * n;
          for (int j = j0; j < j1; ++j) crow[j] += ap * brow[j];
        }
      }
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T. Materializes B^T and reuses the axpy
// kernel; the dot-product form cannot vectorize under strict FP semantics.
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  std::vector<double> bt(static_cast<std::size_t>(k) * n);
  constexpr int tile = 64;
  for (int j0 = 0; j0 < n; j0 += tile)
    for (int p0 = 0; p0 < k; p0 += tile) {
      const int j1 = std::min(n, j0 + tile), p1 = std::min(k, p0 + tile);
      for (int j = j0; j < j1; ++j)
        for (int p = p0; p < p1; ++p)
          bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
    }
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m x n] += A[k x m]^T * B[k x n].
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  constexpr int jb = 512;
  for (int j0 = 0; j0 < n; j0 += jb) {
    const int j1 = std::min(n, j0 + jb);
    for (int p = 0; p < k; ++p) {
      const double* arow = a + static_cast<std::size_t>(p) * m;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double ai = arow[i];
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = j0; j < j1; ++j) crow[j] += ai * brow[j];
      }
    }
  }
}

void ensure_grad(TensorImpl& t) {
  if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
}

bool should_record(std::initializer_list<const Tensor*> ins) {
  if (!Graph::current().recording()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

Tensor make_out(std::vector<int> shape, std::vector<double> data, bool rg) {
  return make_tensor(std::move(shape), std::move(data), rg);
}

void record1(const Tensor& a, const Tensor& out,
             std::function<void(const TensorImpl&)> fn) {
  Graph::current().record({out.impl(), {a.impl()}, std::move(fn)});
}

void record2(const Tensor& a, const Tensor& b, const Tensor& out,
             std::function<void(const TensorImpl&)> fn) {
  Graph::current().record({out.impl(), {a.impl(), b.impl()}, std::move(fn)});
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  return make_tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), value);
  return make_tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_tensor({}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  if (v) ensure_grad(*impl_);
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::detach_copy() const {
  return make_tensor(impl_->shape, impl_->data, false);
}

Graph& Graph::current() {
  thread_local Graph g;
  return g;
}

void Graph::clear() {
  nodes_.clear();
  nodes_.shrink_to_fit();
}

void Graph::backward_from(const std::shared_ptr<TensorImpl>& loss) {
  bool found = false;
  for (const Node& n : nodes_)
    if (n.out == loss) {
      found = true;
      break;
    }
  if (!found)
    throw ContractError("backward: loss tensor is not on the recorded graph");

  ensure_grad(*loss);
  std::fill(loss->grad.begin(), loss->grad.end(), 0.0);
  loss->grad[0] = 1.0;

  std::unordered_set<TensorImpl*> needed;
  needed.insert(loss.get());
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!needed.count(it->out.get())) continue;
    for (const auto& in : it->inputs) {
      if (in->requires_grad) {
        ensure_grad(*in);
        needed.insert(in.get());
      }
    }
    it->backward(*it->out);
  }
  clear();
}

NoGradGuard::NoGradGuard() {
  prev_ = Graph::current().enabled_;
  Graph::current().enabled_ = false;
}

NoGradGuard::~NoGradGuard() { Graph::current().enabled_ = prev_; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  Graph::current().backward_from(loss.impl());
}

// ---- Elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  bool rg = should_record({&a, &b});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record2(a, b, o, [ai = a.impl(), bi = b.impl()](const TensorImpl& out) {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) ai->grad[i] += out.grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) bi->grad[i] += out.grad[i];
    });
  return o;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  bool rg = should_record({&a, &b});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record2(a, b, o, [ai = a.impl(), bi = b.impl()](const TensorImpl& out) {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) ai->grad[i] += out.grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) bi->grad[i] -= out.grad[i];
    });
  return o;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  bool rg = should_record({&a, &b});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record2(a, b, o, [ai = a.impl(), bi = b.impl()](const TensorImpl& out) {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i)
          ai->grad[i] += out.grad[i] * bi->data[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i)
          bi->grad[i] += out.grad[i] * ai->data[i];
    });
  return o;
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (double& v : out) v += s;
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl()](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) ai->grad[i] += out.grad[i];
    });
  return o;
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= s;
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), s](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) ai->grad[i] += s * out.grad[i];
    });
  return o;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.ndim() != 2 || v.ndim() != 1 || a.dim(1) != v.dim(0))
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(v.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.values());
  const double* pv = v.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += pv[j];
  bool rg = should_record({&a, &v});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record2(a, v, o, [ai = a.impl(), vi = v.impl(), m, n](const TensorImpl& out) {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) ai->grad[i] += out.grad[i];
      if (vi->requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            vi->grad[j] += out.grad[static_cast<std::size_t>(i) * n + j];
    });
  return o;
}

Tensor add_chanvec(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 3 || v.ndim() != 1 || x.dim(0) != v.dim(0))
    throw ShapeError("add_chanvec: incompatible shapes " + shape_str(x.shape()) +
                     " and " + shape_str(v.shape()));
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<double> out(x.values());
  const double* pv = v.data();
  for (int ch = 0; ch < c; ++ch) {
    double* row = out.data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) row[i] += pv[ch];
  }
  bool rg = should_record({&x, &v});
  Tensor o = make_out(x.shape(), std::move(out), rg);
  if (rg)
    record2(x, v, o, [xi = x.impl(), vi = v.impl(), c, hw](const TensorImpl& out) {
      if (xi->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) xi->grad[i] += out.grad[i];
      if (vi->requires_grad)
        for (int ch = 0; ch < c; ++ch) {
          const double* g = out.grad.data() + ch * hw;
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += g[i];
          vi->grad[ch] += acc;
        }
    });
  return o;
}

// ---- Linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  gemm_nn(a.data(), b.data(), out.data(), m, k, n);
  bool rg = should_record({&a, &b});
  Tensor o = make_out({m, n}, std::move(out), rg);
  if (rg)
    record2(a, b, o, [ai = a.impl(), bi = b.impl(), m, k, n](const TensorImpl& out) {
      if (ai->requires_grad) gemm_nt(out.grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
      if (bi->requires_grad) gemm_tn(ai->data.data(), out.grad.data(), bi->grad.data(), k, m, n);
    });
  return o;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected 2-d, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  const double* pa = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = pa[static_cast<std::size_t>(i) * n + j];
  bool rg = should_record({&a});
  Tensor o = make_out({n, m}, std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), m, n](const TensorImpl& out) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ai->grad[static_cast<std::size_t>(i) * n + j] +=
              out.grad[static_cast<std::size_t>(j) * m + i];
    });
  return o;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  bool rg = should_record({&a});
  Tensor o = make_out(std::move(shape), a.values(), rg);
  if (rg)
    record1(a, o, [ai = a.impl()](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) ai->grad[i] += out.grad[i];
    });
  return o;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
  std::vector<int> out_shape = parts[0].shape();
  int axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != out_shape[static_cast<size_t>(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;  // per-part offset along the axis
  {
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
      offsets.push_back(off);
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = p.data() + o * p.dim(axis) * inner;
        double* dst = out.data() + (o * axis_total + off) * inner;
        std::memcpy(dst, src, static_cast<std::size_t>(p.dim(axis)) * inner * sizeof(double));
      }
      off += p.dim(axis);
    }
  }

  bool rg = false;
  if (Graph::current().recording())
    for (const Tensor& p : parts)
      if (p.requires_grad()) rg = true;
  Tensor o = make_out(out_shape, std::move(out), rg);
  if (rg) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    Graph::current().record(
        {o.impl(), impls,
         [impls, offsets, outer, inner, axis_total, axis](const TensorImpl& out) {
           for (std::size_t pi = 0; pi < impls.size(); ++pi) {
             auto& in = impls[pi];
             if (!in->requires_grad) continue;
             const std::int64_t len = in->shape[static_cast<size_t>(axis)];
             for (std::int64_t o2 = 0; o2 < outer; ++o2) {
               const double* g = out.grad.data() + (o2 * axis_total + offsets[pi]) * inner;
               double* dst = in->grad.data() + o2 * len * inner;
               for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
             }
           }
         }});
  }
  return o;
}

Tensor take_rows(const Tensor& a, const std::vector<int>& rows) {
  if (a.ndim() != 2) throw ShapeError("take_rows: expected 2-d, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  for (int r : rows)
    if (r < 0 || r >= m) throw ContractError("take_rows: row index out of range");
  std::vector<double> out(rows.size() * static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data() + i * n, a.data() + static_cast<std::size_t>(rows[i]) * n,
                static_cast<std::size_t>(n) * sizeof(double));
  bool rg = should_record({&a});
  Tensor o = make_out({static_cast<int>(rows.size()), n}, std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), rows, n](const TensorImpl& out) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* g = out.grad.data() + i * n;
        double* dst = ai->grad.data() + static_cast<std::size_t>(rows[i]) * n;
        for (int j = 0; j < n; ++j) dst[j] += g[j];
      }
    });
  return o;
}

// ---- Reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  bool rg = should_record({&a});
  Tensor o = make_out({}, {acc}, rg);
  if (rg)
    record1(a, o, [ai = a.impl()](const TensorImpl& out) {
      const double g = out.grad[0];
      for (double& gv : ai->grad) gv += g;
    });
  return o;
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  bool rg = should_record({&a});
  Tensor o = make_out({}, {acc * inv}, rg);
  if (rg)
    record1(a, o, [ai = a.impl(), inv](const TensorImpl& out) {
      const double g = out.grad[0] * inv;
      for (double& gv : ai->grad) gv += g;
    });
  return o;
}

Tensor row_sums(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("row_sums: expected 2-d, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    const double* row = a.data() + static_cast<std::size_t>(i) * n;
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += row[j];
    out[static_cast<std::size_t>(i)] = acc;
  }
  bool rg = should_record({&a});
  Tensor o = make_out({m}, std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), m, n](const TensorImpl& out) {
      for (int i = 0; i < m; ++i) {
        const double g = out.grad[static_cast<std::size_t>(i)];
        double* row = ai->grad.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) row[j] += g;
      }
    });
  return o;
}

Tensor div_rowwise(const Tensor& a, const Tensor& d) {
  if (a.ndim() != 2 || d.ndim() != 1 || a.dim(0) != d.dim(0))
    throw ShapeError("div_rowwise: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(d.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.values());
  const double* pd = d.data();
  for (int i = 0; i < m; ++i) {
    const double inv = 1.0 / pd[i];
    double* row = out.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) row[j] *= inv;
  }
  bool rg = should_record({&a, &d});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record2(a, d, o, [ai = a.impl(), di = d.impl(), m, n](const TensorImpl& out) {
      for (int i = 0; i < m; ++i) {
        const double dv = di->data[static_cast<std::size_t>(i)];
        const double inv = 1.0 / dv;
        const double* g = out.grad.data() + static_cast<std::size_t>(i) * n;
        if (ai->requires_grad) {
          double* ga = ai->grad.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) ga[j] += g[j] * inv;
        }
        if (di->requires_grad) {
          const double* av = ai->data.data() + static_cast<std::size_t>(i) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += g[j] * av[j];
          di->grad[static_cast<std::size_t>(i)] -= acc * inv * inv;
        }
      }
    });
  return o;
}

// ---- Nonlinearities --------------------------------------------------------

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl()](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        if (ai->data[i] > 0.0) ai->grad[i] += out.grad[i];
    });
  return o;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = stable_sigmoid(v);
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl()](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        const double s = out.data[i];
        ai->grad[i] += out.grad[i] * s * (1.0 - s);
      }
    });
  return o;
}

Tensor log_clamped(const Tensor& a, double floor) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::log(v > floor ? v : floor);
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), floor](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        if (ai->data[i] > floor) ai->grad[i] += out.grad[i] / ai->data[i];
    });
  return o;
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::pow(v, exponent);
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), exponent](const TensorImpl& out) {
      if (exponent == 0.0) return;
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        ai->grad[i] += out.grad[i] * exponent * std::pow(ai->data[i], exponent - 1.0);
    });
  return o;
}

Tensor reciprocal(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / v;
  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl()](const TensorImpl& out) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        const double y = out.data[i];
        ai->grad[i] -= out.grad[i] * y * y;
      }
    });
  return o;
}

Tensor softmax(const Tensor& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0 || axis >= nd)
    throw ContractError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                        shape_str(a.shape()));
  std::int64_t outer = 1, inner = 1;
  const int len = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);

  std::vector<double> out(a.values());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      double* base = out.data() + o * len * inner + in;
      double mx = base[0];
      for (int j = 1; j < len; ++j) mx = std::max(mx, base[static_cast<std::size_t>(j) * inner]);
      double denom = 0.0;
      for (int j = 0; j < len; ++j) {
        double& v = base[static_cast<std::size_t>(j) * inner];
        v = std::exp(v - mx);
        denom += v;
      }
      const double inv = 1.0 / denom;
      for (int j = 0; j < len; ++j) base[static_cast<std::size_t>(j) * inner] *= inv;
    }

  bool rg = should_record({&a});
  Tensor o = make_out(a.shape(), std::move(out), rg);
  if (rg)
    record1(a, o, [ai = a.impl(), outer, inner, len](const TensorImpl& out) {
      // dx = y * (g - sum_j g_j y_j) per slice
      for (std::int64_t o2 = 0; o2 < outer; ++o2)
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::size_t off = static_cast<std::size_t>(o2 * len * inner + in);
          double dot = 0.0;
          for (int j = 0; j < len; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(j) * inner;
            dot += out.grad[idx] * out.data[idx];
          }
          for (int j = 0; j < len; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(j) * inner;
            ai->grad[idx] += out.data[idx] * (out.grad[idx] - dot);
          }
        }
    });
  return o;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& offset,
                       double eps) {
  if (x.ndim() != 2 || gain.ndim() != 1 || offset.ndim() != 1 ||
      gain.dim(0) != x.dim(1) || offset.dim(0) != x.dim(1))
    throw ShapeError("layer_norm_rows: incompatible shapes " + shape_str(x.shape()) +
                     ", " + shape_str(gain.shape()) + ", " + shape_str(offset.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  std::vector<double> xhat(out.size());
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = offset.data();
  for (int i = 0; i < m; ++i) {
    const double* row = px + static_cast<std::size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxx = row[j] - mu;
      var += dxx * dxx;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = istd;
    for (int j = 0; j < n; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * n + j;
      xhat[idx] = (row[j] - mu) * istd;
      out[idx] = pg[j] * xhat[idx] + pb[j];
    }
  }
  bool rg = should_record({&x, &gain, &offset});
  Tensor o = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Graph::current().record(
        {o.impl(),
         {x.impl(), gain.impl(), offset.impl()},
         [xi = x.impl(), gi = gain.impl(), bi = offset.impl(), xhat = std::move(xhat),
          inv_std = std::move(inv_std), m, n](const TensorImpl& out) {
           for (int i = 0; i < m; ++i) {
             const std::size_t off = static_cast<std::size_t>(i) * n;
             const double* dy = out.grad.data() + off;
             const double* xh = xhat.data() + off;
             if (gi->requires_grad)
               for (int j = 0; j < n; ++j) gi->grad[j] += dy[j] * xh[j];
             if (bi->requires_grad)
               for (int j = 0; j < n; ++j) bi->grad[j] += dy[j];
             if (xi->requires_grad) {
               double mean_dxh = 0.0, mean_dxh_xh = 0.0;
               for (int j = 0; j < n; ++j) {
                 const double dxh = dy[j] * gi->data[j];
                 mean_dxh += dxh;
                 mean_dxh_xh += dxh * xh[j];
               }
               mean_dxh /= n;
               mean_dxh_xh /= n;
               const double istd = inv_std[static_cast<std::size_t>(i)];
               double* gx = xi->grad.data() + off;
               for (int j = 0; j < n; ++j) {
                 const double dxh = dy[j] * gi->data[j];
                 gx[j] += istd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
               }
             }
           }
         }});
  }
  return o;
}

// ---- Convolution -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw ShapeError("conv2d: expected x[C,H,W], w[O,C,k,k], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
  if (stride < 1 || padding < 0) throw ContractError("conv2d: bad stride/padding");
  if (kh > h + 2 * padding || kw > wd + 2 * padding)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (wd + 2 * padding - kw) / stride + 1;
  const int patch = cin * kh * kw;
  const std::size_t opix = static_cast<std::size_t>(oh) * ow;

  // 1x1/stride-1 convs read the input directly; no im2col copy needed.
  if (kh == 1 && kw == 1 && stride == 1 && padding == 0) {
    std::vector<double> out(static_cast<std::size_t>(cout) * opix, 0.0);
    gemm_nn(w.data(), x.data(), out.data(), cout, cin, static_cast<int>(opix));
    bool rg = should_record({&x, &w});
    Tensor o = make_out({cout, oh, ow}, std::move(out), rg);
    if (rg)
      record2(x, w, o, [xi = x.impl(), wi = w.impl(), cin, cout, opix](const TensorImpl& out) {
        if (wi->requires_grad)
          gemm_nt(out.grad.data(), xi->data.data(), wi->grad.data(), cout,
                  static_cast<int>(opix), cin);
        if (xi->requires_grad)
          gemm_tn(wi->data.data(), out.grad.data(), xi->grad.data(), cin, cout,
                  static_cast<int>(opix));
      });
    return o;
  }

  // im2col: [patch x oh*ow]
  std::vector<double> col(static_cast<std::size_t>(patch) * opix, 0.0);
  const double* px = x.data();
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* dst = col.data() + (static_cast<std::size_t>((c * kh + ky) * kw + kx)) * opix;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= h) continue;
          const double* src = px + (static_cast<std::size_t>(c) * h + iy) * wd;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= wd) continue;
            dst[static_cast<std::size_t>(oy) * ow + ox] = src[ix];
          }
        }
      }

  std::vector<double> out(static_cast<std::size_t>(cout) * opix, 0.0);
  gemm_nn(w.data(), col.data(), out.data(), cout, patch, static_cast<int>(opix));

  bool rg = should_record({&x, &w});
  Tensor o = make_out({cout, oh, ow}, std::move(out), rg);
  if (rg) {
    record2(x, w, o,
            [xi = x.impl(), wi = w.impl(), col = std::move(col), cin, h, wd, cout, kh, kw,
             stride, padding, oh, ow, patch, opix](const TensorImpl& out) {
              if (wi->requires_grad)
                gemm_nt(out.grad.data(), col.data(), wi->grad.data(), cout,
                        static_cast<int>(opix), patch);
              if (xi->requires_grad) {
                // dcol = w^T * dout, then scatter back (col2im)
                std::vector<double> dcol(static_cast<std::size_t>(patch) * opix, 0.0);
                gemm_tn(wi->data.data(), out.grad.data(), dcol.data(), patch, cout,
                        static_cast<int>(opix));
                double* gx = xi->grad.data();
                for (int c = 0; c < cin; ++c)
                  for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                      const double* src =
                          dcol.data() + (static_cast<std::size_t>((c * kh + ky) * kw + kx)) * opix;
                      for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= h) continue;
                        double* dst = gx + (static_cast<std::size_t>(c) * h + iy) * wd;
                        for (int ox = 0; ox < ow; ++ox) {
                          const int ix = ox * stride + kx - padding;
                          if (ix < 0 || ix >= wd) continue;
                          dst[ix] += src[static_cast<std::size_t>(oy) * ow + ox];
                        }
                      }
                    }
              }
            });
  }
  return o;
}

// ---- Resampling ------------------------------------------------------------

namespace {
struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

LerpAxis make_lerp(int in, int out) {
  LerpAxis ax;
  ax.i0.resize(static_cast<std::size_t>(out));
  ax.i1.resize(static_cast<std::size_t>(out));
  ax.w1.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in - 1) src = in - 1;
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    ax.i0[static_cast<std::size_t>(o)] = lo;
    ax.i1[static_cast<std::size_t>(o)] = hi;
    ax.w1[static_cast<std::size_t>(o)] = src - lo;
  }
  return ax;
}
}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  if (x.ndim() != 3) throw ShapeError("resize_bilinear: expected [C,H,W], got " + shape_str(x.shape()));
  if (out_h < 1 || out_w < 1) throw ContractError("resize_bilinear: target size must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const LerpAxis ay = make_lerp(h, out_h);
  const LerpAxis axx = make_lerp(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  const double* px = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = px + static_cast<std::size_t>(ch) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double wy = ay.w1[static_cast<std::size_t>(oy)];
      const double* r0 = plane + static_cast<std::size_t>(ay.i0[static_cast<std::size_t>(oy)]) * w;
      const double* r1 = plane + static_cast<std::size_t>(ay.i1[static_cast<std::size_t>(oy)]) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const double wx = axx.w1[static_cast<std::size_t>(ox)];
        const int x0 = axx.i0[static_cast<std::size_t>(ox)], x1 = axx.i1[static_cast<std::size_t>(ox)];
        const double top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
        const double bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
        dst[static_cast<std::size_t>(oy) * out_w + ox] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  bool rg = should_record({&x});
  Tensor o = make_out({c, out_h, out_w}, std::move(out), rg);
  if (rg)
    record1(x, o, [xi = x.impl(), ay, axx, c, h, w, out_h, out_w](const TensorImpl& out) {
      for (int ch = 0; ch < c; ++ch) {
        double* gplane = xi->grad.data() + static_cast<std::size_t>(ch) * h * w;
        const double* g = out.grad.data() + static_cast<std::size_t>(ch) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const double wy = ay.w1[static_cast<std::size_t>(oy)];
          const int y0 = ay.i0[static_cast<std::size_t>(oy)], y1 = ay.i1[static_cast<std::size_t>(oy)];
          for (int ox = 0; ox < out_w; ++ox) {
            const double wx = axx.w1[static_cast<std::size_t>(ox)];
            const int x0 = axx.i0[static_cast<std::size_t>(ox)], x1 = axx.i1[static_cast<std::size_t>(ox)];
            const double gv = g[static_cast<std::size_t>(oy) * out_w + ox];
            gplane[static_cast<std::size_t>(y0) * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
            gplane[static_cast<std::size_t>(y0) * w + x1] += gv * (1.0 - wy) * wx;
            gplane[static_cast<std::size_t>(y1) * w + x0] += gv * wy * (1.0 - wx);
            gplane[static_cast<std::size_t>(y1) * w + x1] += gv * wy * wx;
          }
        }
      }
    });
  return o;
}

// ---- Gradient checking -----------------------------------------------------

namespace {
double fd_check_impl(const ScalarFn& f, const Tensor& x, double h,
                     const std::vector<std::int64_t>& coords) {
  // Analytic gradient through the recorded graph.
  Tensor xg = make_tensor(x.shape(), x.values(), true);
  Graph::current().clear();
  Tensor loss = f(xg);
  if (loss.numel() != 1)
    throw ContractError("finite_diff_check: f must return a scalar");
  backward(loss);
  if (!xg.has_grad())
    throw ContractError("finite_diff_check: f never consumed x through recorded ops");
  std::vector<double> analytic(xg.grad(), xg.grad() + xg.numel());

  // Central differences on a detached copy.
  Tensor xp = make_tensor(x.shape(), x.values(), false);
  double max_err = 0.0;
  {
    NoGradGuard guard;
    for (std::int64_t c : coords) {
      const double orig = xp.data()[c];
      xp.data()[c] = orig + h;
      const double fp = f(xp).item();
      xp.data()[c] = orig - h;
      const double fm = f(xp).item();
      xp.data()[c] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[static_cast<std::size_t>(c)];
      const double denom = std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}
}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");
  std::vector<std::int64_t> coords(static_cast<std::size_t>(x.numel()));
  std::iota(coords.begin(), coords.end(), 0);
  return fd_check_impl(f, x, h, coords);
}

double finite_diff_check_sampled(const ScalarFn& f, const Tensor& x, double h,
                                 int max_coords, std::uint64_t seed) {
  if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");
  const std::int64_t n = x.numel();
  std::vector<std::int64_t> coords;
  if (n <= max_coords) {
    coords.resize(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    Rng rng(derive_seed(seed, 0x66644348));
    std::unordered_set<std::int64_t> seen;
    while (static_cast<int>(coords.size()) < max_coords) {
      const std::int64_t c = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      if (seen.insert(c).second) coords.push_back(c);
    }
    std::sort(coords.begin(), coords.end());
  }
  return fd_check_impl(f, x, h, coords);
}

// ---- Initializers ----------------------------------------------------------

Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.uniform(-bound, bound);
  return make_tensor(std::move(shape), std::move(d), false);
}

Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.normal() * stddev;
  return make_tensor(std::move(shape), std::move(d), false);
}

}  // namespace lqseg
