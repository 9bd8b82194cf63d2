#include "anrl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace anrl {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const std::string& op, const Tensor& x, std::size_t rank, const char* name) {
  if (x.rank() != rank) {
    shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                       shape_str(x.shape()));
  }
}

void require_defined(const Tensor& t) {
  if (!t.defined()) throw std::logic_error("operation on undefined tensor");
}

// Accumulate into an input's grad when it takes part in the backward pass.
inline bool wants(const std::shared_ptr<detail::Node>& n) { return n->requires_grad; }

template <typename F>
Tensor unary(const Tensor& x, F&& value_fn, std::function<void(detail::Node&)> bw) {
  require_defined(x);
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value_fn(in[i]);
  return make_result(x.shape(), std::move(out), {x}, std::move(bw));
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  auto t = from(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this);
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim: axis " + std::to_string(axis) + " out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this);
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this);
  if (!node_->is_leaf()) throw std::logic_error("mutable_data: tensor is an op result");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at: index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("at: index out of range on axis " + std::to_string(axis));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this);
  if (!node_->is_leaf()) throw std::logic_error("set_requires_grad: only leaves");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf(); }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this);
  return from(node_->shape, node_->data);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = out.node_ptr();
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
  node->backward_fn = std::move(fn);
  return out;
}

void backward(const Tensor& loss) {
  require_defined(loss);
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  auto root = loss.node_ptr();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; reversed, it is a valid reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) {
      n->grad.assign(n->data.size(), 0.0);
    } else if (n->grad.empty()) {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    n->backward_fn(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!wants(in)) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& ga = self.inputs[0];
    auto& gb = self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (wants(ga)) ga->grad[i] += self.grad[i];
      if (wants(gb)) gb->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (wants(na)) na->grad[i] += self.grad[i] * nb->data[i];
      if (wants(nb)) nb->grad[i] += self.grad[i] * na->data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double inv = 1.0 / nb->data[i];
      if (wants(na)) na->grad[i] += self.grad[i] * inv;
      if (wants(nb)) nb->grad[i] -= self.grad[i] * na->data[i] * inv * inv;
    }
  });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](detail::Node& self) {
    auto& in = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += 2.0 * in->data[i] * self.grad[i];
  });
}

// Subgradient at 0 is 0.
Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](detail::Node& self) {
    auto& in = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in->data[i] > 0.0) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  auto stable = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return unary(x, stable, [](detail::Node& self) {
    auto& in = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.data[i];
      in->grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](detail::Node& self) {
    auto& in = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](detail::Node& self) {
    auto& in = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
  });
}

Tensor mul_by_scalar_tensor(const Tensor& x, const Tensor& s) {
  require_defined(x);
  if (s.numel() != 1) shape_fail("mul_by_scalar_tensor", "factor must hold one value, got " + shape_str(s.shape()));
  const double f = s.data()[0];
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * f;
  return make_result(x.shape(), std::move(out), {x, s}, [](detail::Node& self) {
    auto& nx = self.inputs[0];
    auto& ns = self.inputs[1];
    const double f = ns->data[0];
    double acc = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (wants(nx)) nx->grad[i] += f * self.grad[i];
      acc += nx->data[i] * self.grad[i];
    }
    if (wants(ns)) ns->grad[0] += acc;
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result({}, {acc}, {x}, [](detail::Node& self) {
    auto& in = self.inputs[0];
    for (auto& g : in->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) shape_fail("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  require_defined(x);
  if (weights.size() != x.numel()) {
    shape_fail("weighted_sum", "weights hold " + std::to_string(weights.size()) + " values for tensor " +
                                   shape_str(x.shape()));
  }
  double acc = 0.0;
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) acc += in[i] * weights[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make_result({}, {acc}, {x}, [w = std::move(w)](detail::Node& self) {
    auto& n = self.inputs[0];
    for (std::size_t i = 0; i < w.size(); ++i) n->grad[i] += w[i] * self.grad[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x);
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    auto& in = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2, "x");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  auto in = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return make_result({c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
    auto& n = self.inputs[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) n->grad[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2, "a");
  require_rank("matmul", b, 2, "b");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_fail("matmul", "inner dimension mismatch: a is " + shape_str(a.shape()) + ", b is " +
                             shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() = ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs[1];
    ConstMapMat g(self.grad.data(), m, n);
    if (wants(na)) MapMat(na->grad.data(), m, k).noalias() += g * ConstMapMat(nb->data.data(), k, n).transpose();
    if (wants(nb)) MapMat(nb->grad.data(), k, n).noalias() += ConstMapMat(na->data.data(), m, k).transpose() * g;
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_row_bias", x, 2, "x");
  require_rank("add_row_bias", bias, 1, "bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols) {
    shape_fail("add_row_bias", "column axis mismatch: x has " + std::to_string(cols) + ", bias has " +
                                   std::to_string(bias.dim(0)));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += b[j];
  return make_result(x.shape(), std::move(out), {x, bias}, [rows, cols](detail::Node& self) {
    auto& nx = self.inputs[0];
    auto& nb = self.inputs[1];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const double g = self.grad[i * cols + j];
        if (wants(nx)) nx->grad[i * cols + j] += g;
        if (wants(nb)) nb->grad[j] += g;
      }
  });
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  require_rank("broadcast_rows", v, 1, "v");
  const std::size_t cols = v.dim(0);
  std::vector<double> out(rows * cols);
  auto in = v.data();
  for (std::size_t i = 0; i < rows; ++i) std::copy(in.begin(), in.end(), out.begin() + i * cols);
  return make_result({rows, cols}, std::move(out), {v}, [rows, cols](detail::Node& self) {
    auto& n = self.inputs[0];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) n->grad[j] += self.grad[i * cols + j];
  });
}

// ---------------------------------------------------------------- spatial

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t positions() const { return oh * ow; }
};

// Output columns x whose input column x * stride + kj - pad lies in [0, w).
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  const long off = static_cast<long>(kj) - static_cast<long>(g.pad);
  const long s = static_cast<long>(g.stride);
  const long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const long hi = std::min(static_cast<long>(g.ow), (static_cast<long>(g.w) - off + s - 1) / s);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// Patch rows of one sample, written `ld` apart.
void im2col(const double* img, const ConvGeometry& g, double* col, std::size_t ld) {
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((ci * g.k + ki) * g.k + kj) * ld;
        const auto [x0, x1] = valid_columns(g, kj);
        for (std::size_t y = 0; y < g.oh; ++y) {
          double* dst = row + y * g.ow;
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = img + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + x0, 0.0);
          for (std::size_t x = x0; x < x1; ++x) dst[x] = src[x * g.stride + kj - g.pad];
          std::fill(dst + x1, dst + g.ow, 0.0);
        }
      }
}

void col2im_add(const double* col, const ConvGeometry& g, double* img, std::size_t ld) {
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((ci * g.k + ki) * g.k + kj) * ld;
        const auto [x0, x1] = valid_columns(g, kj);
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = img + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + y * g.ow;
          for (std::size_t x = x0; x < x1; ++x) dst[x * g.stride + kj - g.pad] += src[x];
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t pad) {
  require_rank("conv2d", input, 4, "input");
  require_rank("conv2d", weight, 4, "weight");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (weight.dim(1) != g.c) {
    shape_fail("conv2d", "channel axis mismatch: input has C=" + std::to_string(g.c) + ", weight expects C=" +
                             std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != g.k) shape_fail("conv2d", "kernel width axis differs from kernel height axis");
  if (g.k % 2 == 0) shape_fail("conv2d", "kernel size axis must be odd, got " + std::to_string(g.k));
  if (stride == 0) shape_fail("conv2d", "stride must be positive");
  if (g.h < g.k) shape_fail("conv2d", "height axis H=" + std::to_string(g.h) + " smaller than kernel");
  if (g.w < g.k) shape_fail("conv2d", "width axis W=" + std::to_string(g.w) + " smaller than kernel");
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;

  const std::size_t p = g.positions(), patch = g.patch(), np = g.n * p;
  // One GEMM for the whole batch: columns of `cols` are (sample, position).
  auto cols = std::make_shared<std::vector<double>>(patch * np);
  const double* in = input.data().data();
  for (std::size_t s = 0; s < g.n; ++s) im2col(in + s * g.c * g.h * g.w, g, cols->data() + s * p, np);
  RowMat prod = ConstMapMat(weight.data().data(), g.o, patch) * ConstMapMat(cols->data(), patch, np);
  std::vector<double> out(g.n * g.o * p);
  for (std::size_t s = 0; s < g.n; ++s)
    for (std::size_t oc = 0; oc < g.o; ++oc)
      std::copy_n(prod.data() + oc * np + s * p, p, out.data() + (s * g.o + oc) * p);
  if (!(grad_enabled() && weight.requires_grad())) cols.reset();
  return make_result({g.n, g.o, g.oh, g.ow}, std::move(out), {input, weight}, [g, cols](detail::Node& self) {
    auto& ni = self.inputs[0];
    auto& nw = self.inputs[1];
    const std::size_t p = g.positions(), patch = g.patch(), np = g.n * p;
    RowMat gout(g.o, np);
    for (std::size_t s = 0; s < g.n; ++s)
      for (std::size_t oc = 0; oc < g.o; ++oc)
        std::copy_n(self.grad.data() + (s * g.o + oc) * p, p, gout.data() + oc * np + s * p);
    if (wants(nw)) {
      std::shared_ptr<std::vector<double>> c = cols;
      if (!c) {
        c = std::make_shared<std::vector<double>>(patch * np);
        for (std::size_t s = 0; s < g.n; ++s) im2col(ni->data.data() + s * g.c * g.h * g.w, g, c->data() + s * p, np);
      }
      MapMat(nw->grad.data(), g.o, patch).noalias() += gout * ConstMapMat(c->data(), patch, np).transpose();
    }
    if (wants(ni)) {
      RowMat dcol = ConstMapMat(nw->data.data(), g.o, patch).transpose() * gout;
      for (std::size_t s = 0; s < g.n; ++s) col2im_add(dcol.data() + s * p, g, ni->grad.data() + s * g.c * g.h * g.w, np);
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", x, 4, "x");
  require_rank("add_channel_bias", bias, 1, "bias");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (bias.dim(0) != c) shape_fail("add_channel_bias", "channel axis mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) out[(s * c + ch) * hw + i] += b[ch];
  return make_result(x.shape(), std::move(out), {x, bias}, [n, c, hw](detail::Node& self) {
    auto& nx = self.inputs[0];
    auto& nb = self.inputs[1];
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) {
          const double g = self.grad[(s * c + ch) * hw + i];
          if (wants(nx)) nx->grad[(s * c + ch) * hw + i] += g;
          if (wants(nb)) nb->grad[ch] += g;
        }
  });
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_rank("channel_affine", x, 4, "x");
  require_rank("channel_affine", gamma, 1, "gamma");
  require_rank("channel_affine", beta, 1, "beta");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.dim(0) != c || beta.dim(0) != c) {
    shape_fail("channel_affine", "channel axis mismatch: x has C=" + std::to_string(c));
  }
  std::vector<double> out(x.numel());
  auto in = x.data();
  auto gm = gamma.data(), bt = beta.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t at = (s * c + ch) * hw + i;
        out[at] = in[at] * gm[ch] + bt[ch];
      }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [n, c, hw](detail::Node& self) {
    auto& nx = self.inputs[0];
    auto& ng = self.inputs[1];
    auto& nb = self.inputs[2];
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t at = (s * c + ch) * hw + i;
          const double g = self.grad[at];
          if (wants(nx)) nx->grad[at] += g * ng->data[ch];
          if (wants(ng)) ng->grad[ch] += g * nx->data[at];
          if (wants(nb)) nb->grad[ch] += g;
        }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4, "x");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) shape_fail("global_avg_pool", "empty spatial axes");
  std::vector<double> out(n * c, 0.0);
  auto in = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += in[p * hw + i];
    out[p] = acc / static_cast<double>(hw);
  }
  return make_result({n, c}, std::move(out), {x}, [n, c, hw](detail::Node& self) {
    auto& nx = self.inputs[0];
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < hw; ++i) nx->grad[p * hw + i] += self.grad[p] * inv;
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_rank("avg_pool2d", x, 4, "x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0) shape_fail("avg_pool2d", "height axis " + std::to_string(h) + " not divisible by " + std::to_string(k));
  if (w % k != 0) shape_fail("avg_pool2d", "width axis " + std::to_string(w) + " not divisible by " + std::to_string(k));
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(n * c * oh * ow, 0.0);
  auto in = x.data();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += in[(p * h + y * k + i) * w + xx * k + j];
        out[(p * oh + y) * ow + xx] = acc * inv;
      }
  return make_result({n, c, oh, ow}, std::move(out), {x}, [=](detail::Node& self) {
    auto& nx = self.inputs[0];
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double g = self.grad[(p * oh + y) * ow + xx] * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) nx->grad[(p * h + y * k + i) * w + xx * k + j] += g;
        }
  });
}

Tensor row_sq_dist(const Tensor& x, std::span<const double> c) {
  require_rank("row_sq_dist", x, 2, "x");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (c.size() != d) {
    shape_fail("row_sq_dist", "embedding axis mismatch: x has D=" + std::to_string(d) + ", centroid has " +
                                  std::to_string(c.size()));
  }
  std::vector<double> out(n, 0.0);
  auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = in[i * d + j] - c[j];
      acc += diff * diff;
    }
    out[i] = acc;
  }
  std::vector<double> centre(c.begin(), c.end());
  return make_result({n}, std::move(out), {x}, [n, d, centre = std::move(centre)](detail::Node& self) {
    auto& nx = self.inputs[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) nx->grad[i * d + j] += 2.0 * (nx->data[i * d + j] - centre[j]) * self.grad[i];
  });
}

// ---------------------------------------------------------------- gradient check

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  std::vector<Tensor> leaves = params;
  for (auto& p : leaves) {
    if (!p.is_leaf()) throw std::invalid_argument("finite_diff_check: parameters must be leaves");
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = f();
  if (loss.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar-valued");
  const double reference = loss.item();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& p : leaves) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  const double again = f().item();
  if (std::memcmp(&again, &reference, sizeof(double)) != 0) {
    throw std::runtime_error("finite_diff_check: f is not deterministic");
  }
  double worst = 0.0;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto values = leaves[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = f().item();
      values[i] = saved - step;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = std::abs(analytic[t][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  return finite_diff_check([&] { return f(x); }, std::vector<Tensor>{x}, step);
}

}  // namespace anrl
