#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anrl {

using Shape = std::vector<std::size_t>;

/// Raised for every shape contract violation. No op broadcasts implicitly.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

/// Dense row-major float64 array with an optional gradient slot.
///
/// Tensor is a handle: copies share storage and graph linkage. Leaves are
/// created with the static factories; every op result records a backward
/// function when grad mode is on and at least one input requires grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  /// Leaf that requires grad.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Only valid on leaves; graph results are immutable.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Same values, no graph linkage, fresh storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// RAII switch disabling graph construction on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse pass from a scalar. Leaf grads accumulate across calls.
void backward(const Tensor& loss);

/// Builds an op result. `fn` runs during backward with the result node.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> fn);

// Elementwise, identical shapes only.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Scalar-tensor forms, the only broadcasting allowed.
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// x * s where s is a one-element tensor that may carry grad.
Tensor mul_by_scalar_tensor(const Tensor& x, const Tensor& s);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Dot product of x with constant weights of the same shape.
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // rank 2

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N,M] + bias[M] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// bias[C] -> [N,C].
Tensor broadcast_rows(const Tensor& v, std::size_t rows);

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride,
              std::size_t pad);
/// x[N,C,H,W] + bias[C].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// x[N,C,H,W] * gamma[C] + beta[C].
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor global_avg_pool(const Tensor& x);           // [N,C,H,W] -> [N,C]
Tensor avg_pool2d(const Tensor& x, std::size_t k);  // non-overlapping k x k
/// Squared Euclidean distance of each row of x[N,D] to a constant c[D].
Tensor row_sq_dist(const Tensor& x, std::span<const double> c);

/// max over elements of |analytic - numeric| / max(1, |numeric|), central
/// differences. Throws if two evaluations of f at the same point differ.
double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double step);
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step);

}  // namespace anrl
