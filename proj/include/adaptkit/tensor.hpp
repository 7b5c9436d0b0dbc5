// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// A Tensor is a shared handle: copying it aliases the same storage (the way
// parameters are shared between a checkpoint and a training run). Use
// Tensor::clone() for an independent copy.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// whenever at least one input requires a gradient. Tape::backward() replays
// the recorded nodes in reverse order and accumulates into Tensor::grad().

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace adaptkit::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Storage;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim() const { return shape().size(); }
  // Rows/cols of a 2-D tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  // Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  void zero_grad();                  // drops the buffer

  Tensor clone() const;  // deep copy of data; no grad, requires_grad preserved
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
  std::shared_ptr<detail::Storage> s_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(Node&)> backward;
  };

  void record(std::vector<Tensor> inputs, Tensor output, std::function<void(Node&)> backward);
  // Seeds d(loss)/d(loss) = 1 and walks the nodes in reverse.
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Makes `tape` the active tape on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the scope's lifetime (evaluation-only forwards).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---------------------------------------------------------------------------
// Primitive ops. All shape violations throw ShapeError naming the op.

Tensor matmul(const Tensor& a, const Tensor& b);
// Same-shape elementwise, or [m x n] + [n] row-wise bias.
Tensor add(const Tensor& a, const Tensor& b);
// Same-shape elementwise, or [m x n] * [n] row-wise rescale.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// Exact form: x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor transpose(const Tensor& x);
Tensor concat_last_dim(const std::vector<Tensor>& parts);
std::vector<Tensor> split_last_dim(const Tensor& x, std::size_t parts);
Tensor sum(const Tensor& x);

// Mean over non-ignored rows of -log softmax(logits)[t, target_t].
Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> targets,
                          const std::vector<bool>& ignore);

// Scalar helpers used by the gelu oracle and the forward kernels.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

// ---------------------------------------------------------------------------
// Gradient verification

// max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
// `f` must build its result from `point` with ops; it is called on a fresh tape.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                               double epsilon);

// ---------------------------------------------------------------------------
// Host-memory accounting: bytes held by live tensor buffers on this thread.

struct MemoryCounter {
  static std::size_t current();
  static std::size_t peak();
  static void reset_peak();
};

}  // namespace adaptkit::ad
