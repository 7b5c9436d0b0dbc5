// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace adaptkit::ad {

namespace {

thread_local long long tl_bytes_current = 0;
thread_local long long tl_bytes_peak = 0;
thread_local Tape* tl_active_tape = nullptr;

void count_alloc(long long bytes) {
  tl_bytes_current += bytes;
  tl_bytes_peak = std::max(tl_bytes_peak, tl_bytes_current);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

}  // namespace

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  Storage(Shape s, std::vector<double> d, bool rg)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    count_alloc(static_cast<long long>(data.size() * sizeof(double)));
  }
  ~Storage() {
    tl_bytes_current -= static_cast<long long>((data.size() + grad.size()) * sizeof(double));
  }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  void ensure_grad() {
    if (grad.empty() && !data.empty()) {
      grad.assign(data.size(), 0.0);
      count_alloc(static_cast<long long>(grad.size() * sizeof(double)));
    }
  }
  void drop_grad() {
    tl_bytes_current -= static_cast<long long>(grad.size() * sizeof(double));
    std::vector<double>().swap(grad);
  }
};

}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  const auto n = shape_numel(shape);
  return Tensor(std::make_shared<detail::Storage>(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  return Tensor(std::make_shared<detail::Storage>(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return s_->shape; }
std::size_t Tensor::numel() const { return s_->data.size(); }

std::size_t Tensor::rows() const {
  if (dim() != 2) throw ShapeError("rows: expected 2-D tensor, got " + shape_str(shape()));
  return s_->shape[0];
}
std::size_t Tensor::cols() const {
  if (dim() != 2) throw ShapeError("cols: expected 2-D tensor, got " + shape_str(shape()));
  return s_->shape[1];
}

std::span<const double> Tensor::data() const { return s_->data; }
std::span<double> Tensor::mutable_data() { return s_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return s_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

bool Tensor::requires_grad() const { return s_->requires_grad; }
void Tensor::set_requires_grad(bool on) { s_->requires_grad = on; }
bool Tensor::has_grad() const { return !s_->grad.empty(); }
std::span<const double> Tensor::grad() const { return s_->grad; }
std::span<double> Tensor::mutable_grad() {
  s_->ensure_grad();
  return s_->grad;
}
void Tensor::zero_grad() { s_->drop_grad(); }

Tensor Tensor::clone() const {
  return Tensor(std::make_shared<detail::Storage>(s_->shape, s_->data, s_->requires_grad));
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::vector<Tensor> inputs, Tensor output, std::function<void(Node&)> backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed; call reset() first");
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  consumed_ = true;
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on a path to the loss
    it->backward(*it);
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(tl_active_tape) { tl_active_tape = &tape; }
TapeScope::~TapeScope() { tl_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(tl_active_tape) { tl_active_tape = nullptr; }
NoGradScope::~NoGradScope() { tl_active_tape = previous_; }

Tape* active_tape() { return tl_active_tape; }

std::size_t MemoryCounter::current() { return static_cast<std::size_t>(std::max(0LL, tl_bytes_current)); }
std::size_t MemoryCounter::peak() { return static_cast<std::size_t>(std::max(0LL, tl_bytes_peak)); }
void MemoryCounter::reset_peak() { tl_bytes_peak = tl_bytes_current; }

// ---------------------------------------------------------------------------
// Ops

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!tl_active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_out(Shape shape, std::vector<double> values, bool track) {
  return Tensor::from(std::move(shape), std::move(values), track);
}

void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  return a.dim() == 2 && b.dim() == 1 && b.shape()[0] == a.shape()[1];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  const bool track = wants_grad({&a, &b});
  Tensor y = make_out({m, n}, std::move(out), track);
  if (track) {
    active_tape()->record({a, b}, y, [m, k, n](Tape::Node& node) {
      Tensor& x = node.inputs[0];
      Tensor& w = node.inputs[1];
      MapC dy(node.output.grad().data(), m, n);
      if (x.requires_grad())
        Map(x.mutable_grad().data(), m, k).noalias() += dy * MapC(w.data().data(), k, n).transpose();
      if (w.requires_grad())
        Map(w.mutable_grad().data(), k, n).noalias() += MapC(x.data().data(), m, k).transpose() * dy;
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = is_row_broadcast(a, b);
  if (!bias && a.shape() != b.shape())
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not conform");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  const std::size_t width = b.numel();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[bias ? i % width : i];
  const bool track = wants_grad({&a, &b});
  Tensor y = make_out(a.shape(), std::move(out), track);
  if (track) {
    active_tape()->record({a, b}, y, [bias, width](Tape::Node& node) {
      const auto dy = node.output.grad();
      Tensor& x = node.inputs[0];
      Tensor& z = node.inputs[1];
      if (x.requires_grad()) {
        auto g = x.mutable_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
      }
      if (z.requires_grad()) {
        auto g = z.mutable_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) g[bias ? i % width : i] += dy[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool rows = is_row_broadcast(a, b);
  if (!rows && a.shape() != b.shape())
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not conform");
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t width = b.numel();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[rows ? i % width : i];
  const bool track = wants_grad({&a, &b});
  Tensor y = make_out(a.shape(), std::move(out), track);
  if (track) {
    active_tape()->record({a, b}, y, [rows, width](Tape::Node& node) {
      const auto dy = node.output.grad();
      Tensor& x = node.inputs[0];
      Tensor& z = node.inputs[1];
      const auto xd = x.data();
      const auto zd = z.data();
      if (x.requires_grad()) {
        auto g = x.mutable_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * zd[rows ? i % width : i];
      }
      if (z.requires_grad()) {
        auto g = z.mutable_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) g[rows ? i % width : i] += dy[i] * xd[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  const bool track = wants_grad({&x});
  Tensor y = make_out(x.shape(), std::move(out), track);
  if (track) {
    active_tape()->record({x}, y, [factor](Tape::Node& node) {
      const auto dy = node.output.grad();
      auto g = node.inputs[0].mutable_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += factor * dy[i];
    });
  }
  return y;
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad_scalar(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Tensor gelu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(xd[i]);
  const bool track = wants_grad({&x});
  Tensor y = make_out(x.shape(), std::move(out), track);
  if (track) {
    active_tape()->record({x}, y, [](Tape::Node& node) {
      const auto dy = node.output.grad();
      const auto xin = node.inputs[0].data();
      auto g = node.inputs[0].mutable_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * gelu_grad_scalar(xin[i]);
    });
  }
  return y;
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const auto m = x.rows(), n = x.cols();
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    if (!std::isfinite(mx)) throw std::domain_error("softmax_rows: row " + std::to_string(r) + " has no finite entry");
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += (o[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) o[c] /= total;
  }
  const bool track = wants_grad({&x});
  Tensor y = make_out(x.shape(), std::move(out), track);
  if (track) {
    active_tape()->record({x}, y, [m, n](Tape::Node& node) {
      const auto dy = node.output.grad();
      const auto yd = node.output.data();
      auto g = node.inputs[0].mutable_grad();
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += dy[r * n + c] * yd[r * n + c];
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += yd[r * n + c] * (dy[r * n + c] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_2d(x, "layer_norm");
  const auto m = x.rows(), n = x.cols();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " must be [" + std::to_string(n) + "] for input " + shape_str(x.shape()));
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> normed(xd.size());
  std::vector<double> inv_std(m);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xd.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < n; ++c) {
      normed[r * n + c] = (row[c] - mean) * inv_std[r];
      out[r * n + c] = normed[r * n + c] * gd[c] + bd[c];
    }
  }
  const bool track = wants_grad({&x, &gain, &bias});
  Tensor y = make_out(x.shape(), std::move(out), track);
  if (track) {
    active_tape()->record({x, gain, bias}, y,
                          [m, n, normed = std::move(normed), inv_std = std::move(inv_std)](Tape::Node& node) {
                            const auto dy = node.output.grad();
                            Tensor& xin = node.inputs[0];
                            Tensor& g = node.inputs[1];
                            Tensor& b = node.inputs[2];
                            const auto gd2 = g.data();
                            if (g.requires_grad()) {
                              auto gg = g.mutable_grad();
                              for (std::size_t i = 0; i < dy.size(); ++i) gg[i % n] += dy[i] * normed[i];
                            }
                            if (b.requires_grad()) {
                              auto bg = b.mutable_grad();
                              for (std::size_t i = 0; i < dy.size(); ++i) bg[i % n] += dy[i];
                            }
                            if (xin.requires_grad()) {
                              auto xg = xin.mutable_grad();
                              const double inv_n = 1.0 / static_cast<double>(n);
                              for (std::size_t r = 0; r < m; ++r) {
                                double sum_d = 0.0, sum_dn = 0.0;
                                for (std::size_t c = 0; c < n; ++c) {
                                  const double d = dy[r * n + c] * gd2[c];
                                  sum_d += d;
                                  sum_dn += d * normed[r * n + c];
                                }
                                for (std::size_t c = 0; c < n; ++c) {
                                  const double d = dy[r * n + c] * gd2[c];
                                  xg[r * n + c] +=
                                      inv_std[r] * (d - inv_n * sum_d - normed[r * n + c] * inv_n * sum_dn);
                                }
                              }
                            }
                          });
  }
  return y;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "gather_rows");
  const auto v = table.rows(), d = table.cols();
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                              std::to_string(v) + " rows");
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool track = wants_grad({&table});
  Tensor y = make_out({ids.size(), d}, std::move(out), track);
  if (track) {
    active_tape()->record({table}, y, [d, idx = std::vector<int>(ids.begin(), ids.end())](Tape::Node& node) {
      const auto dy = node.output.grad();
      auto g = node.inputs[0].mutable_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
        const double* src = dy.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }
  return y;
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  Map(out.data(), n, m) = MapC(x.data().data(), m, n).transpose();
  const bool track = wants_grad({&x});
  Tensor y = make_out({n, m}, std::move(out), track);
  if (track) {
    active_tape()->record({x}, y, [m, n](Tape::Node& node) {
      Map(node.inputs[0].mutable_grad().data(), m, n) += MapC(node.output.grad().data(), n, m).transpose();
    });
  }
  return y;
}

Tensor concat_last_dim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last_dim: no inputs");
  for (const auto& p : parts) require_2d(p, "concat_last_dim");
  const auto m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rows() != m)
      throw ShapeError("concat_last_dim: row counts differ, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
    track = track || (active_tape() && p.requires_grad());
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(pd.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Tensor y = make_out({m, total}, std::move(out), track);
  if (track) {
    active_tape()->record(parts, y, [m, total, widths](Tape::Node& node) {
      const auto dy = node.output.grad();
      std::size_t off = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (node.inputs[k].requires_grad()) {
          auto g = node.inputs[k].mutable_grad();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += dy[r * total + off + c];
        }
        off += widths[k];
      }
    });
  }
  return y;
}

std::vector<Tensor> split_last_dim(const Tensor& x, std::size_t parts) {
  require_2d(x, "split_last_dim");
  const auto m = x.rows(), n = x.cols();
  if (parts == 0 || n % parts != 0)
    throw ShapeError("split_last_dim: cannot split " + shape_str(x.shape()) + " into " + std::to_string(parts) +
                     " equal parts");
  const auto w = n / parts;
  const bool track = wants_grad({&x});
  const auto xd = x.data();
  std::vector<Tensor> out;
  out.reserve(parts);
  for (std::size_t k = 0; k < parts; ++k) {
    std::vector<double> piece(m * w);
    for (std::size_t r = 0; r < m; ++r) std::copy_n(xd.data() + r * n + k * w, w, piece.data() + r * w);
    Tensor y = make_out({m, w}, std::move(piece), track);
    if (track) {
      active_tape()->record({x}, y, [m, n, w, k](Tape::Node& node) {
        const auto dy = node.output.grad();
        auto g = node.inputs[0].mutable_grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * n + k * w + c] += dy[r * w + c];
      });
    }
    out.push_back(std::move(y));
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  const double total = std::accumulate(xd.begin(), xd.end(), 0.0);
  const bool track = wants_grad({&x});
  Tensor y = make_out({}, {total}, track);
  if (track) {
    active_tape()->record({x}, y, [](Tape::Node& node) {
      const double dy = node.output.grad()[0];
      for (auto& g : node.inputs[0].mutable_grad()) g += dy;
    });
  }
  return y;
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> targets, const std::vector<bool>& ignore) {
  require_2d(logits, "cross_entropy_mean");
  const auto t = logits.rows(), v = logits.cols();
  if (targets.size() != t || ignore.size() != t)
    throw ShapeError("cross_entropy_mean: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets and " + std::to_string(ignore.size()) + " mask entries");
  std::size_t count = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (ignore[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw std::out_of_range("cross_entropy_mean: target " + std::to_string(targets[i]) + " out of range for " +
                              std::to_string(v) + " classes");
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy_mean: empty loss (all positions ignored)");
  const auto ld = logits.data();
  std::vector<double> probs(t * v, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (ignore[i]) continue;
    const double* row = ld.data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += (probs[i * v + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < v; ++c) probs[i * v + c] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(count);
  const bool track = wants_grad({&logits});
  Tensor y = make_out({}, {total * inv}, track);
  if (track) {
    active_tape()->record({logits}, y,
                          [v, inv, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()),
                           ignore](Tape::Node& node) {
                            const double dy = node.output.grad()[0] * inv;
                            auto g = node.inputs[0].mutable_grad();
                            for (std::size_t i = 0; i < tg.size(); ++i) {
                              if (ignore[i]) continue;
                              for (std::size_t c = 0; c < v; ++c) g[i * v + c] += dy * probs[i * v + c];
                              g[i * v + static_cast<std::size_t>(tg[i])] -= dy;
                            }
                          });
  }
  return y;
}

}  // namespace adaptkit::ad
