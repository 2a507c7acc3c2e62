#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vessam/error.hpp"

namespace vessam::ad {

using Shape = std::vector<size_t>;

size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f64 tensor. Data and grad buffers are shared so copies
// alias the same storage; ops always allocate fresh outputs and never write
// through their inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_ ? data_->size() : 0; }
  size_t extent(size_t axis) const { return shape_[axis]; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double at(size_t i) const { return (*data_)[i]; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return grad_ != nullptr; }
  double* grad() { return grad_->data(); }
  const double* grad() const { return grad_->data(); }
  void zero_grad();

  // Identity of the underlying buffer; used by the tape to recognize tensors.
  const void* buffer_id() const { return data_.get(); }
  const std::shared_ptr<std::vector<double>>& data_ptr() const { return data_; }
  const std::shared_ptr<std::vector<double>>& grad_ptr() const { return grad_; }

  bool defined() const { return data_ != nullptr; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  bool requires_grad_ = false;
};

// Reverse-mode tape. Constructing a Tape makes it the active context for the
// current thread; ops record themselves while any input requires grad. One
// tape per forward/backward; contexts on different threads are independent.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Registers a pre-existing tensor (leaf) and returns its node id.
  int track(const Tensor& t);
  int node_of(const Tensor& t) const;  // -1 if unknown
  int add_op(const Tensor& out, std::vector<int> parents,
             std::function<void()> backward_fn);
  size_t node_count() const { return nodes_.size(); }

  // Accumulates dloss/dt into the grad of every requires-grad tensor on the
  // tape, reverse topological order. loss must be a tracked scalar.
  void backward(const Tensor& loss);

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void()> backward;              // empty for leaves
    std::shared_ptr<std::vector<double>> grad;   // cleared at backward start
  };
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> by_buffer_;
  Tape* previous_ = nullptr;
};

// ---- operators -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, size_t begin, size_t end);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor scale(const Tensor& x, const Tensor& s);  // s is a scalar tensor

Tensor sum(const Tensor& x, const std::vector<size_t>& axes);
Tensor mean(const Tensor& x, const std::vector<size_t>& axes);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor softmax(const Tensor& x, size_t axis);
Tensor layer_norm(const Tensor& x, size_t axis, double eps = 1e-5);

// Cross-correlation convolution, x: [C_in,H,W], w: [C_out,C_in,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t padding);
// Per-channel kernels, x: [C,H,W], w: [C,kh,kw].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, size_t stride,
                        size_t padding);

Tensor downsample(const Tensor& x, size_t factor);  // f x f average pooling
Tensor upsample(const Tensor& x, size_t factor);    // nearest neighbor

// Mean binary cross entropy on logits; exact adjoint (sigmoid(x) - z) / N.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

void backward(const Tensor& loss, Tape& tape);

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  size_t coords_checked = 0;
};

// Central-difference check of d f / d x. rel err per coordinate is
// |a - n| / max(1e-8, |a| + |n|); pass iff max <= tol. When max_coords > 0
// only that many coordinates are checked (deterministic seeded sample).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps = 1e-5,
                           double tol = 1e-4, size_t max_coords = 0,
                           uint64_t seed = 0x9e3779b97f4a7c15ull);

// ---- checkpoints -----------------------------------------------------------

// Compact JSON header line {"format":"vessam-ckpt","version":1,"params":
// [{"name","shape","offset"},...]} followed by little-endian f64 payload;
// offsets count elements from the payload start.
void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& params,
                     const std::string& path);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path);

}  // namespace vessam::ad
