#include "vessam/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace vessam::ad {

size_t shape_size(const Shape& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << "]";
  return out.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(shape_size(shape_), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (data_->size() != shape_size(shape_))
    raise(ErrorCode::ShapeMismatch, "value count does not match shape " + shape_str(shape_));
}

Tensor& Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && !grad_) grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
  return *this;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = previous_; }
Tape* Tape::active() { return g_active_tape; }

int Tape::track(const Tensor& t) {
  auto it = by_buffer_.find(t.buffer_id());
  if (it != by_buffer_.end()) return it->second;
  Node node;
  node.grad = t.grad_ptr();
  nodes_.push_back(std::move(node));
  int id = int(nodes_.size()) - 1;
  by_buffer_[t.buffer_id()] = id;
  return id;
}

int Tape::node_of(const Tensor& t) const {
  auto it = by_buffer_.find(t.buffer_id());
  return it == by_buffer_.end() ? -1 : it->second;
}

int Tape::add_op(const Tensor& out, std::vector<int> parents,
                 std::function<void()> backward_fn) {
  Node node;
  node.parents = std::move(parents);
  node.backward = std::move(backward_fn);
  node.grad = out.grad_ptr();
  nodes_.push_back(std::move(node));
  int id = int(nodes_.size()) - 1;
  by_buffer_[out.buffer_id()] = id;
  return id;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    raise(ErrorCode::NotScalar, "backward needs a scalar loss, got " + shape_str(loss.shape()));
  int start = node_of(loss);
  if (start < 0)
    raise(ErrorCode::DetachedLoss, "loss tensor is not on this tape");
  // Idempotent: clear every tracked grad, then seed and sweep once.
  for (Node& n : nodes_)
    if (n.grad) std::fill(n.grad->begin(), n.grad->end(), 0.0);
  if (!loss.has_grad())
    raise(ErrorCode::DetachedLoss, "loss tensor carries no gradient buffer");
  (*loss.grad_ptr())[0] = 1.0;
  for (int i = start; i >= 0; --i)
    if (nodes_[i].backward) nodes_[i].backward();
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// ---- small dense kernels ----------------------------------------------------

namespace {

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(size_t m, size_t n, size_t k, const double* a, const double* b, double* c) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(size_t m, size_t n, size_t k, const double* a, const double* b, double* c) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(size_t m, size_t n, size_t k, const double* a, const double* b, double* c) {
  for (size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Registers `out` as the product of `inputs` with the given adjoint.
void record(Tensor& out, std::initializer_list<const Tensor*> inputs,
            std::function<void()> backward_fn) {
  Tape* tape = Tape::active();
  std::vector<int> parents;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) parents.push_back(tape->track(*t));
  out.set_requires_grad(true);
  tape->add_op(out, std::move(parents), std::move(backward_fn));
}

void require_rank(const Tensor& t, size_t rank, const char* who) {
  if (t.rank() != rank)
    raise(ErrorCode::ShapeMismatch,
          std::string(who) + " expects rank " + std::to_string(rank) + ", got " +
              shape_str(t.shape()));
}

using GradPtr = std::shared_ptr<std::vector<double>>;
using DataPtr = std::shared_ptr<std::vector<double>>;

}  // namespace

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    raise(ErrorCode::ShapeMismatch,
          "matmul inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out({m, n});
  gemm_nn(m, n, k, a.data(), b.data(), out.data());
  if (tracking({&a, &b})) {
    DataPtr ad = a.data_ptr(), bd = b.data_ptr();
    GradPtr ag = a.requires_grad() ? a.grad_ptr() : nullptr;
    GradPtr bg = b.requires_grad() ? b.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&a, &b}, [m, n, k, ad, bd, ag, bg, og = out.grad_ptr()]() {
      if (ag) gemm_nt(m, k, n, og->data(), bd->data(), ag->data());
      if (bg) gemm_tn(k, n, m, ad->data(), og->data(), bg->data());
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const size_t m = a.extent(0), n = a.extent(1);
  Tensor out({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  if (tracking({&a})) {
    GradPtr ag = a.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&a}, [m, n, ag, og = out.grad_ptr()]() {
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) (*ag)[i * n + j] += (*og)[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    raise(ErrorCode::ShapeMismatch,
          "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes size");
  Tensor out(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
  if (tracking({&a})) {
    GradPtr ag = a.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&a}, [n = a.size(), ag, og = out.grad_ptr()]() {
      for (size_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, size_t begin, size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.extent(0))
    raise(ErrorCode::ShapeMismatch, "slice_rows range out of bounds");
  const size_t n = a.extent(1), rows = end - begin;
  Tensor out({rows, n}, std::vector<double>(a.data() + begin * n, a.data() + end * n));
  if (tracking({&a})) {
    GradPtr ag = a.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&a}, [begin, rows, n, ag, og = out.grad_ptr()]() {
      for (size_t i = 0; i < rows * n; ++i) (*ag)[begin * n + i] += (*og)[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) raise(ErrorCode::EmptyConcat, "concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size())
    raise(ErrorCode::ShapeMismatch, "concat axis out of range for " + shape_str(ref));
  size_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size())
      raise(ErrorCode::ShapeMismatch, "concat rank mismatch");
    for (size_t d = 0; d < ref.size(); ++d)
      if (d != axis && p.shape()[d] != ref[d])
        raise(ErrorCode::ShapeMismatch,
              "concat extent mismatch at axis " + std::to_string(d));
    axis_total += p.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = axis_total;
  Tensor out(out_shape);

  size_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

  struct Piece {
    DataPtr data;
    GradPtr grad;
    size_t block;   // extent_along_axis * inner
    size_t offset;  // element offset of this piece inside one outer slab
  };
  std::vector<Piece> pieces;
  size_t cursor = 0;
  const size_t out_slab = axis_total * inner;
  for (const Tensor& p : parts) {
    size_t block = p.shape()[axis] * inner;
    for (size_t o = 0; o < outer; ++o)
      std::copy(p.data() + o * block, p.data() + (o + 1) * block,
                out.data() + o * out_slab + cursor);
    pieces.push_back({p.data_ptr(), p.requires_grad() ? p.grad_ptr() : nullptr,
                      block, cursor});
    cursor += block;
  }

  bool track = Tape::active() != nullptr;
  if (track) {
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    Tape* tape = Tape::active();
    std::vector<int> parent_ids;
    for (const Tensor& p : parts)
      if (p.requires_grad()) parent_ids.push_back(tape->track(p));
    out.set_requires_grad(true);
    GradPtr og = out.grad_ptr();
    tape->add_op(out, std::move(parent_ids), [pieces, outer, out_slab, og]() {
      for (const Piece& pc : pieces) {
        if (!pc.grad) continue;
        for (size_t o = 0; o < outer; ++o) {
          const double* src = og->data() + o * out_slab + pc.offset;
          double* dst = pc.grad->data() + o * pc.block;
          for (size_t i = 0; i < pc.block; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// ---- pointwise ---------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
  if (tracking({&x})) {
    DataPtr xd = x.data_ptr();
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [xd, xg, og = out.grad_ptr()]() {
      for (size_t i = 0; i < xd->size(); ++i)
        if ((*xd)[i] > 0.0) (*xg)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-x.at(i)));
  if (tracking({&x})) {
    DataPtr yd = out.data_ptr();
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [yd, xg, og = out.grad_ptr()]() {
      for (size_t i = 0; i < yd->size(); ++i) {
        double s = (*yd)[i];
        (*xg)[i] += (*og)[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    raise(ErrorCode::ShapeMismatch, std::string(who) + " shapes differ: " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.at(i) + b.at(i);
  if (tracking({&a, &b})) {
    GradPtr ag = a.requires_grad() ? a.grad_ptr() : nullptr;
    GradPtr bg = b.requires_grad() ? b.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&a, &b}, [ag, bg, og = out.grad_ptr()]() {
      if (ag)
        for (size_t i = 0; i < og->size(); ++i) (*ag)[i] += (*og)[i];
      if (bg)
        for (size_t i = 0; i < og->size(); ++i) (*bg)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.at(i) * b.at(i);
  if (tracking({&a, &b})) {
    DataPtr ad = a.data_ptr(), bd = b.data_ptr();
    GradPtr ag = a.requires_grad() ? a.grad_ptr() : nullptr;
    GradPtr bg = b.requires_grad() ? b.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&a, &b}, [ad, bd, ag, bg, og = out.grad_ptr()]() {
      if (ag)
        for (size_t i = 0; i < og->size(); ++i) (*ag)[i] += (*og)[i] * (*bd)[i];
      if (bg)
        for (size_t i = 0; i < og->size(); ++i) (*bg)[i] += (*og)[i] * (*ad)[i];
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.at(i) / b.at(i);
  if (tracking({&a, &b})) {
    DataPtr ad = a.data_ptr(), bd = b.data_ptr();
    GradPtr ag = a.requires_grad() ? a.grad_ptr() : nullptr;
    GradPtr bg = b.requires_grad() ? b.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&a, &b}, [ad, bd, ag, bg, og = out.grad_ptr()]() {
      for (size_t i = 0; i < og->size(); ++i) {
        const double inv = 1.0 / (*bd)[i];
        if (ag) (*ag)[i] += (*og)[i] * inv;
        if (bg) (*bg)[i] -= (*og)[i] * (*ad)[i] * inv * inv;
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double s) {
  Tensor out(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.at(i) * s;
  if (tracking({&x})) {
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [s, xg, og = out.grad_ptr()]() {
      for (size_t i = 0; i < og->size(); ++i) (*xg)[i] += s * (*og)[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.size() != 1)
    raise(ErrorCode::ShapeMismatch, "scale factor must be a scalar tensor");
  const double sv = s.at(0);
  Tensor out(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.at(i) * sv;
  if (tracking({&x, &s})) {
    DataPtr xd = x.data_ptr();
    GradPtr xg = x.requires_grad() ? x.grad_ptr() : nullptr;
    GradPtr sg = s.requires_grad() ? s.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&x, &s}, [sv, xd, xg, sg, og = out.grad_ptr()]() {
      if (xg)
        for (size_t i = 0; i < og->size(); ++i) (*xg)[i] += sv * (*og)[i];
      if (sg) {
        double acc = 0.0;
        for (size_t i = 0; i < og->size(); ++i) acc += (*og)[i] * (*xd)[i];
        (*sg)[0] += acc;
      }
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------------

namespace {

Tensor reduce(const Tensor& x, const std::vector<size_t>& axes, bool take_mean) {
  std::vector<uint8_t> dropped(x.rank(), 0);
  for (size_t ax : axes) {
    if (ax >= x.rank())
      raise(ErrorCode::ShapeMismatch, "reduction axis out of range");
    dropped[ax] = 1;
  }
  Shape out_shape;
  size_t count = 1;
  for (size_t d = 0; d < x.rank(); ++d) {
    if (dropped[d])
      count *= x.shape()[d];
    else
      out_shape.push_back(x.shape()[d]);
  }
  if (out_shape.empty()) out_shape = {1};

  // Row-major strides of the output index for each input axis (0 if dropped).
  std::vector<size_t> out_stride(x.rank(), 0);
  {
    size_t stride = 1;
    for (size_t d = x.rank(); d-- > 0;) {
      if (!dropped[d]) {
        out_stride[d] = stride;
        stride *= x.shape()[d];
      }
    }
  }
  std::vector<size_t> in_stride(x.rank(), 1);
  for (size_t d = x.rank() - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * x.shape()[d + 1];

  const double norm = take_mean ? 1.0 / double(count ? count : 1) : 1.0;
  Tensor out(out_shape);
  const size_t rank = x.rank();
  auto out_index = [&](size_t flat) {
    size_t o = 0;
    for (size_t d = 0; d < rank; ++d) {
      size_t coord = (flat / in_stride[d]) % x.shape()[d];
      o += coord * out_stride[d];
    }
    return o;
  };
  for (size_t i = 0; i < x.size(); ++i) out.data()[out_index(i)] += x.at(i) * norm;

  if (tracking({&x})) {
    GradPtr xg = x.grad_ptr();
    Shape xshape = x.shape();
    out.set_requires_grad(true);
    record(out, {&x},
           [xg, og = out.grad_ptr(), in_stride, out_stride, xshape, norm, rank]() {
             for (size_t i = 0; i < xg->size(); ++i) {
               size_t o = 0;
               for (size_t d = 0; d < rank; ++d) {
                 size_t coord = (i / in_stride[d]) % xshape[d];
                 o += coord * out_stride[d];
               }
               (*xg)[i] += (*og)[o] * norm;
             }
           });
  }
  return out;
}

std::vector<size_t> all_axes(const Tensor& x) {
  std::vector<size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return axes;
}

}  // namespace

Tensor sum(const Tensor& x, const std::vector<size_t>& axes) { return reduce(x, axes, false); }
Tensor mean(const Tensor& x, const std::vector<size_t>& axes) { return reduce(x, axes, true); }
Tensor sum_all(const Tensor& x) { return reduce(x, all_axes(x), false); }
Tensor mean_all(const Tensor& x) { return reduce(x, all_axes(x), true); }

// ---- slice-wise ops (softmax, layer norm) --------------------------------------

namespace {

struct SliceView {
  size_t outer, len, inner;
};

SliceView slice_view(const Tensor& x, size_t axis, const char* who) {
  if (axis >= x.rank())
    raise(ErrorCode::ShapeMismatch, std::string(who) + " axis out of range");
  SliceView v{1, x.shape()[axis], 1};
  for (size_t d = 0; d < axis; ++d) v.outer *= x.shape()[d];
  for (size_t d = axis + 1; d < x.rank(); ++d) v.inner *= x.shape()[d];
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x, size_t axis) {
  SliceView v = slice_view(x, axis, "softmax");
  Tensor out(x.shape());
  for (size_t o = 0; o < v.outer; ++o) {
    for (size_t in = 0; in < v.inner; ++in) {
      const size_t base = o * v.len * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t l = 0; l < v.len; ++l) mx = std::max(mx, x.at(base + l * v.inner));
      double denom = 0.0;
      for (size_t l = 0; l < v.len; ++l) {
        double e = std::exp(x.at(base + l * v.inner) - mx);
        out.data()[base + l * v.inner] = e;
        denom += e;
      }
      for (size_t l = 0; l < v.len; ++l) out.data()[base + l * v.inner] /= denom;
    }
  }
  if (tracking({&x})) {
    DataPtr yd = out.data_ptr();
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [v, yd, xg, og = out.grad_ptr()]() {
      for (size_t o = 0; o < v.outer; ++o) {
        for (size_t in = 0; in < v.inner; ++in) {
          const size_t base = o * v.len * v.inner + in;
          double dot = 0.0;
          for (size_t l = 0; l < v.len; ++l) {
            size_t i = base + l * v.inner;
            dot += (*og)[i] * (*yd)[i];
          }
          for (size_t l = 0; l < v.len; ++l) {
            size_t i = base + l * v.inner;
            (*xg)[i] += (*yd)[i] * ((*og)[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, size_t axis, double eps) {
  SliceView v = slice_view(x, axis, "layer_norm");
  Tensor out(x.shape());
  std::vector<double> inv_std(v.outer * v.inner);
  for (size_t o = 0; o < v.outer; ++o) {
    for (size_t in = 0; in < v.inner; ++in) {
      const size_t base = o * v.len * v.inner + in;
      double mean_v = 0.0;
      for (size_t l = 0; l < v.len; ++l) mean_v += x.at(base + l * v.inner);
      mean_v /= double(v.len);
      double var = 0.0;
      for (size_t l = 0; l < v.len; ++l) {
        double d = x.at(base + l * v.inner) - mean_v;
        var += d * d;
      }
      var /= double(v.len);
      double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * v.inner + in] = is;
      for (size_t l = 0; l < v.len; ++l)
        out.data()[base + l * v.inner] = (x.at(base + l * v.inner) - mean_v) * is;
    }
  }
  if (tracking({&x})) {
    DataPtr yd = out.data_ptr();
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [v, yd, xg, inv_std, og = out.grad_ptr()]() {
      const double n = double(v.len);
      for (size_t o = 0; o < v.outer; ++o) {
        for (size_t in = 0; in < v.inner; ++in) {
          const size_t base = o * v.len * v.inner + in;
          double sum_g = 0.0, sum_gy = 0.0;
          for (size_t l = 0; l < v.len; ++l) {
            size_t i = base + l * v.inner;
            sum_g += (*og)[i];
            sum_gy += (*og)[i] * (*yd)[i];
          }
          const double is = inv_std[o * v.inner + in];
          for (size_t l = 0; l < v.len; ++l) {
            size_t i = base + l * v.inner;
            (*xg)[i] += is * ((*og)[i] - sum_g / n - (*yd)[i] * sum_gy / n);
          }
        }
      }
    });
  }
  return out;
}

// ---- convolutions ---------------------------------------------------------------

namespace {

struct ConvGeom {
  size_t cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, size_t stride, size_t pad,
                       bool depthwise) {
  require_rank(x, 3, "conv input");
  require_rank(w, depthwise ? 3 : 4, "conv kernel");
  if (stride < 1) raise(ErrorCode::ShapeMismatch, "conv stride must be >= 1");
  ConvGeom g{};
  g.cin = x.extent(0);
  g.h = x.extent(1);
  g.w = x.extent(2);
  g.stride = stride;
  g.pad = pad;
  if (depthwise) {
    g.cout = g.cin;
    if (w.extent(0) != g.cin)
      raise(ErrorCode::ShapeMismatch, "depthwise kernel channels != input channels");
    g.kh = w.extent(1);
    g.kw = w.extent(2);
  } else {
    g.cout = w.extent(0);
    if (w.extent(1) != g.cin)
      raise(ErrorCode::ShapeMismatch, "kernel C_in does not match input channels");
    g.kh = w.extent(2);
    g.kw = w.extent(3);
  }
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw)
    raise(ErrorCode::ShapeMismatch, "kernel larger than padded input");
  if ((g.h + 2 * pad - g.kh) % stride != 0 || (g.w + 2 * pad - g.kw) % stride != 0)
    raise(ErrorCode::NonIntegralOutput, "conv output extent is not integral");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// cols[cin*kh*kw x oh*ow]
void im2col(const double* x, const ConvGeom& g, double* cols) {
  const size_t ocols = g.oh * g.ow;
  for (size_t c = 0; c < g.cin; ++c) {
    for (size_t ky = 0; ky < g.kh; ++ky) {
      for (size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ocols;
        for (size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = long(oy * g.stride + ky) - long(g.pad);
          const bool y_ok = iy >= 0 && iy < long(g.h);
          for (size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = long(ox * g.stride + kx) - long(g.pad);
            row[oy * g.ow + ox] = (y_ok && ix >= 0 && ix < long(g.w))
                                      ? x[(c * g.h + iy) * g.w + ix]
                                      : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const size_t ocols = g.oh * g.ow;
  for (size_t c = 0; c < g.cin; ++c) {
    for (size_t ky = 0; ky < g.kh; ++ky) {
      for (size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ocols;
        for (size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = long(oy * g.stride + ky) - long(g.pad);
          if (iy < 0 || iy >= long(g.h)) continue;
          for (size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = long(ox * g.stride + kx) - long(g.pad);
            if (ix < 0 || ix >= long(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t padding) {
  ConvGeom g = conv_geometry(x, w, stride, padding, false);
  const size_t kdim = g.cin * g.kh * g.kw, ocols = g.oh * g.ow;
  std::vector<double> cols(kdim * ocols);
  im2col(x.data(), g, cols.data());
  Tensor out({g.cout, g.oh, g.ow});
  gemm_nn(g.cout, ocols, kdim, w.data(), cols.data(), out.data());
  if (tracking({&x, &w})) {
    DataPtr xd = x.data_ptr(), wd = w.data_ptr();
    GradPtr xg = x.requires_grad() ? x.grad_ptr() : nullptr;
    GradPtr wg = w.requires_grad() ? w.grad_ptr() : nullptr;
    // The column matrix is recomputed in backward to keep tapes small.
    out.set_requires_grad(true);
    record(out, {&x, &w}, [g, kdim, ocols, xd, wd, xg, wg, og = out.grad_ptr()]() {
      std::vector<double> cols_b(kdim * ocols);
      im2col(xd->data(), g, cols_b.data());
      if (wg) gemm_nt(g.cout, kdim, ocols, og->data(), cols_b.data(), wg->data());
      if (xg) {
        std::vector<double> dcols(kdim * ocols, 0.0);
        gemm_tn(kdim, ocols, g.cout, wd->data(), og->data(), dcols.data());
        col2im_add(dcols.data(), g, xg->data());
      }
    });
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t padding) {
  ConvGeom g = conv_geometry(x, w, stride, padding, true);
  Tensor out({g.cout, g.oh, g.ow});
  for (size_t c = 0; c < g.cin; ++c) {
    const double* xc = x.data() + c * g.h * g.w;
    const double* wc = w.data() + c * g.kh * g.kw;
    double* oc = out.data() + c * g.oh * g.ow;
    for (size_t oy = 0; oy < g.oh; ++oy) {
      for (size_t ox = 0; ox < g.ow; ++ox) {
        double acc = 0.0;
        for (size_t ky = 0; ky < g.kh; ++ky) {
          const long iy = long(oy * g.stride + ky) - long(g.pad);
          if (iy < 0 || iy >= long(g.h)) continue;
          for (size_t kx = 0; kx < g.kw; ++kx) {
            const long ix = long(ox * g.stride + kx) - long(g.pad);
            if (ix < 0 || ix >= long(g.w)) continue;
            acc += xc[iy * g.w + ix] * wc[ky * g.kw + kx];
          }
        }
        oc[oy * g.ow + ox] = acc;
      }
    }
  }
  if (tracking({&x, &w})) {
    DataPtr xd = x.data_ptr(), wd = w.data_ptr();
    GradPtr xg = x.requires_grad() ? x.grad_ptr() : nullptr;
    GradPtr wg = w.requires_grad() ? w.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&x, &w}, [g, xd, wd, xg, wg, og = out.grad_ptr()]() {
      for (size_t c = 0; c < g.cin; ++c) {
        const double* xc = xd->data() + c * g.h * g.w;
        const double* wc = wd->data() + c * g.kh * g.kw;
        const double* goc = og->data() + c * g.oh * g.ow;
        for (size_t oy = 0; oy < g.oh; ++oy) {
          for (size_t ox = 0; ox < g.ow; ++ox) {
            const double go = goc[oy * g.ow + ox];
            if (go == 0.0) continue;
            for (size_t ky = 0; ky < g.kh; ++ky) {
              const long iy = long(oy * g.stride + ky) - long(g.pad);
              if (iy < 0 || iy >= long(g.h)) continue;
              for (size_t kx = 0; kx < g.kw; ++kx) {
                const long ix = long(ox * g.stride + kx) - long(g.pad);
                if (ix < 0 || ix >= long(g.w)) continue;
                if (wg) (*wg)[c * g.kh * g.kw + ky * g.kw + kx] += go * xc[iy * g.w + ix];
                if (xg) (*xg)[(c * g.h + iy) * g.w + ix] += go * wc[ky * g.kw + kx];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- resampling -------------------------------------------------------------------

Tensor downsample(const Tensor& x, size_t factor) {
  require_rank(x, 3, "downsample");
  if (factor < 1) raise(ErrorCode::NonDivisibleExtent, "downsample factor must be >= 1");
  const size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (h % factor != 0 || w % factor != 0)
    raise(ErrorCode::NonDivisibleExtent, "downsample extents not divisible by factor");
  const size_t oh = h / factor, ow = w / factor;
  const double norm = 1.0 / double(factor * factor);
  Tensor out({c, oh, ow});
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t y = 0; y < h; ++y)
      for (size_t xx = 0; xx < w; ++xx)
        out.data()[(ch * oh + y / factor) * ow + xx / factor] +=
            x.at((ch * h + y) * w + xx) * norm;
  if (tracking({&x})) {
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [c, h, w, oh, ow, factor, norm, xg, og = out.grad_ptr()]() {
      for (size_t ch = 0; ch < c; ++ch)
        for (size_t y = 0; y < h; ++y)
          for (size_t xx = 0; xx < w; ++xx)
            (*xg)[(ch * h + y) * w + xx] +=
                (*og)[(ch * oh + y / factor) * ow + xx / factor] * norm;
    });
  }
  return out;
}

Tensor upsample(const Tensor& x, size_t factor) {
  require_rank(x, 3, "upsample");
  if (factor < 1) raise(ErrorCode::NonDivisibleExtent, "upsample factor must be >= 1");
  const size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const size_t oh = h * factor, ow = w * factor;
  Tensor out({c, oh, ow});
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t y = 0; y < oh; ++y)
      for (size_t xx = 0; xx < ow; ++xx)
        out.data()[(ch * oh + y) * ow + xx] = x.at((ch * h + y / factor) * w + xx / factor);
  if (tracking({&x})) {
    GradPtr xg = x.grad_ptr();
    out.set_requires_grad(true);
    record(out, {&x}, [c, h, w, oh, ow, factor, xg, og = out.grad_ptr()]() {
      for (size_t ch = 0; ch < c; ++ch)
        for (size_t y = 0; y < oh; ++y)
          for (size_t xx = 0; xx < ow; ++xx)
            (*xg)[(ch * h + y / factor) * w + xx / factor] +=
                (*og)[(ch * oh + y) * ow + xx];
    });
  }
  return out;
}

// ---- losses -----------------------------------------------------------------------

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  const size_t n = logits.size();
  if (n == 0) raise(ErrorCode::ShapeMismatch, "bce_with_logits on empty tensor");
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double x = logits.at(i), z = targets.at(i);
    acc += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out({1}, {acc / double(n)});
  if (tracking({&logits, &targets})) {
    DataPtr xd = logits.data_ptr(), zd = targets.data_ptr();
    GradPtr xg = logits.requires_grad() ? logits.grad_ptr() : nullptr;
    out.set_requires_grad(true);
    record(out, {&logits}, [n, xd, zd, xg, og = out.grad_ptr()]() {
      if (!xg) return;
      const double go = (*og)[0] / double(n);
      for (size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-(*xd)[i]));
        (*xg)[i] += go * (s - (*zd)[i]);
      }
    });
  }
  return out;
}

// ---- gradient checking ---------------------------------------------------------

namespace {

uint64_t splitmix64_step(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps, double tol,
                           size_t max_coords, uint64_t seed) {
  Tensor probe = x;
  probe.set_requires_grad(true);

  std::vector<double> analytic(probe.size());
  {
    Tape tape;
    Tensor loss = f(probe);
    if (loss.size() != 1)
      raise(ErrorCode::NotScalar, "grad_check target must map to a scalar");
    tape.backward(loss);
    std::copy(probe.grad(), probe.grad() + probe.size(), analytic.begin());
  }

  std::vector<size_t> coords;
  if (max_coords == 0 || max_coords >= probe.size()) {
    coords.resize(probe.size());
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    uint64_t state = seed;
    std::vector<uint8_t> chosen(probe.size(), 0);
    while (coords.size() < max_coords) {
      size_t i = size_t(splitmix64_step(state) % probe.size());
      if (!chosen[i]) {
        chosen[i] = 1;
        coords.push_back(i);
      }
    }
  }

  GradCheckReport report;
  report.coords_checked = coords.size();
  double* data = probe.data();
  for (size_t i : coords) {
    const double keep = data[i];
    data[i] = keep + eps;
    const double up = f(probe).at(0);
    data[i] = keep - eps;
    const double down = f(probe).at(0);
    data[i] = keep;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) /
                       std::max(1e-8, std::abs(a) + std::abs(numeric));
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// ---- checkpoints ----------------------------------------------------------------

void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& params,
                     const std::string& path) {
  nlohmann::ordered_json header;
  header["format"] = "vessam-ckpt";
  header["version"] = 1;
  auto list = nlohmann::ordered_json::array();
  size_t offset = 0;
  for (const auto& [name, t] : params) {
    nlohmann::ordered_json jp;
    jp["name"] = name;
    jp["shape"] = t.shape();
    jp["offset"] = offset;
    list.push_back(std::move(jp));
    offset += t.size();
  }
  header["params"] = std::move(list);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot open " + path + " for writing");
  f << header.dump() << "\n";
  for (const auto& [name, t] : params) {
    for (size_t i = 0; i < t.size(); ++i) {
      const uint64_t bits = std::bit_cast<uint64_t>(t.at(i));
      uint8_t bytes[8];
      for (int b = 0; b < 8; ++b) bytes[b] = uint8_t(bits >> (8 * b));
      f.write(reinterpret_cast<const char*>(bytes), 8);
    }
  }
  if (!f) raise(ErrorCode::IoError, "short write to " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(ErrorCode::IoError, "cannot open " + path);
  std::string header_line;
  if (!std::getline(f, header_line))
    raise(ErrorCode::SchemaViolation, "checkpoint missing header line");
  nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
  if (header.is_discarded() || !header.is_object() ||
      header.value("format", "") != "vessam-ckpt")
    raise(ErrorCode::SchemaViolation, "not a vessam checkpoint");
  if (header.value("version", 0) != 1)
    raise(ErrorCode::VersionMismatch, "unsupported checkpoint version");
  if (!header.contains("params") || !header["params"].is_array())
    raise(ErrorCode::SchemaViolation, "checkpoint header lacks params list");

  std::vector<uint8_t> payload((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
  if (payload.size() % 8 != 0)
    raise(ErrorCode::TruncatedPayload, "checkpoint payload is not a whole number of f64");
  const size_t total = payload.size() / 8;

  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& jp : header["params"]) {
    if (!jp.contains("name") || !jp.contains("shape") || !jp.contains("offset"))
      raise(ErrorCode::SchemaViolation, "checkpoint param entry malformed");
    Shape shape = jp["shape"].get<Shape>();
    const size_t offset = jp["offset"].get<size_t>();
    const size_t count = shape_size(shape);
    if (offset + count > total)
      raise(ErrorCode::TruncatedPayload, "checkpoint payload shorter than header claims");
    std::vector<double> values(count);
    for (size_t i = 0; i < count; ++i) {
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= uint64_t(payload[(offset + i) * 8 + b]) << (8 * b);
      values[i] = std::bit_cast<double>(bits);
    }
    out.emplace_back(jp["name"].get<std::string>(), Tensor(shape, std::move(values)));
  }
  return out;
}

}  // namespace vessam::ad
