#include "triflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "kernels.hpp"
#include "triflow/threading.hpp"

namespace triflow {

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor handle

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), S(0), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  check(!shape.empty(), "tensor shape must have at least one dimension");
  for (int d : shape) check(d >= 1, "tensor dimensions must be positive, got " + shape_str(shape));
  auto node = std::make_shared<detail::TensorNode<S>>();
  node->shape = std::move(shape);
  node->data.assign(static_cast<size_t>(shape_size(node->shape)), value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename S>
Tensor<S> Tensor<S>::from_vector(Shape shape, std::vector<S> values, bool requires_grad) {
  check(!shape.empty(), "tensor shape must have at least one dimension");
  check(shape_size(shape) == static_cast<std::int64_t>(values.size()),
        "value count " + std::to_string(values.size()) + " does not fill shape " + shape_str(shape));
  auto node = std::make_shared<detail::TensorNode<S>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename S>
const Shape& Tensor<S>::shape() const {
  check(defined(), "use of an undefined tensor");
  return node_->shape;
}

template <typename S>
int Tensor<S>::ndim() const {
  return static_cast<int>(shape().size());
}

template <typename S>
int Tensor<S>::dim(int i) const {
  const Shape& s = shape();
  check(i >= 0 && i < static_cast<int>(s.size()),
        "dim index " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[static_cast<size_t>(i)];
}

template <typename S>
std::int64_t Tensor<S>::size() const {
  check(defined(), "use of an undefined tensor");
  return static_cast<std::int64_t>(node_->data.size());
}

template <typename S>
bool Tensor<S>::requires_grad() const {
  check(defined(), "use of an undefined tensor");
  return node_->requires_grad;
}

template <typename S>
void Tensor<S>::set_requires_grad(bool value) {
  check(defined(), "use of an undefined tensor");
  check(node_->parents.empty(), "requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = value;
}

template <typename S>
const char* Tensor<S>::op_name() const {
  check(defined(), "use of an undefined tensor");
  return node_->op;
}

template <typename S>
std::span<const S> Tensor<S>::data() const {
  check(defined(), "use of an undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

template <typename S>
std::span<S> Tensor<S>::data_mut() {
  check(defined(), "use of an undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

template <typename S>
S Tensor<S>::item() const {
  check(size() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

template <typename S>
bool Tensor<S>::has_grad() const {
  check(defined(), "use of an undefined tensor");
  return !node_->grad.empty();
}

template <typename S>
std::span<const S> Tensor<S>::grad() const {
  check(defined(), "use of an undefined tensor");
  check(!node_->grad.empty(), "tensor has no accumulated gradient");
  return {node_->grad.data(), node_->grad.size()};
}

template <typename S>
std::span<S> Tensor<S>::grad_mut() {
  check(defined(), "use of an undefined tensor");
  node_->grad_data();
  return {node_->grad.data(), node_->grad.size()};
}

template <typename S>
void Tensor<S>::zero_grad() {
  check(defined(), "use of an undefined tensor");
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
}

// ---------------------------------------------------------------------------
// Graph construction

namespace detail {

template <typename S>
Tensor<S> make_result(Shape shape, const char* op, std::vector<Tensor<S>> parents,
                      std::function<void(TensorNode<S>&)> backward) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->data.assign(static_cast<size_t>(shape_size(node->shape)), S(0));
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || (p.defined() && p.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents)
      if (p.defined()) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor<S>(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binaries with prefix/scalar broadcast

namespace {

// The smaller operand is indexed by out_index / div; div is 1 when the operand
// has the full shape, out_size when it is a scalar, and the trailing block
// size when its shape is a leading prefix.
template <typename S>
void broadcast_divs(const char* op, const Tensor<S>& a, const Tensor<S>& b, Shape& out_shape,
                    std::int64_t& div_a, std::int64_t& div_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  div_a = div_b = 1;
  if (sa == sb) {
    out_shape = sa;
    return;
  }
  const std::int64_t na = a.size();
  const std::int64_t nb = b.size();
  auto is_prefix = [](const Shape& small, const Shape& big) {
    return small.size() < big.size() && std::equal(small.begin(), small.end(), big.begin());
  };
  if (nb == 1) {
    out_shape = sa;
    div_b = na;
  } else if (na == 1) {
    out_shape = sb;
    div_a = nb;
  } else if (is_prefix(sb, sa)) {
    out_shape = sa;
    div_b = na / nb;
  } else if (is_prefix(sa, sb)) {
    out_shape = sb;
    div_a = nb / na;
  } else {
    fail(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
         " neither match nor prefix-broadcast");
  }
}

template <typename S, typename Fwd, typename DA, typename DB>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, Fwd fwd, DA da,
                    DB db) {
  Shape out_shape;
  std::int64_t div_a, div_b;
  broadcast_divs(name, a, b, out_shape, div_a, div_b);

  auto out = detail::make_result<S>(out_shape, name, {a, b},
                                    [div_a, div_b, da, db](detail::TensorNode<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const S* g = self.grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.data.size());
    if (pa.requires_grad) {
      S* ga = pa.grad_data();
      if (div_a == 1 && div_b == 1) {
        for (std::int64_t i = 0; i < n; ++i) ga[i] += da(g[i], pa.data[i], pb.data[i]);
      } else {
        for (std::int64_t i = 0; i < n; ++i)
          ga[i / div_a] += da(g[i], pa.data[i / div_a], pb.data[i / div_b]);
      }
    }
    if (pb.requires_grad) {
      S* gb = pb.grad_data();
      if (div_a == 1 && div_b == 1) {
        for (std::int64_t i = 0; i < n; ++i) gb[i] += db(g[i], pa.data[i], pb.data[i]);
      } else {
        for (std::int64_t i = 0; i < n; ++i)
          gb[i / div_b] += db(g[i], pa.data[i / div_a], pb.data[i / div_b]);
      }
    }
  });

  const S* ap = a.data().data();
  const S* bp = b.data().data();
  S* op_ = out.data_mut().data();
  const std::int64_t n = out.size();
  if (div_a == 1 && div_b == 1) {
    for (std::int64_t i = 0; i < n; ++i) op_[i] = fwd(ap[i], bp[i]);
  } else {
    const std::int64_t la = div_a, lb = div_b;
    for (std::int64_t i = 0; i < n; ++i) op_[i] = fwd(ap[i / la], bp[i / lb]);
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

// ---------------------------------------------------------------------------
// Elementwise unaries

namespace {

// dfn receives (incoming grad, input value, output value).
template <typename S, typename Fwd, typename Dfn>
Tensor<S> unary_op(const char* name, const Tensor<S>& x, Fwd fwd, Dfn dfn) {
  auto out = detail::make_result<S>(x.shape(), name, {x}, [dfn](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    S* gp = p.grad_data();
    const S* g = self.grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.data.size());
    for (std::int64_t i = 0; i < n; ++i) gp[i] += dfn(g[i], p.data[i], self.data[i]);
  });
  const S* xp = x.data().data();
  S* op_ = out.data_mut().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) op_[i] = fwd(xp[i]);
  return out;
}

template <typename S>
S sigmoid_scalar(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary_op<S>(
      "sigmoid", x, [](S v) { return sigmoid_scalar(v); },
      [](S g, S, S y) { return g * y * (S(1) - y); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return unary_op<S>(
      "tanh", x, [](S v) { return std::tanh(v); },
      [](S g, S, S y) { return g * (S(1) - y * y); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_op<S>(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S g, S v, S) { return v > S(0) ? g : S(0); });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return unary_op<S>(
      "abs", x, [](S v) { return v < S(0) ? -v : v; },
      [](S g, S v, S) { return v > S(0) ? g : (v < S(0) ? -g : S(0)); });
}

template <typename S>
Tensor<S> affine(const Tensor<S>& x, S scale, S shift) {
  return unary_op<S>(
      "affine", x, [scale, shift](S v) { return scale * v + shift; },
      [scale](S g, S, S) { return g * scale; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  auto out = detail::make_result<S>(Shape{1}, "sum_all", {x}, [](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const S g = self.grad[0];
    S* gp = p.grad_data();
    for (size_t i = 0; i < p.data.size(); ++i) gp[i] += g;
  });
  S acc = 0;
  for (S v : x.data()) acc += v;
  out.data_mut()[0] = acc;
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.size());
  auto out = detail::make_result<S>(Shape{1}, "mean_all", {x}, [inv](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const S g = self.grad[0] * inv;
    S* gp = p.grad_data();
    for (size_t i = 0; i < p.data.size(); ++i) gp[i] += g;
  });
  S acc = 0;
  for (S v : x.data()) acc += v;
  out.data_mut()[0] = acc * inv;
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  check(shape_size(shape) == x.size(),
        "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = detail::make_result<S>(std::move(shape), "reshape", {x}, [](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    S* gp = p.grad_data();
    const S* g = self.grad.data();
    for (size_t i = 0; i < self.data.size(); ++i) gp[i] += g[i];
  });
  std::copy(x.data().begin(), x.data().end(), out.data_mut().begin());
  return out;
}

template <typename S>
Tensor<S> concat_channels(std::span<const Tensor<S>> parts) {
  check(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts)
    check(p.ndim() == 3, "concat_channels: inputs must be [C, H, W], got " + shape_str(p.shape()));
  const int h = parts[0].dim(1);
  const int w = parts[0].dim(2);
  int c_total = 0;
  for (const auto& p : parts) {
    check(p.dim(1) == h && p.dim(2) == w,
          "concat_channels: spatial mismatch, " + shape_str(p.shape()) + " vs " +
              shape_str(parts[0].shape()));
    c_total += p.dim(0);
  }
  std::vector<Tensor<S>> parents(parts.begin(), parts.end());
  auto out = detail::make_result<S>(Shape{c_total, h, w}, "concat_channels", parents,
                                    [](detail::TensorNode<S>& self) {
    const S* g = self.grad.data();
    size_t off = 0;
    for (auto& pp : self.parents) {
      auto& p = *pp;
      if (p.requires_grad) {
        S* gp = p.grad_data();
        for (size_t i = 0; i < p.data.size(); ++i) gp[i] += g[off + i];
      }
      off += p.data.size();
    }
  });
  S* op_ = out.data_mut().data();
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), op_ + off);
    off += p.data().size();
  }
  return out;
}

template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, int c_begin, int c_end) {
  check(x.ndim() == 3, "slice_channels: input must be [C, H, W], got " + shape_str(x.shape()));
  check(c_begin >= 0 && c_end <= x.dim(0) && c_begin < c_end,
        "slice_channels: range [" + std::to_string(c_begin) + ", " + std::to_string(c_end) +
            ") invalid for " + shape_str(x.shape()));
  const int h = x.dim(1);
  const int w = x.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto out = detail::make_result<S>(Shape{c_end - c_begin, h, w}, "slice_channels", {x},
                                    [c_begin, plane](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    S* gp = p.grad_data() + c_begin * plane;
    const S* g = self.grad.data();
    for (size_t i = 0; i < self.data.size(); ++i) gp[i] += g[i];
  });
  const S* src = x.data().data() + c_begin * plane;
  std::copy(src, src + out.size(), out.data_mut().begin());
  return out;
}

template <typename S>
Tensor<S> expand_spatial(const Tensor<S>& v, int h, int w) {
  check(v.ndim() == 1 || (v.ndim() == 3 && v.dim(1) == 1 && v.dim(2) == 1),
        "expand_spatial: input must be [C] or [C, 1, 1], got " + shape_str(v.shape()));
  check(h >= 1 && w >= 1, "expand_spatial: target size must be positive");
  const int c = v.dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto out = detail::make_result<S>(Shape{c, h, w}, "expand_spatial", {v},
                                    [plane](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    S* gp = p.grad_data();
    const S* g = self.grad.data();
    for (size_t ci = 0; ci < p.data.size(); ++ci) {
      S acc = 0;
      const S* gplane = g + ci * plane;
      for (std::int64_t i = 0; i < plane; ++i) acc += gplane[i];
      gp[ci] += acc;
    }
  });
  S* op_ = out.data_mut().data();
  const S* vp = v.data().data();
  for (int ci = 0; ci < c; ++ci) std::fill(op_ + ci * plane, op_ + (ci + 1) * plane, vp[ci]);
  return out;
}

template <typename S>
Tensor<S> coord_grid(int h, int w) {
  check(h >= 1 && w >= 1, "coord_grid: size must be positive");
  auto t = Tensor<S>::zeros({2, h, w});
  S* d = t.data_mut().data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      d[static_cast<std::int64_t>(y) * w + x] = static_cast<S>(x);
      d[static_cast<std::int64_t>(h) * w + y * w + x] = static_cast<S>(y);
    }
  return t;
}

// ---------------------------------------------------------------------------
// matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a, bool trans_b) {
  check(a.ndim() == 2 && b.ndim() == 2,
        "matmul: operands must be 2-D, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int ka = trans_a ? a.dim(0) : a.dim(1);
  const int kb = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  check(ka == kb, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                      (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
  const int k = ka;

  auto out = detail::make_result<S>(Shape{m, n}, "matmul", {a, b},
                                    [m, n, k, trans_a, trans_b](detail::TensorNode<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const S* g = self.grad.data();
    // Effective row-major views a_eff [m, k] and b_eff [k, n].
    std::vector<S> a_eff, b_eff;
    const S* ap = pa.data.data();
    const S* bp = pb.data.data();
    if (trans_a) {
      a_eff.resize(pa.data.size());
      detail::transpose(k, m, ap, a_eff.data());
      ap = a_eff.data();
    }
    if (trans_b) {
      b_eff.resize(pb.data.size());
      detail::transpose(n, k, bp, b_eff.data());
      bp = b_eff.data();
    }
    if (pa.requires_grad) {
      // d a_eff = g * b_eff^T : [m, k]
      std::vector<S> da(static_cast<size_t>(m) * k);
      detail::gemm_nt(m, k, n, g, bp, da.data(), false);
      S* gp = pa.grad_data();
      if (trans_a) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < k; ++j) gp[static_cast<std::int64_t>(j) * m + i] += da[static_cast<std::int64_t>(i) * k + j];
      } else {
        for (size_t i = 0; i < da.size(); ++i) gp[i] += da[i];
      }
    }
    if (pb.requires_grad) {
      // d b_eff = a_eff^T * g : [k, n]
      std::vector<S> at(static_cast<size_t>(m) * k);
      detail::transpose(m, k, ap, at.data());
      std::vector<S> db(static_cast<size_t>(k) * n);
      detail::gemm_nn(k, n, m, at.data(), g, db.data(), false);
      S* gp = pb.grad_data();
      if (trans_b) {
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < n; ++j) gp[static_cast<std::int64_t>(j) * k + i] += db[static_cast<std::int64_t>(i) * n + j];
      } else {
        for (size_t i = 0; i < db.size(); ++i) gp[i] += db[i];
      }
    }
  });

  std::vector<S> a_eff, b_eff;
  const S* ap = a.data().data();
  const S* bp = b.data().data();
  if (trans_a) {
    a_eff.resize(a.data().size());
    detail::transpose(k, m, ap, a_eff.data());
    ap = a_eff.data();
  }
  if (trans_b) {
    b_eff.resize(b.data().size());
    detail::transpose(n, k, bp, b_eff.data());
    bp = b_eff.data();
  }
  detail::gemm_nn(m, n, k, ap, bp, out.data_mut().data(), false);
  return out;
}

// ---------------------------------------------------------------------------
// conv2d / depthwise_conv2d

namespace {

struct ConvDims {
  int ci, h, w, co, k, ho, wo;
};

template <typename S>
ConvDims conv_check(const char* name, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                    int stride, int pad, bool depthwise) {
  check(x.ndim() == 3, std::string(name) + ": input must be [C, H, W], got " + shape_str(x.shape()));
  check(stride >= 1, std::string(name) + ": stride must be >= 1");
  check(pad >= 0, std::string(name) + ": pad must be >= 0");
  ConvDims d;
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  if (depthwise) {
    check(w.ndim() == 3 && w.dim(0) == d.ci && w.dim(1) == w.dim(2),
          std::string(name) + ": weight must be [C, k, k] matching input channels, got " +
              shape_str(w.shape()));
    d.k = w.dim(1);
    d.co = d.ci;
  } else {
    check(w.ndim() == 4 && w.dim(2) == w.dim(3),
          std::string(name) + ": weight must be [Co, Ci, k, k], got " + shape_str(w.shape()));
    check(w.dim(1) == d.ci, std::string(name) + ": weight expects " + std::to_string(w.dim(1)) +
                                " input channels, tensor has " + std::to_string(d.ci));
    d.k = w.dim(2);
    d.co = w.dim(0);
  }
  check(d.k % 2 == 1, std::string(name) + ": kernel size must be odd, got " + std::to_string(d.k));
  if (b.defined())
    check(b.ndim() == 1 && b.dim(0) == d.co,
          std::string(name) + ": bias must be [" + std::to_string(d.co) + "], got " + shape_str(b.shape()));
  const int hn = d.h + 2 * pad - d.k;
  const int wn = d.w + 2 * pad - d.k;
  check(hn >= 0 && wn >= 0, std::string(name) + ": kernel larger than padded input");
  check(hn % stride == 0 && wn % stride == 0,
        std::string(name) + ": output size not integral for input " + shape_str(x.shape()) +
            ", k=" + std::to_string(d.k) + ", stride=" + std::to_string(stride) +
            ", pad=" + std::to_string(pad));
  d.ho = hn / stride + 1;
  d.wo = wn / stride + 1;
  return d;
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, int pad) {
  const ConvDims d = conv_check("conv2d", x, w, b, stride, pad, false);
  const int ckk = d.ci * d.k * d.k;
  const std::int64_t cols = static_cast<std::int64_t>(d.ho) * d.wo;

  std::vector<Tensor<S>> parents = b.defined() ? std::vector<Tensor<S>>{x, w, b}
                                               : std::vector<Tensor<S>>{x, w};
  auto out = detail::make_result<S>(Shape{d.co, d.ho, d.wo}, "conv2d", parents,
                                    [d, ckk, cols, stride, pad](detail::TensorNode<S>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const S* g = self.grad.data();
    // The col buffer is rebuilt here instead of being kept from the forward
    // pass; it is the largest intermediate by far.
    std::vector<S> col;
    if (px.requires_grad || pw.requires_grad) {
      col.resize(static_cast<size_t>(ckk) * cols);
      detail::im2col(px.data.data(), d.ci, d.h, d.w, d.k, stride, pad, d.ho, d.wo, col.data());
    }
    if (pw.requires_grad) {
      detail::gemm_nt(d.co, ckk, static_cast<int>(cols), g, col.data(), pw.grad_data(), true);
    }
    if (px.requires_grad) {
      std::vector<S> wt(pw.data.size());
      detail::transpose(d.co, ckk, pw.data.data(), wt.data());
      std::vector<S> dcol(static_cast<size_t>(ckk) * cols);
      detail::gemm_nn(ckk, static_cast<int>(cols), d.co, wt.data(), g, dcol.data(), false);
      detail::col2im_add(dcol.data(), d.ci, d.h, d.w, d.k, stride, pad, d.ho, d.wo, px.grad_data());
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      S* gb = pb.grad_data();
      for (int co = 0; co < d.co; ++co) {
        S acc = 0;
        const S* grow = g + co * cols;
        for (std::int64_t i = 0; i < cols; ++i) acc += grow[i];
        gb[co] += acc;
      }
    }
  });

  std::vector<S> col(static_cast<size_t>(ckk) * cols);
  detail::im2col(x.data().data(), d.ci, d.h, d.w, d.k, stride, pad, d.ho, d.wo, col.data());
  S* op_ = out.data_mut().data();
  detail::gemm_nn(d.co, static_cast<int>(cols), ckk, w.data().data(), col.data(), op_, false);
  if (b.defined()) {
    const S* bp = b.data().data();
    for (int co = 0; co < d.co; ++co) {
      S* row = op_ + co * cols;
      const S bv = bp[co];
      for (std::int64_t i = 0; i < cols; ++i) row[i] += bv;
    }
  }
  return out;
}

template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int pad) {
  const ConvDims d = conv_check("depthwise_conv2d", x, w, b, 1, pad, true);
  std::vector<Tensor<S>> parents = b.defined() ? std::vector<Tensor<S>>{x, w, b}
                                               : std::vector<Tensor<S>>{x, w};
  auto out = detail::make_result<S>(Shape{d.co, d.ho, d.wo}, "depthwise_conv2d", parents,
                                    [d, pad](detail::TensorNode<S>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const S* g = self.grad.data();
    const std::int64_t plane_in = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t plane_out = static_cast<std::int64_t>(d.ho) * d.wo;
    const bool need_x = px.requires_grad;
    const bool need_w = pw.requires_grad;
    if (need_x || need_w) {
      S* gx = need_x ? px.grad_data() : nullptr;
      S* gw = need_w ? pw.grad_data() : nullptr;
      parallel_for(d.ci, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
          const S* xp = px.data.data() + c * plane_in;
          const S* wp = pw.data.data() + c * d.k * d.k;
          const S* gp = g + c * plane_out;
          for (int oy = 0; oy < d.ho; ++oy)
            for (int ox = 0; ox < d.wo; ++ox) {
              const S gv = gp[static_cast<std::int64_t>(oy) * d.wo + ox];
              for (int ky = 0; ky < d.k; ++ky) {
                const int iy = oy + ky - pad;
                if (iy < 0 || iy >= d.h) continue;
                for (int kx = 0; kx < d.k; ++kx) {
                  const int ix = ox + kx - pad;
                  if (ix < 0 || ix >= d.w) continue;
                  if (gx) gx[c * plane_in + iy * d.w + ix] += gv * wp[ky * d.k + kx];
                  if (gw) gw[c * d.k * d.k + ky * d.k + kx] += gv * xp[static_cast<std::int64_t>(iy) * d.w + ix];
                }
              }
            }
        }
      });
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      S* gb = self.parents[2]->grad_data();
      for (int c = 0; c < d.ci; ++c) {
        S acc = 0;
        const S* gp = g + c * plane_out;
        for (std::int64_t i = 0; i < plane_out; ++i) acc += gp[i];
        gb[c] += acc;
      }
    }
  });

  const std::int64_t plane_in = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t plane_out = static_cast<std::int64_t>(d.ho) * d.wo;
  S* op_ = out.data_mut().data();
  const S* xp = x.data().data();
  const S* wp = w.data().data();
  const S* bp = b.defined() ? b.data().data() : nullptr;
  parallel_for(d.ci, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c) {
      const S* plane = xp + c * plane_in;
      const S* ker = wp + c * d.k * d.k;
      S* dst = op_ + c * plane_out;
      for (int oy = 0; oy < d.ho; ++oy)
        for (int ox = 0; ox < d.wo; ++ox) {
          S acc = bp ? bp[c] : S(0);
          for (int ky = 0; ky < d.k; ++ky) {
            const int iy = oy + ky - pad;
            if (iy < 0 || iy >= d.h) continue;
            for (int kx = 0; kx < d.k; ++kx) {
              const int ix = ox + kx - pad;
              if (ix < 0 || ix >= d.w) continue;
              acc += ker[ky * d.k + kx] * plane[static_cast<std::int64_t>(iy) * d.w + ix];
            }
          }
          dst[static_cast<std::int64_t>(oy) * d.wo + ox] = acc;
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_sample / avg_pool2

template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& map, const Tensor<S>& coords) {
  check(map.ndim() == 3, "bilinear_sample: map must be [C, H, W], got " + shape_str(map.shape()));
  check(coords.ndim() == 3 && coords.dim(0) == 2,
        "bilinear_sample: coords must be [2, Ho, Wo], got " + shape_str(coords.shape()));
  const int c = map.dim(0);
  const int h = map.dim(1);
  const int w = map.dim(2);
  const int ho = coords.dim(1);
  const int wo = coords.dim(2);
  const std::int64_t plane_in = static_cast<std::int64_t>(h) * w;
  const std::int64_t plane_out = static_cast<std::int64_t>(ho) * wo;

  auto out = detail::make_result<S>(Shape{c, ho, wo}, "bilinear_sample", {map, coords},
                                    [c, h, w, ho, wo, plane_in, plane_out](detail::TensorNode<S>& self) {
    auto& pm = *self.parents[0];
    auto& pc = *self.parents[1];
    const S* g = self.grad.data();
    const S* xs = pc.data.data();
    const S* ys = pc.data.data() + plane_out;
    if (pm.requires_grad) {
      S* gm = pm.grad_data();
      // Different output pixels may hit the same map cell, so parallelism is
      // over channels: each worker owns whole gradient planes.
      parallel_for(c, [&](std::int64_t ci0, std::int64_t ci1) {
        for (std::int64_t ci = ci0; ci < ci1; ++ci) {
          S* gplane = gm + ci * plane_in;
          const S* gout = g + ci * plane_out;
          for (std::int64_t i = 0; i < plane_out; ++i) {
            const auto cell = detail::bilinear_cell(xs[i], ys[i], w, h);
            const S gv = gout[i];
            gplane[static_cast<std::int64_t>(cell.y0) * w + cell.x0] += gv * (S(1) - cell.tx) * (S(1) - cell.ty);
            gplane[static_cast<std::int64_t>(cell.y0) * w + cell.x1] += gv * cell.tx * (S(1) - cell.ty);
            gplane[static_cast<std::int64_t>(cell.y1) * w + cell.x0] += gv * (S(1) - cell.tx) * cell.ty;
            gplane[static_cast<std::int64_t>(cell.y1) * w + cell.x1] += gv * cell.tx * cell.ty;
          }
        }
      });
    }
    if (pc.requires_grad) {
      S* gc = pc.grad_data();
      const S* mp = pm.data.data();
      parallel_for(plane_out, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
          const auto cell = detail::bilinear_cell(xs[i], ys[i], w, h);
          S dx = 0, dy = 0;
          for (int ci = 0; ci < c; ++ci) {
            const S* plane = mp + static_cast<std::int64_t>(ci) * plane_in;
            const S v00 = plane[static_cast<std::int64_t>(cell.y0) * w + cell.x0];
            const S v01 = plane[static_cast<std::int64_t>(cell.y0) * w + cell.x1];
            const S v10 = plane[static_cast<std::int64_t>(cell.y1) * w + cell.x0];
            const S v11 = plane[static_cast<std::int64_t>(cell.y1) * w + cell.x1];
            const S gv = g[ci * plane_out + i];
            dx += gv * ((S(1) - cell.ty) * (v01 - v00) + cell.ty * (v11 - v10));
            dy += gv * ((S(1) - cell.tx) * (v10 - v00) + cell.tx * (v11 - v01));
          }
          if (cell.gx) gc[i] += dx;
          if (cell.gy) gc[plane_out + i] += dy;
        }
      });
    }
  });

  const S* mp = map.data().data();
  const S* xs = coords.data().data();
  const S* ys = coords.data().data() + plane_out;
  S* op_ = out.data_mut().data();
  parallel_for(plane_out, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const auto cell = detail::bilinear_cell(xs[i], ys[i], w, h);
      for (int ci = 0; ci < c; ++ci)
        op_[ci * plane_out + i] = detail::bilinear_value(mp + static_cast<std::int64_t>(ci) * plane_in, w, cell);
    }
  });
  return out;
}

template <typename S>
Tensor<S> avg_pool2(const Tensor<S>& x) {
  check(x.ndim() >= 2, "avg_pool2: input must be [..., H, W], got " + shape_str(x.shape()));
  const int h = x.dim(x.ndim() - 2);
  const int w = x.dim(x.ndim() - 1);
  const std::int64_t plane_in = static_cast<std::int64_t>(h) * w;
  const int c = static_cast<int>(x.size() / plane_in);  // all leading dims collapsed
  const int ho = (h + 1) / 2;
  const int wo = (w + 1) / 2;
  const std::int64_t plane_out = static_cast<std::int64_t>(ho) * wo;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;

  auto out = detail::make_result<S>(out_shape, "avg_pool2", {x},
                                    [c, h, w, ho, wo, plane_in, plane_out](detail::TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    S* gp = p.grad_data();
    const S* g = self.grad.data();
    parallel_for(c, [&](std::int64_t ci0, std::int64_t ci1) {
      for (std::int64_t ci = ci0; ci < ci1; ++ci) {
        const S* gout = g + ci * plane_out;
        S* gin = gp + ci * plane_in;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const int y1 = std::min(2 * oy + 2, h);
            const int x1 = std::min(2 * ox + 2, w);
            const int count = (y1 - 2 * oy) * (x1 - 2 * ox);
            const S gv = gout[static_cast<std::int64_t>(oy) * wo + ox] / static_cast<S>(count);
            for (int iy = 2 * oy; iy < y1; ++iy)
              for (int ix = 2 * ox; ix < x1; ++ix) gin[static_cast<std::int64_t>(iy) * w + ix] += gv;
          }
      }
    });
  });

  const S* xp = x.data().data();
  S* op_ = out.data_mut().data();
  parallel_for(c, [&](std::int64_t ci0, std::int64_t ci1) {
    for (std::int64_t ci = ci0; ci < ci1; ++ci) {
      const S* plane = xp + ci * plane_in;
      S* dst = op_ + ci * plane_out;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const int y1 = std::min(2 * oy + 2, h);
          const int x1 = std::min(2 * ox + 2, w);
          S acc = 0;
          for (int iy = 2 * oy; iy < y1; ++iy)
            for (int ix = 2 * ox; ix < x1; ++ix) acc += plane[static_cast<std::int64_t>(iy) * w + ix];
          dst[static_cast<std::int64_t>(oy) * wo + ox] = acc / static_cast<S>((y1 - 2 * oy) * (x1 - 2 * ox));
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// backward

template <typename S>
void backward(const Tensor<S>& loss) {
  check(loss.defined(), "backward: undefined loss tensor");
  check(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  check(loss.requires_grad(), "backward: loss is not connected to a recorded graph");

  using Node = detail::TensorNode<S>;
  // Iterative post-order DFS; children (parents in graph terms) come before
  // consumers in `order`, so the reverse sweep sees consumers first.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes carry scratch gradients scoped to one pass; only leaves
  // accumulate across passes (so calling backward twice doubles leaf grads
  // without compounding through the interior).
  for (Node* node : order)
    if (!node->parents.empty() && !node->grad.empty())
      std::fill(node->grad.begin(), node->grad.end(), S(0));

  loss.node()->grad_data()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Explicit instantiations (float for training, double for derivative checks)

#define TRIFLOW_INSTANTIATE_OPS(S)                                                              \
  template class Tensor<S>;                                                                     \
  template Tensor<S> detail::make_result<S>(Shape, const char*, std::vector<Tensor<S>>,         \
                                            std::function<void(detail::TensorNode<S>&)>);       \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                              \
  template Tensor<S> tanh<S>(const Tensor<S>&);                                                 \
  template Tensor<S> relu<S>(const Tensor<S>&);                                                 \
  template Tensor<S> abs<S>(const Tensor<S>&);                                                  \
  template Tensor<S> affine<S>(const Tensor<S>&, S, S);                                         \
  template Tensor<S> sum_all<S>(const Tensor<S>&);                                              \
  template Tensor<S> mean_all<S>(const Tensor<S>&);                                             \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                       \
  template Tensor<S> concat_channels<S>(std::span<const Tensor<S>>);                            \
  template Tensor<S> slice_channels<S>(const Tensor<S>&, int, int);                             \
  template Tensor<S> expand_spatial<S>(const Tensor<S>&, int, int);                             \
  template Tensor<S> coord_grid<S>(int, int);                                                   \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&, bool, bool);                 \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int); \
  template Tensor<S> depthwise_conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                         int);                                                  \
  template Tensor<S> bilinear_sample<S>(const Tensor<S>&, const Tensor<S>&);                    \
  template Tensor<S> avg_pool2<S>(const Tensor<S>&);                                            \
  template void backward<S>(const Tensor<S>&);

TRIFLOW_INSTANTIATE_OPS(float)
TRIFLOW_INSTANTIATE_OPS(double)

}  // namespace triflow
