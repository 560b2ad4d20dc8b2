#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace triflow {

using Shape = std::vector<int>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Gradient recording is on by default and thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, zero-initialized
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  S* grad_data() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad.data();
  }
};

}  // namespace detail

// Reverse-mode autodiff tensor. Copies share the underlying node; shapes are
// row-major with the innermost dimension last. Feature maps use [C, H, W].
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorNode<S>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, S value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<S> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int i) const;
  std::int64_t size() const;
  bool requires_grad() const;
  // Only leaves may flip requires_grad; op results inherit it from the graph.
  void set_requires_grad(bool value);
  const char* op_name() const;

  std::span<const S> data() const;
  // Mutable access to the raw buffer. Meant for filling freshly created
  // tensors and for optimizer updates on leaves; rewriting an op result that
  // is still part of a live graph invalidates any recorded backward.
  std::span<S> data_mut();
  S item() const;

  bool has_grad() const;
  std::span<const S> grad() const;   // throws if no gradient was accumulated
  std::span<S> grad_mut();           // allocates zeros on first use
  void zero_grad();

  std::shared_ptr<detail::TensorNode<S>> node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode<S>> node_;
};

namespace detail {

// Allocates a zero-filled result node. When grad recording is on and any
// parent requires grad, the parents and the backward closure are attached.
// Backward closures must read inputs through node.parents rather than
// capturing the result tensor (that would leak the node through a cycle).
template <typename S>
Tensor<S> make_result(Shape shape, const char* op, std::vector<Tensor<S>> parents,
                      std::function<void(TensorNode<S>&)> backward);

}  // namespace detail

// Elementwise binaries broadcast when one operand is a scalar (size 1) or its
// shape is a leading prefix of the other's (the smaller operand is repeated
// across the trailing dimensions; its gradient sums over them).
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);
template <typename S> Tensor<S> tanh(const Tensor<S>& x);
template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> abs(const Tensor<S>& x);

// scale * x + shift
template <typename S> Tensor<S> affine(const Tensor<S>& x, S scale, S shift);

template <typename S> Tensor<S> sum_all(const Tensor<S>& x);   // -> shape [1]
template <typename S> Tensor<S> mean_all(const Tensor<S>& x);  // -> shape [1]

// a [M, K] times b [K, N] -> [M, N]; trans_* treat the operand as transposed.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false);

// Same data, new shape; sizes must match.
template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);

// x [Ci, H, W], w [Co, Ci, k, k] with k odd, optional b [Co]. Output size
// (H + 2*pad - k) must divide evenly by stride or the call throws.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 1,
                 int pad = 0);

// Per-channel convolution: x [C, H, W], w [C, k, k], optional b [C], stride 1.
template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int pad);

// map [C, H, W], coords [2, Ho, Wo] holding (x, y) in pixel units with plane 0
// the x coordinate. Out-of-range coordinates clamp to the border; an exact
// integer grid reproduces the map.
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& map, const Tensor<S>& coords);

// 2x2 mean pooling, stride 2; trailing odd rows/columns average what remains.
template <typename S> Tensor<S> avg_pool2(const Tensor<S>& x);

template <typename S> Tensor<S> concat_channels(std::span<const Tensor<S>> parts);
template <typename S>
Tensor<S> concat_channels(std::initializer_list<Tensor<S>> parts) {
  return concat_channels(std::span<const Tensor<S>>(parts.begin(), parts.size()));
}

// Channels [c_begin, c_end) of x.
template <typename S> Tensor<S> slice_channels(const Tensor<S>& x, int c_begin, int c_end);

// v [C] or [C, 1, 1] repeated over an H x W grid -> [C, H, W].
template <typename S> Tensor<S> expand_spatial(const Tensor<S>& v, int h, int w);

// Identity sampling grid [2, H, W]: plane 0 holds x, plane 1 holds y. A leaf
// that never requires grad.
template <typename S> Tensor<S> coord_grid(int h, int w);

// Accumulates gradients of all reachable tensors; loss must be scalar and part
// of a recorded graph. Repeated calls accumulate into existing gradients.
template <typename S> void backward(const Tensor<S>& loss);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S s) { return affine(a, s, S(0)); }
template <typename S> Tensor<S> operator*(S s, const Tensor<S>& a) { return affine(a, s, S(0)); }

}  // namespace triflow
