#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "epimvs/geometry.hpp"

namespace epimvs {

using Shape = std::vector<int>;

std::size_t ShapeSize(const Shape& shape);
std::string ShapeString(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;

  std::span<double> EnsureGrad();
};

/// Shared handle to a dense row-major float64 array. Copies alias the same
/// storage; Clone() makes an independent leaf.
class Variable {
 public:
  Variable() = default;
  Variable(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Variable Zeros(Shape shape, bool requires_grad = false);
  static Variable Full(Shape shape, double value, bool requires_grad = false);
  static Variable Scalar(double value, bool requires_grad = false);

  explicit operator bool() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct writes are for leaves (parameters, inputs) only.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->EnsureGrad(); }
  void ZeroGrad();

  Variable Clone() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& shared() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Records differentiable operations issued on this thread while it is the
/// innermost live tape. Backward replays them in exact reverse order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* Active();

  using BackwardFn = std::function<void()>;
  void Record(std::shared_ptr<TensorNode> output,
              std::vector<std::shared_ptr<TensorNode>> inputs, BackwardFn fn);

  // Populates grads of every requires-grad ancestor of `loss`. A second call
  // without Reset() is an error.
  void Backward(const Variable& loss);
  void Reset();
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode> output;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  Tape* previous_ = nullptr;
};

// Backward on the active tape.
void Backward(const Variable& loss);

// Builds an op result. When a tape is active and any input requires grad, the
// result requires grad and `fn` is recorded; `fn` receives the output node.
using OpBackward = std::function<void(const TensorNode& out)>;
Variable MakeResult(Shape shape, std::vector<double> data,
                    std::initializer_list<Variable> inputs, OpBackward fn);
Variable MakeResult(Shape shape, std::vector<double> data,
                    const std::vector<Variable>& inputs, OpBackward fn);

// Grad buffer of an op input, or an empty span when it needs no gradient.
std::span<double> GradOf(const Variable& input);

// Thread-local multiply-accumulate counter; every op adds its forward cost.
namespace macs {
void Add(std::uint64_t count);
std::uint64_t Count();
void Reset();
}  // namespace macs

// --- elementwise ---
Variable Add(const Variable& a, const Variable& b);
Variable Sub(const Variable& a, const Variable& b);
Variable Mul(const Variable& a, const Variable& b);
Variable Div(const Variable& a, const Variable& b);
Variable Scale(const Variable& a, double factor);
Variable AddScalar(const Variable& a, double value);
Variable Relu(const Variable& a);
Variable Exp(const Variable& a);
Variable Log(const Variable& a);
Variable Abs(const Variable& a);

// --- reductions ---
Variable Sum(const Variable& a);
Variable Mean(const Variable& a);
// Mean over entries whose mask byte is nonzero; mask.size() == a.numel().
Variable MaskedMean(const Variable& a, std::span<const std::uint8_t> mask);

// --- shape ---
Variable Reshape(const Variable& a, Shape shape);
// [1,C,H,W] -> [H*W, C]
Variable ToPixels(const Variable& a);
// [H*W, C] -> [1,C,H,W]
Variable FromPixels(const Variable& a, int height, int width);
// n tensors of shape [P, rest...] -> [P, n, rest...]
Variable Stack(const std::vector<Variable>& items);
// [B,C1,H,W] ++ [B,C2,H,W] -> [B,C1+C2,H,W]
Variable ConcatChannels(const Variable& a, const Variable& b);

// --- dense ---
// x [..., m], weight [m', m], bias [m'] (may be null) -> [..., m']
Variable Linear(const Variable& x, const Variable& weight, const Variable& bias);
// a [N, m] * b [m, n] -> [N, n]
Variable MatMul(const Variable& a, const Variable& b);
Variable SoftmaxLastDim(const Variable& x);

// --- spatial ---
// input [B,C,H,W], kernel [C',C,k,k], bias [C'] (may be null).
Variable Conv2d(const Variable& input, const Variable& kernel, const Variable& bias,
                int stride = 1, int padding = 0);

// Zero padding added before (top/left) and after (bottom/right) each axis.
struct Padding {
  int before = 0;
  int after = 0;
};
Variable Conv2d(const Variable& input, const Variable& kernel, const Variable& bias,
                int stride, Padding padding);
// [B,C,H,W] -> [B,C,H*f,W*f]
Variable UpsampleNearest(const Variable& input, int factor);
// Keeps every stride-th row and column starting at 0.
Variable Downsample(const Variable& input, int stride);
// feature [C,H,W] sampled at (x, y) pixel coordinates -> [N, C]. Neighbours
// outside the map contribute zero; a non-finite coordinate yields zeros.
// Differentiable with respect to the feature only.
Variable BilinearSample(const Variable& feature, std::span<const Vec2> coords);

// Plain 3D convolution with padding k/2 over input [C,D,H,W] and kernel
// [C',C,k,k,k]. Not recorded on any tape; it exists so the cost of a
// cost-volume style layer can be measured with the same MAC counter.
Variable Conv3dInference(const Variable& input, const Variable& kernel);

}  // namespace epimvs
