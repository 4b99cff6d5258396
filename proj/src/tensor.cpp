#include "epimvs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "epimvs/errors.hpp"

namespace epimvs {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

thread_local Tape* active_tape = nullptr;
thread_local std::uint64_t mac_count = 0;

void RequireSameShape(const Variable& a, const Variable& b, const char* op) {
  if (!a || !b) throw ArgumentError(std::string(op) + ": null operand");
  if (a.shape() != b.shape()) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + ShapeString(a.shape()) +
                        " vs " + ShapeString(b.shape()));
  }
}

void RequireRank(const Variable& a, int rank, const char* op) {
  if (!a) throw ArgumentError(std::string(op) + ": null operand");
  if (a.rank() != rank) {
    throw ArgumentError(std::string(op) + ": expected rank " + std::to_string(rank) +
                        ", got " + ShapeString(a.shape()));
  }
}

// Elementwise unary op with derivative expressed through input and output.
template <typename Fwd, typename Deriv>
Variable Unary(const Variable& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return MakeResult(a.shape(), std::move(out), {a}, [a, deriv](const TensorNode& o) {
    auto ga = GradOf(a);
    if (ga.empty()) return;
    const auto in = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * deriv(in[i], o.data[i]);
  });
}

}  // namespace

std::size_t ShapeSize(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ArgumentError("shape dimensions must be positive: " + ShapeString(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string ShapeString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> TensorNode::EnsureGrad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

Variable::Variable(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  if (data.size() != ShapeSize(shape)) {
    throw ArgumentError("data length " + std::to_string(data.size()) +
                        " does not match shape " + ShapeString(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Variable Variable::Zeros(Shape shape, bool requires_grad) {
  return Full(std::move(shape), 0.0, requires_grad);
}

Variable Variable::Full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = ShapeSize(shape);
  return Variable(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Variable Variable::Scalar(double value, bool requires_grad) {
  return Variable({1}, {value}, requires_grad);
}

int Variable::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ArgumentError("axis out of range");
  return node_->shape[axis];
}

double Variable::item() const {
  if (numel() != 1) throw ArgumentError("item() on non-scalar " + ShapeString(shape()));
  return node_->data[0];
}

void Variable::ZeroGrad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Variable Variable::Clone() const {
  return Variable(shape(), node_->data, requires_grad());
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(active_tape) { active_tape = this; }

Tape::~Tape() {
  if (active_tape == this) active_tape = previous_;
}

Tape* Tape::Active() { return active_tape; }

void Tape::Record(std::shared_ptr<TensorNode> output,
                  std::vector<std::shared_ptr<TensorNode>> inputs, BackwardFn fn) {
  entries_.push_back({std::move(output), std::move(inputs), std::move(fn)});
}

void Tape::Backward(const Variable& loss) {
  if (!loss) throw ArgumentError("backward: null loss");
  if (loss.numel() != 1) {
    throw ArgumentError("backward: loss must be scalar, got " + ShapeString(loss.shape()));
  }
  if (consumed_) throw ComputationError("backward: tape already consumed; call Reset()");
  if (!loss.requires_grad()) throw ArgumentError("backward: loss is not connected to the tape");
  consumed_ = true;
  loss.node()->EnsureGrad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn();
  }
}

void Tape::Reset() {
  entries_.clear();
  consumed_ = false;
}

void Backward(const Variable& loss) {
  if (active_tape == nullptr) throw ArgumentError("backward: no active tape");
  active_tape->Backward(loss);
}

Variable MakeResult(Shape shape, std::vector<double> data,
                    std::initializer_list<Variable> inputs, OpBackward fn) {
  return MakeResult(std::move(shape), std::move(data), std::vector<Variable>(inputs),
                    std::move(fn));
}

Variable MakeResult(Shape shape, std::vector<double> data,
                    const std::vector<Variable>& inputs, OpBackward fn) {
  Variable out(std::move(shape), std::move(data));
  Tape* tape = active_tape;
  if (tape == nullptr) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Variable& v) { return v && v.requires_grad(); });
  if (!needs) return out;
  out.node()->requires_grad = true;
  std::vector<std::shared_ptr<TensorNode>> keep;
  keep.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (v) keep.push_back(v.shared());
  }
  TensorNode* raw = out.node();
  tape->Record(out.shared(), std::move(keep), [raw, fn = std::move(fn)] { fn(*raw); });
  return out;
}

std::span<double> GradOf(const Variable& input) {
  if (!input || !input.requires_grad()) return {};
  return input.node()->EnsureGrad();
}

namespace macs {
void Add(std::uint64_t count) { mac_count += count; }
std::uint64_t Count() { return mac_count; }
void Reset() { mac_count = 0; }
}  // namespace macs

// ---------------------------------------------------------------------------
// Elementwise

Variable Add(const Variable& a, const Variable& b) {
  RequireSameShape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return MakeResult(a.shape(), std::move(out), {a, b}, [a, b](const TensorNode& o) {
    for (const Variable* v : {&a, &b}) {
      auto g = GradOf(*v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Variable Sub(const Variable& a, const Variable& b) {
  RequireSameShape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return MakeResult(a.shape(), std::move(out), {a, b}, [a, b](const TensorNode& o) {
    auto ga = GradOf(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    auto gb = GradOf(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
  });
}

Variable Mul(const Variable& a, const Variable& b) {
  RequireSameShape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  macs::Add(out.size());
  return MakeResult(a.shape(), std::move(out), {a, b}, [a, b](const TensorNode& o) {
    const auto x = a.data(), y = b.data();
    auto ga = GradOf(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * y[i];
    auto gb = GradOf(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * x[i];
  });
}

Variable Div(const Variable& a, const Variable& b) {
  RequireSameShape(a, b, "div");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  macs::Add(out.size());
  return MakeResult(a.shape(), std::move(out), {a, b}, [a, b](const TensorNode& o) {
    const auto y = b.data();
    auto ga = GradOf(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] / y[i];
    auto gb = GradOf(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i] * o.data[i] / y[i];
  });
}

Variable Scale(const Variable& a, double factor) {
  return Unary(a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Variable AddScalar(const Variable& a, double value) {
  return Unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Variable Relu(const Variable& a) {
  return Unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Variable Exp(const Variable& a) {
  return Unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Variable Log(const Variable& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw ComputationError("log of a non-positive value");
  }
  return Unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Variable Abs(const Variable& a) {
  return Unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Reductions

Variable Sum(const Variable& a) {
  const auto x = a.data();
  const double s = std::accumulate(x.begin(), x.end(), 0.0);
  return MakeResult({1}, {s}, {a}, [a](const TensorNode& o) {
    auto g = GradOf(a);
    for (double& v : g) v += o.grad[0];
  });
}

Variable Mean(const Variable& a) { return Scale(Sum(a), 1.0 / a.numel()); }

Variable MaskedMean(const Variable& a, std::span<const std::uint8_t> mask) {
  if (mask.size() != a.numel()) throw ArgumentError("masked mean: mask size mismatch");
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  const auto x = a.data();
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (keep[i]) {
      s += x[i];
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("masked mean: empty mask");
  const double inv = 1.0 / static_cast<double>(count);
  return MakeResult({1}, {s * inv}, {a}, [a, keep = std::move(keep), inv](const TensorNode& o) {
    auto g = GradOf(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (keep[i]) g[i] += o.grad[0] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Shape

Variable Reshape(const Variable& a, Shape shape) {
  if (ShapeSize(shape) != a.numel()) {
    throw ArgumentError("reshape " + ShapeString(a.shape()) + " -> " + ShapeString(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return MakeResult(std::move(shape), std::move(out), {a}, [a](const TensorNode& o) {
    auto g = GradOf(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Variable ToPixels(const Variable& a) {
  RequireRank(a, 4, "to_pixels");
  if (a.dim(0) != 1) throw ArgumentError("to_pixels: batch must be 1");
  const int c = a.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) out[static_cast<std::size_t>(p) * c + ch] = x[static_cast<std::size_t>(ch) * hw + p];
  }
  return MakeResult({hw, c}, std::move(out), {a}, [a, c, hw](const TensorNode& o) {
    auto g = GradOf(a);
    if (g.empty()) return;
    for (int ch = 0; ch < c; ++ch) {
      for (int p = 0; p < hw; ++p) g[static_cast<std::size_t>(ch) * hw + p] += o.grad[static_cast<std::size_t>(p) * c + ch];
    }
  });
}

Variable FromPixels(const Variable& a, int height, int width) {
  RequireRank(a, 2, "from_pixels");
  const int hw = height * width, c = a.dim(1);
  if (a.dim(0) != hw) throw ArgumentError("from_pixels: pixel count mismatch");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) out[static_cast<std::size_t>(ch) * hw + p] = x[static_cast<std::size_t>(p) * c + ch];
  }
  return MakeResult({1, c, height, width}, std::move(out), {a}, [a, c, hw](const TensorNode& o) {
    auto g = GradOf(a);
    if (g.empty()) return;
    for (int ch = 0; ch < c; ++ch) {
      for (int p = 0; p < hw; ++p) g[static_cast<std::size_t>(p) * c + ch] += o.grad[static_cast<std::size_t>(ch) * hw + p];
    }
  });
}

Variable Stack(const std::vector<Variable>& items) {
  if (items.empty()) throw ArgumentError("stack: no inputs");
  const Shape& base = items.front().shape();
  for (const auto& v : items) {
    if (v.shape() != base) throw ArgumentError("stack: shape mismatch");
  }
  const int n = static_cast<int>(items.size());
  const std::size_t outer = static_cast<std::size_t>(base[0]);
  const std::size_t inner = items.front().numel() / outer;
  Shape shape = base;
  shape.insert(shape.begin() + 1, n);
  std::vector<double> out(outer * n * inner);
  for (int i = 0; i < n; ++i) {
    const auto x = items[i].data();
    for (std::size_t p = 0; p < outer; ++p) {
      std::copy_n(x.begin() + p * inner, inner, out.begin() + (p * n + i) * inner);
    }
  }
  return MakeResult(std::move(shape), std::move(out), items,
                    [items, outer, inner, n](const TensorNode& o) {
                      for (int i = 0; i < n; ++i) {
                        auto g = GradOf(items[i]);
                        if (g.empty()) continue;
                        for (std::size_t p = 0; p < outer; ++p) {
                          const double* src = o.grad.data() + (p * n + i) * inner;
                          for (std::size_t r = 0; r < inner; ++r) g[p * inner + r] += src[r];
                        }
                      }
                    });
}

Variable ConcatChannels(const Variable& a, const Variable& b) {
  RequireRank(a, 4, "concat");
  RequireRank(b, 4, "concat");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ArgumentError("concat: incompatible " + ShapeString(a.shape()) + " and " +
                        ShapeString(b.shape()));
  }
  const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<double> out(static_cast<std::size_t>(batch) * (ca + cb) * hw);
  for (int n = 0; n < batch; ++n) {
    std::copy_n(a.data().begin() + n * ca * hw, ca * hw, out.begin() + n * (ca + cb) * hw);
    std::copy_n(b.data().begin() + n * cb * hw, cb * hw,
                out.begin() + (n * (ca + cb) + ca) * hw);
  }
  return MakeResult({batch, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                    [a, b, batch, ca, cb, hw](const TensorNode& o) {
                      auto ga = GradOf(a);
                      auto gb = GradOf(b);
                      for (int n = 0; n < batch; ++n) {
                        const double* src = o.grad.data() + n * (ca + cb) * hw;
                        for (std::size_t i = 0; i < ga.size() / batch; ++i) ga[n * ca * hw + i] += src[i];
                        for (std::size_t i = 0; i < gb.size() / batch; ++i) gb[n * cb * hw + i] += src[ca * hw + i];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Dense

Variable Linear(const Variable& x, const Variable& weight, const Variable& bias) {
  RequireRank(weight, 2, "linear");
  if (!x || x.rank() < 1) throw ArgumentError("linear: input must have rank >= 1");
  const int m = weight.dim(1), m_out = weight.dim(0);
  if (x.dim(-1) != m) {
    throw ArgumentError("linear: input " + ShapeString(x.shape()) + " vs weight " +
                        ShapeString(weight.shape()));
  }
  if (bias && (bias.rank() != 1 || bias.dim(0) != m_out)) {
    throw ArgumentError("linear: bias shape " + ShapeString(bias.shape()));
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(x.numel() / m);
  Shape shape = x.shape();
  shape.back() = m_out;
  std::vector<double> out(static_cast<std::size_t>(rows) * m_out);
  ConstMapMat X(x.data().data(), rows, m);
  ConstMapMat W(weight.data().data(), m_out, m);
  MapMat Y(out.data(), rows, m_out);
  Y.noalias() = X * W.transpose();
  if (bias) Y.rowwise() += ConstMapVec(bias.data().data(), m_out).transpose();
  macs::Add(static_cast<std::uint64_t>(rows) * m * m_out);
  return MakeResult(std::move(shape), std::move(out), {x, weight, bias},
                    [x, weight, bias, rows, m, m_out](const TensorNode& o) {
                      ConstMapMat G(o.grad.data(), rows, m_out);
                      if (auto gx = GradOf(x); !gx.empty()) {
                        MapMat(gx.data(), rows, m).noalias() +=
                            G * ConstMapMat(weight.data().data(), m_out, m);
                      }
                      if (auto gw = GradOf(weight); !gw.empty()) {
                        MapMat(gw.data(), m_out, m).noalias() +=
                            G.transpose() * ConstMapMat(x.data().data(), rows, m);
                      }
                      if (auto gb = GradOf(bias); !gb.empty()) {
                        for (Eigen::Index r = 0; r < rows; ++r) {
                          for (int j = 0; j < m_out; ++j) gb[j] += G(r, j);
                        }
                      }
                    });
}

Variable MatMul(const Variable& a, const Variable& b) {
  RequireRank(a, 2, "matmul");
  RequireRank(b, 2, "matmul");
  const int n = a.dim(0), m = a.dim(1), k = b.dim(1);
  if (b.dim(0) != m) throw ArgumentError("matmul: inner dimensions differ");
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  MapMat(out.data(), n, k).noalias() =
      ConstMapMat(a.data().data(), n, m) * ConstMapMat(b.data().data(), m, k);
  macs::Add(static_cast<std::uint64_t>(n) * m * k);
  return MakeResult({n, k}, std::move(out), {a, b}, [a, b, n, m, k](const TensorNode& o) {
    ConstMapMat G(o.grad.data(), n, k);
    if (auto ga = GradOf(a); !ga.empty()) {
      MapMat(ga.data(), n, m).noalias() += G * ConstMapMat(b.data().data(), m, k).transpose();
    }
    if (auto gb = GradOf(b); !gb.empty()) {
      MapMat(gb.data(), m, k).noalias() += ConstMapMat(a.data().data(), n, m).transpose() * G;
    }
  });
}

Variable SoftmaxLastDim(const Variable& x) {
  if (!x || x.rank() < 1) throw ArgumentError("softmax: input must have rank >= 1");
  const std::size_t k = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / k;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * k;
    double* dst = out.data() + r * k;
    double mx = row[0];
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::isfinite(row[j])) throw ComputationError("softmax: non-finite logit");
      mx = std::max(mx, row[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      dst[j] = std::exp(row[j] - mx);
      denom += dst[j];
    }
    for (std::size_t j = 0; j < k; ++j) dst[j] /= denom;
  }
  macs::Add(x.numel());
  return MakeResult(x.shape(), std::move(out), {x}, [x, rows, k](const TensorNode& o) {
    auto g = GradOf(x);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * k;
      const double* gy = o.grad.data() + r * k;
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (gy[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

Variable Conv2d(const Variable& input, const Variable& kernel, const Variable& bias,
                int stride, int padding) {
  return Conv2d(input, kernel, bias, stride, Padding{padding, padding});
}

Variable Conv2d(const Variable& input, const Variable& kernel, const Variable& bias,
                int stride, Padding pad) {
  const int padding = pad.before;
  RequireRank(input, 4, "conv2d");
  RequireRank(kernel, 4, "conv2d");
  const int batch = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int c_out = kernel.dim(0), ksize = kernel.dim(2);
  if (kernel.dim(1) != c_in || kernel.dim(3) != ksize) {
    throw ArgumentError("conv2d: kernel " + ShapeString(kernel.shape()) + " vs input " +
                        ShapeString(input.shape()));
  }
  if (bias && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw ArgumentError("conv2d: bias shape " + ShapeString(bias.shape()));
  }
  if (stride < 1 || pad.before < 0 || pad.after < 0) {
    throw ArgumentError("conv2d: bad stride/padding");
  }
  const int span_h = h + pad.before + pad.after - ksize;
  const int span_w = w + pad.before + pad.after - ksize;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ArgumentError("conv2d: output size not integral for input " +
                        ShapeString(input.shape()));
  }
  const int ho = span_h / stride + 1, wo = span_w / stride + 1;
  const int patch = c_in * ksize * ksize;
  const int npix = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch) * patch * npix);
  std::vector<double> out(static_cast<std::size_t>(batch) * c_out * npix);
  ConstMapMat W(kernel.data().data(), c_out, patch);
  for (int n = 0; n < batch; ++n) {
    const double* src = input.data().data() + static_cast<std::size_t>(n) * c_in * h * w;
    double* col = cols->data() + static_cast<std::size_t>(n) * patch * npix;
    for (int c = 0; c < c_in; ++c) {
      for (int ky = 0; ky < ksize; ++ky) {
        for (int kx = 0; kx < ksize; ++kx) {
          double* row = col + static_cast<std::size_t>((c * ksize + ky) * ksize + kx) * npix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - padding + ky;
            double* dst = row + oy * wo;
            if (iy < 0 || iy >= h) {
              std::fill_n(dst, wo, 0.0);
              continue;
            }
            const double* line = src + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - padding + kx;
              dst[ox] = (ix >= 0 && ix < w) ? line[ix] : 0.0;
            }
          }
        }
      }
    }
    MapMat Y(out.data() + static_cast<std::size_t>(n) * c_out * npix, c_out, npix);
    Y.noalias() = W * ConstMapMat(col, patch, npix);
    if (bias) Y.colwise() += ConstMapVec(bias.data().data(), c_out);
  }
  macs::Add(static_cast<std::uint64_t>(batch) * c_out * npix * patch);

  return MakeResult(
      {batch, c_out, ho, wo}, std::move(out), {input, kernel, bias},
      [=](const TensorNode& o) {
        auto gk = GradOf(kernel);
        auto gb = GradOf(bias);
        auto gi = GradOf(input);
        std::vector<double> dcol(gi.empty() ? 0 : static_cast<std::size_t>(patch) * npix);
        for (int n = 0; n < batch; ++n) {
          ConstMapMat G(o.grad.data() + static_cast<std::size_t>(n) * c_out * npix, c_out, npix);
          const double* col = cols->data() + static_cast<std::size_t>(n) * patch * npix;
          if (!gk.empty()) {
            MapMat(gk.data(), c_out, patch).noalias() +=
                G * ConstMapMat(col, patch, npix).transpose();
          }
          // Plain loops: Eigen reductions over maps peel by address, which
          // makes the summation order (and the last bits) allocation-dependent.
          for (std::size_t c = 0; c < gb.size(); ++c) {
            double total = 0.0;
            for (int p = 0; p < npix; ++p) total += G(c, p);
            gb[c] += total;
          }
          if (gi.empty()) continue;
          MapMat D(dcol.data(), patch, npix);
          D.noalias() = ConstMapMat(kernel.data().data(), c_out, patch).transpose() * G;
          double* dst = gi.data() + static_cast<std::size_t>(n) * c_in * h * w;
          for (int c = 0; c < c_in; ++c) {
            for (int ky = 0; ky < ksize; ++ky) {
              for (int kx = 0; kx < ksize; ++kx) {
                const double* row =
                    dcol.data() + static_cast<std::size_t>((c * ksize + ky) * ksize + kx) * npix;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= h) continue;
                  double* line = dst + (static_cast<std::size_t>(c) * h + iy) * w;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - padding + kx;
                    if (ix >= 0 && ix < w) line[ix] += row[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

Variable UpsampleNearest(const Variable& input, int factor) {
  RequireRank(input, 4, "upsample");
  if (factor < 1) throw ArgumentError("upsample: factor must be positive");
  const int planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const int ho = h * factor, wo = w * factor;
  std::vector<double> out(static_cast<std::size_t>(planes) * ho * wo);
  const auto x = input.data();
  for (int p = 0; p < planes; ++p) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] =
            x[(static_cast<std::size_t>(p) * h + y / factor) * w + xx / factor];
      }
    }
  }
  return MakeResult({input.dim(0), input.dim(1), ho, wo}, std::move(out), {input},
                    [=](const TensorNode& o) {
                      auto g = GradOf(input);
                      if (g.empty()) return;
                      for (int p = 0; p < planes; ++p) {
                        for (int y = 0; y < ho; ++y) {
                          for (int xx = 0; xx < wo; ++xx) {
                            g[(static_cast<std::size_t>(p) * h + y / factor) * w + xx / factor] +=
                                o.grad[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
                          }
                        }
                      }
                    });
}

Variable Downsample(const Variable& input, int stride) {
  RequireRank(input, 4, "downsample");
  if (stride < 1) throw ArgumentError("downsample: stride must be positive");
  const int planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const int ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
  std::vector<double> out(static_cast<std::size_t>(planes) * ho * wo);
  const auto x = input.data();
  for (int p = 0; p < planes; ++p) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] =
            x[(static_cast<std::size_t>(p) * h + y * stride) * w + xx * stride];
      }
    }
  }
  return MakeResult({input.dim(0), input.dim(1), ho, wo}, std::move(out), {input},
                    [=](const TensorNode& o) {
                      auto g = GradOf(input);
                      if (g.empty()) return;
                      for (int p = 0; p < planes; ++p) {
                        for (int y = 0; y < ho; ++y) {
                          for (int xx = 0; xx < wo; ++xx) {
                            g[(static_cast<std::size_t>(p) * h + y * stride) * w + xx * stride] +=
                                o.grad[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
                          }
                        }
                      }
                    });
}

Variable BilinearSample(const Variable& feature, std::span<const Vec2> coords) {
  RequireRank(feature, 3, "bilinear_sample");
  const int c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t n = coords.size();
  if (n == 0) throw ArgumentError("bilinear_sample: no coordinates");

  // Four taps per sample; index -1 marks a tap outside the map.
  auto taps = std::make_shared<std::vector<std::pair<long, double>>>(4 * n, std::make_pair(-1L, 0.0));
  for (std::size_t s = 0; s < n; ++s) {
    const double x = coords[s].x(), y = coords[s].y();
    if (!std::isfinite(x) || !std::isfinite(y)) continue;
    const double fx = std::floor(x), fy = std::floor(y);
    if (fx < -1.0 || fy < -1.0 || fx > w || fy > h) continue;
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const double ax = x - fx, ay = y - fy;
    const int xs[2] = {x0, x0 + 1};
    const int ys[2] = {y0, y0 + 1};
    const double wx[2] = {1.0 - ax, ax};
    const double wy[2] = {1.0 - ay, ay};
    for (int j = 0; j < 2; ++j) {
      for (int i = 0; i < 2; ++i) {
        auto& tap = (*taps)[4 * s + 2 * j + i];
        if (xs[i] < 0 || xs[i] >= w || ys[j] < 0 || ys[j] >= h) continue;
        tap = {static_cast<long>(ys[j]) * w + xs[i], wx[i] * wy[j]};
      }
    }
  }

  std::vector<double> out(n * c, 0.0);
  const auto f = feature.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (int t = 0; t < 4; ++t) {
      const auto [idx, wt] = (*taps)[4 * s + t];
      if (idx < 0 || wt == 0.0) continue;
      for (int ch = 0; ch < c; ++ch) out[s * c + ch] += wt * f[ch * hw + idx];
    }
  }
  macs::Add(static_cast<std::uint64_t>(4) * n * c);
  return MakeResult({static_cast<int>(n), c}, std::move(out), {feature},
                    [feature, taps, n, c, hw](const TensorNode& o) {
                      auto g = GradOf(feature);
                      if (g.empty()) return;
                      for (std::size_t s = 0; s < n; ++s) {
                        for (int t = 0; t < 4; ++t) {
                          const auto [idx, wt] = (*taps)[4 * s + t];
                          if (idx < 0 || wt == 0.0) continue;
                          for (int ch = 0; ch < c; ++ch) g[ch * hw + idx] += wt * o.grad[s * c + ch];
                        }
                      }
                    });
}

Variable Conv3dInference(const Variable& input, const Variable& kernel) {
  RequireRank(input, 4, "conv3d");
  RequireRank(kernel, 5, "conv3d");
  const int c_in = input.dim(0), d = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int c_out = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c_in || kernel.dim(3) != k || kernel.dim(4) != k || k % 2 == 0) {
    throw ArgumentError("conv3d: kernel " + ShapeString(kernel.shape()));
  }
  const int r = k / 2;
  const auto x = input.data();
  const auto wt = kernel.data();
  std::vector<double> out(static_cast<std::size_t>(c_out) * d * h * w, 0.0);
  for (int o = 0; o < c_out; ++o) {
    for (int c = 0; c < c_in; ++c) {
      for (int kz = 0; kz < k; ++kz) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double v = wt[((((static_cast<std::size_t>(o) * c_in + c) * k + kz) * k + ky) * k) + kx];
            for (int z = 0; z < d; ++z) {
              const int iz = z + kz - r;
              if (iz < 0 || iz >= d) continue;
              for (int y = 0; y < h; ++y) {
                const int iy = y + ky - r;
                if (iy < 0 || iy >= h) continue;
                const double* src = x.data() + ((static_cast<std::size_t>(c) * d + iz) * h + iy) * w;
                double* dst = out.data() + ((static_cast<std::size_t>(o) * d + z) * h + y) * w;
                for (int xx = 0; xx < w; ++xx) {
                  const int ix = xx + kx - r;
                  if (ix >= 0 && ix < w) dst[xx] += v * src[ix];
                }
              }
            }
          }
        }
      }
    }
  }
  macs::Add(static_cast<std::uint64_t>(c_out) * d * h * w * c_in * k * k * k);
  return Variable({c_out, d, h, w}, std::move(out));
}

}  // namespace epimvs
