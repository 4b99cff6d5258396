#include "epimvs/attention.hpp"

#include <cmath>

#include "epimvs/errors.hpp"

namespace epimvs {
namespace {

// Unit scale: the code term is a product v * c, so small factors would leave
// both with vanishing gradients.
constexpr double kCodeInitStd = 1.0;

Variable LinearWeight(int out, int in, Rng& rng) {
  Variable w = Variable::Zeros({out, in}, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  FillUniform(w.mutable_data(), -bound, bound, rng);
  return w;
}

Variable LinearBias(int out, int in, Rng& rng) {
  Variable b = Variable::Zeros({out}, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  FillUniform(b.mutable_data(), -bound, bound, rng);
  return b;
}

Variable IdentityWeight(int channels) {
  std::vector<double> w(static_cast<std::size_t>(channels) * channels, 0.0);
  for (int i = 0; i < channels; ++i) w[static_cast<std::size_t>(i) * channels + i] = 1.0;
  return Variable({channels, channels}, std::move(w), true);
}

Variable GaussianParam(Shape shape, Rng& rng) {
  Variable v = Variable::Zeros(std::move(shape), true);
  FillNormal(v.mutable_data(), kCodeInitStd, rng);
  return v;
}

void RequireFinite(const Variable& v, const char* stage) {
  for (double x : v.data()) {
    if (!std::isfinite(x)) {
      throw ComputationError(std::string("epipolar attention: non-finite value in ") + stage);
    }
  }
}

// query [P,m] . keys [P,n,K,m] + offset [P,1] -> [P,n,K]
Variable PixelDot(const Variable& query, const Variable& keys, const Variable& offset) {
  const int p_count = keys.dim(0), n = keys.dim(1), k = keys.dim(2), m = keys.dim(3);
  const std::size_t slots = static_cast<std::size_t>(n) * k;
  std::vector<double> out(static_cast<std::size_t>(p_count) * slots);
  const auto q = query.data(), key = keys.data(), off = offset.data();
  for (int p = 0; p < p_count; ++p) {
    const double* qp = q.data() + static_cast<std::size_t>(p) * m;
    for (std::size_t s = 0; s < slots; ++s) {
      const double* kp = key.data() + (p * slots + s) * m;
      double acc = off[p];
      for (int c = 0; c < m; ++c) acc += qp[c] * kp[c];
      out[p * slots + s] = acc;
    }
  }
  macs::Add(static_cast<std::uint64_t>(p_count) * slots * m);
  return MakeResult({p_count, n, k}, std::move(out), {query, keys, offset},
                    [=](const TensorNode& o) {
                      auto gq = GradOf(query);
                      auto gk = GradOf(keys);
                      auto go = GradOf(offset);
                      const auto q = query.data(), key = keys.data();
                      for (int p = 0; p < p_count; ++p) {
                        for (std::size_t s = 0; s < slots; ++s) {
                          const double g = o.grad[p * slots + s];
                          if (g == 0.0) continue;
                          if (!go.empty()) go[p] += g;
                          const std::size_t kbase = (p * slots + s) * m;
                          const std::size_t qbase = static_cast<std::size_t>(p) * m;
                          if (!gq.empty()) {
                            for (int c = 0; c < m; ++c) gq[qbase + c] += g * key[kbase + c];
                          }
                          if (!gk.empty()) {
                            for (int c = 0; c < m; ++c) gk[kbase + c] += g * q[qbase + c];
                          }
                        }
                      }
                    });
}

// out[p,:] = s * sum_{i,k} w[p,i,k] * v[p,i,k,:] * codes[k,:]
Variable AggregateCodes(const Variable& weights, const Variable& vmask, const Variable& codes,
                        double s) {
  const int p_count = vmask.dim(0), n = vmask.dim(1), k = vmask.dim(2), m = vmask.dim(3);
  std::vector<double> out(static_cast<std::size_t>(p_count) * m, 0.0);
  const auto w = weights.data(), v = vmask.data(), c = codes.data();
  for (int p = 0; p < p_count; ++p) {
    double* dst = out.data() + static_cast<std::size_t>(p) * m;
    for (int i = 0; i < n; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        const std::size_t slot = (static_cast<std::size_t>(p) * n + i) * k + kk;
        const double wt = s * w[slot];
        const double* vp = v.data() + slot * m;
        const double* cp = c.data() + static_cast<std::size_t>(kk) * m;
        for (int ch = 0; ch < m; ++ch) dst[ch] += wt * vp[ch] * cp[ch];
      }
    }
  }
  macs::Add(static_cast<std::uint64_t>(p_count) * n * k * m * 2);
  return MakeResult(
      {p_count, m}, std::move(out), {weights, vmask, codes}, [=](const TensorNode& o) {
        auto gw = GradOf(weights);
        auto gv = GradOf(vmask);
        auto gc = GradOf(codes);
        const auto w = weights.data(), v = vmask.data(), c = codes.data();
        for (int p = 0; p < p_count; ++p) {
          const double* g = o.grad.data() + static_cast<std::size_t>(p) * m;
          for (int i = 0; i < n; ++i) {
            for (int kk = 0; kk < k; ++kk) {
              const std::size_t slot = (static_cast<std::size_t>(p) * n + i) * k + kk;
              const double* vp = v.data() + slot * m;
              const double* cp = c.data() + static_cast<std::size_t>(kk) * m;
              const double wt = s * w[slot];
              if (!gw.empty()) {
                double acc = 0.0;
                for (int ch = 0; ch < m; ++ch) acc += g[ch] * vp[ch] * cp[ch];
                gw[slot] += s * acc;
              }
              if (!gv.empty()) {
                for (int ch = 0; ch < m; ++ch) gv[slot * m + ch] += wt * g[ch] * cp[ch];
              }
              if (!gc.empty()) {
                for (int ch = 0; ch < m; ++ch) {
                  gc[static_cast<std::size_t>(kk) * m + ch] += wt * g[ch] * vp[ch];
                }
              }
            }
          }
        }
      });
}

}  // namespace

std::string_view ToString(DepthCodeKind kind) {
  switch (kind) {
    case DepthCodeKind::kUniform: return "uniform";
    case DepthCodeKind::kLinear: return "linear";
    case DepthCodeKind::kCosine: return "cosine";
    case DepthCodeKind::kLearned: return "learned";
  }
  return "learned";
}

DepthCodeKind ParseDepthCodeKind(std::string_view name) {
  if (name == "uniform") return DepthCodeKind::kUniform;
  if (name == "linear") return DepthCodeKind::kLinear;
  if (name == "cosine") return DepthCodeKind::kCosine;
  if (name == "learned") return DepthCodeKind::kLearned;
  throw ArgumentError("unknown depth code kind '" + std::string(name) + "'");
}

std::vector<double> SinusoidalCodeTable(int hypotheses, int channels) {
  if (channels % 2 != 0) throw ArgumentError("cosine depth codes need an even channel count");
  std::vector<double> table(static_cast<std::size_t>(hypotheses) * channels);
  for (int k = 0; k < hypotheses; ++k) {
    for (int j = 0; j < channels / 2; ++j) {
      const double angle = k / std::pow(10000.0, 2.0 * j / channels);
      table[static_cast<std::size_t>(k) * channels + 2 * j] = std::sin(angle);
      table[static_cast<std::size_t>(k) * channels + 2 * j + 1] = std::cos(angle);
    }
  }
  return table;
}

DepthCodes MakeDepthCodes(DepthCodeKind kind, const DepthHypothesisSet& hypotheses,
                          int channels, Rng& rng) {
  if (channels < 1) throw ArgumentError("depth codes need at least one channel");
  DepthCodes codes;
  codes.kind = kind;
  codes.hypotheses = static_cast<int>(hypotheses.size());
  codes.channels = channels;
  codes.depths = hypotheses.values;
  switch (kind) {
    case DepthCodeKind::kUniform:
    case DepthCodeKind::kLinear:
      codes.base = GaussianParam({channels}, rng);
      break;
    case DepthCodeKind::kCosine:
      codes.fixed = Variable({codes.hypotheses, channels},
                             SinusoidalCodeTable(codes.hypotheses, channels));
      break;
    case DepthCodeKind::kLearned:
      codes.learned = GaussianParam({codes.hypotheses, channels}, rng);
      break;
  }
  return codes;
}

Variable DepthCodes::Table() const {
  switch (kind) {
    case DepthCodeKind::kCosine: return fixed;
    case DepthCodeKind::kLearned: return learned;
    case DepthCodeKind::kUniform:
    case DepthCodeKind::kLinear: break;
  }
  const bool linear = kind == DepthCodeKind::kLinear;
  const int k = hypotheses, m = channels;
  std::vector<double> scale(k, 1.0);
  if (linear) scale = depths;
  std::vector<double> out(static_cast<std::size_t>(k) * m);
  const auto b = base.data();
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < m; ++c) out[static_cast<std::size_t>(r) * m + c] = scale[r] * b[c];
  }
  Variable base_var = base;
  return MakeResult({k, m}, std::move(out), {base_var},
                    [base_var, scale, k, m](const TensorNode& o) {
                      auto g = GradOf(base_var);
                      if (g.empty()) return;
                      for (int r = 0; r < k; ++r) {
                        for (int c = 0; c < m; ++c) {
                          g[c] += scale[r] * o.grad[static_cast<std::size_t>(r) * m + c];
                        }
                      }
                    });
}

double AttentionParams::scale() const { return 1.0 / std::sqrt(static_cast<double>(channels)); }

void AttentionParams::ForEachParameter(
    const std::function<void(const std::string&, Variable&)>& fn) {
  fn("f0.weight", f0_weight);
  fn("f0.bias", f0_bias);
  fn("ref.weight", ref_weight);
  fn("ref.bias", ref_bias);
  fn("a0.weight", a0_weight);
  fn("a0.bias", a0_bias);
  fn("a1.weight", a1_weight);
  fn("a1.bias", a1_bias);
  fn("v_in", v_in);
  fn("v_out", v_out);
  if (codes.base) fn("codes.base", codes.base);
  if (codes.learned) fn("codes.learned", codes.learned);
}

AttentionParams InitAttentionParams(int channels, DepthCodeKind kind,
                                    const DepthHypothesisSet& hypotheses, Rng& rng) {
  if (channels < 1) throw ArgumentError("attention needs at least one channel");
  AttentionParams p;
  p.channels = channels;
  // Query and key maps start as the identity so the initial logits already
  // compare source and reference features; independent random maps give no
  // matching signal to learn from.
  p.f0_weight = IdentityWeight(channels);
  p.f0_bias = Variable::Zeros({channels}, true);
  p.ref_weight = IdentityWeight(channels);
  p.ref_bias = Variable::Zeros({channels}, true);
  p.a0_weight = LinearWeight(channels, channels, rng);
  p.a0_bias = LinearBias(channels, channels, rng);
  p.a1_weight = LinearWeight(channels, channels, rng);
  p.a1_bias = LinearBias(channels, channels, rng);
  p.v_in = GaussianParam({channels}, rng);
  p.v_out = GaussianParam({channels}, rng);
  p.codes = MakeDepthCodes(kind, hypotheses, channels, rng);
  return p;
}

AttentionParams DisableMaskEncoding(const AttentionParams& params) {
  AttentionParams out = params;
  out.mask_enabled = false;
  return out;
}

Variable SampleReferenceFeatures(const std::vector<Variable>& reference_maps,
                                 const EpipolarSampleGrid& grid) {
  if (static_cast<int>(reference_maps.size()) != grid.views()) {
    throw ArgumentError("reference feature count does not match grid views");
  }
  const int p_count = grid.pixels(), k = grid.hypotheses();
  std::vector<Variable> per_view;
  per_view.reserve(reference_maps.size());
  std::vector<Vec2> coords(static_cast<std::size_t>(p_count) * k);
  for (int i = 0; i < grid.views(); ++i) {
    const Variable& map = reference_maps[i];
    if (map.rank() != 3 || map.dim(1) != grid.rows() || map.dim(2) != grid.cols()) {
      throw ArgumentError("reference feature map " + ShapeString(map.shape()) +
                          " does not match grid lattice");
    }
    for (int p = 0; p < p_count; ++p) {
      for (int kk = 0; kk < k; ++kk) coords[static_cast<std::size_t>(p) * k + kk] = grid.pixel(grid.Index(p, i, kk));
    }
    Variable samples = BilinearSample(map, coords);  // [P*K, m]
    per_view.push_back(Reshape(samples, {p_count, k, map.dim(0)}));
  }
  return Stack(per_view);
}

Variable MatchingScores(const Variable& src_feat, const Variable& ref_feats,
                        const AttentionParams& params) {
  const int m = params.channels;
  if (src_feat.rank() != 2 || src_feat.dim(1) != m) {
    throw ArgumentError("matching scores: source features " + ShapeString(src_feat.shape()) +
                        " vs m=" + std::to_string(m));
  }
  if (ref_feats.rank() != 4 || ref_feats.dim(0) != src_feat.dim(0) || ref_feats.dim(3) != m) {
    throw ArgumentError("matching scores: reference features " + ShapeString(ref_feats.shape()));
  }
  // <f0(g), W r + b> = <W^T f0(g), r> + <f0(g), b>: the key map is folded into
  // the query so each sample costs m multiply-adds.
  Variable query = Linear(src_feat, params.f0_weight, params.f0_bias);
  Variable folded = MatMul(query, params.ref_weight);
  Variable offset = Linear(query, Reshape(params.ref_bias, {1, m}), Variable());
  return PixelDot(folded, ref_feats, offset);
}

Variable AttentionLogits(const Variable& src_feat, const Variable& ref_feats,
                         const AttentionParams& params) {
  return Scale(MatchingScores(src_feat, ref_feats, params), params.scale());
}

Variable SelectMaskCodes(std::span<const std::uint8_t> valid, int pixels, int views,
                         const AttentionParams& params) {
  const int k = params.hypotheses(), m = params.channels;
  const std::size_t slots = static_cast<std::size_t>(pixels) * views * k;
  if (valid.size() != slots) throw ArgumentError("mask code selection: mask size mismatch");
  if (!params.mask_enabled) return Variable::Full({pixels, views, k, m}, 1.0);

  std::vector<std::uint8_t> flags(valid.begin(), valid.end());
  std::vector<double> out(slots * m);
  const auto vin = params.v_in.data(), vout = params.v_out.data();
  for (std::size_t s = 0; s < slots; ++s) {
    const auto src = flags[s] ? vin : vout;
    std::copy(src.begin(), src.end(), out.begin() + s * m);
  }
  const Variable v_in = params.v_in, v_out = params.v_out;
  return MakeResult({pixels, views, k, m}, std::move(out), {v_in, v_out},
                    [v_in, v_out, flags = std::move(flags), m](const TensorNode& o) {
                      auto gin = GradOf(v_in);
                      auto gout = GradOf(v_out);
                      for (std::size_t s = 0; s < flags.size(); ++s) {
                        auto g = flags[s] ? gin : gout;
                        if (g.empty()) continue;
                        for (int c = 0; c < m; ++c) g[c] += o.grad[s * m + c];
                      }
                    });
}

Variable EpipolarAttention(const Variable& src_feat_f, const Variable& src_feat_g,
                           const Variable& ref_feats, std::span<const std::uint8_t> valid,
                           const AttentionParams& params, AttentionTrace* trace) {
  const int m = params.channels;
  if (src_feat_f.rank() != 2 || src_feat_f.shape() != src_feat_g.shape() ||
      src_feat_f.dim(1) != m) {
    throw ArgumentError("epipolar attention: source features must both be [P, m]");
  }
  if (ref_feats.rank() != 4 || ref_feats.dim(2) != params.hypotheses()) {
    throw ArgumentError("epipolar attention: reference features " +
                        ShapeString(ref_feats.shape()) + " vs K=" +
                        std::to_string(params.hypotheses()));
  }
  const int pixels = src_feat_f.dim(0), views = ref_feats.dim(1);

  Variable logits = AttentionLogits(src_feat_g, ref_feats, params);
  RequireFinite(logits, "matching scores");
  Variable weights = SoftmaxLastDim(logits);
  if (trace) trace->weights = weights;
  Variable vmask = SelectMaskCodes(valid, pixels, views, params);
  Variable codes = params.codes.Table();
  RequireFinite(codes, "depth codes");
  const double view_scale = params.view_mean ? 1.0 / views : 1.0;
  Variable epipolar = AggregateCodes(weights, vmask, codes, view_scale);
  RequireFinite(epipolar, "code aggregation");

  Variable skip = Add(src_feat_f, Linear(src_feat_f, params.a0_weight, params.a0_bias));
  Variable single_view = Add(skip, Linear(src_feat_g, params.a1_weight, params.a1_bias));
  Variable out = Add(single_view, epipolar);
  RequireFinite(out, "output");
  return out;
}

}  // namespace epimvs
