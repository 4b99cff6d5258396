#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "epimvs/geometry.hpp"
#include "epimvs/random.hpp"
#include "epimvs/tensor.hpp"

namespace epimvs {

enum class DepthCodeKind { kUniform, kLinear, kCosine, kLearned };

std::string_view ToString(DepthCodeKind kind);
DepthCodeKind ParseDepthCodeKind(std::string_view name);

/// Per-hypothesis code table c_k. Uniform and Linear derive every row from a
/// trainable base vector (row k = base, or d_k * base); Cosine is a fixed
/// sinusoidal table indexed by hypothesis; Learned rows are free parameters.
struct DepthCodes {
  DepthCodeKind kind = DepthCodeKind::kLearned;
  int hypotheses = 0;
  int channels = 0;
  std::vector<double> depths;
  Variable base;     // [m], Uniform and Linear
  Variable learned;  // [K,m], Learned
  Variable fixed;    // [K,m], Cosine

  // [K,m]; differentiable with respect to base/learned.
  Variable Table() const;
};

DepthCodes MakeDepthCodes(DepthCodeKind kind, const DepthHypothesisSet& hypotheses,
                          int channels, Rng& rng);

// sin(k / 10000^(2j/m)) at column 2j and cos(...) at column 2j+1.
std::vector<double> SinusoidalCodeTable(int hypotheses, int channels);

/// Learnable state of one epipolar attention module with m channels.
struct AttentionParams {
  int channels = 0;
  Variable f0_weight, f0_bias;    // query map f0
  Variable ref_weight, ref_bias;  // key map f_ref
  Variable a0_weight, a0_bias;    // A0 = identity + this linear map
  Variable a1_weight, a1_bias;    // A1 on the source feature-net activation
  Variable v_in, v_out;           // [m] mask codes
  DepthCodes codes;
  bool mask_enabled = true;
  bool view_mean = false;

  double scale() const;
  int hypotheses() const { return codes.hypotheses; }

  // Trainable tensors with stable names relative to the module.
  void ForEachParameter(const std::function<void(const std::string&, Variable&)>& fn);
};

// Identity query/key maps, fan-in uniform A0/A1, unit Gaussian mask and
// learned codes.
AttentionParams InitAttentionParams(int channels, DepthCodeKind kind,
                                    const DepthHypothesisSet& hypotheses, Rng& rng);

// Same parameters with mask codes replaced by the all-ones vector.
AttentionParams DisableMaskEncoding(const AttentionParams& params);

// Bilinear lookups of every reference feature map ([m,H,W], one per view) at
// the grid's epipolar samples -> [P, n, K, m].
Variable SampleReferenceFeatures(const std::vector<Variable>& reference_maps,
                                 const EpipolarSampleGrid& grid);

// w[p,i,k] = <f0(src[p]), f_ref(ref[p,i,k])>  -> [P, n, K].
Variable MatchingScores(const Variable& src_feat, const Variable& ref_feats,
                        const AttentionParams& params);

// Matching scores times 1/sqrt(m).
Variable AttentionLogits(const Variable& src_feat, const Variable& ref_feats,
                         const AttentionParams& params);

// v_in where valid, v_out elsewhere -> [P, n, K, m]; all ones when the mask
// encoding is disabled.
Variable SelectMaskCodes(std::span<const std::uint8_t> valid, int pixels, int views,
                         const AttentionParams& params);

struct AttentionTrace {
  Variable weights;  // [P, n, K] softmax over hypotheses
};

// A0(F) + A1(G) + sum_i sum_k softmax_k(w/sqrt m) (v_ik * c_k), per pixel.
Variable EpipolarAttention(const Variable& src_feat_f, const Variable& src_feat_g,
                           const Variable& ref_feats, std::span<const std::uint8_t> valid,
                           const AttentionParams& params, AttentionTrace* trace = nullptr);

}  // namespace epimvs
