#pragma once

// Random epipolar attention instances shared by the unit tests and the
// acceptance run.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "epimvs/attention.hpp"
#include "oracles.hpp"

namespace oracle {

struct AttentionInstance {
  int pixels = 0, views = 0, k = 0, m = 0;
  Variable f, g, ref;
  std::vector<std::uint8_t> valid;
  epimvs::AttentionParams params;
};

inline AttentionInstance RandomAttentionInstance(epimvs::Rng& rng, epimvs::DepthCodeKind kind,
                                                 int max_p = 8, int max_n = 2, int max_k = 4) {
  using namespace epimvs;
  std::uniform_int_distribution<int> pd(1, max_p), nd(1, max_n), kd(2, max_k), md(1, 3);
  AttentionInstance in;
  in.pixels = pd(rng);
  in.views = nd(rng);
  in.k = kd(rng);
  in.m = 2 * md(rng);  // even, so cosine codes are defined
  const auto hyp = SampleDepthHypotheses(in.k, 0.5, 8.0);
  in.params = InitAttentionParams(in.m, kind, hyp, rng);
  // Move away from the identity start so the oracle sees general maps.
  for (Variable* v : {&in.params.f0_weight, &in.params.ref_weight, &in.params.f0_bias,
                      &in.params.ref_bias}) {
    FillUniform(v->mutable_data(), -1.0, 1.0, rng);
  }
  in.f = RandomVariable({in.pixels, in.m}, rng, -2, 2, false);
  in.g = RandomVariable({in.pixels, in.m}, rng, -2, 2, false);
  in.ref = RandomVariable({in.pixels, in.views, in.k, in.m}, rng, -2, 2, false);
  in.valid.resize(static_cast<std::size_t>(in.pixels) * in.views * in.k);
  std::bernoulli_distribution coin(0.7);
  for (auto& v : in.valid) v = coin(rng);
  return in;
}

// Largest |vectorized - oracle| over `count` instances cycling through code
// kinds, mask and view-mean settings.
inline double AttentionOracleGap(int count, std::uint64_t seed) {
  using namespace epimvs;
  Rng rng(seed);
  const DepthCodeKind kinds[] = {DepthCodeKind::kLearned, DepthCodeKind::kUniform,
                                 DepthCodeKind::kLinear, DepthCodeKind::kCosine};
  double worst = 0.0;
  for (int t = 0; t < count; ++t) {
    AttentionInstance in = RandomAttentionInstance(rng, kinds[t % 4]);
    in.params.mask_enabled = (t % 3) != 0;
    in.params.view_mean = (t % 5) == 0;
    const Variable out = EpipolarAttention(in.f, in.g, in.ref, in.valid, in.params);
    auto vec = [](const Variable& v) { return std::vector<double>(v.data().begin(), v.data().end()); };
    const auto expected =
        Attention(vec(in.f), vec(in.g), vec(in.ref), in.valid, in.pixels, in.views, in.params);
    const auto got = out.data();
    if (got.size() != expected.size()) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expected[i]));
  }
  return worst;
}

}  // namespace oracle
