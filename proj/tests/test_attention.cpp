#include <cmath>
#include <limits>

#include <doctest.h>

#include "epimvs/attention.hpp"
#include "epimvs/errors.hpp"
#include "attention_cases.hpp"
#include "oracles.hpp"

using namespace epimvs;

namespace {

using Instance = oracle::AttentionInstance;

Instance RandomInstance(Rng& rng, DepthCodeKind kind, int max_p = 8, int max_n = 2, int max_k = 4) {
  return oracle::RandomAttentionInstance(rng, kind, max_p, max_n, max_k);
}

std::vector<double> Vec(const Variable& v) { return {v.data().begin(), v.data().end()}; }

double MaxAbsDiff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("vectorized attention equals the scalar triple loop") {
  CHECK(oracle::AttentionOracleGap(200, 17) <= 1e-12);
}

TEST_CASE("softmax over hypotheses sums to one per pixel and view") {
  Rng rng(19);
  Instance in = RandomInstance(rng, DepthCodeKind::kLearned, 8, 2, 6);
  AttentionTrace trace;
  EpipolarAttention(in.f, in.g, in.ref, in.valid, in.params, &trace);
  const auto w = trace.weights.data();
  for (int s = 0; s < in.pixels * in.views; ++s) {
    double total = 0.0;
    for (int k = 0; k < in.k; ++k) total += w[s * in.k + k];
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("doubling m with zero-padded features scales logits by 1/sqrt(2)") {
  Rng rng(23);
  const int m = 3, p = 4, n = 2, k = 3;
  const auto hyp = SampleDepthHypotheses(k, 1.0, 4.0);
  AttentionParams small = InitAttentionParams(m, DepthCodeKind::kLearned, hyp, rng);
  FillUniform(small.f0_weight.mutable_data(), -1, 1, rng);
  FillUniform(small.ref_weight.mutable_data(), -1, 1, rng);
  FillUniform(small.f0_bias.mutable_data(), -1, 1, rng);
  FillUniform(small.ref_bias.mutable_data(), -1, 1, rng);
  AttentionParams big = InitAttentionParams(2 * m, DepthCodeKind::kLearned, hyp, rng);
  // Embed the small maps in the top-left block; the rest is zero.
  for (Variable* v : {&big.f0_weight, &big.ref_weight, &big.f0_bias, &big.ref_bias}) {
    for (double& x : v->mutable_data()) x = 0.0;
  }
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < m; ++c) {
      big.f0_weight.mutable_data()[r * 2 * m + c] = small.f0_weight.data()[r * m + c];
      big.ref_weight.mutable_data()[r * 2 * m + c] = small.ref_weight.data()[r * m + c];
    }
    big.f0_bias.mutable_data()[r] = small.f0_bias.data()[r];
    big.ref_bias.mutable_data()[r] = small.ref_bias.data()[r];
  }
  Variable g = oracle::RandomVariable({p, m}, rng, -1, 1, false);
  Variable ref = oracle::RandomVariable({p, n, k, m}, rng, -1, 1, false);
  Variable g2 = Variable::Zeros({p, 2 * m}), ref2 = Variable::Zeros({p, n, k, 2 * m});
  for (int i = 0; i < p; ++i) {
    for (int c = 0; c < m; ++c) g2.mutable_data()[i * 2 * m + c] = g.data()[i * m + c];
  }
  for (int s = 0; s < p * n * k; ++s) {
    for (int c = 0; c < m; ++c) ref2.mutable_data()[s * 2 * m + c] = ref.data()[s * m + c];
  }
  const Variable raw1 = MatchingScores(g, ref, small), raw2 = MatchingScores(g2, ref2, big);
  CHECK(MaxAbsDiff(raw1.data(), raw2.data()) < 1e-12);
  const Variable l1 = AttentionLogits(g, ref, small), l2 = AttentionLogits(g2, ref2, big);
  for (std::size_t i = 0; i < l1.numel(); ++i) {
    CHECK(std::abs(l2.data()[i] - l1.data()[i] / std::sqrt(2.0)) < 1e-12);
  }
}

TEST_CASE("depth code variants") {
  Rng rng(29);
  const auto hyp = SampleDepthHypotheses(5, 1.0, 5.0);
  const int m = 4;
  SUBCASE("uniform rows share one vector") {
    const auto codes = MakeDepthCodes(DepthCodeKind::kUniform, hyp, m, rng);
    const Variable table = codes.Table();
    const auto t = table.data();
    for (int k = 1; k < 5; ++k) {
      for (int c = 0; c < m; ++c) CHECK(t[k * m + c] == t[c]);
    }
  }
  SUBCASE("linear rows scale with depth") {
    const auto codes = MakeDepthCodes(DepthCodeKind::kLinear, hyp, m, rng);
    const Variable table = codes.Table();
    const auto t = table.data();
    const auto base = codes.base.data();
    for (int k = 0; k < 5; ++k) {
      for (int c = 0; c < m; ++c) CHECK(t[k * m + c] == hyp[k] * base[c]);
    }
  }
  SUBCASE("cosine table uses the hypothesis index") {
    const auto codes = MakeDepthCodes(DepthCodeKind::kCosine, hyp, m, rng);
    const Variable table = codes.Table();
    const auto t = table.data();
    for (int k = 0; k < 5; ++k) {
      for (int j = 0; j < m / 2; ++j) {
        const double angle = k / std::pow(10000.0, 2.0 * j / m);
        CHECK(std::abs(t[k * m + 2 * j] - std::sin(angle)) < 1e-15);
        CHECK(std::abs(t[k * m + 2 * j + 1] - std::cos(angle)) < 1e-15);
      }
    }
    CHECK_THROWS_AS(MakeDepthCodes(DepthCodeKind::kCosine, hyp, 3, rng), ArgumentError);
  }
  SUBCASE("learned rows are independent parameters") {
    const auto codes = MakeDepthCodes(DepthCodeKind::kLearned, hyp, m, rng);
    CHECK(codes.learned.shape() == Shape{5, m});
    CHECK(codes.learned.requires_grad());
    const Variable table = codes.Table();
    CHECK(table.data()[0] != table.data()[m]);
  }
  for (auto kind : {DepthCodeKind::kUniform, DepthCodeKind::kLinear, DepthCodeKind::kCosine,
                    DepthCodeKind::kLearned}) {
    CHECK(ParseDepthCodeKind(ToString(kind)) == kind);
  }
  CHECK_THROWS_AS(ParseDepthCodeKind("sinusoid"), ArgumentError);
}

TEST_CASE("mask codes follow the validity flags") {
  Rng rng(31);
  Instance in = RandomInstance(rng, DepthCodeKind::kLearned);
  const Variable v = SelectMaskCodes(in.valid, in.pixels, in.views, in.params);
  for (std::size_t s = 0; s < in.valid.size(); ++s) {
    const auto expected = in.valid[s] ? in.params.v_in.data() : in.params.v_out.data();
    for (int c = 0; c < in.m; ++c) CHECK(v.data()[s * in.m + c] == expected[c]);
  }
  const AttentionParams off = DisableMaskEncoding(in.params);
  const Variable ones = SelectMaskCodes(in.valid, in.pixels, in.views, off);
  for (double x : ones.data()) CHECK(x == 1.0);
  // Without the mask encoding the validity flags have no effect.
  std::vector<std::uint8_t> flipped = in.valid;
  for (auto& f : flipped) f = !f;
  const Variable a = EpipolarAttention(in.f, in.g, in.ref, in.valid, off);
  const Variable b = EpipolarAttention(in.f, in.g, in.ref, flipped, off);
  CHECK(MaxAbsDiff(a.data(), b.data()) == 0.0);
}

TEST_CASE("all-invalid samples still give a finite output") {
  Rng rng(37);
  Instance in = RandomInstance(rng, DepthCodeKind::kLearned);
  std::fill(in.valid.begin(), in.valid.end(), 0);
  const Variable out = EpipolarAttention(in.f, in.g, in.ref, in.valid, in.params);
  for (double x : out.data()) CHECK(std::isfinite(x));
}

TEST_CASE("non-finite features raise ComputationError") {
  Rng rng(41);
  Instance in = RandomInstance(rng, DepthCodeKind::kLearned);
  in.ref.mutable_data()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(EpipolarAttention(in.f, in.g, in.ref, in.valid, in.params), ComputationError);
}

TEST_CASE("shape mismatches raise ArgumentError") {
  Rng rng(43);
  Instance in = RandomInstance(rng, DepthCodeKind::kLearned);
  Variable bad = Variable::Zeros({in.pixels, in.m + 1});
  CHECK_THROWS_AS(EpipolarAttention(bad, bad, in.ref, in.valid, in.params), ArgumentError);
  std::vector<std::uint8_t> short_mask(in.valid.size() - 1);
  CHECK_THROWS_AS(EpipolarAttention(in.f, in.g, in.ref, short_mask, in.params), ArgumentError);
}

TEST_CASE("initial query and key maps are the identity") {
  Rng rng(47);
  const auto params = InitAttentionParams(5, DepthCodeKind::kLearned,
                                          SampleDepthHypotheses(4, 1, 5), rng);
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 5; ++c) {
      CHECK(params.f0_weight.data()[r * 5 + c] == (r == c ? 1.0 : 0.0));
      CHECK(params.ref_weight.data()[r * 5 + c] == (r == c ? 1.0 : 0.0));
    }
  }
  CHECK(params.scale() == 1.0 / std::sqrt(5.0));
}

TEST_CASE("sampled reference features match direct bilinear lookups") {
  Rng rng(53);
  const int m = 3;
  Variable map = oracle::RandomVariable({m, 4, 5}, rng, -1, 1, false);
  EpipolarSampleGrid grid(4, 5, 1, 2);
  std::uniform_real_distribution<double> ux(-1.0, 5.5), uy(-1.0, 4.5);
  for (std::size_t i = 0; i < grid.size(); ++i) grid.Set(i, Vec2(ux(rng), uy(rng)), 1.0, true);
  const Variable s = SampleReferenceFeatures({map}, grid);
  CHECK(s.shape() == Shape{20, 1, 2, m});
  const auto f = map.data();
  auto tap = [&](int c, int y, int x) {
    return (x < 0 || x >= 5 || y < 0 || y >= 4) ? 0.0 : f[(c * 4 + y) * 5 + x];
  };
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec2 q = grid.pixel(i);
    const int x0 = static_cast<int>(std::floor(q.x())), y0 = static_cast<int>(std::floor(q.y()));
    const double ax = q.x() - x0, ay = q.y() - y0;
    for (int c = 0; c < m; ++c) {
      const double expected = (1 - ax) * (1 - ay) * tap(c, y0, x0) + ax * (1 - ay) * tap(c, y0, x0 + 1) +
                              (1 - ax) * ay * tap(c, y0 + 1, x0) + ax * ay * tap(c, y0 + 1, x0 + 1);
      CHECK(std::abs(s.data()[i * m + c] - expected) < 1e-14);
    }
  }
}
