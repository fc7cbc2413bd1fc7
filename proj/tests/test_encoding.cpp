#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"
#include "taylorseg/encoding.hpp"
#include "taylorseg/errors.hpp"

using namespace taylorseg;
using testing_support::finite_difference_check;
using testing_support::kink_free_matrix;
using testing_support::max_error;
using testing_support::random_matrix;

namespace {

constexpr double kPi = 3.14159265358979323846;

// sin block then cos block, each dimension-major.
std::vector<double> naive_pe(const std::vector<double>& x, int bands, double base) {
  std::vector<double> s, c;
  for (double xj : x) {
    for (int i = 0; i < bands; ++i) {
      const double u = std::pow(base, static_cast<double>(i) / bands);
      s.push_back(std::sin(2 * kPi * u * xj));
      c.push_back(std::cos(2 * kPi * u * xj));
    }
  }
  s.insert(s.end(), c.begin(), c.end());
  return s;
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  auto s = t.row_span(r);
  return {s.begin(), s.end()};
}

// Direct transcription of the parameter-free TaylorConv for one center.
std::vector<double> naive_taylorconv_nn(const NNNeighborhood& h, const PEConfig& pe) {
  const std::size_t k = h.coords.rows();
  const std::size_t c = h.prior.cols();
  const int geo_bands = static_cast<int>(c / 18);
  std::vector<double> lo(c, -1e300), hi(c, -1e300);
  for (std::size_t j = 0; j < k; ++j) {
    const auto ep = naive_pe(row_of(h.coords, j), pe.bands, pe.base);
    const auto ec = naive_pe(row_of(h.colors, j), pe.bands, pe.base);
    std::vector<double> geo{h.center[0], h.center[1], h.center[2]};
    for (std::size_t d = 0; d < 3; ++d) geo.push_back(h.coords(j, d));
    for (std::size_t d = 0; d < 3; ++d) geo.push_back(h.coords(j, d) - h.center[d]);
    const auto eg = naive_pe(geo, geo_bands, pe.base);
    for (std::size_t q = 0; q < c; ++q) {
      const double f = (ep[q] + ec[q] + h.prior(j, q)) / 3.0;
      const double w = q < eg.size() ? std::cos(2 * kPi * eg[q]) : 1.0;
      lo[q] = std::max(lo[q], f);
      hi[q] = std::max(hi[q], w * f);
    }
  }
  for (std::size_t q = 0; q < c; ++q) lo[q] += hi[q];
  return lo;
}

NNNeighborhood random_hood(std::mt19937_64& rng, std::size_t k, std::size_t channels) {
  NNNeighborhood h;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : h.center) v = u(rng);
  h.coords = random_matrix(rng, k, 3, 0.0, 1.0);
  h.colors = random_matrix(rng, k, 3, 0.0, 1.0);
  h.prior = random_matrix(rng, k, channels);
  return h;
}

template <typename T>
T permute_rows(const T& t, const std::vector<std::size_t>& order) {
  T out = t;
  for (std::size_t r = 0; r < order.size(); ++r) {
    auto src = t.row_span(order[r]);
    std::copy(src.begin(), src.end(), out.row_span(r).begin());
  }
  return out;
}

}  // namespace

TEST(TrigPe, ZeroInputGivesSinZeroCosOne) {
  const std::vector<double> x{0.0, 0.0, 0.0};
  const auto e = trig_pe(x, PEConfig{});
  ASSERT_EQ(e.size(), 120u);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(e[i], 0.0);
  for (std::size_t i = 60; i < 120; ++i) EXPECT_EQ(e[i], 1.0);
}

TEST(TrigPe, QuarterPeriod) {
  const std::vector<double> x{0.25};
  const auto e = trig_pe(x, PEConfig{1, 7.0});
  EXPECT_NEAR(e[0], 1.0, 1e-15);
  EXPECT_NEAR(e[1], 0.0, 1e-15);
}

TEST(TrigPe, MatchesFormula) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_matrix(rng, 1, 3);
    const auto got = trig_pe(x.data(), PEConfig{});
    const auto want = naive_pe(row_of(x, 0), 20, 30.0);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(TrigPe, FullPeriodShiftRepeatsBand) {
  const PEConfig cfg;
  const auto u = cfg.frequencies();
  std::mt19937_64 rng(3);
  for (int band = 0; band < cfg.bands; ++band) {
    const double x0 = random_matrix(rng, 1, 1)[0];
    const std::vector<double> a{x0}, b{x0 + 1.0 / u[static_cast<std::size_t>(band)]};
    const auto ea = trig_pe(a, cfg), eb = trig_pe(b, cfg);
    const std::size_t i = static_cast<std::size_t>(band);
    EXPECT_NEAR(ea[i], eb[i], 1e-9);
    EXPECT_NEAR(ea[20 + i], eb[20 + i], 1e-9);
  }
}

TEST(TrigPe, RowsMatchSingleVectors) {
  std::mt19937_64 rng(4);
  const Tensor x = random_matrix(rng, 5, 3);
  const Tensor rows = trig_pe_rows(x, PEConfig{});
  for (std::size_t r = 0; r < 5; ++r) {
    const auto e = trig_pe(x.row_span(r), PEConfig{});
    for (std::size_t c = 0; c < e.size(); ++c) EXPECT_EQ(rows(r, c), e[c]);
  }
}

TEST(PeConfig, RejectsBadValues) {
  EXPECT_THROW((PEConfig{0, 30.0}.validate()), ConfigError);
  EXPECT_THROW((PEConfig{20, 1.0}.validate()), ConfigError);
}

TEST(Kernel, DegeneratesToAffine) {
  std::mt19937_64 rng(5);
  const KernelConfig abf{1, 1.0, false};
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor f = random_matrix(rng, 1, 16, -3.0, 3.0);
    const Tensor w = random_matrix(rng, 1, 16, -3.0, 3.0);
    const auto t = high_order_kernel(f.data(), w.data(), abf);
    for (std::size_t i = 0; i < 16; ++i) ASSERT_NEAR(t[i], w[i] * f[i], 1e-12);
  }
}

TEST(Kernel, DegeneratesToRadial) {
  std::mt19937_64 rng(6);
  const KernelConfig rbf{0, 2.0, false};
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor d = random_matrix(rng, 1, 16, -3.0, 3.0);
    const Tensor w = random_matrix(rng, 1, 16, -3.0, 3.0);
    const auto t = high_order_kernel(d.data(), w.data(), rbf);
    for (std::size_t i = 0; i < 16; ++i) {
      const double u = w[i] * d[i];
      ASSERT_NEAR(t[i], u * u, 1e-12);
    }
  }
}

TEST(Kernel, SignZeroConventionAndDefaults) {
  EXPECT_EQ(high_order_kernel(0.0, KernelConfig{0, 1.0, false}), 0.0);
  EXPECT_EQ(high_order_kernel(0.0, KernelConfig{1, 2.0, false}), 0.0);
  EXPECT_EQ(high_order_kernel(-2.0, KernelConfig{0, 3.0, false}), 8.0);
  EXPECT_EQ(high_order_kernel(-2.0, KernelConfig{1, 3.0, false}), -8.0);
}

TEST(Kernel, OddForSignedOddPowerEvenForUnsigned) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const double u = random_matrix(rng, 1, 1, -2.0, 2.0)[0];
    for (double p : {1.0, 3.0, 5.0}) {
      const KernelConfig odd{1, p, false};
      EXPECT_EQ(high_order_kernel(-u, odd), -high_order_kernel(u, odd));
    }
    for (double p : {1.0, 2.0, 3.0}) {
      const KernelConfig even{0, p, false};
      EXPECT_EQ(high_order_kernel(-u, even), high_order_kernel(u, even));
    }
  }
}

TEST(Kernel, FixedExponentMustBeIntegral) {
  EXPECT_THROW((KernelConfig{1, 1.5, false}.validate()), ConfigError);
  EXPECT_THROW((KernelConfig{2, 1.0, false}.validate()), ConfigError);
  EXPECT_NO_THROW((KernelConfig{1, 1.5, true}.validate()));
}

TEST(LoConv, SingleNeighborIsPhi) {
  const Tensor f = Tensor::from_rows({{1, -2, 3}});
  auto phi = [](const Tensor& x) { return scale(x, 2.0); };
  EXPECT_EQ(loconv(f, phi), (std::vector<double>{2, -4, 6}));
}

TEST(LoConv, IdenticalNeighborsIgnoreK) {
  for (std::size_t k = 1; k < 8; ++k) {
    Tensor f = Tensor::matrix(k, 3);
    for (std::size_t r = 0; r < k; ++r) {
      f(r, 0) = 0.5;
      f(r, 1) = -1;
      f(r, 2) = 4;
    }
    EXPECT_EQ(loconv(f), (std::vector<double>{0.5, -1, 4}));
  }
}

TEST(LoConv, MatchesNaiveMax) {
  std::mt19937_64 rng(8);
  const Tensor f = random_matrix(rng, 16, 8);
  const auto got = loconv(f);
  for (std::size_t c = 0; c < 8; ++c) {
    double m = -1e300;
    for (std::size_t r = 0; r < 16; ++r) m = std::max(m, f(r, c));
    EXPECT_EQ(got[c], m);
  }
}

TEST(HiConv, NeighborsEqualCenterGiveZero) {
  std::mt19937_64 rng(9);
  const Tensor center = random_matrix(rng, 1, 6);
  Tensor nb = Tensor::matrix(5, 6);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 6; ++c) nb(r, c) = center[c];
  }
  const Tensor w = random_matrix(rng, 5, 6);
  for (double p : {1.0, 2.0, 3.0}) {
    for (double v : hiconv(center.data(), nb, w, KernelConfig{1, p, false})) EXPECT_EQ(v, 0.0);
  }
}

TEST(HiConv, MatchesNaiveLoop) {
  std::mt19937_64 rng(10);
  const Tensor center = random_matrix(rng, 1, 7);
  const Tensor nb = random_matrix(rng, 9, 7);
  const Tensor w = random_matrix(rng, 9, 7);
  const KernelConfig cfg{1, 2.0, false};
  const auto got = hiconv(center.data(), nb, w, cfg);
  for (std::size_t c = 0; c < 7; ++c) {
    double m = -1e300;
    for (std::size_t r = 0; r < 9; ++r) {
      const double u = w(r, c) * (nb(r, c) - center[c]);
      m = std::max(m, (u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0)) * u * u);
    }
    EXPECT_NEAR(got[c], m, 1e-12);
  }
}

TEST(TaylorConvNN, MatchesDirectTranscription) {
  std::mt19937_64 rng(11);
  const PEConfig pe;
  for (int trial = 0; trial < 20; ++trial) {
    const NNNeighborhood h = random_hood(rng, 16, 120);
    const auto got = taylorconv_nn(h, pe);
    const auto want = naive_taylorconv_nn(h, pe);
    for (std::size_t q = 0; q < 120; ++q) ASSERT_NEAR(got[q], want[q], 1e-12);
  }
}

TEST(TaylorConvNN, PaddedChannelsUseUnitWeights) {
  // 5 * 6 = 30 channels leave 12 beyond the 18 geometric entries.
  std::mt19937_64 rng(12);
  const PEConfig pe{5, 30.0};
  NNNeighborhood h = random_hood(rng, 1, 30);
  const auto out = taylorconv_nn(h, pe);
  const auto ep = naive_pe(row_of(h.coords, 0), 5, 30.0);
  const auto ec = naive_pe(row_of(h.colors, 0), 5, 30.0);
  for (std::size_t q = 18; q < 30; ++q) {
    const double f = (ep[q] + ec[q] + h.prior(0, q)) / 3.0;
    EXPECT_NEAR(out[q], 2.0 * f, 1e-12);
  }
}

TEST(TaylorConvNN, OutputBoundedByTwo) {
  std::mt19937_64 rng(13);
  const PEConfig pe;
  for (int trial = 0; trial < 1000; ++trial) {
    NNNeighborhood h = random_hood(rng, 4, 120);
    for (double& v : h.prior.data()) v = std::clamp(v, -1.0, 1.0);
    for (double v : taylorconv_nn(h, pe)) {
      ASSERT_GE(v, -2.0);
      ASSERT_LE(v, 2.0);
    }
  }
}

TEST(TaylorConvNN, PermutationInvariantBitForBit) {
  std::mt19937_64 rng(14);
  const PEConfig pe;
  for (int trial = 0; trial < 1000; ++trial) {
    const NNNeighborhood h = random_hood(rng, 16, 120);
    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    NNNeighborhood p = h;
    p.coords = permute_rows(h.coords, order);
    p.colors = permute_rows(h.colors, order);
    p.prior = permute_rows(h.prior, order);
    ASSERT_EQ(taylorconv_nn(h, pe), taylorconv_nn(p, pe)) << "trial " << trial;
  }
}

TEST(TaylorConvNN, TooFewChannelsRejected) {
  EXPECT_THROW(geometric_bands(17), ConfigError);
  EXPECT_EQ(geometric_bands(120), 6u);
}

namespace {

struct PnFixture {
  ParamStore store;
  Tensor geo;
  KernelConfig cfg;

  PnFixture(std::mt19937_64& rng, std::size_t k, std::size_t c, KernelConfig kernel) : cfg(kernel) {
    store.add("center", ParamGroup::Backbone, kink_free_matrix(rng, 1, c));
    store.add("nb", ParamGroup::Backbone, kink_free_matrix(rng, k, c));
    store.add("phi_w", ParamGroup::Backbone, kink_free_matrix(rng, c, c));
    store.add("phi_b", ParamGroup::Backbone, kink_free_matrix(rng, 1, c));
    store.add("w1", ParamGroup::Backbone, kink_free_matrix(rng, 9, c / 2));
    store.add("b1", ParamGroup::Backbone, kink_free_matrix(rng, 1, c / 2));
    store.add("w2", ParamGroup::Backbone, kink_free_matrix(rng, c / 2, c));
    store.add("b2", ParamGroup::Backbone, kink_free_matrix(rng, 1, c));
    store.add("p", ParamGroup::Backbone, Tensor::scalar(1.4));
    geo = random_matrix(rng, k, 9);
  }

  PnConvWeights bind(TapeParams& p) const {
    PnConvWeights w;
    w.phi_weight = p["phi_w"];
    w.phi_bias = p["phi_b"];
    w.mlp_w1 = p["w1"];
    w.mlp_b1 = p["b1"];
    w.mlp_w2 = p["w2"];
    w.mlp_b2 = p["b2"];
    if (cfg.learnable_p) w.p = p["p"];
    return w;
  }
};

}  // namespace

TEST(TaylorConvPN, ZeroMlpLeavesLoConv) {
  std::mt19937_64 rng(15);
  PnFixture fx(rng, 6, 8, KernelConfig{1, 1.0, false});
  fx.store.get("w2") = Tensor::matrix(4, 8);
  fx.store.get("b2") = Tensor::matrix(1, 8);
  Tape tape;
  TapeParams p(tape, fx.store);
  const Tensor out = taylorconv_pn(p["center"], p["nb"], fx.geo, fx.bind(p), fx.cfg).value();
  const Tensor mapped = relu(add(matmul(fx.store.get("nb"), fx.store.get("phi_w")), fx.store.get("phi_b")));
  const auto lo = loconv(mapped);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out[c], lo[c], 1e-12);
}

TEST(TaylorConvPN, IdentityMapUnitWeightsGivesMaxPlusMaxDelta) {
  std::mt19937_64 rng(16);
  const std::size_t c = 6, k = 5;
  ParamStore store;
  store.add("center", ParamGroup::Backbone, random_matrix(rng, 1, c));
  store.add("nb", ParamGroup::Backbone, random_matrix(rng, k, c));
  store.add("w1", ParamGroup::Backbone, Tensor::matrix(9, 3));
  store.add("b1", ParamGroup::Backbone, Tensor::matrix(1, 3));
  store.add("w2", ParamGroup::Backbone, Tensor::matrix(3, c));
  store.add("b2", ParamGroup::Backbone, Tensor::matrix(1, c, 1.0));
  Tape tape;
  TapeParams p(tape, store);
  PnConvWeights w;
  w.mlp_w1 = p["w1"];
  w.mlp_b1 = p["b1"];
  w.mlp_w2 = p["w2"];
  w.mlp_b2 = p["b2"];
  const Tensor geo = random_matrix(rng, k, 9);
  const Tensor out = taylorconv_pn(p["center"], p["nb"], geo, w, KernelConfig{1, 1.0, false}).value();
  const Tensor& f = store.get("nb");
  const Tensor& ctr = store.get("center");
  for (std::size_t q = 0; q < c; ++q) {
    double mf = -1e300, md = -1e300;
    for (std::size_t j = 0; j < k; ++j) {
      mf = std::max(mf, f(j, q));
      md = std::max(md, f(j, q) - ctr[q]);
    }
    EXPECT_NEAR(out[q], mf + md, 1e-12);
  }
}

TEST(TaylorConvPN, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  for (KernelConfig kernel : {KernelConfig{1, 1.0, true}, KernelConfig{0, 2.0, false},
                              KernelConfig{1, 1.0, false}}) {
    PnFixture fx(rng, 5, 6, kernel);
    auto loss = [&](TapeParams& p) {
      return sum(taylorconv_pn(p["center"], p["nb"], fx.geo, fx.bind(p), fx.cfg));
    };
    EXPECT_LT(max_error(finite_difference_check(fx.store, loss)), 1e-4);
  }
}

TEST(TaylorConvPN, PermutationInvariantBitForBit) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 1000; ++trial) {
    PnFixture fx(rng, 8, 6, KernelConfig{1, 1.0, true});
    std::vector<std::size_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Tensor a, b;
    {
      Tape tape;
      TapeParams p(tape, fx.store);
      a = taylorconv_pn(p["center"], p["nb"], fx.geo, fx.bind(p), fx.cfg).value();
    }
    fx.store.get("nb") = permute_rows(fx.store.get("nb"), order);
    {
      Tape tape;
      TapeParams p(tape, fx.store);
      b = taylorconv_pn(p["center"], p["nb"], permute_rows(fx.geo, order), fx.bind(p), fx.cfg).value();
    }
    ASSERT_EQ(a, b) << "trial " << trial;
  }
}
