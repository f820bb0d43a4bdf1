// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "edrl/eprl.hpp"
#include "support.hpp"

using namespace edrl;
using edrl::testing::gradient_error;
using edrl::testing::random_tensor;

namespace {

void assign(Tensor& t, const std::vector<double>& v) {
  ASSERT_EQ(v.size(), t.numel());
  std::copy(v.begin(), v.end(), t.mutable_values().begin());
}

void zero_heads(EssencePointBank& bank) {
  ParameterList params;
  for (const auto& h : bank.heads) h.collect(params, "h");
  for (auto p : params) {
    auto v = p.tensor.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
}

long double cosine_ld(const double* a, const double* b, std::size_t d) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t j = 0; j < d; ++j) {
    ab += static_cast<long double>(a[j]) * b[j];
    aa += static_cast<long double>(a[j]) * a[j];
    bb += static_cast<long double>(b[j]) * b[j];
  }
  return ab / (std::max(std::sqrt(aa), 1e-8L) * std::max(std::sqrt(bb), 1e-8L));
}

// Scalar loop over every similarity term of the matching loss.
double matching_oracle(const Tensor& f, Modality m, const std::vector<std::size_t>& labels, const EssencePointBank& bank) {
  const std::size_t d = bank.width(), k = bank.classes(), n = labels.size();
  const auto pts = bank.points.values();
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t own = index(m) * k + labels[i];
    long double pos = 0, neg = 0;
    for (std::size_t r = 0; r < 2 * k; ++r) {
      const long double s = cosine_ld(f.values().data() + i * d, pts.data() + r * d, d);
      if (r == own) pos = s;
      else neg += s;
    }
    total += -(pos - neg / static_cast<long double>(2 * k - 1));
  }
  return static_cast<double>(total / static_cast<long double>(n));
}

GaussianParams gaussian(std::vector<double> mean, std::vector<double> var) {
  const std::size_t d = mean.size();
  return {Tensor({d}, std::move(mean)), Tensor({d}, std::move(var))};
}

}  // namespace

TEST(Bank, ShapeAndUnitNormPoints) {
  Rng rng(1);
  EssencePointBank bank(3, 5, rng);
  EXPECT_EQ(bank.points.shape(), (Shape{2, 3, 5}));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += bank.points.value(r * 5 + j) * bank.points.value(r * 5 + j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Pooled, MeanOverTokens) {
  const Tensor p = pooled_feature(Tensor({1, 2, 2}, {1, 1, 3, 3}));
  EXPECT_EQ(p.value(0), 2.0);
  EXPECT_EQ(p.value(1), 2.0);
  const Tensor c = pooled_feature(Tensor::full({2, 5, 3}, 0.7));
  for (double v : c.values()) EXPECT_NEAR(v, 0.7, 1e-15);
  Rng rng(2);
  const Tensor x = random_tensor({3, 4, 2}, rng);
  const Tensor y = pooled_feature(x);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 2; ++j) {
      long double s = 0;
      for (std::size_t t = 0; t < 4; ++t) s += x.value((b * 4 + t) * 2 + j);
      EXPECT_NEAR(y.value(b * 2 + j), static_cast<double>(s / 4), 1e-15);
    }
}

TEST(Matching, PerfectMatchWithOrthogonalNegatives) {
  Rng rng(3);
  EssencePointBank bank(2, 4, rng);
  // one-hot points: E_M1^0 = e0, E_M1^1 = e1, E_M2^0 = e2, E_M2^1 = e3
  std::vector<double> pts(16, 0.0);
  for (std::size_t r = 0; r < 4; ++r) pts[r * 4 + r] = 1.0;
  assign(bank.points, pts);
  const Tensor f({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  EXPECT_NEAR(matching_loss(f, Modality::m1, {0, 1}, bank).item(), -1.0, 1e-6);
  const Tensor g({1, 4}, {0, 0, 0, 1});
  EXPECT_NEAR(matching_loss(g, Modality::m2, {1}, bank).item(), -1.0, 1e-6);
}

TEST(Matching, DegenerateBankIsZero) {
  Rng rng(4);
  EssencePointBank bank(3, 5, rng);
  const Tensor same = random_tensor({5}, rng);
  std::vector<double> pts;
  for (int r = 0; r < 6; ++r) pts.insert(pts.end(), same.values().begin(), same.values().end());
  assign(bank.points, pts);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = random_tensor({4, 5}, rng);
    EXPECT_NEAR(matching_loss(f, Modality::m1, {0, 1, 2, 1}, bank).item(), 0.0, 1e-9);
  }
}

TEST(Matching, SmallCaseAgainstScalarOracle) {
  Rng rng(5);
  EssencePointBank bank(2, 2, rng);
  assign(bank.points, {1, 0, 0.6, 0.8, -0.28, 0.96, 0, -1});
  const Tensor f({2, 2}, {0.3, -1.2, 2.0, 0.5});
  for (auto m : kAllModalities) {
    EXPECT_NEAR(matching_loss(f, m, {1, 0}, bank).item(), matching_oracle(f, m, {1, 0}, bank), 1e-10);
  }
}

TEST(Matching, RandomCasesAgainstScalarOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    EssencePointBank bank(4, 6, rng);
    const Tensor f = random_tensor({5, 6}, rng, -3, 3);
    std::vector<std::size_t> labels(5);
    for (auto& c : labels) c = rng.uniform_int(4);
    EXPECT_NEAR(matching_loss(f, Modality::m2, labels, bank).item(), matching_oracle(f, Modality::m2, labels, bank), 1e-12);
  }
}

TEST(Matching, BoundedForBothModalities) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    EssencePointBank bank(3, 4, rng);
    std::vector<std::size_t> labels{rng.uniform_int(3), rng.uniform_int(3)};
    const double l = matching_loss(random_tensor({2, 4}, rng, -2, 2), random_tensor({2, 4}, rng, -2, 2), labels, bank).item();
    ASSERT_GE(l, -2.0);
    ASSERT_LE(l, 2.0);
  }
}

TEST(Matching, LabelOutOfRange) {
  Rng rng(8);
  EssencePointBank bank(2, 3, rng);
  EXPECT_THROW(matching_loss(random_tensor({1, 3}, rng), Modality::m1, {2}, bank), std::out_of_range);
}

TEST(Matching, GradientStepRaisesMatchedSimilarity) {
  Rng rng(9);
  EssencePointBank bank(3, 4, rng);
  Tensor f = random_tensor({6, 4}, rng).set_requires_grad(true);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  const auto matched = [&] {
    NoGradGuard g;
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) s += cosine_similarity(slice(reshape(f, {24}), 0, i * 4, 4), bank.point(Modality::m1, labels[i])).item();
    return s / 6;
  };
  const double before = matched();
  matching_loss(f, Modality::m1, labels, bank).backward();
  auto v = f.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 1e-2 * f.grad()[i];
  EXPECT_GT(matched(), before);
}

TEST(Matching, GradientsMatchFiniteDifferences) {
  Rng rng(10);
  EssencePointBank bank(2, 3, rng);
  const double err = gradient_error({random_tensor({3, 3}, rng), bank.points}, [&](const auto& in) {
    return matching_loss(in[0], Modality::m1, {1, 0, 1}, bank);
  });
  EXPECT_LE(err, 1e-4);
}

TEST(InferClass, MatchedPointWins) {
  Rng rng(11);
  EssencePointBank bank(3, 3, rng);
  std::vector<double> pts(18, 0.0);
  for (std::size_t c = 0; c < 3; ++c) pts[c * 3 + c] = 1.0;
  for (std::size_t c = 0; c < 3; ++c) pts[9 + c * 3 + c] = 1.0;
  assign(bank.points, pts);
  EXPECT_EQ(infer_class(Tensor({3}, {0, 1, 0}), Modality::m1, bank).cls, 1u);
  EXPECT_EQ(infer_class(Tensor({3}, {1, 1, 1}), Modality::m1, bank).cls, 0u);
}

TEST(InferClass, BruteForceScanAndScaleInvariance) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    EssencePointBank bank(4, 5, rng);
    const Tensor f = random_tensor({5}, rng);
    std::size_t best = 0;
    long double best_s = -2;
    for (std::size_t c = 0; c < 4; ++c) {
      const long double s = cosine_ld(f.values().data(), bank.point(Modality::m2, c).values().data(), 5);
      if (s > best_s) best_s = s, best = c;
    }
    for (double scale : {0.1, 1.0, 10.0}) EXPECT_EQ(infer_class(f * scale, Modality::m2, bank).cls, best);
  }
}

TEST(Gaussian, ZeroHeadGivesUnitVariance) {
  Rng rng(13);
  EssencePointBank bank(2, 4, rng);
  zero_heads(bank);
  const auto g = gaussian_head(bank, Modality::m1, 1);
  for (double v : g.mean.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.variance.values()) EXPECT_EQ(v, 1.0);
}

TEST(Gaussian, VariancePositiveForRandomHeads) {
  Rng rng(14);
  for (int i = 0; i < 50; ++i) {
    EssencePointBank bank(2, 6, rng);
    for (auto m : kAllModalities)
      for (std::size_t c = 0; c < 2; ++c) {
        const GaussianParams g = gaussian_head(bank, m, c);
        for (double v : g.variance.values()) ASSERT_GT(v, 0.0);
      }
  }
}

TEST(Poe, ClosedFormAnchors) {
  const auto j = poe_join(gaussian({0}, {1}), gaussian({2}, {1}));
  EXPECT_NEAR(j.mean.item(), 1.0, 1e-15);
  EXPECT_NEAR(j.variance.item(), 0.5, 1e-15);
  const auto h = poe_join(gaussian({1.5, -2}, {0.3, 4}), gaussian({1.5, -2}, {0.3, 4}));
  EXPECT_NEAR(h.mean.value(0), 1.5, 1e-15);
  EXPECT_NEAR(h.variance.value(1), 2.0, 1e-15);
  const auto wide = poe_join(gaussian({7}, {1e12}), gaussian({-3}, {0.5}));
  EXPECT_NEAR(wide.mean.item(), -3.0, 1e-6);
  EXPECT_NEAR(wide.variance.item(), 0.5, 1e-6);
}

TEST(Poe, RandomGaussiansMatchFormulas) {
  Rng rng(15);
  for (int i = 0; i < 1000; ++i) {
    const auto a = gaussian({rng.uniform(-5, 5), rng.uniform(-5, 5)}, {rng.uniform(0.01, 10), rng.uniform(0.01, 10)});
    const auto b = gaussian({rng.uniform(-5, 5), rng.uniform(-5, 5)}, {rng.uniform(0.01, 10), rng.uniform(0.01, 10)});
    const auto ab = poe_join(a, b), ba = poe_join(b, a);
    for (std::size_t j = 0; j < 2; ++j) {
      const long double pa = 1.0L / a.variance.value(j), pb = 1.0L / b.variance.value(j);
      const long double var = 1.0L / (pa + pb);
      const long double mu = (pa * a.mean.value(j) + pb * b.mean.value(j)) * var;
      EXPECT_NEAR(ab.mean.value(j), static_cast<double>(mu), 1e-12);
      EXPECT_NEAR(ab.variance.value(j), static_cast<double>(var), 1e-12);
      EXPECT_NEAR(1.0 / ab.variance.value(j), static_cast<double>(pa + pb), 1e-12 * static_cast<double>(pa + pb));
      EXPECT_EQ(ab.mean.value(j), ba.mean.value(j));
      EXPECT_EQ(ab.variance.value(j), ba.variance.value(j));
    }
  }
}

TEST(Poe, RejectsNonPositiveVariance) {
  EXPECT_THROW(poe_join(gaussian({0}, {0}), gaussian({0}, {1})), NumericError);
  EXPECT_THROW(poe_join(gaussian({0, 1}, {1, 1}), gaussian({0}, {1})), ShapeError);
}

TEST(Sampling, DegenerateVarianceReturnsMean) {
  Rng rng(16);
  const auto s = sample_guiding(gaussian({3, -1}, {1e-30, 1e-30}), rng);
  EXPECT_NEAR(s.value(0), 3.0, 1e-10);
  EXPECT_NEAR(s.value(1), -1.0, 1e-10);
}

TEST(Sampling, MonteCarloMoments) {
  Rng rng(17);
  const auto g = gaussian({3}, {4});
  const int n = 100000;
  long double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = sample_guiding(g, rng).item();
    s += x;
    s2 += static_cast<long double>(x) * x;
  }
  const long double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(static_cast<double>(mean), 3.0, 0.05);
  EXPECT_NEAR(static_cast<double>(var), 4.0, 0.2);
}

TEST(Sampling, SameSeedSameSample) {
  const auto g = gaussian({0, 1, 2}, {1, 2, 3});
  Rng a(5), b(5);
  const auto x = sample_guiding(g, a), y = sample_guiding(g, b);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(x.value(j), y.value(j));
  Rng c(5);
  EXPECT_EQ(sample_guiding(g, c, true).value(2), 2.0);
}

TEST(Guiding, IdenticalExpertsHalveCommonVariance) {
  Rng rng(18);
  EssencePointBank bank(1, 1, rng);
  zero_heads(bank);
  // every head: mean 0, variance 1; the joint is N(0, 1/2)
  const int n = 100000;
  std::vector<std::size_t> classes(n, 0);
  const auto g = guiding_for_batch(bank, classes, rng);
  long double s = 0, s2 = 0;
  for (double x : g.com.values()) {
    s += x;
    s2 += static_cast<long double>(x) * x;
  }
  const long double mean = s / n;
  EXPECT_NEAR(static_cast<double>(mean), 0.0, 0.02);
  EXPECT_NEAR(static_cast<double>(s2 / n - mean * mean), 0.5, 0.025);
}

TEST(Guiding, LabelsRouteToClassHeads) {
  Rng rng(19);
  EssencePointBank bank(2, 3, rng);
  const auto g = guiding_for_batch(bank, {0, 1}, rng, true);
  for (auto m : kAllModalities) {
    for (std::size_t c = 0; c < 2; ++c) {
      const auto h = gaussian_head(bank, m, c);
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g.uni[index(m)].value(c * 3 + j), h.mean.value(j));
    }
  }
  EXPECT_EQ(g.com.shape(), (Shape{2, 3}));
}

TEST(Guiding, ReparameterizedSamplesReachHeads) {
  Rng rng(20);
  EssencePointBank bank(2, 3, rng);
  const auto g = guiding_for_batch(bank, {1, 0}, rng);
  sum(g.com + g.uni[0] + g.uni[1]).backward();
  const auto& head = bank.head(Modality::m2, 0).layers().back();
  EXPECT_TRUE(head.bias.has_grad());
  EXPECT_TRUE(bank.points.has_grad());
}

TEST(Guiding, MissingModalityUsesPresentModalityClass) {
  Rng rng(21);
  EssencePointBank bank(2, 3, rng);
  assign(bank.points, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0});
  std::array<std::optional<Tensor>, kModalities> pooled;
  pooled[0] = Tensor({1, 3}, {0.1, 0.9, 0.0});  // nearest E_M1^1
  pooled[1] = Tensor({1, 3}, {0.0, 0.0, 1.0});  // would pick class 0 for M2, but M2 is absent
  const auto classes = select_guiding_classes(pooled, {{true, false}}, bank);
  EXPECT_EQ(classes.front(), 1u);
  EXPECT_EQ(select_guiding_classes(pooled, {{true, true}}, bank).front(), 0u);
  EXPECT_THROW(select_guiding_classes(pooled, {{false, false}}, bank), UnusableInputError);
}
