// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared test helpers: central finite differences and the catalogue of
// gradient cases used by the unit tests and the acceptance gate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "edrl/edrl.hpp"

namespace edrl::testing {

using Inputs = std::vector<Tensor>;
using ScalarFn = std::function<Tensor(const Inputs&)>;

inline constexpr double kFiniteStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

/// max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-8)
/// over the concatenated gradient of all inputs. Measuring against the whole
/// gradient's scale keeps parameters whose exact gradient is zero (a key
/// bias under softmax, say) from turning rounding noise into a huge ratio.
inline double gradient_error(Inputs inputs, const ScalarFn& f, double step = kFiniteStep) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  f(inputs).backward();
  double diff = 0.0, scale = 1e-8;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      NoGradGuard guard;
      v[i] = keep + step;
      const double up = f(inputs).item();
      v[i] = keep - step;
      const double down = f(inputs).item();
      v[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
  }
  return diff / scale;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

/// Values bounded away from zero, for ops with a kink or pole there.
inline Tensor away_from_zero(const Shape& shape, Rng& rng, double lo = 0.2, double hi = 1.5) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

inline Tensor positive_tensor(const Shape& shape, Rng& rng, double lo = 0.3, double hi = 2.0) {
  return random_tensor(shape, rng, lo, hi);
}

/// Projects an arbitrary result to a scalar with fixed random weights so
/// every output element contributes a distinct cotangent.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t salt = 99) {
  Rng rng(salt);
  return sum(y * random_tensor(y.shape(), rng, 0.5, 1.5));
}

struct GradientCase {
  std::string name;
  std::function<Inputs(Rng&)> make;
  ScalarFn f;
};

/// Appends a module's parameters to the checked inputs. They share storage
/// with the module, so perturbing an input perturbs the module.
template <typename Module>
GradientCase module_case(std::string name, std::function<Module(Rng&)> build,
                         std::function<Inputs(Rng&)> make_data,
                         std::function<Tensor(const Module&, const Inputs&)> apply) {
  auto holder = std::make_shared<Module>();
  auto n_data = std::make_shared<std::size_t>(0);
  GradientCase c;
  c.name = std::move(name);
  c.make = [=](Rng& rng) {
    *holder = build(rng);
    Inputs in = make_data(rng);
    *n_data = in.size();
    ParameterList params;
    holder->collect(params, "m");
    for (auto& p : params) in.push_back(p.tensor);
    return in;
  };
  c.f = [=](const Inputs& in) {
    Inputs data(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(*n_data));
    return apply(*holder, data);
  };
  return c;
}

inline std::vector<GradientCase> gradient_cases() {
  std::vector<GradientCase> cases;
  const auto add = [&](std::string name, std::function<Inputs(Rng&)> make, ScalarFn f) {
    cases.push_back({std::move(name), std::move(make), std::move(f)});
  };
  const auto pair = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return Inputs{random_tensor(a, r), random_tensor(b, r)}; };
  };
  const auto one = [](Shape a) { return [a](Rng& r) { return Inputs{random_tensor(a, r)}; }; };

  // pointwise and broadcasting arithmetic
  add("add", pair({3, 4}, {4}), [](const Inputs& x) { return weighted_sum(x[0] + x[1]); });
  add("sub", pair({2, 3, 2}, {3, 1}), [](const Inputs& x) { return weighted_sum(x[0] - x[1]); });
  add("mul", pair({3, 4}, {3, 4}), [](const Inputs& x) { return weighted_sum(x[0] * x[1]); });
  add("div", [](Rng& r) { return Inputs{random_tensor({3, 3}, r), away_from_zero({3, 3}, r)}; },
      [](const Inputs& x) { return weighted_sum(x[0] / x[1]); });
  add("exp", one({5}), [](const Inputs& x) { return weighted_sum(exp(x[0])); });
  add("log", [](Rng& r) { return Inputs{positive_tensor({5}, r)}; },
      [](const Inputs& x) { return weighted_sum(log(x[0])); });
  add("sqrt", [](Rng& r) { return Inputs{positive_tensor({5}, r)}; },
      [](const Inputs& x) { return weighted_sum(sqrt(x[0])); });
  add("square", one({5}), [](const Inputs& x) { return weighted_sum(square(x[0])); });
  add("negate", one({5}), [](const Inputs& x) { return weighted_sum(-x[0]); });
  add("scale", one({5}), [](const Inputs& x) { return weighted_sum(scale(x[0], -2.5)); });
  add("relu", [](Rng& r) { return Inputs{away_from_zero({6}, r)}; },
      [](const Inputs& x) { return weighted_sum(relu(x[0])); });
  add("gelu", one({6}), [](const Inputs& x) { return weighted_sum(gelu(x[0])); });
  add("clamp_min", [](Rng& r) { return Inputs{away_from_zero({6}, r)}; },
      [](const Inputs& x) { return weighted_sum(clamp_min(x[0], 0.0)); });

  // reductions and normalisations
  add("sum", one({3, 4}), [](const Inputs& x) { return sum(square(x[0])); });
  add("mean", one({3, 4}), [](const Inputs& x) { return mean(square(x[0])); });
  add("sum_axis", one({2, 3, 4}), [](const Inputs& x) { return weighted_sum(sum(x[0], 1)); });
  add("mean_axis", one({2, 3, 4}), [](const Inputs& x) { return weighted_sum(mean(x[0], -1)); });
  add("l2_norm", one({3, 4}), [](const Inputs& x) { return weighted_sum(l2_norm(x[0], 1, 1e-8)); });
  add("softmax", one({3, 4}), [](const Inputs& x) { return weighted_sum(softmax(x[0], 1)); });
  add("log_softmax", one({3, 4}), [](const Inputs& x) { return weighted_sum(log_softmax(x[0], 1)); });
  add("cosine_similarity", pair({5}, {5}), [](const Inputs& x) { return cosine_similarity(x[0], x[1]); });
  add("cosine_rows", pair({3, 4}, {3, 4}), [](const Inputs& x) { return weighted_sum(cosine_rows(x[0], x[1])); });
  add("normalize_rows", one({3, 4}), [](const Inputs& x) { return weighted_sum(normalize_rows(x[0])); });

  // products and layout
  add("matmul", pair({3, 4}, {4, 2}), [](const Inputs& x) { return sum(matmul(x[0], x[1])); });
  add("matmul_batched", pair({2, 3, 4}, {2, 4, 3}), [](const Inputs& x) { return weighted_sum(matmul(x[0], x[1])); });
  add("matmul_shared_rhs", pair({2, 3, 4}, {4, 2}), [](const Inputs& x) { return weighted_sum(matmul(x[0], x[1])); });
  add("reshape", one({2, 6}), [](const Inputs& x) { return weighted_sum(reshape(x[0], {3, 4})); });
  add("permute", one({2, 3, 4}), [](const Inputs& x) { return weighted_sum(permute(x[0], {2, 0, 1})); });
  add("transpose", one({3, 4}), [](const Inputs& x) { return weighted_sum(transpose(x[0])); });
  add("slice", one({3, 5}), [](const Inputs& x) { return weighted_sum(slice(x[0], 1, 1, 3)); });
  add("concat", pair({2, 3}, {2, 2}), [](const Inputs& x) { return weighted_sum(concat({x[0], x[1]}, 1)); });
  add("gather_rows", one({4, 3}), [](const Inputs& x) { return weighted_sum(gather_rows(x[0], {3, 0, 3, 1})); });
  add("broadcast_to", one({1, 3}), [](const Inputs& x) { return weighted_sum(broadcast_to(x[0], {4, 3})); });
  add("pairwise_sq_dist", pair({3, 4}, {2, 4}), [](const Inputs& x) { return weighted_sum(pairwise_sq_dist(x[0], x[1])); });

  // building blocks, checked against their parameters and inputs
  cases.push_back(module_case<Mlp>(
      "mlp", [](Rng& r) { return Mlp({3, 4, 2}, r, Activation::gelu); }, one({2, 3}),
      [](const Mlp& m, const Inputs& x) { return weighted_sum(m.forward(x[0])); }));
  cases.push_back(module_case<AttentionBlock>(
      "attention", [](Rng& r) { return AttentionBlock(4, 2, r); },
      [](Rng& r) { return Inputs{random_tensor({2, 2, 4}, r), random_tensor({2, 3, 4}, r)}; },
      [](const AttentionBlock& a, const Inputs& x) { return weighted_sum(a.forward(x[0], x[1], x[1])); }));
  cases.push_back(module_case<ModalityEncoder>(
      "encoder", [](Rng& r) { return ModalityEncoder(Modality::m1, 3, 4, 2, r); }, one({2, 3, 3}),
      [](const ModalityEncoder& e, const Inputs& x) { return mean(e.forward(x[0])); }));
  cases.push_back(module_case<Realigner>(
      "realign", [](Rng& r) { return Realigner(SplitSpec(5, 2), 4, 2, r); },
      [](Rng& r) {
        return Inputs{random_tensor({2, 3, 2}, r), random_tensor({2, 3, 3}, r), random_tensor({2, 4}, r),
                      random_tensor({2, 4}, r)};
      },
      [](const Realigner& m, const Inputs& x) {
        const auto out = m.forward(x[0], x[1], x[2], x[3]);
        return weighted_sum(out.common) + weighted_sum(out.unique, 7);
      }));

  // essence points and guiding distributions
  cases.push_back(module_case<EssencePointBank>(
      "matching_loss", [](Rng& r) { return EssencePointBank(3, 4, r); },
      [](Rng& r) { return Inputs{random_tensor({4, 4}, r), random_tensor({4, 4}, r)}; },
      [](const EssencePointBank& b, const Inputs& x) { return matching_loss(x[0], x[1], {0, 2, 1, 2}, b); }));
  cases.push_back(module_case<EssencePointBank>(
      "gaussian_head", [](Rng& r) { return EssencePointBank(2, 3, r); }, [](Rng&) { return Inputs{}; },
      [](const EssencePointBank& b, const Inputs&) {
        const auto g = gaussian_head(b, Modality::m2, 1);
        return weighted_sum(g.mean) + weighted_sum(g.variance, 5);
      }));
  add("poe_join",
      [](Rng& r) {
        return Inputs{random_tensor({4}, r), positive_tensor({4}, r), random_tensor({4}, r), positive_tensor({4}, r)};
      },
      [](const Inputs& x) {
        const auto j = poe_join({x[0], x[1]}, {x[2], x[3]});
        return weighted_sum(j.mean) + weighted_sum(j.variance, 5);
      });
  add("sample_guiding", [](Rng& r) { return Inputs{random_tensor({4}, r), positive_tensor({4}, r)}; },
      [](const Inputs& x) {
        Rng fixed(17);
        return weighted_sum(sample_guiding({x[0], x[1]}, fixed));
      });

  // correlation losses through the correlation matrix
  add("correlation_losses", pair({5, 4}, {5, 4}), [](const Inputs& x) {
    const RealignedFeatures r1{slice(x[0], 1, 0, 2), slice(x[0], 1, 2, 2)};
    const RealignedFeatures r2{slice(x[1], 1, 0, 2), slice(x[1], 1, 2, 2)};
    const auto c = correlation_blocks(r1, r2);
    return common_loss(c.common, 0.005) + unique_loss(c.unique, 0.005);
  });
  add("correlation_centered", pair({5, 3}, {5, 3}),
      [](const Inputs& x) { return weighted_sum(correlation_matrix(x[0], x[1], true)); });

  // distillation
  add("mmd", pair({4, 3}, {3, 3}), [](const Inputs& x) { return mmd_loss(x[0], x[1], KernelSpec{{0.5, 1.0, 2.0}}); });
  add("js_divergence", pair({3, 4}, {3, 4}),
      [](const Inputs& x) { return js_divergence(softmax(x[0], 1), softmax(x[1], 1)); });
  add("distillation_student", pair({4, 3}, {4, 2}), [](const Inputs& x) {
    Rng r(5);
    const PipelineView teacher{random_tensor({4, 3}, r), random_tensor({4, 2}, r)};
    const auto d = distillation_losses({teacher, {x[0], x[1]}}, KernelSpec{{1.0, 2.0}});
    return d.features + d.logits;
  });
  add("cross_entropy", one({4, 3}), [](const Inputs& x) { return cross_entropy(x[0], {2, 0, 1, 1}); });
  return cases;
}

struct GradientSuiteResult {
  std::string name;
  double worst = 0.0;
  bool pass = true;
};

inline std::vector<GradientSuiteResult> run_gradient_suite(std::size_t instances = 20) {
  std::vector<GradientSuiteResult> out;
  std::uint64_t salt = 0;
  for (const auto& c : gradient_cases()) {
    GradientSuiteResult r{c.name};
    for (std::size_t k = 0; k < instances; ++k) {
      Rng rng = Rng(2024).substream(salt * 1000 + k);
      const double e = gradient_error(c.make(rng), c.f);
      r.worst = std::max(r.worst, std::isnan(e) ? INFINITY : e);
    }
    r.pass = r.worst <= kGradTolerance;
    out.push_back(r);
    ++salt;
  }
  return out;
}

// Metrics oracle: pair counting for AUC, confusion matrix for F1.
struct Oracle {
  double accuracy = 0;
  double auc = 0;
  double f1 = 0;
};

inline Oracle brute_force(const std::vector<double>& scores, const std::vector<std::size_t>& labels, std::size_t k) {
  const std::size_t n = labels.size();
  std::vector<std::size_t> pred(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 1; c < k; ++c)
      if (scores[i * k + c] > scores[i * k + pred[i]]) pred[i] = c;
  std::vector<std::vector<long>> confusion(k, std::vector<long>(k, 0));
  long correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    confusion[labels[i]][pred[i]]++;
    correct += labels[i] == pred[i];
  }
  Oracle o;
  o.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  double f1 = 0, auc = 0;
  int f1n = 0, aucn = 0;
  for (std::size_t c = 0; c < k; ++c) {
    long tp = confusion[c][c], fn = 0, fp = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == c) continue;
      fn += confusion[c][j];
      fp += confusion[j][c];
    }
    if (tp + fn + fp > 0) {
      f1 += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fn + fp);
      ++f1n;
    }
    double concordant = 0;
    long pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] != c) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (labels[j] == c) continue;
        ++pairs;
        const double a = scores[i * k + c], b = scores[j * k + c];
        concordant += a > b ? 1.0 : a == b ? 0.5 : 0.0;
      }
    }
    if (pairs > 0) {
      auc += concordant / static_cast<double>(pairs);
      ++aucn;
    }
  }
  o.f1 = f1n ? f1 / f1n : 0.0;
  o.auc = aucn ? auc / aucn : std::nan("");
  return o;
}

}  // namespace edrl::testing
